#include "rtcnn/serialize.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

#include "json.hpp"

namespace rtcnn {
namespace {

using nlohmann::json;

constexpr char kMagic[4] = {'R', 'T', 'C', 'W'};
constexpr std::uint8_t kDtypeF32 = 0;
constexpr std::uint8_t kDtypeF64 = 1;

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

class Writer {
public:
    void u8(std::uint8_t v) { buf_.push_back(v); }
    void u16(std::uint16_t v) { le(v); }
    void u32(std::uint32_t v) { le(v); }
    void bytes(const std::string& s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
    void raw(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        buf_.insert(buf_.end(), b, b + n);
    }

    template <typename F>
    void floats(std::span<const F> values) {
        if constexpr (std::endian::native == std::endian::little) {
            raw(values.data(), values.size_bytes());
        } else {
            for (F v : values) {
                using U = std::conditional_t<sizeof(F) == 4, std::uint32_t, std::uint64_t>;
                le(std::bit_cast<U>(v));
            }
        }
    }

    std::vector<std::uint8_t>& buffer() { return buf_; }

private:
    template <typename U>
    void le(U v) {
        for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    std::vector<std::uint8_t> buf_;
};

class Reader {
public:
    Reader(std::span<const std::uint8_t> bytes, std::size_t pos) : bytes_(bytes), pos_(pos) {}

    std::uint8_t u8() { return static_cast<std::uint8_t>(le(1)); }
    std::uint16_t u16() { return static_cast<std::uint16_t>(le(2)); }
    std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }

    std::string str(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }

    template <typename F>
    void floats(F* out, std::size_t count) {
        need(count * sizeof(F));
        if constexpr (std::endian::native == std::endian::little) {
            std::memcpy(out, bytes_.data() + pos_, count * sizeof(F));
            pos_ += count * sizeof(F);
        } else {
            using U = std::conditional_t<sizeof(F) == 4, std::uint32_t, std::uint64_t>;
            for (std::size_t i = 0; i < count; ++i) out[i] = std::bit_cast<F>(static_cast<U>(le(sizeof(F))));
        }
    }

    void skip(std::size_t n) {
        need(n);
        pos_ += n;
    }

    std::size_t pos() const { return pos_; }

private:
    void need(std::size_t n) const {
        if (n > bytes_.size() - pos_) throw FormatError(FormatErrorKind::Truncated, "weight file is truncated");
    }
    std::uint64_t le(std::size_t n) {
        need(n);
        std::uint64_t v = 0;
        for (std::size_t i = 0; i < n; ++i) v |= std::uint64_t(bytes_[pos_ + i]) << (8 * i);
        pos_ += n;
        return v;
    }

    std::span<const std::uint8_t> bytes_;
    std::size_t pos_;
};

const char* padding_name(Padding p) { return p == Padding::Same ? "same" : "valid"; }

Padding padding_from(const std::string& s) {
    if (s == "same") return Padding::Same;
    if (s == "valid") return Padding::Valid;
    throw ConfigError("unknown padding '" + s + "'");
}

template <typename T>
json metadata_json(const BasicModel<T>& m) {
    const ModelMetadata& meta = m.metadata();
    json nodes = json::array();
    for (std::size_t i = 1; i < m.nodes().size(); ++i) {
        const Node& n = m.nodes()[i];
        json j{{"name", n.name}, {"kind", to_string(n.kind)}, {"inputs", n.inputs}};
        switch (n.kind) {
            case NodeKind::Conv:
            case NodeKind::Depthwise:
            case NodeKind::Pointwise:
            case NodeKind::Separable:
                j["conv"] = {{"kernel", n.conv.kernel},     {"in", n.conv.in_channels},
                             {"out", n.conv.out_channels},  {"stride", n.conv.stride},
                             {"padding", padding_name(n.conv.padding)}, {"bias", n.conv.has_bias}};
                break;
            case NodeKind::MaxPool:
                j["pool"] = {{"window", n.pool.window}, {"stride", n.pool.stride}, {"padding", padding_name(n.pool.padding)}};
                break;
            case NodeKind::BatchNorm:
                j["bn"] = {{"epsilon", n.bn_epsilon}, {"momentum", n.bn_momentum}};
                break;
            default:
                break;
        }
        nodes.push_back(std::move(j));
    }
    return json{{"architecture", meta.architecture},
                {"input_shape", {meta.input.n, meta.input.c, meta.input.h, meta.input.w}},
                {"class_names", meta.class_names},
                {"format_version", meta.format_version},
                {"nodes", std::move(nodes)}};
}

template <typename T>
BasicModel<T> model_from_json(const json& j) {
    ModelMetadata meta;
    meta.architecture = j.at("architecture").get<std::string>();
    const auto dims = j.at("input_shape").get<std::vector<std::size_t>>();
    if (dims.size() != 4) throw ConfigError("input_shape must have four entries");
    meta.input = {dims[0], dims[1], dims[2], dims[3]};
    meta.class_names = j.at("class_names").get<std::vector<std::string>>();
    meta.format_version = j.at("format_version").get<std::uint16_t>();

    BasicModel<T> m(meta);
    for (const json& jn : j.at("nodes")) {
        Node n;
        n.name = jn.at("name").get<std::string>();
        n.kind = node_kind_from_string(jn.at("kind").get<std::string>());
        n.inputs = jn.at("inputs").get<std::vector<std::size_t>>();
        if (jn.contains("conv")) {
            const json& c = jn["conv"];
            n.conv = {c.at("kernel").get<std::size_t>(), c.at("in").get<std::size_t>(), c.at("out").get<std::size_t>(),
                      c.at("stride").get<std::size_t>(), padding_from(c.at("padding").get<std::string>()),
                      c.at("bias").get<bool>()};
        }
        if (jn.contains("pool")) {
            const json& p = jn["pool"];
            n.pool = {p.at("window").get<std::size_t>(), p.at("stride").get<std::size_t>(),
                      padding_from(p.at("padding").get<std::string>())};
        }
        if (jn.contains("bn")) {
            n.bn_epsilon = jn["bn"].at("epsilon").get<double>();
            n.bn_momentum = jn["bn"].at("momentum").get<double>();
        }
        m.add_node(n);
    }
    return m;
}

struct RawTensor {
    std::string name;
    Shape shape;
    std::uint8_t dtype = kDtypeF32;
    std::size_t offset = 0;  // payload start
};

struct Parsed {
    json meta;
    std::vector<RawTensor> tensors;
};

/// Walks the body after the magic; throws Truncated when a length runs past `end`.
Parsed parse_body(std::span<const std::uint8_t> bytes, std::size_t end) {
    Reader r(bytes.first(end), 4);
    r.u16();  // version, checked by the caller
    const std::uint32_t meta_len = r.u32();
    Parsed out;
    const std::string meta_text = r.str(meta_len);
    out.meta = json::parse(meta_text, nullptr, false);
    const std::uint32_t count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        RawTensor t;
        t.name = r.str(r.u16());
        const std::uint8_t rank = r.u8();
        if (rank == 0 || rank > 4) throw FormatError(FormatErrorKind::Malformed, "tensor '" + t.name + "' has rank " + std::to_string(rank));
        std::size_t dims[4] = {1, 1, 1, 1};
        for (std::uint8_t d = 0; d < rank; ++d) dims[4 - rank + d] = r.u32();
        t.shape = {dims[0], dims[1], dims[2], dims[3]};
        t.dtype = r.u8();
        std::size_t width = 0;
        if (t.dtype == kDtypeF32) width = 4;
        else if (t.dtype == kDtypeF64) width = 8;
        else throw FormatError(FormatErrorKind::Malformed, "tensor '" + t.name + "' has unknown dtype");
        std::size_t elements = 0;
        try {
            elements = t.shape.size();
        } catch (const ShapeError&) {
            throw FormatError(FormatErrorKind::Malformed, "tensor '" + t.name + "' has an invalid shape");
        }
        t.offset = r.pos();
        if (elements > (end - t.offset) / width) throw FormatError(FormatErrorKind::Truncated, "weight file is truncated");
        r.skip(elements * width);
        out.tensors.push_back(std::move(t));
    }
    if (r.pos() != end) throw FormatError(FormatErrorKind::Malformed, "trailing bytes before checksum");
    return out;
}

template <typename T>
void write_tensor(Writer& w, const std::string& name, const BasicTensor<T>& t) {
    if (name.size() > 0xFFFF) throw ConfigError("tensor name too long");
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.bytes(name);
    w.u8(4);
    for (std::size_t d : t.shape().dims()) {
        if (d > 0xFFFFFFFFu) throw ShapeError("dimension too large for weight file");
        w.u32(static_cast<std::uint32_t>(d));
    }
    w.u8(sizeof(T) == 4 ? kDtypeF32 : kDtypeF64);
    w.floats(t.data());
}

}  // namespace

std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
    uLong crc = ::crc32(0L, Z_NULL, 0);
    std::size_t off = 0;
    while (off < bytes.size()) {
        const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
        crc = ::crc32(crc, bytes.data() + off, chunk);
        off += chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

template <typename T>
std::vector<std::uint8_t> encode_weights(const BasicModel<T>& m) {
    Writer w;
    w.raw(kMagic, 4);
    w.u16(kWeightFormatVersion);
    const std::string meta = metadata_json(m).dump();
    w.u32(static_cast<std::uint32_t>(meta.size()));
    w.bytes(meta);
    w.u32(static_cast<std::uint32_t>(m.params().size() + m.buffers().size()));
    for (const auto& [name, t] : m.params()) write_tensor(w, name, t);
    for (const auto& [name, t] : m.buffers()) write_tensor(w, name, t);
    auto& buf = w.buffer();
    const std::uint32_t crc = crc32(std::span<const std::uint8_t>(buf).subspan(4));
    w.u32(crc);
    return std::move(buf);
}

template <typename T>
BasicModel<T> decode_weights(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 4) throw FormatError(FormatErrorKind::Truncated, "weight file is truncated");
    if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError(FormatErrorKind::BadMagic, "not an RTCW weight file");
    if (bytes.size() < 6) throw FormatError(FormatErrorKind::Truncated, "weight file is truncated");
    const std::uint16_t version = static_cast<std::uint16_t>(bytes[4] | (bytes[5] << 8));
    if (version != kWeightFormatVersion)
        throw FormatError(FormatErrorKind::VersionMismatch,
                          "weight file version " + std::to_string(version) + ", expected " + std::to_string(kWeightFormatVersion));
    if (bytes.size() < 4 + 2 + 4 + 4 + 4) throw FormatError(FormatErrorKind::Truncated, "weight file is truncated");

    const std::size_t end = bytes.size() - 4;
    const std::uint32_t stored = Reader(bytes, end).u32();
    if (crc32(bytes.subspan(4, end - 4)) != stored) {
        // A short file also fails the checksum; report it as truncation when the structure says so.
        try {
            parse_body(bytes, end);
        } catch (const FormatError& e) {
            if (e.kind() == FormatErrorKind::Truncated) throw;
        }
        throw FormatError(FormatErrorKind::CrcMismatch, "weight file checksum mismatch");
    }

    Parsed parsed = parse_body(bytes, end);
    if (parsed.meta.is_discarded()) throw FormatError(FormatErrorKind::Malformed, "metadata is not valid JSON");

    BasicModel<T> m;
    try {
        m = model_from_json<T>(parsed.meta);
    } catch (const json::exception& e) {
        throw FormatError(FormatErrorKind::Malformed, std::string("bad metadata: ") + e.what());
    } catch (const Error& e) {
        throw FormatError(FormatErrorKind::Malformed, std::string("bad model graph: ") + e.what());
    }

    std::set<std::string> seen;
    for (const RawTensor& raw : parsed.tensors) {
        auto* store = m.params().count(raw.name) ? &m.params() : m.buffers().count(raw.name) ? &m.buffers() : nullptr;
        if (!store) throw FormatError(FormatErrorKind::Malformed, "unexpected tensor '" + raw.name + "'");
        BasicTensor<T>& dst = store->at(raw.name);
        if (dst.shape() != raw.shape)
            throw FormatError(FormatErrorKind::Malformed, "tensor '" + raw.name + "' has shape " + raw.shape.str() +
                                                              ", graph expects " + dst.shape().str());
        if (!seen.insert(raw.name).second) throw FormatError(FormatErrorKind::Malformed, "duplicate tensor '" + raw.name + "'");
        Reader r(bytes.first(end), raw.offset);
        if (raw.dtype == kDtypeF32) {
            std::vector<float> tmp(dst.size());
            r.floats(tmp.data(), tmp.size());
            std::copy(tmp.begin(), tmp.end(), dst.ptr());
        } else {
            std::vector<double> tmp(dst.size());
            r.floats(tmp.data(), tmp.size());
            for (std::size_t i = 0; i < tmp.size(); ++i) dst[i] = static_cast<T>(tmp[i]);
        }
    }
    if (seen.size() != m.params().size() + m.buffers().size())
        throw FormatError(FormatErrorKind::Malformed, "weight file is missing tensors");
    return m;
}

template <typename T>
std::size_t save_weights(const BasicModel<T>& m, const std::filesystem::path& path) {
    const auto bytes = encode_weights(m);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing '" + path.string() + "'");
    return bytes.size();
}

template <typename T>
BasicModel<T> load_weights(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_weights<T>(bytes);
}

#define RTCNN_INSTANTIATE(T)                                                            \
    template std::vector<std::uint8_t> encode_weights(const BasicModel<T>&);            \
    template BasicModel<T> decode_weights<T>(std::span<const std::uint8_t>);            \
    template std::size_t save_weights(const BasicModel<T>&, const std::filesystem::path&); \
    template BasicModel<T> load_weights<T>(const std::filesystem::path&);

RTCNN_INSTANTIATE(float)
RTCNN_INSTANTIATE(double)

#undef RTCNN_INSTANTIATE

}  // namespace rtcnn
