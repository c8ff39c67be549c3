#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "rtcnn/model.hpp"

namespace rtcnn {

/// Weight file layout, little-endian throughout:
///
///   "RTCW" | u16 version (1) | u32 len + UTF-8 JSON metadata | u32 tensor count
///   | per tensor: u16 len + UTF-8 name, u8 rank, u32 dims[rank], u8 dtype (0 = f32, 1 = f64), payload
///   | u32 CRC-32 of every byte after the magic
///
/// The metadata JSON carries the architecture id, input shape, class names and the node list,
/// so any model (not only the reference builders) can be restored.
inline constexpr std::uint16_t kWeightFormatVersion = 1;

template <typename T>
std::vector<std::uint8_t> encode_weights(const BasicModel<T>& m);

template <typename T>
BasicModel<T> decode_weights(std::span<const std::uint8_t> bytes);

/// Returns the number of bytes written. Throws IoError.
template <typename T>
std::size_t save_weights(const BasicModel<T>& m, const std::filesystem::path& path);

/// Throws IoError or FormatError (BadMagic, VersionMismatch, CrcMismatch, Truncated, Malformed).
template <typename T = float>
BasicModel<T> load_weights(const std::filesystem::path& path);

std::uint32_t crc32(std::span<const std::uint8_t> bytes);

}  // namespace rtcnn
