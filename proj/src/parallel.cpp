#include "rtcnn/parallel.hpp"

#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <exception>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace rtcnn {
namespace {

thread_local bool t_in_parallel = false;

std::size_t default_threads() {
    if (const char* env = std::getenv("RTCNN_THREADS")) {
        try {
            const long v = std::stol(env);
            if (v > 0) return static_cast<std::size_t>(v);
        } catch (...) {
        }
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw ? hw : 1;
}

class Pool {
public:
    explicit Pool(std::size_t workers) {
        for (std::size_t i = 0; i < workers; ++i) threads_.emplace_back([this] { loop(); });
    }

    ~Pool() {
        {
            std::lock_guard lock(mu_);
            stop_ = true;
        }
        cv_.notify_all();
        for (auto& t : threads_) t.join();
    }

    std::size_t size() const { return threads_.size() + 1; }

    void run(std::size_t count, const std::function<void(std::size_t)>& body) {
        std::unique_lock lock(mu_);
        body_ = &body;
        count_ = count;
        next_.store(0);
        pending_ = threads_.size();
        error_ = nullptr;
        ++generation_;
        lock.unlock();
        cv_.notify_all();

        work();

        lock.lock();
        done_cv_.wait(lock, [this] { return pending_ == 0; });
        body_ = nullptr;
        if (error_) std::rethrow_exception(error_);
    }

private:
    void loop() {
        std::size_t seen = 0;
        for (;;) {
            std::unique_lock lock(mu_);
            cv_.wait(lock, [&] { return stop_ || generation_ != seen; });
            if (stop_) return;
            seen = generation_;
            lock.unlock();
            work();
            lock.lock();
            if (--pending_ == 0) done_cv_.notify_one();
        }
    }

    void work() {
        t_in_parallel = true;
        for (;;) {
            const std::size_t i = next_.fetch_add(1);
            if (i >= count_) break;
            try {
                (*body_)(i);
            } catch (...) {
                std::lock_guard lock(err_mu_);
                if (!error_) error_ = std::current_exception();
            }
        }
        t_in_parallel = false;
    }

    std::vector<std::thread> threads_;
    std::mutex mu_;
    std::mutex err_mu_;
    std::condition_variable cv_;
    std::condition_variable done_cv_;
    const std::function<void(std::size_t)>* body_ = nullptr;
    std::size_t count_ = 0;
    std::atomic<std::size_t> next_{0};
    std::size_t pending_ = 0;
    std::size_t generation_ = 0;
    bool stop_ = false;
    std::exception_ptr error_;
};

std::mutex g_pool_mu;
std::size_t g_override = 0;
std::unique_ptr<Pool> g_pool;

}  // namespace

std::size_t thread_count() { return g_override ? g_override : default_threads(); }

void set_thread_count(std::size_t n) {
    std::lock_guard lock(g_pool_mu);
    g_override = n;
    g_pool.reset();
}

void parallel_for(std::size_t count, const std::function<void(std::size_t)>& body) {
    if (count == 0) return;
    if (count == 1 || t_in_parallel) {
        for (std::size_t i = 0; i < count; ++i) body(i);
        return;
    }
    // One parallel region at a time; concurrent callers from outside serialize here.
    std::unique_lock lock(g_pool_mu, std::try_to_lock);
    if (!lock.owns_lock() || thread_count() <= 1) {
        if (lock.owns_lock()) lock.unlock();
        for (std::size_t i = 0; i < count; ++i) body(i);
        return;
    }
    if (!g_pool) g_pool = std::make_unique<Pool>(thread_count() - 1);
    g_pool->run(count, body);
}

}  // namespace rtcnn
