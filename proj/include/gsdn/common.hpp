#pragma once
#include <atomic>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace gsdn {

// Error classes map one-to-one onto CLI exit codes.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
// Violated op precondition (stride/shape mismatch etc.).
struct ContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Running byte counter for feature matrices and kernel maps. The benchmark
// harness reads the high-water mark to report per-forward peak memory.
class MemGauge {
  public:
    static void add(std::int64_t bytes) {
        auto cur = current_.fetch_add(bytes, std::memory_order_relaxed) + bytes;
        auto peak = peak_.load(std::memory_order_relaxed);
        while (cur > peak && !peak_.compare_exchange_weak(peak, cur, std::memory_order_relaxed)) {
        }
    }
    static void sub(std::int64_t bytes) { current_.fetch_sub(bytes, std::memory_order_relaxed); }
    static std::int64_t current() { return current_.load(std::memory_order_relaxed); }
    static std::int64_t peak() { return peak_.load(std::memory_order_relaxed); }
    static void reset_peak() { peak_.store(current(), std::memory_order_relaxed); }

  private:
    static inline std::atomic<std::int64_t> current_{0};
    static inline std::atomic<std::int64_t> peak_{0};
};

// Dense row-major feature matrix (nnz rows x channel columns). Allocation is
// reported to MemGauge; the tracked byte count travels with the buffer.
template <typename T>
struct FeatMat {
    std::int64_t rows = 0, cols = 0;
    std::vector<T> data;

    FeatMat() = default;
    FeatMat(std::int64_t r, std::int64_t c, T fill = T(0))
        : rows(r), cols(c), data(std::size_t(r) * std::size_t(c), fill) {
        track();
    }
    FeatMat(const FeatMat& o) : rows(o.rows), cols(o.cols), data(o.data) { track(); }
    FeatMat(FeatMat&& o) noexcept
        : rows(o.rows), cols(o.cols), data(std::move(o.data)), tracked_(o.tracked_) {
        o.rows = o.cols = 0;
        o.tracked_ = 0;
    }
    FeatMat& operator=(FeatMat o) noexcept {
        std::swap(rows, o.rows);
        std::swap(cols, o.cols);
        std::swap(data, o.data);
        std::swap(tracked_, o.tracked_);
        return *this;
    }
    ~FeatMat() { MemGauge::sub(tracked_); }

    bool empty() const { return data.empty(); }
    std::size_t size() const { return data.size(); }
    T& at(std::int64_t i, std::int64_t j) { return data[std::size_t(i * cols + j)]; }
    const T& at(std::int64_t i, std::int64_t j) const { return data[std::size_t(i * cols + j)]; }
    T* row(std::int64_t i) { return data.data() + std::size_t(i * cols); }
    const T* row(std::int64_t i) const { return data.data() + std::size_t(i * cols); }

    void add_inplace(const FeatMat& o) {
        for (std::size_t i = 0; i < data.size(); ++i) data[i] += o.data[i];
    }

    bool operator==(const FeatMat& o) const {
        return rows == o.rows && cols == o.cols && data == o.data;
    }

  private:
    std::int64_t tracked_ = 0;

    void track() {
        tracked_ = std::int64_t(data.capacity()) * std::int64_t(sizeof(T));
        MemGauge::add(tracked_);
    }
};

}  // namespace gsdn
