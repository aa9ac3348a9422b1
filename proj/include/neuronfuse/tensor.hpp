#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <vector>

namespace nfuse {

namespace detail {

// Byte accounting for the big buffers (tensor values and masks). The merge
// engine promises a bounded working set; tests read the peak back.
inline std::atomic<int64_t>& tracked_live() {
    static std::atomic<int64_t> v{0};
    return v;
}

inline std::atomic<int64_t>& tracked_peak() {
    static std::atomic<int64_t> v{0};
    return v;
}

inline void track_alloc(int64_t bytes) {
    int64_t live = tracked_live().fetch_add(bytes) + bytes;
    int64_t peak = tracked_peak().load();
    while (live > peak && !tracked_peak().compare_exchange_weak(peak, live)) {}
}

inline void track_free(int64_t bytes) {
    tracked_live().fetch_sub(bytes);
}

template <typename T>
struct TrackingAllocator {
    using value_type = T;

    TrackingAllocator() = default;
    template <typename U>
    TrackingAllocator(const TrackingAllocator<U>&) {}

    T* allocate(size_t n) {
        track_alloc(int64_t(n * sizeof(T)));
        return std::allocator<T>{}.allocate(n);
    }
    void deallocate(T* p, size_t n) {
        track_free(int64_t(n * sizeof(T)));
        std::allocator<T>{}.deallocate(p, n);
    }
    bool operator==(const TrackingAllocator&) const { return true; }
    bool operator!=(const TrackingAllocator&) const { return false; }
};

} // namespace detail

inline int64_t tracked_bytes_live() { return detail::tracked_live().load(); }
inline int64_t tracked_bytes_peak() { return detail::tracked_peak().load(); }
inline void reset_tracked_peak() { detail::tracked_peak().store(detail::tracked_live().load()); }

using FloatBuf = std::vector<float, detail::TrackingAllocator<float>>;
using ByteBuf  = std::vector<uint8_t, detail::TrackingAllocator<uint8_t>>;

// Dense row-major tensor, 1-D or 2-D, always f32 in memory.
struct Tensor {
    std::vector<int64_t> shape;
    FloatBuf data;

    int64_t numel() const {
        int64_t n = 1;
        for (int64_t d : shape) n *= d;
        return shape.empty() ? 0 : n;
    }
    bool is_matrix() const { return shape.size() == 2; }
    int64_t rows() const { return is_matrix() ? shape[0] : numel(); }
    int64_t cols() const { return is_matrix() ? shape[1] : 1; }

    float& at(int64_t r, int64_t c) { return data[size_t(r * cols() + c)]; }
    float at(int64_t r, int64_t c) const { return data[size_t(r * cols() + c)]; }

    static Tensor zeros(std::vector<int64_t> shape) {
        Tensor t;
        t.shape = std::move(shape);
        t.data.assign(size_t(t.numel()), 0.0f);
        return t;
    }
};

} // namespace nfuse
