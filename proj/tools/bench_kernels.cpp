// Compares the OpenMP kernels against the serial reference path and checks
// that both produce bit-identical features. Sizes double per row.

#include <chrono>
#include <cstdio>
#include <cstring>

#include "gsdn/kernel_map.hpp"
#include "gsdn/ops.hpp"
#include "gsdn/rng.hpp"

using namespace gsdn;

namespace {

double ms_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
        .count();
}

SparseTensor<float> random_tensor(std::int64_t n, int channels, int extent, Rng& rng) {
    std::vector<Coord> coords;
    coords.reserve(std::size_t(n) * 2);
    while (std::int64_t(coords.size()) < n * 2)
        coords.push_back({0, int(rng.below(std::uint64_t(extent))),
                          int(rng.below(std::uint64_t(extent))),
                          int(rng.below(std::uint64_t(extent)))});
    std::sort(coords.begin(), coords.end());
    coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
    if (std::int64_t(coords.size()) > n) coords.resize(std::size_t(n));
    SparseTensor<float> t;
    t.coords = std::move(coords);
    t.stride = 1;
    t.feats = FeatMat<float>(std::int64_t(t.coords.size()), channels);
    for (auto& v : t.feats.data) v = float(rng.gaussian());
    return t;
}

FeatMat<float> random_weights(int volume, int c_in, int c_out, Rng& rng) {
    FeatMat<float> w(std::int64_t(volume) * c_in, c_out);
    for (auto& v : w.data) v = float(rng.gaussian() * 0.1);
    return w;
}

bool same(const FeatMat<float>& a, const FeatMat<float>& b) {
    return a.rows == b.rows && a.cols == b.cols &&
           std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(float)) == 0;
}

}  // namespace

int main() {
    Rng rng(7);
    const int c = 16, ks = 3;
    std::printf("%10s %12s %12s %12s %8s\n", "nnz", "kernel", "parallel ms", "serial ms",
                "match");
    bool all_ok = true;
    for (std::int64_t n : {2000, 4000, 8000, 16000, 32000}) {
        const int extent = int(std::cbrt(double(n) * 12.0)) + 2;
        SparseTensor<float> x = random_tensor(n, c, extent, rng);
        FeatMat<float> w = random_weights(27, c, c, rng);

        // submanifold
        auto t0 = std::chrono::steady_clock::now();
        KernelMap sub = kernel_map_submanifold(x.coords, x.stride, ks);
        FeatMat<float> yp = conv_forward(x.feats, w, sub);
        const double par = ms_since(t0);
        t0 = std::chrono::steady_clock::now();
        SparseTensor<float> yr = ref::conv(x, w, ks, 1);
        const double ser = ms_since(t0);
        bool ok = same(yp, yr.feats);
        all_ok &= ok;
        std::printf("%10lld %12s %12.2f %12.2f %8s\n", (long long)x.nnz(), "subm", par, ser,
                    ok ? "yes" : "NO");

        // strided, factor 2
        t0 = std::chrono::steady_clock::now();
        std::vector<Coord> oc = strided_out_coords(x.coords, x.stride);
        KernelMap st = kernel_map_strided(x.coords, oc, x.stride, ks);
        FeatMat<float> sp = conv_forward(x.feats, w, st);
        const double par2 = ms_since(t0);
        t0 = std::chrono::steady_clock::now();
        SparseTensor<float> sr = ref::conv(x, w, ks, 2);
        const double ser2 = ms_since(t0);
        ok = same(sp, sr.feats);
        all_ok &= ok;
        std::printf("%10lld %12s %12.2f %12.2f %8s\n", (long long)x.nnz(), "stride2", par2, ser2,
                    ok ? "yes" : "NO");

        // generative transposed, from stride 2 back to 1
        SparseTensor<float> x2;
        x2.coords = oc;
        x2.stride = 2;
        x2.feats = FeatMat<float>(std::int64_t(oc.size()), c);
        for (auto& v : x2.feats.data) v = float(rng.gaussian());
        t0 = std::chrono::steady_clock::now();
        std::vector<Coord> tc = transposed_out_coords(x2.coords, 1);
        KernelMap tr = kernel_map_transposed(x2.coords, tc, 1);
        FeatMat<float> tp = conv_forward(x2.feats, w, tr);
        const double par3 = ms_since(t0);
        t0 = std::chrono::steady_clock::now();
        SparseTensor<float> trf = ref::conv_transpose(x2, w);
        const double ser3 = ms_since(t0);
        ok = same(tp, trf.feats);
        all_ok &= ok;
        std::printf("%10lld %12s %12.2f %12.2f %8s\n", (long long)x2.nnz(), "transposed", par3,
                    ser3, ok ? "yes" : "NO");
    }
    if (!all_ok) {
        std::printf("MISMATCH between parallel and serial kernels\n");
        return 1;
    }
    return 0;
}
