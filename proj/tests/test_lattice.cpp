#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>

#include "gsdn/lattice.hpp"
#include "gsdn/rng.hpp"

using namespace gsdn;

TEST_CASE("coord key packs and unpacks with negatives") {
    Rng rng(3);
    for (int i = 0; i < 2000; ++i) {
        Coord c{int(rng.range(0, 255)), int(rng.range(-30000, 30000)),
                int(rng.range(-30000, 30000)), int(rng.range(-30000, 30000))};
        const Coord back = coord_unkey(coord_key(c));
        CHECK(back == c);
    }
    CHECK(coord_key({0, -1, 0, 0}) != coord_key({0, 0, -1, 0}));
    CHECK(coord_key({1, 0, 0, 0}) != coord_key({0, 0, 0, 0}));
    CHECK_THROWS_AS(check_coord_range({0, 40000, 0, 0}), ContractError);
}

TEST_CASE("coord ordering is lexicographic (b,x,y,z)") {
    CHECK(Coord{0, 0, 0, 1} < Coord{0, 0, 1, 0});
    CHECK(Coord{0, 5, 9, 9} < Coord{1, 0, 0, 0});
    CHECK(!(Coord{0, 1, 2, 3} < Coord{0, 1, 2, 3}));
}

TEST_CASE("floor_div rounds toward minus infinity") {
    CHECK(floor_div(5, 2) == 2);
    CHECK(floor_div(-5, 2) == -3);
    CHECK(floor_div(-4, 2) == -2);
    CHECK(floor_div(-1, 4) == -1);
    CHECK(floor_div(0, 4) == 0);
}

TEST_CASE("quantize merges points in a voxel by averaging features") {
    std::vector<std::array<double, 3>> pts = {
        {0.01, 0.01, 0.01}, {0.04, 0.04, 0.04},  // same voxel at 0.05
        {0.26, 0.01, 0.01},                      // x voxel 5
        {-0.01, 0.0, 0.0},                       // negative side
    };
    FeatMat<float> feats(4, 2);
    feats.at(0, 0) = 2.f;
    feats.at(1, 0) = 4.f;
    feats.at(2, 1) = 7.f;
    feats.at(3, 0) = 1.f;
    QuantizationResult q = quantize(pts, feats, 0.05);
    REQUIRE(q.tensor.nnz() == 3);
    check_lattice(q.tensor);
    // sorted coords: (-1,0,0), (0,0,0), (5,0,0)
    CHECK(q.tensor.coords[0] == Coord{0, -1, 0, 0});
    CHECK(q.tensor.coords[1] == Coord{0, 0, 0, 0});
    CHECK(q.tensor.coords[2] == Coord{0, 5, 0, 0});
    CHECK(q.tensor.feats.at(1, 0) == doctest::Approx(3.0));  // mean of 2 and 4
    CHECK(q.tensor.feats.at(2, 1) == doctest::Approx(7.0));
    REQUIRE(q.point_to_voxel.size() == 4);
    CHECK(q.point_to_voxel[0] == 1);
    CHECK(q.point_to_voxel[1] == 1);
    CHECK(q.point_to_voxel[2] == 2);
    CHECK(q.point_to_voxel[3] == 0);
}

TEST_CASE("quantize respects batch ids") {
    std::vector<std::array<double, 3>> pts = {{0.0, 0.0, 0.0}, {0.0, 0.0, 0.0}};
    FeatMat<float> feats(2, 1, 1.f);
    std::vector<int> batch = {0, 1};
    QuantizationResult q = quantize(pts, feats, 0.05, &batch);
    CHECK(q.tensor.nnz() == 2);
}

TEST_CASE("quantize validates inputs") {
    std::vector<std::array<double, 3>> pts = {{0, 0, 0}};
    FeatMat<float> feats(2, 1, 1.f);
    CHECK_THROWS_AS(quantize(pts, feats, 0.05), ContractError);
    FeatMat<float> ok(1, 1, 1.f);
    CHECK_THROWS_AS(quantize(pts, ok, 0.0), ContractError);
    CHECK_THROWS_AS(quantize(pts, ok, -1.0), ContractError);
}

TEST_CASE("check_lattice rejects duplicates, disorder, and off-lattice coords") {
    SparseTensor<float> t;
    t.stride = 2;
    t.coords = {{0, 0, 0, 0}, {0, 2, 0, 0}};
    t.feats = FeatMat<float>(2, 1, 1.f);
    CHECK_NOTHROW(check_lattice(t));
    t.coords = {{0, 2, 0, 0}, {0, 0, 0, 0}};
    CHECK_THROWS_AS(check_lattice(t), ContractError);
    t.coords = {{0, 0, 0, 0}, {0, 0, 0, 0}};
    CHECK_THROWS_AS(check_lattice(t), ContractError);
    t.coords = {{0, 0, 0, 0}, {0, 1, 0, 0}};  // off the stride-2 lattice
    CHECK_THROWS_AS(check_lattice(t), ContractError);
    t.coords = {{0, 0, 0, 0}};
    CHECK_THROWS_AS(check_lattice(t), ContractError);  // row count mismatch
}

TEST_CASE("tensor_add unions supports and sums overlaps") {
    SparseTensor<float> a, b;
    a.stride = b.stride = 1;
    a.coords = {{0, 0, 0, 0}, {0, 1, 0, 0}};
    a.feats = FeatMat<float>(2, 1);
    a.feats.at(0, 0) = 1.f;
    a.feats.at(1, 0) = 2.f;
    b.coords = {{0, 1, 0, 0}, {0, 2, 0, 0}};
    b.feats = FeatMat<float>(2, 1);
    b.feats.at(0, 0) = 10.f;
    b.feats.at(1, 0) = 20.f;
    std::vector<int> ar, br;
    SparseTensor<float> s = tensor_add(a, b, &ar, &br);
    REQUIRE(s.nnz() == 3);
    check_lattice(s);
    CHECK(s.feats.at(0, 0) == 1.f);
    CHECK(s.feats.at(1, 0) == 12.f);
    CHECK(s.feats.at(2, 0) == 20.f);
    CHECK(ar == std::vector<int>{0, 1});
    CHECK(br == std::vector<int>{1, 2});

    // union with empty keeps the other side
    SparseTensor<float> e;
    e.stride = 1;
    e.feats = FeatMat<float>(0, 1);
    SparseTensor<float> s2 = tensor_add(a, e);
    CHECK(s2.nnz() == 2);
    CHECK(s2.feats.at(1, 0) == 2.f);
}

TEST_CASE("tensor_add rejects mismatched stride or channels") {
    SparseTensor<float> a, b;
    a.stride = 1;
    b.stride = 2;
    a.coords = {{0, 0, 0, 0}};
    b.coords = {{0, 0, 0, 0}};
    a.feats = FeatMat<float>(1, 1, 1.f);
    b.feats = FeatMat<float>(1, 1, 1.f);
    CHECK_THROWS_AS(tensor_add(a, b), ContractError);
    b.stride = 1;
    b.feats = FeatMat<float>(1, 2, 1.f);
    CHECK_THROWS_AS(tensor_add(a, b), ContractError);
}

TEST_CASE("densify/sparsify round-trips random tensors") {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<Coord> coords;
        for (int i = 0; i < 40; ++i)
            coords.push_back({0, int(rng.below(6)), int(rng.below(6)), int(rng.below(6))});
        std::sort(coords.begin(), coords.end());
        coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
        SparseTensor<float> t;
        t.stride = 1;
        t.coords = coords;
        t.feats = FeatMat<float>(std::int64_t(coords.size()), 3);
        for (auto& v : t.feats.data) v = float(rng.gaussian()) + 3.f;  // keep nonzero
        std::vector<float> d = densify(t, {0, 0, 0, 0}, {6, 6, 6});
        SparseTensor<float> back = sparsify(d, 3, Coord{0, 0, 0, 0}, {6, 6, 6}, 1);
        REQUIRE(back.nnz() == t.nnz());
        CHECK(back.coords == t.coords);
        CHECK(back.feats == t.feats);
    }
}

TEST_CASE("split_seed gives distinct deterministic streams") {
    CHECK(split_seed(1, 0) != split_seed(1, 1));
    CHECK(split_seed(1, 0) == split_seed(1, 0));
    CHECK(split_seed(1, 0) != split_seed(2, 0));
    Rng a(split_seed(9, 4)), b(split_seed(9, 4));
    for (int i = 0; i < 10; ++i) CHECK(a.next_u64() == b.next_u64());
}

TEST_CASE("rng uniform stays in range and gaussian has sane moments") {
    Rng rng(5);
    double sum = 0, sum2 = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const double u = rng.uniform();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
        const double g = rng.gaussian();
        sum += g;
        sum2 += g * g;
    }
    CHECK(std::abs(sum / n) < 0.05);
    CHECK(std::abs(sum2 / n - 1.0) < 0.1);
}
