#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <random>

#include "specstream/tensor.hpp"

using namespace specstream;

namespace {

// Naive triple loop, double accumulation, k ascending — the independent
// matmul oracle.
Tensor<double> matmul_naive(const Tensor<double>& a, const Tensor<double>& b) {
    Tensor<double> out({a.rows(), b.cols()});
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < b.cols(); ++j) {
            double acc = 0.0;
            for (std::size_t p = 0; p < a.cols(); ++p) acc += a(i, p) * b(p, j);
            out(i, j) = acc;
        }
    }
    return out;
}

}  // namespace

TEST_CASE("matmul identity and projector") {
    Tensor<double> eye({2, 2}, {1, 0, 0, 1});
    Tensor<double> m({2, 2}, {1, 2, 3, 4});
    auto r = matmul(eye, m);
    CHECK(r.data() == std::vector<double>{1, 2, 3, 4});

    Tensor<double> proj({2, 2}, {1, 0, 0, 0});
    Tensor<double> v({2, 1}, {5, 7});
    auto p = matmul(proj, v);
    CHECK(p.data() == std::vector<double>{5, 0});
}

TEST_CASE("matmul equals naive oracle exactly in 64-bit") {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> dist(-2.0, 2.0);
    for (std::size_t m = 1; m <= 8; ++m) {
        for (std::size_t k = 1; k <= 8; k += 3) {
            for (std::size_t n = 1; n <= 8; n += 2) {
                Tensor<double> a({m, k});
                Tensor<double> b({k, n});
                for (auto& x : a.data()) x = dist(rng);
                for (auto& x : b.data()) x = dist(rng);
                auto got = matmul(a, b);
                auto want = matmul_naive(a, b);
                REQUIRE(got.data() == want.data());
            }
        }
    }
}

TEST_CASE("matmul rejects mismatched shapes") {
    Tensor<double> a({2, 3});
    Tensor<double> b({2, 3});
    CHECK_THROWS_AS(matmul(a, b), ShapeError);
}

TEST_CASE("matmul_nt matches matmul with explicit transpose") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    Tensor<double> a({3, 5});
    Tensor<double> b({4, 5});
    for (auto& x : a.data()) x = dist(rng);
    for (auto& x : b.data()) x = dist(rng);
    Tensor<double> bt({5, 4});
    for (std::size_t i = 0; i < 4; ++i) {
        for (std::size_t j = 0; j < 5; ++j) bt(j, i) = b(i, j);
    }
    auto got = matmul_nt(a, b);
    auto want = matmul_naive(a, bt);
    for (std::size_t i = 0; i < got.size(); ++i) {
        CHECK(got[i] == Catch::Approx(want[i]).margin(1e-14));
    }
}

TEST_CASE("softmax symmetric and single-survivor cases") {
    Tensor<double> scores({1, 2}, {0, 0});
    Tensor<double> mask({1, 2}, {0, 0});
    auto r = softmax_rows(scores, mask);
    CHECK(r(0, 0) == Catch::Approx(0.5));
    CHECK(r(0, 1) == Catch::Approx(0.5));

    Tensor<double> s2({1, 2}, {5, 1});
    Tensor<double> m2({1, 2}, {0, neg_inf<double>()});
    auto r2 = softmax_rows(s2, m2);
    CHECK(r2(0, 0) == 1.0);
    CHECK(r2(0, 1) == 0.0);  // masked entries are exactly zero
}

TEST_CASE("softmax agrees with direct exp/sum oracle") {
    Tensor<double> scores({1, 3}, {1, 2, 3});
    auto r = softmax_rows(scores);
    double denom = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    for (std::size_t j = 0; j < 3; ++j) {
        CHECK(std::abs(r(0, j) - std::exp(1.0 + static_cast<double>(j)) / denom) < 1e-12);
    }
}

TEST_CASE("softmax rows sum to one and are permutation-equivariant") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> dist(-4.0, 4.0);
    Tensor<double> scores({5, 7});
    for (auto& x : scores.data()) x = dist(rng);
    auto r = softmax_rows(scores);
    for (std::size_t i = 0; i < 5; ++i) {
        double sum = 0;
        for (std::size_t j = 0; j < 7; ++j) sum += r(i, j);
        CHECK(std::abs(sum - 1.0) < 1e-6);
    }
    // permute columns, softmax, unpermute: same result
    std::vector<std::size_t> perm{3, 0, 6, 1, 5, 2, 4};
    Tensor<double> scrambled({5, 7});
    for (std::size_t i = 0; i < 5; ++i) {
        for (std::size_t j = 0; j < 7; ++j) scrambled(i, j) = scores(i, perm[j]);
    }
    auto rs = softmax_rows(scrambled);
    for (std::size_t i = 0; i < 5; ++i) {
        for (std::size_t j = 0; j < 7; ++j) {
            CHECK(rs(i, j) == Catch::Approx(r(i, perm[j])).margin(1e-15));
        }
    }
}

TEST_CASE("softmax rejects a fully masked row") {
    Tensor<double> scores({1, 2}, {1, 2});
    Tensor<double> mask({1, 2}, {neg_inf<double>(), neg_inf<double>()});
    CHECK_THROWS_AS(softmax_rows(scores, mask), ParamError);
}

TEST_CASE("layer_norm zero-variance and already-normalized rows") {
    Tensor<double> gain({4}, {1, 1, 1, 1});
    Tensor<double> bias({4}, {0, 0, 0, 0});
    Tensor<double> constant({1, 4}, {3, 3, 3, 3});
    auto r = layer_norm(constant, gain, bias, 1e-5);
    for (std::size_t j = 0; j < 4; ++j) CHECK(std::abs(r(0, j)) < 1e-9);

    Tensor<double> g2({2}, {1, 1});
    Tensor<double> b2({2}, {0, 0});
    Tensor<double> pm({1, 2}, {1, -1});
    auto r2 = layer_norm(pm, g2, b2, 1e-12);
    CHECK(r2(0, 0) == Catch::Approx(1.0).epsilon(1e-6));
    CHECK(r2(0, 1) == Catch::Approx(-1.0).epsilon(1e-6));
}

TEST_CASE("layer_norm moment check on random rows") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> dist(-3.0, 3.0);
    const std::size_t d = 16;
    Tensor<double> x({3, d});
    for (auto& v : x.data()) v = dist(rng);
    Tensor<double> gain({d});
    Tensor<double> bias({d});
    for (auto& v : gain.data()) v = 1.0;
    auto r = layer_norm(x, gain, bias, 1e-10);
    for (std::size_t i = 0; i < 3; ++i) {
        double mean = 0, var = 0;
        for (std::size_t j = 0; j < d; ++j) mean += r(i, j);
        mean /= static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j) var += (r(i, j) - mean) * (r(i, j) - mean);
        var /= static_cast<double>(d);
        CHECK(std::abs(mean) < 1e-9);
        CHECK(std::abs(var - 1.0) < 1e-6);
    }
}

TEST_CASE("topk basics and tie-break by lowest id") {
    Tensor<double> l({3}, {0.1, 0.9, 0.5});
    auto r = topk(l, 1);
    REQUIRE(r.size() == 1);
    CHECK(r[0].first == 1);
    CHECK(r[0].second == 0.9);

    Tensor<double> ties({3}, {2, 2, 1});
    auto r2 = topk(ties, 2);
    CHECK(r2[0].first == 0);
    CHECK(r2[1].first == 1);
}

TEST_CASE("topk equals sort-then-take oracle and is a multiset subset") {
    std::mt19937_64 rng(13);
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    Tensor<double> l({50});
    for (auto& v : l.data()) v = dist(rng);
    auto r = topk(l, 5);

    std::vector<std::pair<int, double>> oracle;
    for (int i = 0; i < 50; ++i) oracle.emplace_back(i, l[static_cast<std::size_t>(i)]);
    std::sort(oracle.begin(), oracle.end(), [](auto a, auto b) {
        return a.second != b.second ? a.second > b.second : a.first < b.first;
    });
    oracle.resize(5);
    CHECK(r == oracle);
    for (const auto& [id, logit] : r) CHECK(l[static_cast<std::size_t>(id)] == logit);
}

TEST_CASE("topk rejects k out of range") {
    Tensor<double> l({3}, {1, 2, 3});
    CHECK_THROWS_AS(topk(l, 0), ParamError);
    CHECK_THROWS_AS(topk(l, 4), ParamError);
}

TEST_CASE("argmax breaks ties toward the lowest id") {
    std::vector<double> v{1.0, 3.0, 3.0, 2.0};
    CHECK(argmax(std::span<const double>(v.data(), v.size())) == 1);
}
