#include <doctest.h>

#include <cmath>

#include "clamp/autograd.hpp"
#include "clamp/gradcheck.hpp"

using namespace clamp;
using clamp::gradcheck;
using clamp::random_tensor;

namespace {

// Contracts an output with a fixed random tensor so every element gets a
// distinct upstream gradient.
ag::Var probe(const ag::Var& out) {
    Rng rng(stable_hash(shape_str(out.shape())));
    return ag::sum(ag::mul(out, ag::Var(random_tensor(out.shape(), rng))));
}

constexpr double kTol = 1e-6;

}  // namespace

TEST_CASE("elementwise gradients") {
    Rng rng(1);
    const Tensor a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
    CHECK(gradcheck([](const auto& v) { return probe(ag::add(v[0], v[1])); }, {a, b}) < kTol);
    CHECK(gradcheck([](const auto& v) { return probe(ag::sub(v[0], v[1])); }, {a, b}) < kTol);
    CHECK(gradcheck([](const auto& v) { return probe(ag::mul(v[0], v[1])); }, {a, b}) < kTol);
    CHECK(gradcheck([](const auto& v) { return probe(ag::scale(v[0], -2.5)); }, {a}) < kTol);
    CHECK(gradcheck([](const auto& v) { return probe(ag::mul_scalar(v[0], v[1])); }, {a, Tensor({1}, 0.7)}) < kTol);
    CHECK(gradcheck([](const auto& v) { return probe(ag::quick_gelu(v[0])); }, {a}) < kTol);
    CHECK(gradcheck([](const auto& v) { return probe(ag::relu(v[0])); }, {a}) < kTol);
}

TEST_CASE("matrix gradients") {
    Rng rng(2);
    const Tensor a = random_tensor({3, 5}, rng), b = random_tensor({5, 4}, rng), bt = random_tensor({4, 5}, rng);
    const Tensor at = random_tensor({5, 3}, rng);
    CHECK(gradcheck([](const auto& v) { return probe(ag::matmul(v[0], v[1])); }, {a, b}) < kTol);
    CHECK(gradcheck([](const auto& v) { return probe(ag::matmul(v[0], v[1], false, true)); }, {a, bt}) < kTol);
    CHECK(gradcheck([](const auto& v) { return probe(ag::matmul(v[0], v[1], true, false)); }, {at, b}) < kTol);
    CHECK(gradcheck([](const auto& v) { return probe(ag::linear(v[0], v[1], v[2])); },
                    {a, bt, random_tensor({4}, rng)}) < kTol);
    CHECK(gradcheck([](const auto& v) { return probe(ag::linear(v[0], v[1], ag::Var())); }, {a, bt}) < kTol);
    CHECK(gradcheck([](const auto& v) { return probe(ag::add_row(v[0], v[1])); }, {a, random_tensor({5}, rng)}) < kTol);
    CHECK(gradcheck([](const auto& v) { return probe(ag::transpose(v[0])); }, {a}) < kTol);
    CHECK(gradcheck([](const auto& v) { return probe(ag::softmax_rows(v[0])); }, {a}) < kTol);
    CHECK(gradcheck([](const auto& v) { return probe(ag::layer_norm(v[0], v[1], v[2])); },
                    {a, random_tensor({5}, rng), random_tensor({5}, rng)}) < kTol);
    CHECK(gradcheck([](const auto& v) { return probe(ag::l2_normalize_rows(v[0])); }, {a}) < kTol);
    CHECK(gradcheck([](const auto& v) { return probe(ag::mean_rows(v[0])); }, {a}) < kTol);
    CHECK(gradcheck([](const auto& v) { return ag::mean(v[0]); }, {a}) < kTol);
}

TEST_CASE("slicing and concatenation gradients") {
    Rng rng(3);
    const Tensor a = random_tensor({4, 3}, rng), b = random_tensor({2, 3}, rng), c = random_tensor({4, 2}, rng);
    CHECK(gradcheck([](const auto& v) { return probe(ag::slice_rows(v[0], 1, 2)); }, {a}) < kTol);
    CHECK(gradcheck([](const auto& v) { return probe(ag::slice_cols(v[0], 1, 2)); }, {a}) < kTol);
    CHECK(gradcheck([](const auto& v) {
              std::vector<ag::Var> parts{v[0], v[1]};
              return probe(ag::concat_rows(parts));
          }, {a, b}) < kTol);
    CHECK(gradcheck([](const auto& v) {
              std::vector<ag::Var> parts{v[0], v[1]};
              return probe(ag::concat_cols(parts));
          }, {a, c}) < kTol);
    CHECK(gradcheck([](const auto& v) {
              const std::vector<int> rows{3, 0, 3};
              return probe(ag::gather_rows(v[0], rows));
          }, {a}) < kTol);
    CHECK(gradcheck([](const auto& v) { return probe(ag::reshape(v[0], {2, 6})); }, {a}) < kTol);
}

TEST_CASE("convolution gradients") {
    Rng rng(4);
    const Tensor x = random_tensor({2, 3, 5, 6}, rng);
    const Tensor w = random_tensor({4, 3, 3, 3}, rng), bias = random_tensor({4}, rng);
    CHECK(gradcheck([](const auto& v) { return probe(ag::conv2d(v[0], v[1], v[2], 1, 1)); }, {x, w, bias}) < kTol);
    CHECK(gradcheck([](const auto& v) { return probe(ag::conv2d(v[0], v[1], v[2], 2, 1)); }, {x, w, bias}) < kTol);
    const Tensor wt = random_tensor({3, 2, 4, 4}, rng);
    CHECK(gradcheck([](const auto& v) { return probe(ag::conv_transpose2d(v[0], v[1], v[2], 2, 1)); },
                    {x, wt, random_tensor({2}, rng)}) < kTol);
}

TEST_CASE("conv_transpose2d output size and adjointness") {
    Rng rng(5);
    const Tensor x = random_tensor({1, 2, 3, 4}, rng), w = random_tensor({2, 3, 4, 4}, rng);
    const auto y = ag::conv_transpose2d(ag::Var(x), ag::Var(w), ag::Var(), 2, 1);
    CHECK(y.shape() == Shape{1, 3, 6, 8});
    // <convT(x), z> == <x, conv(z)>; a [Cin, Cout] transposed-conv weight is
    // a conv weight mapping Cout channels back to Cin.
    const Tensor z = random_tensor(y.shape(), rng);
    const auto cz = ag::conv2d(ag::Var(z), ag::Var(w), ag::Var(), 2, 1);
    REQUIRE(cz.shape() == x.shape);
    double lhs = 0, rhs = 0;
    for (std::size_t i = 0; i < z.numel(); ++i) lhs += y.value().data[i] * z.data[i];
    for (std::size_t i = 0; i < x.numel(); ++i) rhs += x.data[i] * cz.value().data[i];
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("map gradients") {
    Rng rng(6);
    const Tensor x = random_tensor({2, 3, 4, 4}, rng), y = random_tensor({2, 2, 4, 4}, rng);
    Tensor rm({3}, 0.0), rv({3}, 1.0);
    CHECK(gradcheck([&](const auto& v) {
              Tensor m = rm, s = rv;
              return probe(ag::batch_norm2d(v[0], v[1], v[2], m, s, true));
          }, {x, random_tensor({3}, rng), random_tensor({3}, rng)}) < kTol);
    CHECK(gradcheck([](const auto& v) { return probe(ag::avg_pool2d(v[0], 2)); }, {x}) < kTol);
    CHECK(gradcheck([](const auto& v) { return probe(ag::upsample_bilinear(v[0], 7, 9)); }, {x}) < kTol);
    CHECK(gradcheck([](const auto& v) { return probe(ag::concat_channels(v[0], v[1])); }, {x, y}) < kTol);
    CHECK(gradcheck([](const auto& v) { return probe(ag::slice_channels(v[0], 1, 2)); }, {x}) < kTol);
    CHECK(gradcheck([](const auto& v) { return probe(ag::slice_batch(v[0], 1)); }, {x}) < kTol);
    CHECK(gradcheck([](const auto& v) { return probe(ag::map_to_tokens(v[0], 1)); }, {x}) < kTol);
    CHECK(gradcheck([](const auto& v) {
              std::vector<ag::Var> items{v[0], v[1]};
              return probe(ag::tokens_to_map(items, 2, 3));
          }, {random_tensor({6, 4}, rng), random_tensor({6, 4}, rng)}) < kTol);
}

TEST_CASE("batch norm updates running statistics") {
    Tensor x({2, 1, 1, 2}, std::vector<double>{1, 2, 3, 4});
    Tensor rm({1}, 0.0), rv({1}, 1.0);
    ag::batch_norm2d(ag::Var(x), ag::Var(Tensor({1}, 1.0)), ag::Var(Tensor({1}, 0.0)), rm, rv, true);
    CHECK(rm[0] == doctest::Approx(0.25));
    // unbiased variance of {1,2,3,4} is 5/3
    CHECK(rv[0] == doctest::Approx(0.9 + 0.1 * 5.0 / 3.0));
}

TEST_CASE("upsample with equal size is the identity") {
    Rng rng(7);
    const Tensor x = random_tensor({1, 2, 3, 5}, rng);
    const auto y = ag::upsample_bilinear(ag::Var(x), 3, 5);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.value().data[i] == x.data[i]);
}

TEST_CASE("sampling and loss gradients") {
    Rng rng(8);
    const Tensor tokens = random_tensor({12, 3}, rng);
    const std::vector<ag::GridPoint> pts{{0.3, 1.7}, {-0.4, 0.2}, {3.9, 2.6}, {2.0, 1.0}};
    const bool keep[] = {true, true, false, true};
    CHECK(gradcheck([&](const auto& v) { return probe(ag::bilinear_gather(v[0], 3, 4, pts, keep)); }, {tokens}) < kTol);

    const Tensor pred = random_tensor({2, 3, 4, 4}, rng), target = random_tensor({2, 3, 4, 4}, rng);
    const std::vector<double> mask{1, 0, 1, 1, 1, 0};
    CHECK(gradcheck([&](const auto& v) { return ag::masked_mse(v[0], target, mask); }, {pred}) < kTol);

    const Tensor m = random_tensor({5, 5}, rng);
    const bool keep5[] = {true, false, true, true, false};
    CHECK(gradcheck([&](const auto& v) { return ag::symmetric_diagonal_ce(v[0], keep5); }, {m}) < kTol);
}

TEST_CASE("l2 normalisation zeroes near-zero rows") {
    Tensor x({2, 3}, std::vector<double>{0, 0, 0, 3, 0, 4});
    const auto y = ag::l2_normalize_rows(ag::Var(x));
    CHECK(y.value().at(0, 0) == 0.0);
    CHECK(y.value().at(1, 0) == doctest::Approx(0.6));
    CHECK(y.value().at(1, 2) == doctest::Approx(0.8));
}

TEST_CASE("no-grad guard records no graph") {
    auto p = ag::Var::parameter(Tensor({2}, 1.0));
    ag::NoGradGuard guard;
    const auto y = ag::scale(p, 2.0);
    CHECK_FALSE(y.requires_grad());
}
