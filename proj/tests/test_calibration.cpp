// Copyright 2026 The MultiFlow Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <random>

#include <gtest/gtest.h>
#include <json.hpp>

#include "multiflow/calibration.hpp"
#include "test_support.hpp"

using namespace multiflow;
using testing_support::TempDir;

namespace {

PrunableModel model_with(std::initializer_list<std::pair<std::string, Shape>> shapes, const nlohmann::json& layers) {
    TensorMap tm;
    for (const auto& [name, shape] : shapes)
        tm.insert(DenseTensor::from_f32(name, shape, std::vector<float>(shape_numel(shape), 0.0f)));
    return load_model_spec({{"modalities", {"x"}}, {"layers", layers}}, tm);
}

PrunableModel one_layer(std::size_t out, std::size_t in) {
    return model_with({{"l", {out, in}}}, {{{"name", "l"}, {"modality", "x"}}});
}

void feed(NormAccumulator& acc, std::string_view layer, std::size_t rows, std::size_t cols, std::vector<float> v) {
    acc.accumulate(layer, MatrixView<const float>(std::span<const float>(v), rows, cols));
}

}  // namespace

TEST(Accumulator, ZeroInit) {
    const auto acc = new_accumulator(one_layer(4, 3));
    EXPECT_EQ(acc.layer("l").sumsq, (std::vector<double>{0, 0, 0}));
    EXPECT_EQ(acc.layer("l").tokens, 0u);
    EXPECT_EQ(new_accumulator(PrunableModel{}).layer_count(), 0u);
}

TEST(Accumulator, FinalizeWithoutTokensFails) {
    EXPECT_THROW(new_accumulator(one_layer(4, 3)).finalize(), ValidationError);
    EXPECT_THROW(new_accumulator(PrunableModel{}).finalize(), ValidationError);
}

TEST(Accumulator, SingleToken) {
    auto acc = new_accumulator(one_layer(1, 2));
    feed(acc, "l", 1, 2, {3, 4});
    EXPECT_EQ(acc.layer("l").sumsq, (std::vector<double>{9, 16}));
    const auto stats = acc.finalize();
    EXPECT_EQ(stats.in_norm.at("l"), (std::vector<float>{3, 4}));
    EXPECT_EQ(stats.token_count, 1u);
}

TEST(Accumulator, OrderIndependentTwoBatches) {
    auto a = new_accumulator(one_layer(1, 2)), b = new_accumulator(one_layer(1, 2));
    feed(a, "l", 1, 2, {1, 0});
    feed(a, "l", 1, 2, {0, 1});
    feed(b, "l", 1, 2, {0, 1});
    feed(b, "l", 1, 2, {1, 0});
    EXPECT_EQ(a.layer("l").sumsq, (std::vector<double>{1, 1}));
    EXPECT_EQ(a.layer("l").sumsq, b.layer("l").sumsq);
}

TEST(Accumulator, HandSumOfSquares) {
    auto acc = new_accumulator(one_layer(1, 2));
    feed(acc, "l", 2, 2, {1, 1, 2, 2});
    EXPECT_EQ(acc.layer("l").sumsq, (std::vector<double>{5, 5}));
    const auto stats = acc.finalize();
    EXPECT_EQ(stats.in_norm.at("l"), (std::vector<float>{std::sqrt(5.0f), std::sqrt(5.0f)}));
    EXPECT_EQ(stats.token_count, 2u);
}

TEST(Accumulator, DeadInputsAllowed) {
    auto acc = new_accumulator(one_layer(1, 2));
    feed(acc, "l", 1, 2, {0, 0});
    EXPECT_EQ(acc.finalize().in_norm.at("l"), (std::vector<float>{0, 0}));
}

TEST(Accumulator, Errors) {
    auto acc = new_accumulator(one_layer(1, 2));
    EXPECT_THROW(feed(acc, "l", 1, 3, {1, 2, 3}), ValidationError);
    EXPECT_THROW(feed(acc, "l", 1, 2, {1, NAN}), ValidationError);
    EXPECT_THROW(feed(acc, "l", 1, 2, {1, INFINITY}), ValidationError);
    EXPECT_THROW(feed(acc, "nope", 1, 2, {1, 2}), ValidationError);
}

TEST(Accumulator, PermutationAndRegroupingInvariance) {
    std::mt19937_64 rng(1);
    const std::size_t tokens = 600, width = 16;
    const auto data = testing_support::random_vector(rng, tokens * width, -3, 3);
    auto ref = new_accumulator(one_layer(1, width));
    feed(ref, "l", tokens, width, data);
    const auto ref_norms = ref.finalize().in_norm.at("l");

    for (int trial = 0; trial < 10; ++trial) {
        std::vector<std::size_t> perm(tokens);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        auto acc = new_accumulator(one_layer(1, width));
        std::size_t t = 0;
        while (t < tokens) {
            const std::size_t n = std::min<std::size_t>(tokens - t, 1 + rng() % 50);
            std::vector<float> batch;
            for (std::size_t i = 0; i < n; ++i)
                batch.insert(batch.end(), data.begin() + perm[t + i] * width, data.begin() + (perm[t + i] + 1) * width);
            feed(acc, "l", n, width, batch);
            t += n;
        }
        const auto norms = acc.finalize().in_norm.at("l");
        for (std::size_t i = 0; i < width; ++i) EXPECT_NEAR(norms[i], ref_norms[i], 1e-6 * ref_norms[i]);
    }
}

TEST(Accumulator, AdditivityIsExact) {
    std::mt19937_64 rng(2);
    const auto a = testing_support::random_vector(rng, 40 * 8, -1, 1);
    const auto b = testing_support::random_vector(rng, 30 * 8, -1, 1);
    auto joint = new_accumulator(one_layer(1, 8));
    std::vector<float> ab = a;
    ab.insert(ab.end(), b.begin(), b.end());
    feed(joint, "l", 70, 8, ab);
    auto seq = new_accumulator(one_layer(1, 8));
    feed(seq, "l", 40, 8, a);
    feed(seq, "l", 30, 8, b);
    EXPECT_EQ(joint, seq);
}

TEST(Accumulator, ShardMergeEqualsSingleStream) {
    std::mt19937_64 rng(3);
    auto single = new_accumulator(one_layer(1, 8));
    auto s1 = new_accumulator(one_layer(1, 8)), s2 = new_accumulator(one_layer(1, 8));
    for (int b = 0; b < 20; ++b) {
        const auto batch = testing_support::random_vector(rng, 4 * 8, -2, 2);
        feed(single, "l", 4, 8, batch);
        feed(b < 10 ? s1 : s2, "l", 4, 8, batch);
    }
    s1.merge(s2);
    EXPECT_EQ(s1.finalize(), single.finalize());
}

TEST(Accumulator, Scaling) {
    std::mt19937_64 rng(4);
    const auto v = testing_support::random_vector(rng, 50 * 4, -1, 1);
    auto a = new_accumulator(one_layer(1, 4)), b = new_accumulator(one_layer(1, 4));
    feed(a, "l", 50, 4, v);
    auto scaled = v;
    for (auto& x : scaled) x *= 3.0f;
    feed(b, "l", 50, 4, scaled);
    const auto na = a.finalize().in_norm.at("l"), nb = b.finalize().in_norm.at("l");
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(nb[i], 3.0f * na[i], 1e-6 * nb[i]);
}

TEST(Accumulator, TiedLayersPoolStatistics) {
    const auto model = model_with({{"enc.q", {2, 2}}, {"dec.q", {2, 2}}},
                                  {{{"name", "enc.q"}, {"modality", "x"}, {"tie_group", "q"}},
                                   {{"name", "dec.q"}, {"modality", "x"}, {"tie_group", "q"}}});
    auto acc = new_accumulator(model);
    feed(acc, "enc.q", 1, 2, {3, 0});
    feed(acc, "dec.q", 1, 2, {0, 4});
    acc.pool_tied(model);
    const auto stats = acc.finalize();
    EXPECT_EQ(stats.in_norm.at("enc.q"), (std::vector<float>{3, 4}));
    EXPECT_EQ(stats.in_norm.at("dec.q"), (std::vector<float>{3, 4}));
}

TEST(StatsFile, RoundTrip) {
    TempDir dir;
    ActivationStats s{{{"a", {1, 2, 3}}, {"b", {0, 0.5f}}}, 42, "abc"};
    write_stats(s, dir / "s");
    EXPECT_EQ(read_stats(dir / "s"), s);
    const auto tm = read_container(dir / "s");
    EXPECT_TRUE(tm.contains("a.in_norm"));
    EXPECT_EQ(tm.metadata.at("token_count"), "42");
    EXPECT_EQ(tm.metadata.at("source_digest"), "abc");
}

TEST(StatsFile, ZeroTokenCountIsReadError) {
    TempDir dir;
    TensorMap tm;
    tm.insert(DenseTensor::from_f32("a.in_norm", {2}, {1, 2}));
    tm.metadata["token_count"] = "0";
    tm.metadata["source_digest"] = "";
    write_container(tm, dir / "s");
    EXPECT_THROW(read_stats(dir / "s"), FormatError);
    tm.metadata["token_count"] = "x";
    write_container(tm, dir / "s");
    EXPECT_THROW(read_stats(dir / "s"), FormatError);
}

TEST(StatsFile, ValidationAgainstModel) {
    const auto model = model_with({{"a", {2, 3}}, {"b", {2, 2}}},
                                  {{{"name", "a"}, {"modality", "x"}}, {{"name", "b"}, {"modality", "x"}}});
    EXPECT_NO_THROW(validate_stats({{{"a", {1, 2, 3}}, {"b", {1, 2}}}, 1, ""}, model));
    EXPECT_THROW(validate_stats({{{"a", {1, 2, 3}}}, 1, ""}, model), ValidationError);
    try {
        validate_stats({{{"a", {1, 2}}, {"b", {1, 2}}}, 1, ""}, model);
        FAIL();
    } catch (const ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("norm-length mismatch"), std::string::npos);
    }
}

TEST(Digest, StableHex) {
    EXPECT_EQ(digest_hex(""), "cbf29ce484222325");
    EXPECT_EQ(digest_hex("a"), digest_hex("a"));
    EXPECT_NE(digest_hex("a"), digest_hex("b"));
}
