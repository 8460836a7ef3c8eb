#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "hattn/backbone.hpp"
#include "hattn/gradcheck.hpp"
#include "oracles.hpp"

using namespace hattn;

TEST_CASE("batch norm: training statistics and running averages") {
  BatchNorm bn(2);
  Rng rng(4);
  std::vector<Tensor> batch{oracle::random_tensor(rng, {2, 3, 3}), oracle::random_tensor(rng, {2, 3, 3})};
  std::vector<Tensor> out = bn.forward(nullptr, batch, true);

  // normalized batch has zero mean and unit variance per channel
  for (std::size_t c = 0; c < 2; ++c) {
    double mean = 0.0, var = 0.0;
    for (const Tensor& t : out) {
      for (std::size_t i = 0; i < 9; ++i) mean += t.values()[c * 9 + i];
    }
    mean /= 18.0;
    for (const Tensor& t : out) {
      for (std::size_t i = 0; i < 9; ++i) {
        double d = t.values()[c * 9 + i] - mean;
        var += d * d;
      }
    }
    var /= 18.0;
    CHECK(mean == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(var == doctest::Approx(1.0).epsilon(1e-6));
    // running averages moved from their initial values by momentum 0.1
    CHECK(bn.running_mean.values()[c] != 0.0);
    CHECK(bn.running_var.values()[c] != 1.0);
  }

  // eval mode uses the running statistics and is per-sample
  Tensor e0 = bn.forward_one(nullptr, batch[0], false);
  Tensor e1 = bn.forward(nullptr, batch, false)[0];
  for (std::size_t i = 0; i < e0.size(); ++i) CHECK(e0.values()[i] == e1.values()[i]);
}

TEST_CASE("batch norm: variance floor engages on constant input") {
  BatchNorm bn(1);
  Tensor flat(Shape{1, 2, 2}, 3.0);
  std::vector<Tensor> out = bn.forward(nullptr, {flat}, true);
  for (double v : out[0].values()) CHECK(v == doctest::Approx(0.0));  // (x - mean) = 0
}

TEST_CASE("batch norm: gradients, including cross-sample coupling") {
  Rng rng(12);
  Tensor other = oracle::random_tensor(rng, {2, 3, 3});
  for (int trial = 0; trial < 5; ++trial) {
    Tensor x = oracle::random_tensor(rng, {2, 3, 3});
    double err = grad_check(
        [&](Tape& t, const Tensor& v) {
          BatchNorm bn(2);
          bn.gamma.set_requires_grad(false);
          bn.beta.set_requires_grad(false);
          std::vector<Tensor> out = bn.forward(&t, {v, other}, true);
          Tensor s = ops::add(&t, ops::mul(&t, out[0], out[0]), out[1]);
          return ops::sum_all(&t, s);
        },
        x, 1e-5);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("channel attention examples") {
  Rng rng(31);
  ForegroundAttentionBlock fab(rng, 4, 2);

  SUBCASE("spatially constant features reduce to plain average pooling") {
    Tensor f(Shape{4, 3, 3});
    for (std::size_t c = 0; c < 4; ++c) {
      for (std::size_t i = 0; i < 9; ++i) f.values()[c * 9 + i] = 0.3 * static_cast<double>(c + 1);
    }
    Tensor got = fab.channel_attention(nullptr, f);
    Tensor avg(Shape{4});
    for (std::size_t c = 0; c < 4; ++c) avg.values()[c] = 0.3 * static_cast<double>(c + 1);
    Tensor expect = fab.excite.forward(nullptr, avg);
    for (std::size_t c = 0; c < 4; ++c) CHECK(got.values()[c] == doctest::Approx(expect.values()[c]).epsilon(1e-12));
  }

  SUBCASE("a saturated score position selects that feature column") {
    ForegroundAttentionBlock probe(rng, 2, 2);
    probe.score_kernel.values()[0] = 1.0;
    probe.score_kernel.values()[1] = 0.0;
    Tensor f(Shape{2, 2, 2});
    f.values()[0 * 4 + 3] = 1e3;  // channel 0 drives the score
    f.values()[1 * 4 + 0] = 0.2;
    f.values()[1 * 4 + 3] = 0.7;
    Tensor got = probe.channel_attention(nullptr, f);
    Tensor column(Shape{2}, std::vector<double>{1e3, 0.7});
    Tensor expect = probe.excite.forward(nullptr, column);
    for (std::size_t c = 0; c < 2; ++c) CHECK(got.values()[c] == doctest::Approx(expect.values()[c]).epsilon(1e-9));
  }

  SUBCASE("random features match the explicit weighted-sum oracle") {
    Tensor f = oracle::random_tensor(rng, {4, 3, 3});
    // oracle: softmax of the score map, then weighted average per channel
    std::vector<double> scores(9, 0.0);
    for (std::size_t i = 0; i < 9; ++i) {
      for (std::size_t c = 0; c < 4; ++c) scores[i] += fab.score_kernel.values()[c] * f.values()[c * 9 + i];
    }
    double m = scores[0];
    for (double s : scores) m = std::max(m, s);
    double z = 0.0;
    for (double& s : scores) {
      s = std::exp(s - m);
      z += s;
    }
    Tensor pooled(Shape{4});
    for (std::size_t c = 0; c < 4; ++c) {
      double acc = 0.0;
      for (std::size_t i = 0; i < 9; ++i) acc += (scores[i] / z) * f.values()[c * 9 + i];
      pooled.values()[c] = acc;
    }
    Tensor expect = fab.excite.forward(nullptr, pooled);
    Tensor got = fab.channel_attention(nullptr, f);
    for (std::size_t c = 0; c < 4; ++c) CHECK(got.values()[c] == doctest::Approx(expect.values()[c]).epsilon(1e-10));
  }

  SUBCASE("channel weights live strictly inside (0,1)") {
    for (int trial = 0; trial < 20; ++trial) {
      Tensor f = oracle::random_tensor(rng, {4, 3, 3}, -5.0, 5.0);
      Tensor w = fab.channel_attention(nullptr, f);
      for (double v : w.values()) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
      }
    }
  }
}

TEST_CASE("position attention examples") {
  Rng rng(77);
  SUBCASE("zero head on zero input gives a zero map") {
    ForegroundAttentionBlock fab(rng, 3, 2);
    std::fill(fab.position_kernel.values().begin(), fab.position_kernel.values().end(), 0.0);
    Tensor f(Shape{3, 2, 2}, 0.0);
    Tensor train_map = fab.position_attention_one(nullptr, f, true);
    for (double v : train_map.values()) CHECK(v == doctest::Approx(0.0));
    Tensor eval_map = fab.position_attention_one(nullptr, f, false);
    for (double v : eval_map.values()) CHECK(v == doctest::Approx(0.0));
  }
  SUBCASE("constant input gives a constant map") {
    ForegroundAttentionBlock fab(rng, 3, 2);
    Tensor f(Shape{3, 2, 2}, 0.8);
    Tensor map = fab.position_attention_one(nullptr, f, false);
    for (double v : map.values()) CHECK(v == doctest::Approx(map.values()[0]));
  }
  SUBCASE("eval map with fresh BN equals the per-pixel dot product") {
    ForegroundAttentionBlock fab(rng, 3, 2);
    Tensor f = oracle::random_tensor(rng, {3, 2, 2});
    Tensor map = fab.position_attention_one(nullptr, f, false);  // running stats: mean 0, var 1
    for (std::size_t i = 0; i < 4; ++i) {
      double dot = 0.0;
      for (std::size_t c = 0; c < 3; ++c) dot += fab.position_kernel.values()[c] * f.values()[c * 4 + i];
      CHECK(map.values()[i] == doctest::Approx(dot).epsilon(1e-9));
    }
  }
}

TEST_CASE("fab forward") {
  Rng rng(55);
  SUBCASE("matches the step-by-step composition oracle") {
    ForegroundAttentionBlock fab(rng, 4, 2);
    Tensor f = oracle::random_tensor(rng, {4, 3, 3});
    auto out = fab.forward(nullptr, {f}, false);

    Tensor weights = fab.channel_attention(nullptr, f);
    Tensor rw = ops::scale_channels(nullptr, f, weights);
    Tensor map = fab.position_attention_one(nullptr, rw, false);
    Tensor expect = ops::add_spatial(nullptr, rw, map);
    REQUIRE(out.features.size() == 1);
    for (std::size_t i = 0; i < expect.size(); ++i) {
      CHECK(out.features[0].values()[i] == doctest::Approx(expect.values()[i]).epsilon(1e-12));
    }
    REQUIRE(out.foreground.size() == 1);
    for (std::size_t i = 0; i < map.size(); ++i) {
      CHECK(out.foreground[0].values()[i] == doctest::Approx(map.values()[i]).epsilon(1e-12));
    }
  }

  SUBCASE("cascade order: channel attention strictly before position attention") {
    ForegroundAttentionBlock fab(rng, 4, 2);
    Tensor f = oracle::random_tensor(rng, {4, 3, 3});
    fab.forward(nullptr, {f}, false);
    const auto& trace = fab.last_trace();
    REQUIRE(trace.size() == 2);
    CHECK(trace[0] == "channel_attention");
    CHECK(trace[1] == "position_attention");
  }

  SUBCASE("residual property: zero position head leaves the reweighted input") {
    ForegroundAttentionBlock fab(rng, 4, 2);
    std::fill(fab.position_kernel.values().begin(), fab.position_kernel.values().end(), 0.0);
    Tensor f = oracle::random_tensor(rng, {4, 3, 3});
    auto out = fab.forward(nullptr, {f}, false);
    Tensor weights = fab.channel_attention(nullptr, f);
    Tensor rw = ops::scale_channels(nullptr, f, weights);
    for (std::size_t i = 0; i < rw.size(); ++i) {
      CHECK(out.features[0].values()[i] == doctest::Approx(rw.values()[i]).epsilon(1e-12));
    }
  }

  SUBCASE("an all-ones foreground map shifts every channel by one") {
    Tensor f = oracle::random_tensor(rng, {4, 3, 3});
    Tensor ones(Shape{1, 3, 3}, 1.0);
    Tensor shifted = ops::add_spatial(nullptr, f, ones);
    for (std::size_t i = 0; i < f.size(); ++i) CHECK(shifted.values()[i] == doctest::Approx(f.values()[i] + 1.0));
  }

  SUBCASE("spatial extents preserved through the block") {
    ForegroundAttentionBlock fab(rng, 4, 2);
    Tensor f = oracle::random_tensor(rng, {4, 5, 7});
    auto out = fab.forward(nullptr, {f}, false);
    CHECK(out.features[0].shape() == f.shape());
    CHECK(out.foreground[0].shape() == Shape{1, 5, 7});
  }

  SUBCASE("channel-only and position-only variants") {
    ForegroundAttentionBlock fab(rng, 4, 2);
    Tensor f = oracle::random_tensor(rng, {4, 3, 3});
    auto c_only = fab.forward(nullptr, {f}, false, true, false);
    CHECK(c_only.foreground.empty());
    Tensor weights = fab.channel_attention(nullptr, f);
    Tensor rw = ops::scale_channels(nullptr, f, weights);
    for (std::size_t i = 0; i < rw.size(); ++i) {
      CHECK(c_only.features[0].values()[i] == doctest::Approx(rw.values()[i]).epsilon(1e-12));
    }
    auto p_only = fab.forward(nullptr, {f}, false, false, true);
    Tensor map = fab.position_attention_one(nullptr, f, false);
    Tensor expect = ops::add_spatial(nullptr, f, map);
    for (std::size_t i = 0; i < expect.size(); ++i) {
      CHECK(p_only.features[0].values()[i] == doctest::Approx(expect.values()[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("fab gradients flow to input") {
  Rng rng(91);
  ForegroundAttentionBlock fab(rng, 3, 2);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor x = oracle::random_tensor(rng, {3, 3, 3});
    double err = grad_check(
        [&](Tape& t, const Tensor& v) {
          auto out = fab.forward(&t, {v}, false);
          return ops::sum_all(&t, ops::mul(&t, out.features[0], out.features[0]));
        },
        x, 1e-5);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("backbone produces 1/8-resolution features") {
  BackboneConfig config;
  config.input_h = 32;
  config.input_w = 64;
  Rng rng(13);
  Backbone bb(rng, config);
  Tensor img(Shape{3, 32, 64}, 0.5);
  std::vector<Tensor> out = bb.forward(nullptr, {img}, false);
  REQUIRE(out.size() == 1);
  CHECK(out[0].shape() == Shape{config.dilated_channels, 4, 8});
}

TEST_CASE("backbone config validation") {
  BackboneConfig config;
  config.input_h = 60;  // not divisible by 8
  CHECK_THROWS_AS(config.validate(), std::invalid_argument);
}
