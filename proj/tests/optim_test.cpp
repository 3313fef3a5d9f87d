#include <cmath>
#include <numbers>

#include "gtest/gtest.h"
#include "mp/ops.hpp"
#include "mp/optim.hpp"

namespace mp {
namespace {

// One step of AdamW on loss = theta (g = 1), by hand: m_hat = v_hat = 1, so the
// update is lr / (1 + eps).
TEST(AdamW, FirstStepOnScalarProblem) {
  Value theta = Value::parameter(Tensor::scalar(1.0));
  AdamW opt({theta}, {0.9, 0.999, 1e-8, 0.0});
  backward(sum(theta));
  opt.step(0.1);
  const double hand = 1.0 - 0.1 / (1.0 + 1e-8);
  EXPECT_NEAR(theta.data()[0], hand, 1e-15);
  EXPECT_NEAR(theta.data()[0], 0.9, 1e-9);
  EXPECT_EQ(opt.steps(), 1u);
}

TEST(AdamW, ZeroGradientWithoutDecayLeavesParameters) {
  Value theta = Value::parameter(Tensor::vector({1.0, -2.0, 3.5}));
  AdamW opt({theta}, {0.9, 0.999, 1e-8, 0.0});
  for (int i = 0; i < 5; ++i) {
    opt.zero_grad();
    backward(sum(scale(theta, 0.0)));
    opt.step(0.1);
  }
  EXPECT_EQ(theta.data(), Tensor::vector({1.0, -2.0, 3.5}));
}

TEST(AdamW, DecoupledDecayShrinksGeometrically) {
  Value theta = Value::parameter(Tensor::vector({1.0, -2.0}));
  const double lr = 0.1, wd = 0.05;
  AdamW opt({theta}, {0.9, 0.999, 1e-8, wd});
  Tensor expected = theta.data();
  for (int i = 0; i < 4; ++i) {
    opt.zero_grad();
    backward(sum(scale(theta, 0.0)));
    opt.step(lr);
    for (double& x : expected.storage()) x *= 1.0 - lr * wd;
  }
  EXPECT_LT(max_abs_diff(theta.data(), expected), 1e-15);
}

TEST(AdamW, OnlyRegisteredParametersChange) {
  Value trained = Value::parameter(Tensor::vector({1.0, 2.0}));
  Value other = Value::parameter(Tensor::vector({3.0, 4.0}));
  AdamW opt({trained});
  for (int i = 0; i < 10; ++i) {
    opt.zero_grad();
    backward(sum(mul(trained, other)));
    opt.step(0.05);
  }
  EXPECT_EQ(other.data(), Tensor::vector({3.0, 4.0}));
  EXPECT_NE(trained.data(), Tensor::vector({1.0, 2.0}));
}

TEST(AdamW, Errors) {
  EXPECT_THROW(AdamW({Value::constant(Tensor::scalar(1.0))}), UsageError);
  Value theta = Value::parameter(Tensor::scalar(1.0));
  AdamW opt({theta});
  EXPECT_THROW(opt.step(0.1), UsageError);
}

TEST(AdamW, ConvergesOnQuadratic) {
  Value theta = Value::parameter(Tensor::vector({3.0, -4.0}));
  const Value target = Value::constant(Tensor::vector({0.5, 1.5}));
  AdamW opt({theta}, {0.9, 0.999, 1e-8, 0.0});
  for (int i = 0; i < 2000; ++i) {
    opt.zero_grad();
    const Value diff = sub(theta, target);
    backward(sum(mul(diff, diff)));
    opt.step(0.01);
  }
  EXPECT_LT(max_abs_diff(theta.data(), target.data()), 1e-3);
}

TEST(AdamW, IdenticalRunsAreBitIdentical) {
  auto run = [] {
    Value theta = Value::parameter(Tensor::vector({0.3, -0.7, 1.1}));
    AdamW opt({theta});
    for (int i = 0; i < 50; ++i) {
      opt.zero_grad();
      backward(sum(gelu(mul(theta, theta))));
      opt.step(0.01);
    }
    return theta.data();
  };
  EXPECT_EQ(run(), run());
}

TEST(Schedule, BoundaryValuesAreExact) {
  const Schedule s{10, 100, 1e-3, 1e-6};
  EXPECT_EQ(lr_at(0, s), 0.0);
  EXPECT_EQ(lr_at(10, s), 1e-3);
  EXPECT_EQ(lr_at(100, s), 1e-6);
  EXPECT_DOUBLE_EQ(lr_at(55, s), (1e-3 + 1e-6) / 2);
  EXPECT_DOUBLE_EQ(lr_at(5, s), 0.5e-3);
}

TEST(Schedule, ContinuityBound) {
  for (const Schedule s : {Schedule{10, 100, 1e-3, 1e-6}, Schedule{1, 7, 0.5, 0.0}, Schedule{0, 20, 1.0, 0.1}}) {
    const double bound =
        s.lr_base * std::max(s.warmup_steps ? 1.0 / static_cast<double>(s.warmup_steps) : 0.0,
                             std::numbers::pi / static_cast<double>(s.total_steps - s.warmup_steps));
    for (std::size_t k = 0; k < s.total_steps; ++k) {
      EXPECT_LE(std::abs(lr_at(k + 1, s) - lr_at(k, s)), bound + 1e-15) << k;
    }
  }
}

TEST(Schedule, Errors) {
  EXPECT_THROW(lr_at(101, Schedule{10, 100, 1e-3, 1e-6}), UsageError);
  EXPECT_THROW(lr_at(0, Schedule{100, 100, 1e-3, 1e-6}), ConfigError);
  EXPECT_THROW(lr_at(0, Schedule{0, 10, 1e-6, 1e-3}), ConfigError);
}

TEST(LinearScale, Examples) {
  EXPECT_EQ(linear_scale_lr(1e-3, 256, 256), 1e-3);
  EXPECT_EQ(linear_scale_lr(1e-3, 512, 256), 2e-3);
  EXPECT_DOUBLE_EQ(linear_scale_lr(1e-3, 64, 256), 2.5e-4);
  EXPECT_THROW(linear_scale_lr(1e-3, 64, 0), ConfigError);
}

}  // namespace
}  // namespace mp
