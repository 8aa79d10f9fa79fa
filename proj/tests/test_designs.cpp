#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "support.hpp"
#include "varcomp/designs.hpp"

using namespace varcomp;

TEST(Designs, BalancedNestedLayout) {
  const NestedLayout l = NestedLayout::balanced(6, 3, 4);
  EXPECT_EQ(l.n_obs(), 72);
  EXPECT_EQ(l.n_plots(), 18);
  const DesignMatrices dm = nested_design(l);
  EXPECT_EQ(dm.names()[0], "block");
  EXPECT_EQ(dm.z(0).cols(), 6);
  EXPECT_EQ(dm.z(1).cols(), 18);
  EXPECT_TRUE((dm.z(0).colwise().sum().array() == 12.0).all());
  EXPECT_TRUE((dm.z(1).colwise().sum().array() == 4.0).all());
  // Plots aggregate into blocks: Z1 = Z2 G with G the plot-to-block map.
  Matrix g = Matrix::Zero(18, 6);
  for (Index p = 0; p < 18; ++p) g(p, p / 3) = 1.0;
  EXPECT_EQ(dm.z(0), dm.z(1) * g);
}

TEST(Designs, BalancedCrossedLayout) {
  const DesignMatrices dm = crossed_design(CrossedLayout::balanced(4, 3, 2));
  EXPECT_EQ(dm.n(), 24);
  EXPECT_EQ(dm.z(0).transpose() * dm.z(1), Matrix::Constant(4, 3, 2.0));
}

TEST(Designs, LayoutValidation) {
  NestedLayout bad = NestedLayout::balanced(2, 2, 2);
  bad.rep_counts[1][0] = 0;
  EXPECT_THROW(nested_design(bad), Error);
  CrossedLayout gap;
  gap.m = 3;
  gap.n = 2;
  gap.pairs = {{0, 0}, {1, 1}, {0, 1}};
  EXPECT_THROW(crossed_design(gap), Error);
  XSpec wrong{Matrix::Ones(3, 1)};
  EXPECT_THROW(nested_design(NestedLayout::balanced(2, 2, 2), wrong), Error);
}

TEST(Designs, UnbalancedNestedRanges) {
  Engine rng = make_stream(1);
  double plots = 0.0, reps = 0.0, nplots = 0.0;
  for (int rep = 0; rep < 200; ++rep) {
    const NestedLayout l = gen_unbalanced_nested(10, 4, 3, rng);
    validate(l);
    for (std::size_t i = 0; i < l.group_sizes.size(); ++i) {
      EXPECT_GE(l.group_sizes[i], 2);
      EXPECT_LE(l.group_sizes[i], 6);
      plots += static_cast<double>(l.group_sizes[i]);
      for (Index r : l.rep_counts[i]) {
        EXPECT_GE(r, 2);
        EXPECT_LE(r, 4);
        reps += static_cast<double>(r);
        nplots += 1.0;
      }
    }
  }
  EXPECT_NEAR(plots / 2000.0, 4.0, 0.1);
  EXPECT_NEAR(reps / nplots, 3.0, 0.05);
}

TEST(Designs, PerBlockReplicationIsConstantWithinBlock) {
  Engine rng = make_stream(2);
  const NestedLayout l = gen_unbalanced_nested(20, 3, 4, rng, ReplicationScheme::PerBlock);
  for (const auto& block : l.rep_counts) EXPECT_EQ(std::set<Index>(block.begin(), block.end()).size(), 1u);
}

TEST(Designs, UnbalancedCrossedCoversEveryLevel) {
  Engine rng = make_stream(3);
  for (double rho : {0.0, 0.5, 0.9}) {
    const CrossedLayout l = gen_unbalanced_crossed(8, 6, rho, 48, rng);
    EXPECT_EQ(l.n_obs(), 48);
    validate(l);
  }
  const CrossedLayout full = gen_unbalanced_crossed(5, 4, 0.3, 20, rng, true);
  EXPECT_EQ(full.pairs, CrossedLayout::balanced(5, 4).pairs);
  EXPECT_THROW(gen_unbalanced_crossed(10, 10, 0.0, 5, rng), Error);
  EXPECT_THROW(gen_unbalanced_crossed(3, 3, 1.0, 9, rng), Error);
}

TEST(DesignsProperty, CopulaCorrelationRaisesLevelAssociation) {
  // With rho near 1 the two level codes move together.
  auto corr = [](const CrossedLayout& l) {
    double ma = 0, mb = 0;
    for (auto [a, b] : l.pairs) {
      ma += static_cast<double>(a);
      mb += static_cast<double>(b);
    }
    const double n = static_cast<double>(l.pairs.size());
    ma /= n;
    mb /= n;
    double sab = 0, saa = 0, sbb = 0;
    for (auto [a, b] : l.pairs) {
      sab += (static_cast<double>(a) - ma) * (static_cast<double>(b) - mb);
      saa += (static_cast<double>(a) - ma) * (static_cast<double>(a) - ma);
      sbb += (static_cast<double>(b) - mb) * (static_cast<double>(b) - mb);
    }
    return sab / std::sqrt(saa * sbb);
  };
  Engine rng = make_stream(4);
  const double low = corr(gen_unbalanced_crossed(10, 10, 0.0, 2000, rng));
  const double high = corr(gen_unbalanced_crossed(10, 10, 0.9, 2000, rng));
  EXPECT_LT(std::abs(low), 0.1);
  EXPECT_GT(high, 0.8);
}

TEST(Designs, GeneratorsAreDeterministicPerStream) {
  Engine a = make_stream(5, {1, 2});
  Engine b = make_stream(5, {1, 2});
  EXPECT_EQ(gen_unbalanced_crossed(6, 6, 0.5, 36, a).pairs, gen_unbalanced_crossed(6, 6, 0.5, 36, b).pairs);
  EXPECT_EQ(gen_unbalanced_nested(6, 3, 3, a).rep_counts, gen_unbalanced_nested(6, 3, 3, b).rep_counts);
}

TEST(Designs, SimulatedResponseMoments) {
  const DesignMatrices dm = nested_design(NestedLayout::balanced(3, 2, 2));
  const DesignCache dc(dm);
  const SimulationConfig cfg{Vector::Constant(1, 4.0), 2.0, Vector{{1.0, 0.5}}};
  const Matrix target = cfg.sigma2 * dm.sigma(cfg.tau);
  const int draws = 40000;
  Engine rng = make_stream(6);
  Vector mean = Vector::Zero(dm.n());
  Matrix acc = Matrix::Zero(dm.n(), dm.n());
  Vector mean_latent = Vector::Zero(dm.n());
  Matrix acc_latent = Matrix::Zero(dm.n(), dm.n());
  for (int i = 0; i < draws; ++i) {
    const Vector y = simulate_response(dc, cfg, rng);
    mean += y;
    acc += (y.array() - 4.0).matrix() * (y.array() - 4.0).matrix().transpose();
    const Vector yl = simulate_response_latent(dm, cfg, rng);
    mean_latent += yl;
    acc_latent += (yl.array() - 4.0).matrix() * (yl.array() - 4.0).matrix().transpose();
  }
  for (Index i = 0; i < dm.n(); ++i) {
    const double se = std::sqrt(target(i, i) / draws);
    EXPECT_NEAR(mean(i) / draws, 4.0, 5.0 * se);
    EXPECT_NEAR(mean_latent(i) / draws, 4.0, 5.0 * se);
    for (Index j = 0; j <= i; ++j) {
      const double cse = std::sqrt((target(i, i) * target(j, j) + target(i, j) * target(i, j)) / draws);
      EXPECT_NEAR(acc(i, j) / draws, target(i, j), 5.0 * cse);
      EXPECT_NEAR(acc_latent(i, j) / draws, target(i, j), 5.0 * cse);
    }
  }
}

TEST(Designs, SimulationRejectsInvalidTau) {
  const DesignMatrices dm = nested_design(NestedLayout::balanced(3, 2, 2));
  Engine rng = make_stream(7);
  EXPECT_THROW(simulate_response(dm, SimulationConfig{Vector::Zero(1), 1.0, Vector{{-5.0, 0.0}}}, rng), Error);
  EXPECT_THROW(simulate_response_latent(dm, SimulationConfig{Vector::Zero(1), 1.0, Vector{{-0.01, 0.0}}}, rng),
               Error);
  EXPECT_THROW(simulate_response(dm, SimulationConfig{Vector::Zero(2), 1.0, Vector{{1.0, 0.0}}}, rng), Error);
}

TEST(Designs, LayoutJsonRoundTrip) {
  Engine rng = make_stream(8);
  const NestedLayout n = gen_unbalanced_nested(4, 3, 3, rng);
  const NestedLayout n2 = nlohmann::json(n).get<NestedLayout>();
  EXPECT_EQ(n.group_sizes, n2.group_sizes);
  EXPECT_EQ(n.rep_counts, n2.rep_counts);
  const CrossedLayout c = gen_unbalanced_crossed(4, 3, 0.4, 20, rng);
  const CrossedLayout c2 = nlohmann::json(c).get<CrossedLayout>();
  EXPECT_EQ(c.pairs, c2.pairs);
  EXPECT_EQ(nlohmann::json(c)["type"], "crossed");
}
