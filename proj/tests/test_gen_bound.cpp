#include <gtest/gtest.h>

#include <cmath>

#include "emcomm/gen_bound.hpp"
#include "oracles.hpp"

using namespace emcomm;

namespace {

WeightPosterior posterior_of(std::vector<double> mean, std::vector<double> var) {
    WeightPosterior p;
    p.mean = Eigen::Map<Vector>(mean.data(), static_cast<Eigen::Index>(mean.size()));
    p.variance = Eigen::Map<Vector>(var.data(), static_cast<Eigen::Index>(var.size()));
    p.runs = 2;
    return p;
}

GaussianPrior prior_of(std::vector<double> mean, std::vector<double> var) {
    const auto p = posterior_of(std::move(mean), std::move(var));
    return {p.mean, p.variance};
}

TrainConfig tiny_config(std::uint64_t seed) {
    TrainConfig c;
    c.model.encoder_hidden = {8};
    c.model.policy_hidden = {8};
    c.model.decoder_hidden = {8};
    c.iterations = 30;
    c.eval_interval = 30;
    c.seed = seed;
    return c;
}

} // namespace

TEST(FitPosterior, IdenticalRunsGiveFloorVariance) {
    const std::vector<std::vector<double>> runs{{0.5, -1.0, 2.0}, {0.5, -1.0, 2.0}};
    const auto p = fit_weight_posterior(runs);
    EXPECT_EQ(p.mean, (Vector(3) << 0.5, -1.0, 2.0).finished());
    EXPECT_TRUE((p.variance.array() == 1e-8).all());
    EXPECT_EQ(p.runs, 2u);
}

TEST(FitPosterior, TwoPointSpreadUsesPopulationVariance) {
    const auto p = fit_weight_posterior({{-1.0, 3.0}, {1.0, 3.0}});
    EXPECT_DOUBLE_EQ(p.mean[0], 0.0);
    EXPECT_DOUBLE_EQ(p.variance[0], 1.0);
    EXPECT_DOUBLE_EQ(p.variance[1], 1e-8);
}

TEST(FitPosterior, SyntheticGaussianRunsMatchMoments) {
    // Ten runs per trial; the check pools coordinates so the 3-SE bands are
    // evaluated on the fitted moments' own sampling distribution.
    Rng rng(stream_seed(4, "test/posterior"));
    const double mu = 0.7, sd = 1.3;
    const std::size_t m = 10, dims = 2000;
    std::vector<std::vector<double>> runs(m, std::vector<double>(dims));
    for (auto& r : runs) {
        for (auto& w : r) w = mu + sd * rng.normal();
    }
    const auto p = fit_weight_posterior(runs);
    const double mean_of_means = p.mean.mean();
    const double mean_of_vars = p.variance.mean();
    // E[mean] = mu, SD = sd / sqrt(m) per coordinate, averaged over dims
    EXPECT_NEAR(mean_of_means, mu, 3.0 * sd / std::sqrt(double(m * dims)));
    // E[1/m variance] = (m-1)/m sd^2; Var = 2 (m-1) sd^4 / m^2 per coordinate
    const double ev = (m - 1.0) / m * sd * sd;
    const double sv = std::sqrt(2.0 * (m - 1.0)) * sd * sd / m;
    EXPECT_NEAR(mean_of_vars, ev, 3.0 * sv / std::sqrt(double(dims)));
    for (Eigen::Index i = 0; i < 5; ++i) {
        EXPECT_NEAR(p.mean[i], mu, 4.0 * sd / std::sqrt(double(m)));
    }
}

TEST(FitPosterior, Errors) {
    EXPECT_THROW(fit_weight_posterior({{1.0}}), std::invalid_argument);
    EXPECT_THROW(fit_weight_posterior({{1.0}, {1.0, 2.0}}), std::invalid_argument);
    EXPECT_THROW(fit_weight_posterior({{1.0}, {2.0}}, 0.0), std::invalid_argument);

    const auto ds = make_dataset(EnvConfig{}, 20, 1);
    TrainedSystem a, b;
    a.agents = detail::init_agents(tiny_config(1), ds);
    auto other = tiny_config(2);
    other.model.policy_hidden = {4};
    b.agents = detail::init_agents(other, ds);
    EXPECT_THROW(fit_weight_posterior(std::vector<TrainedSystem>{a, b}, 1), std::invalid_argument);
    EXPECT_THROW(fit_weight_posterior(std::vector<TrainedSystem>{a, a}, 3), std::invalid_argument);
    EXPECT_EQ(fit_weight_posterior(std::vector<TrainedSystem>{a, a}, 2).dim(), a.agents[1].flatten_weights().size());
}

TEST(Renyi, ZeroWhenPosteriorEqualsPrior) {
    const auto post = posterior_of({0.3, -2.0}, {0.5, 2.0});
    EXPECT_EQ(renyi_divergence_gauss(2.0, post, prior_of({0.3, -2.0}, {0.5, 2.0})), 0.0);
}

TEST(Renyi, EqualVarianceHandValue) {
    EXPECT_DOUBLE_EQ(renyi_divergence_gauss(2.0, posterior_of({1.0}, {1.0}), prior_of({0.0}, {1.0})), 1.0);
}

TEST(Renyi, MatchesQuadrature) {
    Rng rng(stream_seed(8, "test/renyi"));
    for (int inst = 0; inst < 20; ++inst) {
        std::vector<double> m1(3), v1(3), m2(3), v2(3);
        double quad = 0.0;
        for (int d = 0; d < 3; ++d) {
            m1[d] = rng.normal();
            m2[d] = rng.normal();
            v2[d] = 0.3 + 1.5 * rng.uniform();
            v1[d] = v2[d] * (0.2 + 1.6 * rng.uniform()); // keeps 2 v2 - v1 > 0
            quad += oracle::renyi_quadrature_1d(2.0, m1[d], v1[d], m2[d], v2[d]);
        }
        const double closed = renyi_divergence_gauss(2.0, posterior_of(m1, v1), prior_of(m2, v2));
        EXPECT_NEAR(closed, quad, 1e-6) << "instance " << inst;
    }
}

TEST(Renyi, ApproachesKlAsOrderTendsToOne) {
    Rng rng(stream_seed(9, "test/renyi-kl"));
    for (int inst = 0; inst < 10; ++inst) {
        DiagGaussian p{Vector(3), Vector(3)}, q{Vector(3), Vector(3)};
        std::vector<double> m1(3), v1(3), m2(3), v2(3);
        for (int d = 0; d < 3; ++d) {
            m1[d] = p.mean[d] = rng.normal();
            m2[d] = q.mean[d] = rng.normal();
            v1[d] = 0.3 + rng.uniform();
            v2[d] = 0.3 + rng.uniform();
            p.log_variance[d] = std::log(v1[d]);
            q.log_variance[d] = std::log(v2[d]);
        }
        const double kl = kl_gauss_diag(p, q);
        const double r = renyi_divergence_gauss(1.001, posterior_of(m1, v1), prior_of(m2, v2));
        EXPECT_NEAR(r, kl, 0.01 * kl) << "instance " << inst;
    }
}

TEST(Renyi, DomainErrors) {
    const auto post = posterior_of({0.0, 0.0}, {1.0, 5.0});
    const auto prior = prior_of({0.0, 0.0}, {1.0, 2.0});
    try {
        renyi_divergence_gauss(3.0, post, prior);
        FAIL();
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("coordinate 1"), std::string::npos);
    }
    for (double t : {1.0, 0.5, -2.0, std::nan("")}) {
        try {
            renyi_divergence_gauss(t, post, prior);
            FAIL() << t;
        } catch (const std::invalid_argument& e) {
            EXPECT_STREQ(e.what(), "t must exceed 1");
        }
    }
    EXPECT_THROW(renyi_divergence_gauss(2.0, posterior_of({0.0}, {1.0}), prior), std::invalid_argument);
}

TEST(Sigma, RangeMode) {
    const auto s = estimate_sigma(0.0, std::log(4.0));
    EXPECT_DOUBLE_EQ(s.sigma, std::log(4.0) / 2.0);
    EXPECT_NEAR(s.sigma, 0.6931, 1e-4);
    EXPECT_FALSE(s.heuristic);
    EXPECT_THROW(estimate_sigma(1.0, 1.0), std::invalid_argument);
    EXPECT_THROW(estimate_sigma(2.0, 1.0), std::invalid_argument);
}

TEST(Sigma, SampleMode) {
    const std::vector<double> constant(50, 0.7);
    try {
        estimate_sigma(constant);
        FAIL();
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("degenerate σ"), std::string::npos);
    }
    EXPECT_THROW(estimate_sigma(std::vector<double>(29, 1.0)), std::invalid_argument);

    Rng rng(stream_seed(2, "test/sigma"));
    std::vector<double> x(100000);
    for (auto& v : x) v = rng.normal();
    const auto s = estimate_sigma(x);
    EXPECT_NEAR(s.sigma, 1.0, 0.02);
    EXPECT_TRUE(s.heuristic);
    EXPECT_EQ(s.mode, SigmaMode::sample);
}

TEST(BoundValue, HandAnchors) {
    const auto b0 = bound_terms(0.0, 1.0, 100, 2.0, 0.05);
    EXPECT_NEAR(b0.m_k, 0.04, 1e-15);
    EXPECT_DOUBLE_EQ(b0.d_k, 1.0);
    EXPECT_NEAR(b0.bound, std::sqrt(0.8), 1e-12);
    EXPECT_NEAR(b0.bound, 0.8944, 1e-4);
    const auto b1 = bound_terms(1.0, 1.0, 100, 2.0, 0.05);
    EXPECT_NEAR(b1.d_k, std::exp(0.5), 1e-12);
    EXPECT_NEAR(b1.bound, std::sqrt(std::exp(0.5) * 0.8), 1e-12);
    EXPECT_NEAR(b1.bound, 1.1485, 1e-4);
}

TEST(BoundValue, QuadruplingNHalves) {
    for (double t : {1.5, 2.0, 3.0, 7.0}) {
        for (std::size_t n : {10u, 100u, 3000u}) {
            const double b = bound_value(0.3, 0.8, n, t, 0.05);
            EXPECT_DOUBLE_EQ(bound_value(0.3, 0.8, 4 * n, t, 0.05), b / 2.0) << "t=" << t << " n=" << n;
        }
    }
}

TEST(BoundValue, MonotoneOnGrids) {
    for (double t : {1.5, 2.0, 4.0}) {
        double prev = 1e300;
        for (std::size_t n = 1; n <= 4096; n *= 2) {
            const double b = bound_value(0.5, 1.0, n, t, 0.05);
            EXPECT_LE(b, prev);
            prev = b;
        }
        prev = 0.0;
        for (double d = 0.0; d <= 20.0; d += 0.5) {
            const double b = bound_value(d, 1.0, 100, t, 0.05);
            EXPECT_GE(b, prev);
            prev = b;
        }
        prev = 0.0;
        for (double s = 0.05; s <= 5.0; s += 0.05) {
            const double b = bound_value(0.5, s, 100, t, 0.05);
            EXPECT_GE(b, prev);
            prev = b;
        }
    }
}

TEST(BoundValue, DomainAndOverflow) {
    EXPECT_THROW(bound_value(0.0, 1.0, 0, 2.0, 0.05), std::invalid_argument);
    EXPECT_THROW(bound_value(0.0, 1.0, 10, 1.0, 0.05), std::invalid_argument);
    EXPECT_THROW(bound_value(0.0, 1.0, 10, 2.0, 1.0), std::invalid_argument);
    EXPECT_THROW(bound_value(0.0, 0.0, 10, 2.0, 0.05), std::invalid_argument);
    EXPECT_THROW(bound_value(-0.1, 1.0, 10, 2.0, 0.05), std::invalid_argument);
    const auto huge = bound_terms(2e4, 1.0, 100, 2.0, 0.05);
    EXPECT_TRUE(std::isinf(huge.bound));
    EXPECT_TRUE(std::isfinite(huge.log_bound));
    EXPECT_NEAR(huge.log_bound, 0.5 * (1e4 + std::log(0.04) - std::log(0.05)), 1e-9);
}

TEST(BoundValue, PosteriorEqualsPriorLimit) {
    const auto post = posterior_of({0.0, 0.0, 0.0}, {0.15, 0.15, 0.15});
    const double d = renyi_divergence_gauss(2.0, post, GaussianPrior::isotropic(3, 0.15));
    EXPECT_EQ(d, 0.0);
    const auto b = bound_terms(d, 0.7, 500, 2.0, 0.05);
    EXPECT_DOUBLE_EQ(b.bound, std::sqrt(b.m_k / 0.05));
}

TEST(MeasureGap, IdenticalSetsAndSingleRun) {
    const auto ds = make_dataset(EnvConfig{}, 200, 4);
    TrainedSystem sys;
    sys.config = tiny_config(3);
    sys.agents = detail::init_agents(sys.config, ds);
    EXPECT_EQ(measure_gap({sys}, ds, ds, 2), 0.0);

    const auto other = make_dataset(EnvConfig{}, 150, 5);
    const double expected = std::abs(evaluate(sys, other)[1].mean_loss - evaluate(sys, ds)[1].mean_loss);
    EXPECT_DOUBLE_EQ(measure_gap({sys}, ds, other, 2), expected);
    EXPECT_THROW(measure_gap({}, ds, ds, 1), std::invalid_argument);
    EXPECT_THROW(measure_gap({sys}, ds, ds, 3), std::invalid_argument);
}

TEST(MeasureGap, UntrainedSystemsHaveNoSystematicGap) {
    // Signed held-out minus train loss on fresh, independently drawn sets.
    std::vector<double> diffs;
    for (std::uint64_t r = 0; r < 10; ++r) {
        const auto train = make_dataset(EnvConfig{}, 1500, 100 + r);
        const auto held = make_dataset(EnvConfig{}, 1500, 200 + r);
        TrainedSystem sys;
        sys.config = tiny_config(r);
        sys.agents = detail::init_agents(sys.config, train);
        diffs.push_back(evaluate(sys, held)[1].mean_loss - evaluate(sys, train)[1].mean_loss);
        EXPECT_DOUBLE_EQ(measure_gap({sys}, train, held, 2), std::abs(diffs.back()));
    }
    double mean = 0.0;
    for (double d : diffs) mean += d;
    mean /= 10.0;
    double var = 0.0;
    for (double d : diffs) var += (d - mean) * (d - mean);
    const double se = std::sqrt(var / 9.0 / 10.0);
    EXPECT_NEAR(mean, 0.0, 3.0 * se);
}

TEST(BoundReport, SelfConsistentAndSerializable) {
    const auto parts = training_split(make_dataset(EnvConfig{}, 400, 6), 0.25);
    std::vector<TrainedSystem> runs;
    for (std::uint64_t s = 1; s <= 3; ++s) runs.push_back(train_joint(tiny_config(s), parts.train, parts.heldout).system);

    BoundSettings settings;
    const auto r = bound_report(runs, parts.train, parts.heldout, 2, settings);
    EXPECT_NO_THROW(check_report_consistency(r));
    EXPECT_EQ(r.n, parts.train.n);
    EXPECT_EQ(r.runs, 3u);
    EXPECT_DOUBLE_EQ(r.sigma, std::log(4.0) / 2.0);
    EXPECT_EQ(r.sigma_mode, "range");
    EXPECT_GE(r.d_t, 0.0);
    EXPECT_EQ(r.holds, r.bound >= r.measured_gap);
    EXPECT_DOUBLE_EQ(r.prior_variance, default_prior_variance(runs[0].agents[1]));
    EXPECT_DOUBLE_EQ(r.measured_gap, measure_gap(runs, parts.train, parts.heldout, 2));

    auto broken = r;
    broken.bound = r.bound * 0.5 + 1.0;
    EXPECT_THROW(check_report_consistency(broken), std::logic_error);

    const auto j = to_json(r);
    EXPECT_EQ(j["schema_version"], 1);
    EXPECT_EQ(j["agent_id"], 2);
    EXPECT_TRUE(j.contains("population_loss"));
    if (!std::isfinite(r.bound)) {
        EXPECT_EQ(j["bound"], "inf");
    }

    settings.sigma_mode = SigmaMode::sample;
    const auto rs = bound_report(runs, parts.train, parts.heldout, 2, settings);
    EXPECT_TRUE(rs.sigma_heuristic);
    EXPECT_EQ(rs.sigma_mode, "sample");
    settings.sigma_mode = SigmaMode::range;
    settings.t = 1.0;
    EXPECT_THROW(bound_report(runs, parts.train, parts.heldout, 2, settings), std::invalid_argument);
}

TEST(BoundReport, DefaultPriorCoversUntrainedEnsembles) {
    // Untrained ensembles satisfy the order-2 validity condition under the
    // default prior; a tighter prior can violate it.
    const auto ds = make_dataset(EnvConfig{}, 100, 7);
    std::vector<TrainedSystem> runs;
    for (std::uint64_t s = 0; s < 2; ++s) {
        TrainedSystem sys;
        sys.config = TrainConfig{};
        sys.config.seed = s;
        sys.agents = detail::init_agents(sys.config, ds);
        runs.push_back(sys);
    }
    for (std::size_t k = 1; k <= 2; ++k) {
        const auto post = fit_weight_posterior(runs, k);
        const double v = default_prior_variance(runs[0].agents[k - 1]);
        EXPECT_LE(post.variance.maxCoeff(), 2.0 * v);
        EXPECT_NO_THROW(renyi_divergence_gauss(2.0, post, GaussianPrior::isotropic(post.dim(), v)));
    }
    EXPECT_THROW(renyi_divergence_gauss(2.0, fit_weight_posterior(runs, 2), GaussianPrior::isotropic(
                                                                                 fit_weight_posterior(runs, 2).dim(), 1e-4)),
                 std::invalid_argument);
}

TEST(JsonNumber, NonFiniteAsStrings) {
    EXPECT_EQ(json_number(1.5), 1.5);
    EXPECT_EQ(json_number(std::numeric_limits<double>::infinity()), "inf");
    EXPECT_EQ(json_number(-std::numeric_limits<double>::infinity()), "-inf");
    EXPECT_EQ(json_number(std::nan("")), "nan");
}
