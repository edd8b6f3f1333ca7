#include "doctest.h"
#include "gradcheck.hpp"
#include "oracles.hpp"

#include "sigma/error.hpp"
#include "sigma/models.hpp"

#include <cmath>
#include <cstdlib>
#include <filesystem>

using namespace sigma;
using namespace sigma::models;
using numerics::Rng;

namespace {

ArchitectureConfig arch(Variant v, int depth = 3) {
  ArchitectureConfig c;
  c.variant = v;
  c.truncation = depth;
  return c;
}

pathsim::LabeledDataset fbm_data(std::uint64_t seed, int n, int count) {
  pathsim::DatasetSpec spec;
  spec.n = n;
  spec.count = count;
  spec.labels = {{"H", pathsim::SamplingRule::parse("uniform:0.1,0.9")}};
  return pathsim::generate_dataset(seed, spec);
}

std::vector<const Mat*> inputs_of(const pathsim::LabeledDataset& d) {
  std::vector<const Mat*> out;
  for (const auto& p : d.paths) out.push_back(&p.values);
  return out;
}

constexpr Variant kAll[] = {Variant::sigma,         Variant::sigsa,         Variant::deepsignet,
                            Variant::transformer,   Variant::sigma_no_conv, Variant::sigma_no_mlp,
                            Variant::sigma_no_conv_no_mlp};

}  // namespace

TEST_SUITE("models") {
  TEST_CASE("variant names round trip") {
    for (auto v : kAll) CHECK(parse_variant(to_string(v)) == v);
    CHECK_THROWS_AS(parse_variant("cnn"), ConfigError);
  }

  TEST_CASE("parameter counts do not depend on the input length") {
    for (auto v : kAll) {
      const auto base = param_count(build_model(arch(v), 100, 1));
      for (int n : {500, 1000, 1500}) CHECK(param_count(build_model(arch(v), n, 1)) == base);
    }
  }

  TEST_CASE("parameter counts of the published layouts") {
    CHECK(param_count(build_model(arch(Variant::sigma), 100, 1)) == 87226);
    CHECK(param_count(build_model(arch(Variant::sigma_no_mlp), 100, 1)) == 73328);
    CHECK(param_count(build_model(arch(Variant::sigma_no_conv), 100, 1)) == 5647);
    CHECK(param_count(build_model(arch(Variant::sigma_no_conv_no_mlp), 100, 1)) == 491);
    CHECK(param_count(build_model(arch(Variant::deepsignet), 100, 1)) == 9261);
    CHECK(param_count(build_model(arch(Variant::sigma, 1), 100, 1)) == 4726);
    CHECK(param_count(build_model(arch(Variant::deepsignet, 1), 100, 1)) == 4461);
    CHECK(param_count(build_model(arch(Variant::sigsa, 3), 100, 1)) == 603);
    CHECK(param_count(build_model(arch(Variant::sigsa, 1), 100, 1)) == 15);
    CHECK(param_count(build_model(arch(Variant::sigma_no_conv_no_mlp), 100, 1)) <
          param_count(build_model(arch(Variant::sigma), 100, 1)));
  }

  TEST_CASE("explicit head width") {
    auto c = arch(Variant::sigma);
    c.head_dim = 64;
    const auto m = build_model(c, 100, 1);
    // 3 heads x 3 projections x (level width x 64) + W_O (192 x 155) + bias
    const std::size_t heads = 3 * 64 * (5 + 25 + 125);
    const std::size_t out = 192 * 155 + 155;
    CHECK(param_count(m) == 12 + heads + out + 9952 + 4224 + 33);
  }

  TEST_CASE("smaller lifting strides never reduce the count") {
    std::size_t prev = 0;
    for (int stride : {49, 7, 1}) {
      auto c = arch(Variant::sigma);
      c.lift_stride = stride;
      const auto count = param_count(build_model(c, 100, 1));
      CHECK(count >= prev);
      prev = count;
    }
    auto fine = arch(Variant::sigma);
    fine.lift_stride = 1;
    CHECK(param_count(build_model(fine, 100, 1)) > 87226);
    for (int s : {14, 2}) {
      auto c = arch(Variant::sigma);
      c.lift_stride = s;
      auto half = c;
      half.lift_stride = s / 2;
      CHECK(param_count(build_model(half, 100, 1)) >= param_count(build_model(c, 100, 1)));
    }
  }

  TEST_CASE("configuration errors name the constraint") {
    auto heads = arch(Variant::sigma);
    heads.heads = 2;
    CHECK_THROWS_WITH_AS(build_model(heads, 100, 1), doctest::Contains("heads == truncation"), ConfigError);
    CHECK_THROWS_AS(build_model(arch(Variant::sigma), 101, 1), ConfigError);  // odd conv length
    auto stride = arch(Variant::sigma);
    stride.lift_stride = 5;
    CHECK_THROWS_AS(build_model(stride, 100, 1), ConfigError);
    auto ranges = arch(Variant::sigma);
    ranges.ranges = {{0.0, 1.0}, {0.0, 2.0}};
    CHECK_THROWS_AS(build_model(ranges, 100, 1), ConfigError);
    CHECK_THROWS_AS(build_model(arch(Variant::sigma, 0), 100, 1), ConfigError);
    auto sigsa = arch(Variant::sigsa);
    sigsa.heads = 2;
    CHECK_THROWS_AS(build_model(sigsa, 100, 1), ConfigError);
  }

  TEST_CASE("output scaling") {
    const Vec half = Vec::Constant(1, 0.5);
    CHECK(scale_outputs(half, {{0.0, 5.0}})(0) == 2.5);
    const Vec raw = (Vec(2) << 0.2, 0.8).finished();
    const Vec theta = scale_outputs(raw, {{0.0, 5.0}, {0.0, 0.5}});
    CHECK(theta(0) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(theta(1) == doctest::Approx(0.4).epsilon(1e-15));
    CHECK(scale_outputs(raw, {{0.0, 1.0}, {0.0, 1.0}}) == raw);
    CHECK((normalize_labels(theta, {{0.0, 5.0}, {0.0, 0.5}}) - raw).norm() <= 1e-15);
    CHECK_THROWS_AS(scale_outputs(half, {{1.0, 1.0}}), RangeError);
    CHECK_THROWS_AS(scale_outputs(half, {{0.0, INFINITY}}), RangeError);
    CHECK_THROWS_AS(scale_outputs(raw, {{0.0, 1.0}}), RangeError);
  }

  TEST_CASE("ranges from sampling rules") {
    using pathsim::SamplingRule;
    const auto r = ranges_for({{"H", SamplingRule::parse("set:0.04,0.21")},
                               {"alpha", SamplingRule::parse("uniform:0,5")},
                               {"kappa1", SamplingRule::parse("set:0.1,0.3")}});
    CHECK(r[0].lo == 0.0);
    CHECK(r[0].hi == 1.0);
    CHECK(r[1].hi == 5.0);
    CHECK(r[2].lo == doctest::Approx(0.08));
    CHECK(r[2].hi == doctest::Approx(0.32));
  }

  TEST_CASE("per-level heads only see their own level") {
    const auto model = build_model(arch(Variant::sigma), 40, 1, 3);
    const auto data = fbm_data(1, 40, 1);
    ForwardCache cache;
    model.forward(data.paths[0].values, cache);
    Mat sig = model.signature_matrix(cache);
    const auto before = model.head_outputs_for(sig);
    const auto stored = model.head_outputs(cache);
    for (int h = 0; h < 3; ++h) CHECK((before[h] - stored[h]).norm() <= 1e-14 * (1.0 + before[h].norm()));

    const auto off = signature::level_offsets(model.augmented_channels(), 3);
    sig.rightCols(sig.cols() - off[2]).setZero();
    const auto after = model.head_outputs_for(sig);
    CHECK(after[0] == before[0]);
    CHECK(after[1] != before[1]);
    CHECK(after[2] != before[2]);
  }

  TEST_CASE("signature matrix rows are prefix signatures of the augmented stream") {
    const auto model = build_model(arch(Variant::sigma_no_conv), 20, 1, 4);
    const auto data = fbm_data(2, 20, 1);
    ForwardCache cache;
    model.forward(data.paths[0].values, cache);
    const Mat aug = signature::time_augment(model.normalize_input(data.paths[0].values));
    const auto ref = signature::lifted_signature_matrix(aug, 3, 10);
    CHECK((model.signature_matrix(cache) - ref.matrix).norm() <= 1e-12 * ref.matrix.norm());
  }

  TEST_CASE("backward needs a forward pass") {
    const auto model = build_model(arch(Variant::sigma), 20, 1);
    ForwardCache cache;
    std::vector<double> buf(model.params().total_size());
    CHECK_THROWS_AS(model.backward(cache, Vec::Ones(1), buf), GraphError);
  }

  TEST_CASE("full model gradients, every variant") {
    for (auto v : kAll) {
      CAPTURE(to_string(v));
      auto c = arch(v);
      if (v == Variant::transformer) {
        c.conv_channels = 4;
        c.head_dim = 3;
        c.mlp_widths = {6, 5};
      }
      auto model = build_model(c, 20, 1, 5);
      const auto data = fbm_data(3, 20, 4);
      const auto inputs = inputs_of(data);
      Rng rng(6);
      oracle::spread_biases(model.params(), rng);
      const Mat targets = (oracle::random_matrix(rng, 4, 1).array() * 0.2 + 0.5).matrix();
      auto loss = [&] { return batch_loss_and_grad(model, inputs, targets, false); };
      auto analytic = [&] { batch_loss_and_grad(model, inputs, targets, true); };
      const auto res = nn::finite_difference_check(model.params(), loss, analytic, 1e-5, rng);
      CAPTURE(res.worst_tensor);
      CHECK(res.max_relative_error <= 1e-4);
    }
  }

  TEST_CASE("full SigMA gradient at n = 100, batch 4") {
    auto model = build_model(arch(Variant::sigma), 100, 1, 7);
    const auto data = fbm_data(4, 100, 4);
    const auto inputs = inputs_of(data);
    const Mat targets = data.labels;  // H range (0, 1)
    Rng rng(8);
    oracle::spread_biases(model.params(), rng);
    auto loss = [&] { return batch_loss_and_grad(model, inputs, targets, false); };
    auto analytic = [&] { batch_loss_and_grad(model, inputs, targets, true); };
    const auto res = nn::finite_difference_check(model.params(), loss, analytic, 1e-5, rng);
    CAPTURE(res.worst_tensor);
    CHECK(res.coordinates_checked >= 50);
    CHECK(res.max_relative_error <= 1e-4);
  }

  TEST_CASE("parameters the loss ignores get exactly zero gradient") {
    auto model = build_model(arch(Variant::sigma), 20, 1, 9);
    auto& ps = model.params();
    // cut hidden unit 3 of the first MLP layer off from the rest of the network
    auto next = ps.matrix(ps.index("mlp.1.weight"));
    next.col(3).setZero();
    const auto data = fbm_data(5, 20, 6);
    const auto inputs = inputs_of(data);
    batch_loss_and_grad(model, inputs, Mat::Constant(6, 1, 0.5), true);
    const auto w0 = ps.index("mlp.0.weight");
    const auto cols = ps.matrix(w0).cols();
    for (Eigen::Index c = 0; c < cols; ++c) CHECK(ps.grads(w0)[3 * cols + c] == 0.0);
    CHECK(ps.grads(ps.index("mlp.0.bias"))[3] == 0.0);
  }

  TEST_CASE("training with lr = 0 changes nothing") {
    auto model = build_model(arch(Variant::sigma), 20, 1, 10);
    const auto before = std::vector<double>(model.params().values().begin(), model.params().values().end());
    const auto data = fbm_data(6, 20, 30);
    TrainConfig tc;
    tc.epochs = 3;
    tc.batch_size = 8;
    tc.lr = 0.0;
    const auto hist = train(model, data, &data, tc);
    const auto after = model.params().values();
    CHECK(std::equal(before.begin(), before.end(), after.begin()));
    REQUIRE(hist.size() == 3);
    CHECK(hist[1].train_rmse == hist[0].train_rmse);
    CHECK(hist[2].train_rmse == hist[0].train_rmse);
    CHECK(hist[2].val_rmse == hist[0].val_rmse);
  }

  TEST_CASE("one epoch, one batch equals a manual Adam step") {
    auto model = build_model(arch(Variant::sigma_no_conv_no_mlp), 20, 1, 11);
    auto replay = model;
    const auto data = fbm_data(7, 20, 12);
    TrainConfig tc;
    tc.epochs = 1;
    tc.batch_size = 12;
    tc.lr = 1e-3;
    tc.shuffle = false;
    train(model, data, nullptr, tc);

    const auto inputs = inputs_of(data);
    Mat targets = data.labels;  // H range is (0, 1): labels are already normalised
    batch_loss_and_grad(replay, inputs, targets, true);
    auto p = replay.params().values();
    const auto g = replay.params().grads();
    for (std::size_t i = 0; i < p.size(); ++i) {
      // first step: m_hat = g, v_hat = g^2
      p[i] -= 1e-3 * g[i] / (std::abs(g[i]) + 1e-8);
    }
    const auto trained = model.params().values();
    double worst = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) worst = std::max(worst, std::abs(trained[i] - p[i]));
    CHECK(worst <= 1e-15);
  }

  TEST_CASE("training is deterministic") {
    const auto data = fbm_data(8, 20, 40);
    TrainConfig tc;
    tc.epochs = 3;
    tc.batch_size = 16;
    tc.lr = 1e-3;
    tc.seed = 5;
    auto a = build_model(arch(Variant::sigma), 20, 1, 12);
    auto b = build_model(arch(Variant::sigma), 20, 1, 12);
    const auto ha = train(a, data, &data, tc);
    const auto hb = train(b, data, &data, tc);
    for (std::size_t e = 0; e < ha.size(); ++e) {
      CHECK(ha[e].train_rmse == hb[e].train_rmse);
      CHECK(ha[e].val_rmse == hb[e].val_rmse);
    }
    CHECK(ha.back().train_rmse < ha.front().train_rmse + 1.0);
    const auto va = a.params().values(), vb = b.params().values();
    CHECK(std::equal(va.begin(), va.end(), vb.begin()));
  }

  TEST_CASE("training rejects mismatched data and non-finite losses") {
    auto model = build_model(arch(Variant::sigma), 20, 1, 13);
    const auto wrong = fbm_data(9, 30, 4);
    TrainConfig tc;
    tc.epochs = 1;
    CHECK_THROWS_AS(train(model, wrong, nullptr, tc), ShapeMismatch);

    const auto data = fbm_data(9, 20, 4);
    model.params().values(model.params().index("mlp.5.bias"))[0] = NAN;
    CHECK_THROWS_WITH_AS(train(model, data, nullptr, tc), doctest::Contains("epoch 1"), NonFiniteLoss);
    tc.epochs = 0;
    CHECK_THROWS_AS(train(model, data, nullptr, tc), ConfigError);
  }

  TEST_CASE("prediction is pure and batch independent") {
    const auto model = build_model(arch(Variant::sigma), 40, 1, 14);
    const auto data = fbm_data(10, 40, 3);
    const auto before = std::vector<double>(model.params().values().begin(), model.params().values().end());
    const Mat all = predict(model, data.paths);
    const auto after = model.params().values();
    CHECK(std::equal(before.begin(), before.end(), after.begin()));
    CHECK(all == predict(model, data.paths));
    for (int i = 0; i < 3; ++i) {
      const Mat one = predict(model, std::vector<pathsim::Path>{data.paths[i]});
      CHECK(one.row(0) == all.row(i));
      CHECK((all(i, 0) > 0.0 && all(i, 0) < 1.0));
    }
    pathsim::Path bad;
    bad.values = Mat::Zero(30, 1);
    CHECK_THROWS_AS(predict(model, std::vector<pathsim::Path>{bad}), ShapeMismatch);
  }

  TEST_CASE("model files round trip") {
    auto c = arch(Variant::sigma);
    c.outputs = 2;
    c.ranges = {{0.0, 1.0}, {0.0, 5.0}};
    auto model = build_model(c, 40, 1, 15);
    model.label_names = {"H", "alpha"};
    const char* env = std::getenv("SIGMA_TEST_TMP");
    const auto dir = std::filesystem::path(env ? env : "/tmp/sigma-tests") / "models";
    std::filesystem::create_directories(dir);
    const auto file = (dir / "model.json").string();
    save_model(model, file);
    const auto back = load_model(file);
    CHECK(param_count(back) == param_count(model));
    CHECK(back.label_names == model.label_names);
    const std::span<const double> a = model.params().values(), b = back.params().values();
    CHECK(std::equal(a.begin(), a.end(), b.begin()));
    const auto data = fbm_data(11, 40, 2);
    CHECK(predict(back, data.paths) == predict(model, data.paths));
    CHECK_THROWS_AS(load_model((dir / "missing.json").string()), IoError);
  }

  TEST_CASE("dataset input statistics") {
    auto c = arch(Variant::sigma);
    c.input_norm = InputNorm::dataset;
    auto model = build_model(c, 30, 1, 4);
    const auto data = fbm_data(21, 30, 12);
    CHECK_FALSE(model.input_statistics_ready());
    CHECK_THROWS_AS(predict(model, data.paths), ConfigError);

    // fitted mean and population std match a direct pass over every sample
    double sum = 0.0, sq = 0.0, count = 0.0;
    for (const auto& p : data.paths) {
      sum += p.values.sum();
      count += static_cast<double>(p.values.size());
    }
    const double mean = sum / count;
    for (const auto& p : data.paths) sq += (p.values.array() - mean).square().sum();
    TrainConfig tc;
    tc.epochs = 1;
    tc.batch_size = 4;
    tc.lr = 0.0;
    train(model, data, nullptr, tc);
    REQUIRE(model.input_statistics_ready());
    CHECK(model.config().input_shift[0] == doctest::Approx(mean).epsilon(1e-12));
    CHECK(model.config().input_scale[0] == doctest::Approx(std::sqrt(sq / count)).epsilon(1e-12));

    // the normalised training samples have zero mean and unit variance
    double zsum = 0.0, zsq = 0.0;
    for (const auto& p : data.paths) {
      const Mat z = model.normalize_input(p.values);
      zsum += z.sum();
      zsq += z.squaredNorm();
    }
    CHECK(zsum / count == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(zsq / count == doctest::Approx(1.0).epsilon(1e-12));

    // unlike per-path z-scoring, the relative scale of paths survives
    Mat doubled = 2.0 * data.paths[0].values;
    CHECK((model.normalize_input(doubled) - model.normalize_input(data.paths[0].values)).norm() > 1e-3);

    // refitting only happens when the statistics are missing
    const auto shift = model.config().input_shift;
    train(model, fbm_data(22, 30, 12), nullptr, tc);
    CHECK(model.config().input_shift == shift);

    const char* env = std::getenv("SIGMA_TEST_TMP");
    const auto dir = std::filesystem::path(env ? env : "/tmp/sigma-tests") / "models";
    std::filesystem::create_directories(dir);
    const auto file = (dir / "dataset-norm.json").string();
    save_model(model, file);
    const auto back = load_model(file);
    CHECK(back.config().input_shift == model.config().input_shift);
    CHECK(back.config().input_scale == model.config().input_scale);
    CHECK(predict(back, data.paths) == predict(model, data.paths));

    auto bad = c;
    bad.input_shift = {0.0, 0.0};
    bad.input_scale = {1.0, 1.0};
    CHECK_THROWS_AS(build_model(bad, 30, 1, 4), ConfigError);
    bad.input_shift = {0.0};
    bad.input_scale = {0.0};
    CHECK_THROWS_AS(build_model(bad, 30, 1, 4), ConfigError);
  }
}
