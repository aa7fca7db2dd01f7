#include <gtest/gtest.h>

#include <cmath>

#include "hknas/data.hpp"
#include "hknas/optim.hpp"
#include "oracles.hpp"

using namespace hknas;

namespace {

struct Toy {
  HsiCube cube;
  Split split;
};

Toy scene(double noise, std::size_t classes = 3, std::size_t knowable = 8) {
  SynthSpec s;
  s.classes = classes;
  s.height = 12;
  s.width = 12;
  s.bands = 8;
  s.noise = noise;
  s.seed = 4;
  const SynthScene sc = synth_generate(s);
  SplitSpec sp;
  sp.knowable = knowable;
  sp.seed = 5;
  return {normalize(sc.cube), stratified_split(sc.labels, sp)};
}

NetworkTemplate tiny(NetworkKind kind, std::size_t classes = 3, Form form = Form::conv1d) {
  NetworkTemplate t;
  t.kind = kind;
  t.blocks = kind == NetworkKind::cls1d ? 2 : 3;
  t.layers = 1;
  t.bands = 8;
  t.classes = classes;
  t.form = kind == NetworkKind::cls1d ? Form::conv1d : form;
  t.initial_channels = 8;
  t.stem_length = 16;
  t.hyper_size = 7;
  t.norm_groups = 2;
  return t;
}

OptimConfig quick(std::size_t epochs, std::size_t batch = 4) {
  OptimConfig c;
  c.search_epochs = epochs;
  c.train_epochs = epochs;
  c.batch_size = batch;
  return c;
}

}  // namespace

TEST(Cosine, Endpoints) {
  EXPECT_NEAR(cosine_lr(0, 600, 0.01, 0.0), 0.01, 1e-15);
  EXPECT_NEAR(cosine_lr(600, 600, 0.01, 0.0), 0.0, 1e-15);
  EXPECT_NEAR(cosine_lr(300, 600, 0.01, 0.0), 0.005, 1e-15);
  EXPECT_NEAR(cosine_lr(10, 10, 0.1, 0.02), 0.02, 1e-15);
  EXPECT_NEAR(cosine_lr(1, 3, 1.0, 0.0), 0.5 * (1 + std::cos(std::numbers::pi / 3)), 1e-15);
}

TEST(Cosine, MonotoneNonincreasing) {
  for (std::size_t max : {1u, 2u, 7u, 100u, 1000u}) {
    double prev = cosine_lr(0, max, 0.01, 0.0);
    for (std::size_t e = 1; e <= max; ++e) {
      const double v = cosine_lr(e, max, 0.01, 0.0);
      EXPECT_LE(v, prev);
      EXPECT_GE(v, 0.0);
      prev = v;
    }
  }
}

TEST(Cosine, RejectsBadEpoch) {
  EXPECT_THROW(cosine_lr(0, 0, 0.01, 0.0), std::out_of_range);
  EXPECT_THROW(cosine_lr(11, 10, 0.01, 0.0), std::out_of_range);
}

TEST(Config, DefaultsPerKind) {
  const auto c1 = OptimConfig::defaults(NetworkKind::cls1d);
  EXPECT_EQ(c1.search_epochs, 600u);
  EXPECT_EQ(c1.train_epochs, 1000u);
  EXPECT_EQ(c1.batch_size, 96u);
  EXPECT_EQ(c1.initial_lr, 0.01);
  EXPECT_EQ(c1.weight_decay, 0.01);
  const auto c3 = OptimConfig::defaults(NetworkKind::cls3d);
  EXPECT_EQ(c3.search_epochs, 100u);
  EXPECT_EQ(c3.train_epochs, 300u);
  const auto s = OptimConfig::defaults(NetworkKind::seg3d);
  EXPECT_EQ(s.momentum, 0.9);
  EXPECT_EQ(s.batch_size, 1u);
  OptimConfig bad;
  bad.batch_size = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = {};
  bad.initial_lr = -1;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = {};
  bad.min_lr = 1;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Sgd, PlainStep) {
  std::vector<double> p{1.0, -2.0}, g{0.5, 1.0}, v;
  sgd_step(p, g, v, 0.1, 0.0, 0.0);
  EXPECT_DOUBLE_EQ(p[0], 0.95);
  EXPECT_DOUBLE_EQ(p[1], -2.1);
}

TEST(Sgd, ZeroGradientWithoutDecayIsStationary) {
  std::vector<double> p{2.0, -3.0}, g{0.0, 0.0}, v;
  sgd_step(p, g, v, 0.1, 0.9, 0.0);
  sgd_step(p, g, v, 0.1, 0.9, 0.0);
  EXPECT_EQ(p, (std::vector<double>{2.0, -3.0}));
}

TEST(Sgd, ZeroGradientOnlyDecays) {
  std::vector<double> p{2.0}, g{0.0}, v;
  sgd_step(p, g, v, 0.1, 0.0, 0.01);
  EXPECT_DOUBLE_EQ(p[0], 2.0 * (1 - 0.1 * 0.01));
}

TEST(Sgd, MomentumRecurrenceUnrolled) {
  const double lr = 0.05, mu = 0.9, wd = 0.01;
  const std::vector<double> grads{0.3, -0.2, 0.7};
  std::vector<double> p{1.5}, v;
  double q = 1.5, vel = 0.0;
  for (double g : grads) {
    std::vector<double> gv{g};
    sgd_step(p, gv, v, lr, mu, wd);
    vel = mu * vel + g + wd * q;
    q -= lr * vel;
    EXPECT_DOUBLE_EQ(p[0], q);
  }
  // closed form for the first two steps
  const double v1 = 0.3 + wd * 1.5, p1 = 1.5 - lr * v1;
  const double v2 = mu * v1 - 0.2 + wd * p1, p2 = p1 - lr * v2;
  std::vector<double> r{1.5}, rv;
  for (int i = 0; i < 2; ++i) {
    std::vector<double> gv{grads[i]};
    sgd_step(r, gv, rv, lr, mu, wd);
  }
  EXPECT_NEAR(r[0], p2, 1e-15);
}

TEST(Sgd, ShapeMismatch) {
  std::vector<double> p{1, 2}, g{1}, v;
  EXPECT_THROW(sgd_step(p, g, v, 0.1, 0, 0), ShapeError);
}

TEST(Sgd, SkipsParametersWithoutGradient) {
  Tensor a(Shape{2}, 1.0), b(Shape{2}, 1.0);
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  a.grad()[0] = 1.0;
  Sgd opt(0.0, 0.5);
  opt.add(a, true);
  opt.add(b, true);
  opt.step(0.1);
  EXPECT_DOUBLE_EQ(a[0], 1.0 - 0.1 * 1.5);
  EXPECT_DOUBLE_EQ(a[1], 1.0 - 0.1 * 0.5);
  EXPECT_EQ(b[0], 1.0);
}

TEST(Sgd, DecayOnlyOnWeights) {
  NetworkTemplate t = tiny(NetworkKind::cls3d, 3, Form::parallel_1d_2ddw);
  t.alpha_mode = AlphaMode::free;
  const NetworkModel m = build(t, 1);
  const Sgd w = weight_optimizer(m, OptimConfig{});
  std::size_t weights = 0, norms = 0, alphas = 0, buffers = 0;
  for (const auto& nt : m.tensors()) {
    weights += nt.role == ParamRole::weight;
    norms += nt.role == ParamRole::norm;
    alphas += nt.role == ParamRole::alpha;
    buffers += nt.role == ParamRole::buffer;
  }
  ASSERT_EQ(w.slots().size(), weights + norms);
  std::size_t decayed = 0;
  for (const auto& s : w.slots()) decayed += s.decay;
  EXPECT_EQ(decayed, weights);
  EXPECT_GT(buffers, 0u);
  const Sgd a = alpha_optimizer(m);
  EXPECT_EQ(a.slots().size(), alphas);
  EXPECT_EQ(alphas, 6u);
  for (const auto& s : a.slots()) EXPECT_FALSE(s.decay);
}

TEST(Sgd, HyperModeHasNoAlphaParameters) {
  const NetworkModel m = build(tiny(NetworkKind::cls1d), 1);
  EXPECT_TRUE(alpha_optimizer(m).slots().empty());
}

TEST(Samples, InputShapesAndTargets) {
  const Toy s = scene(0.0);
  const std::vector<PixelRef> px{s.split.train[0], s.split.train[1]};
  EXPECT_EQ(SampleSource(NetworkKind::cls1d, s.cube).inputs(px).shape(), (Shape{2, 8}));
  EXPECT_EQ(SampleSource(NetworkKind::cls3d, s.cube, 5).inputs(px).shape(), (Shape{2, 8, 5, 5}));
  EXPECT_EQ(SampleSource(NetworkKind::seg3d, s.cube).inputs(px).shape(), (Shape{1, 8, 12, 12}));
  const auto y = SampleSource::targets(px);
  EXPECT_EQ(y[0], px[0].label - 1u);
  const std::vector<PixelRef> bad{{0, 0, 0}};
  EXPECT_THROW(SampleSource::targets(bad), DataError);
}

TEST(Samples, Seg3dLogitsArePixelsOfTheMap) {
  const Toy s = scene(0.0);
  NetworkModel m = build(tiny(NetworkKind::seg3d, 3, Form::conv3d), 2);
  const SampleSource src(NetworkKind::seg3d, s.cube);
  Tape t(false);
  const Tensor map = m.forward(t, cube_tensor(s.cube), false);
  const Tensor l = src.logits(t, m, s.split.val, false);
  ASSERT_EQ(l.shape(), (Shape{s.split.val.size(), 3}));
  for (std::size_t i = 0; i < s.split.val.size(); ++i) {
    for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(l[i * 3 + k], map[(k * 12 + s.split.val[i].row) * 12 + s.split.val[i].col]);
  }
}

TEST(Loops, MeanLossOfEmptySetIsNan) {
  const Toy s = scene(0.0);
  NetworkModel m = build(tiny(NetworkKind::cls1d), 1);
  EXPECT_TRUE(std::isnan(mean_loss(m, SampleSource(NetworkKind::cls1d, s.cube), {})));
  EXPECT_THROW(evaluate(m, SampleSource(NetworkKind::cls1d, s.cube), {}), DataError);
}

TEST(Loops, SearchIsDeterministic) {
  const Toy s = scene(0.05);
  const SampleSource src(NetworkKind::cls1d, s.cube);
  std::string logs[2], archs[2];
  for (int r = 0; r < 2; ++r) {
    NetworkModel m = build(tiny(NetworkKind::cls1d), 7);
    const auto res = search(m, src, s.split.train, s.split.val, quick(4), 11);
    logs[r] = res.log.text();
    archs[r] = encode_text(res.arch);
  }
  EXPECT_EQ(logs[0], logs[1]);
  EXPECT_EQ(archs[0], archs[1]);
  EXPECT_EQ(std::count(logs[0].begin(), logs[0].end(), '\n'), 4);
}

TEST(Loops, SearchUpdatesHyperKernelsButNotFreeAlphas) {
  const Toy s = scene(0.0);
  const SampleSource src(NetworkKind::cls1d, s.cube);
  NetworkTemplate t = tiny(NetworkKind::cls1d);
  NetworkModel hyper = build(t, 3);
  const Tensor before = hyper.blocks[0].layers[0].squeeze.clone();
  std::vector<double> k0;
  hyper.for_each_mixed_edge([&](std::size_t bi, std::size_t, const MixedEdge& e) {
    if (bi == 0) k0 = e.kernels[0].weights.values();
  });
  (void)search(hyper, src, s.split.train, s.split.val, quick(2), 1);
  EXPECT_NE(hyper.blocks[0].layers[0].squeeze.values(), before.values());
  hyper.for_each_mixed_edge([&](std::size_t bi, std::size_t, const MixedEdge& e) {
    if (bi == 0) {
      EXPECT_NE(e.kernels[0].weights.values(), k0);
    }
  });
  // one-tier search with free alphas never moves them, so the first candidate wins every tie
  t.alpha_mode = AlphaMode::free;
  NetworkModel free = build(t, 3);
  const auto res = search(free, src, s.split.train, s.split.val, quick(2), 1);
  EXPECT_EQ(encode_text(res.arch), "0\n0\n");
}

TEST(Loops, LossDropsOnSeparableData) {
  const Toy s = scene(0.0, 3, 20);
  const SampleSource src(NetworkKind::cls1d, s.cube);
  NetworkModel m = build_derived(tiny(NetworkKind::cls1d), parse_text("1\n1\n"), 5);
  OptimConfig c = quick(60, 2);
  c.initial_lr = 0.05;
  const RunLog log = train(m, src, s.split.train, s.split.val, c, 9);
  const double first = log.epochs.front().train_loss, last = log.epochs.back().train_loss;
  EXPECT_LT(last * 10, first) << first << " -> " << last;
  EXPECT_GE(evaluate(m, src, s.split.test).oa, 0.99);
}

TEST(Loops, SingleSampleIsMemorized) {
  const Toy s = scene(0.05);
  const SampleSource src(NetworkKind::cls1d, s.cube);
  NetworkModel m = build_derived(tiny(NetworkKind::cls1d), parse_text("0\n0\n"), 6);
  const std::vector<PixelRef> one{s.split.train[0]};
  OptimConfig c = quick(2000, 1);
  c.initial_lr = 0.05;
  c.weight_decay = 0.0;
  const RunLog log = train(m, src, one, {}, c, 2);
  const std::size_t window = 200;
  double prev = INFINITY;
  for (std::size_t w = 0; w + window <= log.epochs.size(); w += window) {
    double avg = 0;
    for (std::size_t e = w; e < w + window; ++e) avg += log.epochs[e].train_loss / window;
    EXPECT_LT(avg, prev) << "window at epoch " << w;
    prev = avg;
  }
  EXPECT_LT(log.epochs.back().train_loss, 1e-3);
  EXPECT_TRUE(std::isnan(log.epochs.back().val_loss));
}

TEST(Loops, TrainAndSearchNeedTheRightMode) {
  const Toy s = scene(0.0);
  const SampleSource src(NetworkKind::cls1d, s.cube);
  NetworkModel sm = build(tiny(NetworkKind::cls1d), 1);
  NetworkModel dm = build_derived(tiny(NetworkKind::cls1d), parse_text("0\n0\n"), 1);
  EXPECT_THROW(train(sm, src, s.split.train, s.split.val, quick(1), 1), std::invalid_argument);
  EXPECT_THROW(search(dm, src, s.split.train, s.split.val, quick(1), 1), std::invalid_argument);
  EXPECT_THROW(train(dm, src, {}, s.split.val, quick(1), 1), DataError);
}

TEST(Loops, DivergenceRaisesNumericError) {
  const Toy s = scene(0.05);
  const SampleSource src(NetworkKind::cls1d, s.cube);
  NetworkModel m = build_derived(tiny(NetworkKind::cls1d), parse_text("2\n2\n"), 1);
  OptimConfig c = quick(20, 4);
  c.initial_lr = 1e200;
  EXPECT_THROW(train(m, src, s.split.train, s.split.val, c, 1), NumericError);
}

TEST(TwoTier, HalvesAlternateWithinClass) {
  const Toy s = scene(0.0);
  const auto [a, b] = halve(s.split.train);
  EXPECT_EQ(a.size() + b.size(), s.split.train.size());
  for (std::uint16_t k = 1; k <= 3; ++k) {
    const auto na = std::count_if(a.begin(), a.end(), [&](const PixelRef& p) { return p.label == k; });
    const auto nb = std::count_if(b.begin(), b.end(), [&](const PixelRef& p) { return p.label == k; });
    EXPECT_EQ(na, 2);
    EXPECT_EQ(nb, 2);
  }
}

TEST(TwoTier, ZeroAlphaRateKeepsSmallestCandidates) {
  const Toy s = scene(0.05);
  const SampleSource src(NetworkKind::cls3d, s.cube, 5);
  NetworkTemplate t = tiny(NetworkKind::cls3d, 3, Form::parallel_1d_2ddw);
  t.alpha_mode = AlphaMode::free;
  NetworkModel m = build(t, 3);
  OptimConfig c = quick(2);
  c.alpha_lr = 0.0;
  const auto [a, b] = halve(s.split.train);
  const auto res = two_tier_search(m, src, a, b, s.split.val, c, 1);
  EXPECT_EQ(encode_text(res.arch), "0/0\n0/0\n0/0\n");
  EXPECT_EQ(res.log.epochs.size(), 2u);
}

TEST(TwoTier, AlphaPhaseMovesAlphas) {
  const Toy s = scene(0.05);
  const SampleSource src(NetworkKind::cls1d, s.cube);
  NetworkTemplate t = tiny(NetworkKind::cls1d);
  t.alpha_mode = AlphaMode::free;
  NetworkModel m = build(t, 3);
  OptimConfig c = quick(2);
  c.alpha_lr = 0.5;
  const auto [a, b] = halve(s.split.train);
  (void)two_tier_search(m, src, a, b, s.split.val, c, 1);
  bool moved = false;
  m.for_each_mixed_edge([&](std::size_t, std::size_t, const MixedEdge& e) {
    for (double v : e.free_alpha[0].values()) moved = moved || v != 0.0;
  });
  EXPECT_TRUE(moved);
}

TEST(TwoTier, NeedsFreeAlphas) {
  const Toy s = scene(0.0);
  const SampleSource src(NetworkKind::cls1d, s.cube);
  NetworkModel m = build(tiny(NetworkKind::cls1d), 3);
  const auto [a, b] = halve(s.split.train);
  EXPECT_THROW(two_tier_search(m, src, a, b, s.split.val, quick(1), 1), ConfigError);
}
