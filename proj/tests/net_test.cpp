#include <gtest/gtest.h>

#include "igm/grad_check.hpp"
#include "igm/net.hpp"

namespace igm {
namespace {

using M = ad::Mat<double>;

ModelConfig tiny(TokenLayout layout = TokenLayout::grid) {
  ModelConfig c;
  c.net.dim = 8;
  c.net.heads = 2;
  c.net.layers = 1;
  c.net.layout = layout;
  c.frames = 4;
  c.joints = 4;
  c.channels = 3;
  c.diffusion_steps = 4;
  return c;
}

M random_input(const ModelConfig& c, std::uint64_t seed) {
  Rng rng = make_rng(seed, {0x11ULL});
  M x(c.frames, c.row_width());
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = gaussian(rng);
  return x;
}

TEST(Embed, ZeroInputZeroPositionsGivesZeroTokens) {
  const auto c = tiny();
  auto p = init_model<double>(c, 1);
  p["enc.pos_t"].setZero();
  p["enc.pos_v"].setZero();
  ad::Tape<double> t;
  const M tokens = embed(t, p, "enc", c, t.constant(M::Zero(c.frames, c.row_width()))).value();
  EXPECT_EQ(tokens, M::Zero(c.frames * c.joints, c.net.dim));
}

TEST(Embed, ZeroInputGivesPositionSum) {
  const auto c = tiny();
  const auto p = init_model<double>(c, 2);
  ad::Tape<double> t;
  const M tokens = embed(t, p, "enc", c, t.constant(M::Zero(c.frames, c.row_width()))).value();
  for (int f = 0; f < c.frames; ++f)
    for (int v = 0; v < c.joints; ++v)
      EXPECT_EQ(tokens.row(f * c.joints + v), M(p["enc.pos_t"].row(f) + p["enc.pos_v"].row(v)));
}

TEST(Embed, RemovingTimePositionsShiftsRowsByFrameConstant) {
  const auto c = tiny();
  auto p = init_model<double>(c, 3);
  const M x = random_input(c, 3);
  ad::Tape<double> t;
  const M with = embed(t, p, "enc", c, t.constant(x)).value();
  p["enc.pos_t"].setZero();
  const M without = embed(t, p, "enc", c, t.constant(x)).value();
  for (int f = 0; f < c.frames; ++f) {
    const M first = with.row(f * c.joints) - without.row(f * c.joints);
    for (int v = 1; v < c.joints; ++v)
      EXPECT_LT((with.row(f * c.joints + v) - without.row(f * c.joints + v) - first).norm(), 1e-14);
  }
}

TEST(Embed, FrameLayoutHasOneTokenPerFrame) {
  const auto c = tiny(TokenLayout::frame);
  const auto p = init_model<double>(c, 4);
  EXPECT_FALSE(p.contains("enc.pos_v"));
  ad::Tape<double> t;
  EXPECT_EQ(embed(t, p, "enc", c, t.constant(random_input(c, 4))).rows(), c.frames);
}

TEST(Embed, ShapeMismatchThrows) {
  const auto c = tiny();
  const auto p = init_model<double>(c, 5);
  ad::Tape<double> t;
  EXPECT_THROW(embed(t, p, "enc", c, t.constant(M::Zero(3, c.row_width()))), ConfigError);
}

TEST(TransformerBlock, SingleTokenAttentionIsValueProjection) {
  const auto c = tiny();
  const auto p = init_model<double>(c, 6);
  Rng rng = make_rng(6, {});
  M x(1, c.net.dim);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = gaussian(rng);
  ad::Tape<double> t;
  const M att = self_attention(t, p, "enc.blk0.attn", c.net, t.constant(x)).value();
  const M expected = (x * p["enc.blk0.attn.v.w"] + p["enc.blk0.attn.v.b"]) * p["enc.blk0.attn.o.w"] +
                     p["enc.blk0.attn.o.b"];
  EXPECT_LT((att - expected).norm(), 1e-12);
}

TEST(TransformerBlock, PermutationEquivariant) {
  const auto c = tiny();
  const auto p = init_model<double>(c, 7);
  Rng rng = make_rng(7, {});
  M x(6, c.net.dim);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = gaussian(rng);
  const std::vector<int> perm{3, 0, 5, 1, 4, 2};
  M px(6, c.net.dim);
  for (int i = 0; i < 6; ++i) px.row(i) = x.row(perm[i]);
  ad::Tape<double> t;
  const M y = transformer_block(t, p, "enc.blk0", c.net, t.constant(x)).value();
  const M py = transformer_block(t, p, "enc.blk0", c.net, t.constant(px)).value();
  for (int i = 0; i < 6; ++i) EXPECT_LT((py.row(i) - y.row(perm[i])).norm(), 1e-12);
}

TEST(TransformerBlock, OutputRowsAreNormalized) {
  const auto c = tiny();
  const auto p = init_model<double>(c, 8);
  Rng rng = make_rng(8, {});
  M x(5, c.net.dim);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = gaussian(rng, 0, 3);
  ad::Tape<double> t;
  const M y = transformer_block(t, p, "enc.blk0", c.net, t.constant(x)).value();
  for (int i = 0; i < y.rows(); ++i) {
    const double mean = y.row(i).mean();
    EXPECT_NEAR(mean, 0.0, 1e-5);
    EXPECT_NEAR((y.row(i).array() - mean).square().mean(), 1.0, 1e-5);
  }
}

TEST(Encode, DeterministicUnitNormPooled) {
  const auto c = tiny();
  const auto p = init_model<double>(c, 9);
  const M x = random_input(c, 9);
  ad::Tape<double> t1, t2;
  const auto a = encode(t1, p, c, t1.constant(x));
  const auto b = encode(t2, p, c, t2.constant(x));
  EXPECT_EQ(a.pooled.value(), b.pooled.value());
  EXPECT_NEAR(a.pooled.value().norm(), 1.0, 1e-12);
  EXPECT_EQ(a.tokens.rows(), c.tokens());
  EXPECT_LT((a.pooled.value() - a.tokens.value().colwise().mean().normalized()).norm(), 1e-12);
}

TEST(Encode, AuxTokensChangeFeaturesAndAreNotPooled) {
  const auto c = tiny();
  const auto p = init_model<double>(c, 10);
  const M x = random_input(c, 10);
  ad::Tape<double> t;
  const auto plain = encode(t, p, c, t.constant(x));
  EncoderAux<double> aux{t.constant(M::Constant(1, c.net.dim, 0.3)), 2, 3};
  const auto with = encode(t, p, c, t.constant(x), &aux);
  EXPECT_EQ(plain.consumed_tokens, c.tokens());
  EXPECT_EQ(with.consumed_tokens, c.tokens() + kAuxTokens);
  EXPECT_EQ(with.tokens.rows(), c.tokens());
  EXPECT_GT((with.pooled.value() - plain.pooled.value()).norm(), 1e-6);
  EncoderAux<double> bad{t.constant(M::Zero(1, c.net.dim + 1)), 1, 1};
  EXPECT_THROW(encode(t, p, c, t.constant(x), &bad), ConfigError);
}

TEST(InitModel, DeterministicCountAndContracts) {
  const auto c = tiny();
  const auto a = init_model<double>(c, 11), b = init_model<double>(c, 11), d = init_model<double>(c, 12);
  EXPECT_EQ(a.total_count(), b.total_count());
  for (int i = 0; i < a.size(); ++i) EXPECT_EQ(a.value(i), b.value(i));
  EXPECT_NE(a["enc.proj.w"], d["enc.proj.w"]);
  EXPECT_EQ(a["enc.blk0.norm1.gain"], M::Ones(1, c.net.dim));
  EXPECT_EQ(a["gen.blk0.norm1.cond_scale.b"], M::Ones(1, c.net.dim));
  EXPECT_EQ(a["gen.blk0.norm1.cond_shift.w"], M::Zero(c.net.dim, c.net.dim));
  EXPECT_TRUE(a.all_finite());
  ModelConfig bad = c;
  bad.net.heads = 3;
  EXPECT_THROW(init_model<double>(bad, 0), ConfigError);
}

TEST(GradCheck, QuadraticIsExact) {
  ad::ParamStore<double> p;
  p.add("a", random_input(tiny(), 13));
  p.add("b", M::Constant(2, 2, 0.5));
  auto fn = [](const ad::ParamStore<double>& q) {
    double loss = 0;
    ad::Grads<double> g;
    for (int i = 0; i < q.size(); ++i) {
      loss += 0.5 * q.value(i).squaredNorm();
      g.push_back(q.value(i));
    }
    return std::pair{loss, g};
  };
  const auto r = grad_check(fn, p);
  EXPECT_LT(r.max_rel_err, 1e-8);
  EXPECT_EQ(r.coordinates, 52);
}

TEST(GradCheck, ConstantLossHasZeroGradient) {
  ad::ParamStore<double> p;
  p.add("a", M::Ones(3, 3));
  auto fn = [](const ad::ParamStore<double>& q) { return std::pair{4.0, q.zeros_like()}; };
  const auto r = grad_check(fn, p);
  EXPECT_EQ(r.max_rel_err, 0.0);
  EXPECT_EQ(r.worst_analytic, 0.0);
}

TEST(GradCheck, EncoderPooledFeature) {
  const auto c = tiny();
  const M x = random_input(c, 14);
  const M w = random_input(ModelConfig{}, 15).topLeftCorner(1, c.net.dim);
  auto fn = [&](const ad::ParamStore<double>& q) {
    ad::Tape<double> t;
    auto f = encode(t, q, c, t.constant(x));
    auto loss = ad::sum(ad::mul(f.pooled, t.constant(w)));
    t.backward(loss);
    auto g = q.zeros_like();
    t.collect(g);
    return std::pair{loss.scalar(), g};
  };
  EXPECT_LT(grad_check(fn, init_model<double>(c, 14)).max_rel_err, 1e-4);
}

TEST(GradCheck, NonFiniteLossThrows) {
  ad::ParamStore<double> p;
  p.add("a", M::Ones(1, 1));
  auto fn = [](const ad::ParamStore<double>& q) { return std::pair{std::nan(""), q.zeros_like()}; };
  EXPECT_THROW(grad_check(fn, p), NumericError);
}

}  // namespace
}  // namespace igm
