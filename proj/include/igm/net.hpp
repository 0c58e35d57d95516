#pragma once

// Transformer substrate shared by the encoder f and the generator g.
//
// Sequences enter as a T x (V*C) matrix (frame-major, joints then channels). In grid
// layout every (t, v) pair is a token with a C-dim input; in frame layout each frame is
// one token with a V*C input. Position embeddings P_t (and P_v in grid layout) are added
// after the input projection. Blocks are post-norm: LN(x + MSA(x)), then LN(x + FFN(x)).

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>

#include "igm/adapter.hpp"
#include "igm/autodiff.hpp"
#include "igm/error.hpp"
#include "igm/rng.hpp"

namespace igm {

enum class TokenLayout { grid, frame };

inline const char* to_string(TokenLayout l) { return l == TokenLayout::grid ? "grid" : "frame"; }
inline TokenLayout token_layout_from_string(const std::string& s) {
  if (s == "grid") return TokenLayout::grid;
  if (s == "frame") return TokenLayout::frame;
  throw ConfigError("unknown token layout '" + s + "' (expected grid or frame)");
}

struct NetConfig {
  int dim = 32;
  int layers = 2;
  int heads = 4;
  double ffn_mult = 2.0;
  TokenLayout layout = TokenLayout::grid;

  int ffn_dim() const { return std::max(1, int(std::lround(ffn_mult * dim))); }
  void validate() const {
    if (dim < 1 || heads < 1 || dim % heads != 0) throw ConfigError("dim must be divisible by heads");
    if (layers < 1) throw ConfigError("need at least one transformer layer");
    if (ffn_mult <= 0) throw ConfigError("ffn_mult must be > 0");
  }
};

/// Everything that fixes parameter shapes.
struct ModelConfig {
  NetConfig net;
  AdapterConfig adapter;
  int frames = 24;
  int joints = 15;
  int channels = 3;
  int diffusion_steps = 50;

  int tokens() const { return net.layout == TokenLayout::grid ? frames * joints : frames; }
  int token_input_dim() const { return net.layout == TokenLayout::grid ? channels : joints * channels; }
  int row_width() const { return joints * channels; }

  void validate() const {
    net.validate();
    adapter.validate();
    if (frames < 1 || joints < 1 || channels < 1) throw ConfigError("sequence shape must be positive");
    if (diffusion_steps < 1) throw ConfigError("diffusion step count must be >= 1");
  }
};

// ---------------------------------------------------------------------------
// Parameter creation.

namespace detail {

template <typename S>
ad::Mat<S> uniform_init(int rows, int cols, Rng& rng) {
  const double bound = 1.0 / std::sqrt(double(rows));
  ad::Mat<S> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = S(uniform(rng, -bound, bound));
  return m;
}

template <typename S>
ad::Mat<S> gaussian_init(int rows, int cols, double sd, Rng& rng) {
  ad::Mat<S> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = S(gaussian(rng, 0.0, sd));
  return m;
}

template <typename S>
void add_linear(ad::ParamStore<S>& p, const std::string& name, int in, int out, Rng& rng) {
  p.add(name + ".w", uniform_init<S>(in, out, rng));
  p.add(name + ".b", ad::Mat<S>::Zero(1, out));
}

template <typename S>
void add_block(ad::ParamStore<S>& p, const std::string& prefix, const NetConfig& net, bool adaptive, Rng& rng) {
  const int d = net.dim;
  for (const char* n : {"q", "k", "v", "o"}) add_linear(p, prefix + ".attn." + n, d, d, rng);
  add_linear(p, prefix + ".ffn.up", d, net.ffn_dim(), rng);
  add_linear(p, prefix + ".ffn.down", net.ffn_dim(), d, rng);
  for (const char* site : {"norm1", "norm2"}) {
    const std::string base = prefix + "." + site;
    if (!adaptive) {
      p.add(base + ".gain", ad::Mat<S>::Ones(1, d));
      p.add(base + ".bias", ad::Mat<S>::Zero(1, d));
      continue;
    }
    // Zero weights and unit/zero biases: neutral modulation at init.
    for (const char* m : {"cond_scale", "cond_shift", "time_scale", "time_shift"}) {
      p.add(base + "." + m + ".w", ad::Mat<S>::Zero(d, d));
      const bool is_scale = std::string(m).find("scale") != std::string::npos;
      p.add(base + "." + m + ".b", is_scale ? ad::Mat<S>::Ones(1, d) : ad::Mat<S>::Zero(1, d));
    }
  }
}

template <typename S>
void add_embedding(ad::ParamStore<S>& p, const std::string& prefix, const ModelConfig& cfg, Rng& rng) {
  add_linear(p, prefix + ".proj", cfg.token_input_dim(), cfg.net.dim, rng);
  p.add(prefix + ".pos_t", gaussian_init<S>(cfg.frames, cfg.net.dim, 0.02, rng));
  if (cfg.net.layout == TokenLayout::grid) p.add(prefix + ".pos_v", gaussian_init<S>(cfg.joints, cfg.net.dim, 0.02, rng));
}

}  // namespace detail

/// Creates every trainable array of the encoder (enc.*) and generator (gen.*) in a fixed
/// order, so the parameter count and layout depend only on the config.
template <typename S = float>
ad::ParamStore<S> init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng = make_rng(seed, {0x1417ULL});
  ad::ParamStore<S> p;
  const int d = cfg.net.dim;
  detail::add_embedding(p, "enc", cfg, rng);
  for (int i = 0; i < cfg.net.layers; ++i) detail::add_block(p, "enc.blk" + std::to_string(i), cfg.net, false, rng);
  detail::add_linear(p, "enc.aux.z", d, d, rng);
  detail::add_linear(p, "enc.aux.t", d, d, rng);
  detail::add_linear(p, "enc.aux.tp", d, d, rng);

  detail::add_embedding(p, "gen", cfg, rng);
  detail::add_linear(p, "gen.temb", d, d, rng);
  for (int i = 0; i < cfg.net.layers; ++i) detail::add_block(p, "gen.blk" + std::to_string(i), cfg.net, true, rng);
  detail::add_linear(p, "gen.head", d, cfg.token_input_dim(), rng);
  return p;
}

// ---------------------------------------------------------------------------
// Forward pieces.

/// Fixed sinusoidal timestep table row for step t (1 x dim).
template <typename S>
ad::Mat<S> sinusoidal_embedding(int t, int dim) {
  ad::Mat<S> e(1, dim);
  for (int i = 0; i < dim; ++i) {
    const double freq = std::pow(10000.0, -double(2 * (i / 2)) / dim);
    e(0, i) = S(i % 2 == 0 ? std::sin(t * freq) : std::cos(t * freq));
  }
  return e;
}

template <typename S>
ad::Var<S> linear(ad::Tape<S>& tape, const ad::ParamStore<S>& p, const std::string& name, ad::Var<S> x) {
  return ad::affine(x, tape.param(p, name + ".w"), tape.param(p, name + ".b"));
}

/// LinearProj(x) + P_t (+ P_v). `x` is T x (V*C); result is tokens x dim.
template <typename S>
ad::Var<S> embed(ad::Tape<S>& tape, const ad::ParamStore<S>& p, const std::string& prefix,
                 const ModelConfig& cfg, ad::Var<S> x) {
  if (x.rows() != cfg.frames || x.cols() != cfg.row_width())
    throw ConfigError("input is " + std::to_string(x.rows()) + "x" + std::to_string(x.cols()) + ", expected " +
                      std::to_string(cfg.frames) + "x" + std::to_string(cfg.row_width()));
  const int T = cfg.frames, V = cfg.joints;
  if (cfg.net.layout == TokenLayout::frame) {
    auto tokens = linear(tape, p, prefix + ".proj", x);
    return ad::add(tokens, tape.param(p, prefix + ".pos_t"));
  }
  auto tokens = linear(tape, p, prefix + ".proj", ad::reshape(x, T * V, cfg.channels));
  // Broadcast P_t over joints and P_v over frames with constant one-hot selectors.
  ad::Mat<S> sel_t = ad::Mat<S>::Zero(T * V, T), sel_v = ad::Mat<S>::Zero(T * V, V);
  for (int t = 0; t < T; ++t)
    for (int v = 0; v < V; ++v) {
      sel_t(t * V + v, t) = S(1);
      sel_v(t * V + v, v) = S(1);
    }
  auto pos = ad::add(ad::matmul(tape.constant(sel_t), tape.param(p, prefix + ".pos_t")),
                     ad::matmul(tape.constant(sel_v), tape.param(p, prefix + ".pos_v")));
  return ad::add(tokens, pos);
}

/// Multi-head scaled dot-product self-attention with output projection.
template <typename S>
ad::Var<S> self_attention(ad::Tape<S>& tape, const ad::ParamStore<S>& p, const std::string& prefix,
                          const NetConfig& net, ad::Var<S> x) {
  auto q = linear(tape, p, prefix + ".q", x);
  auto k = linear(tape, p, prefix + ".k", x);
  auto v = linear(tape, p, prefix + ".v", x);
  const int dh = net.dim / net.heads;
  const S inv_sqrt = S(1.0 / std::sqrt(double(dh)));
  std::vector<ad::Var<S>> heads;
  heads.reserve(net.heads);
  for (int h = 0; h < net.heads; ++h) {
    auto qh = ad::slice_cols(q, h * dh, dh);
    auto kh = ad::slice_cols(k, h * dh, dh);
    auto vh = ad::slice_cols(v, h * dh, dh);
    auto att = ad::softmax_rows(ad::scale(ad::matmul_nt(qh, kh), inv_sqrt));
    heads.push_back(ad::matmul(att, vh));
  }
  auto merged = net.heads == 1 ? heads.front() : ad::concat_cols(heads);
  return linear(tape, p, prefix + ".o", merged);
}

template <typename S>
ad::Var<S> feed_forward(ad::Tape<S>& tape, const ad::ParamStore<S>& p, const std::string& prefix, ad::Var<S> x) {
  return linear(tape, p, prefix + ".down", ad::gelu(linear(tape, p, prefix + ".up", x)));
}

/// Per-block AdaLN inputs for the generator (one modulation per norm site).
template <typename S>
struct BlockModulation {
  AdaModulation<S> norm1, norm2;
};

template <typename S>
ad::Var<S> affine_layer_norm(ad::Tape<S>& tape, const ad::ParamStore<S>& p, const std::string& prefix, ad::Var<S> x) {
  return ad::add_row(ad::mul_row(ad::layer_norm_rows(x), tape.param(p, prefix + ".gain")),
                     tape.param(p, prefix + ".bias"));
}

/// Residual MSA then residual FFN, each followed by (adaptive) layer norm.
template <typename S>
ad::Var<S> transformer_block(ad::Tape<S>& tape, const ad::ParamStore<S>& p, const std::string& prefix,
                             const NetConfig& net, ad::Var<S> x, const BlockModulation<S>* mod = nullptr) {
  auto h = ad::add(x, self_attention(tape, p, prefix + ".attn", net, x));
  h = mod ? ada_layer_norm(h, mod->norm1) : affine_layer_norm(tape, p, prefix + ".norm1", h);
  auto out = ad::add(h, feed_forward(tape, p, prefix + ".ffn", h));
  return mod ? ada_layer_norm(out, mod->norm2) : affine_layer_norm(tape, p, prefix + ".norm2", out);
}

// ---------------------------------------------------------------------------
// Encoder f.

/// Auxiliary inputs of the idempotency branch: the noised condition feature and the two
/// diffusion steps it was produced with.
template <typename S>
struct EncoderAux {
  ad::Var<S> noised_feature;  // 1 x dim
  int t = 0;
  int t_prime = 0;
};

template <typename S>
struct Encoded {
  ad::Var<S> tokens;  // data tokens only (auxiliary tokens stripped)
  ad::Var<S> pooled;  // 1 x dim, unit norm
  int consumed_tokens = 0;
};

inline constexpr int kAuxTokens = 3;

template <typename S>
Encoded<S> encode(ad::Tape<S>& tape, const ad::ParamStore<S>& p, const ModelConfig& cfg, ad::Var<S> x,
                  const EncoderAux<S>* aux = nullptr) {
  auto tokens = embed(tape, p, "enc", cfg, x);
  const int l = int(tokens.rows());
  int skip = 0;
  if (aux) {
    if (aux->noised_feature.rows() != 1 || aux->noised_feature.cols() != cfg.net.dim)
      throw ConfigError("auxiliary feature must be 1 x " + std::to_string(cfg.net.dim));
    auto zt = linear(tape, p, "enc.aux.z", aux->noised_feature);
    auto tt = linear(tape, p, "enc.aux.t", tape.constant(sinusoidal_embedding<S>(aux->t, cfg.net.dim)));
    auto tp = linear(tape, p, "enc.aux.tp", tape.constant(sinusoidal_embedding<S>(aux->t_prime, cfg.net.dim)));
    tokens = ad::concat_rows<S>({zt, tt, tp, tokens});
    skip = kAuxTokens;
  }
  const int consumed = int(tokens.rows());
  for (int i = 0; i < cfg.net.layers; ++i)
    tokens = transformer_block(tape, p, "enc.blk" + std::to_string(i), cfg.net, tokens);
  if (skip) tokens = ad::slice_rows(tokens, skip, l);
  auto pooled = ad::l2_normalize_rows(ad::mean_rows(tokens));
  return {tokens, pooled, consumed};
}

/// Row-major T x (V*C) view of a sequence's coordinates, divided by `unit` (data scale).
template <typename S, typename Seq>
ad::Mat<S> sequence_matrix(const Seq& seq, double unit = 1.0) {
  ad::Mat<S> m(seq.frames, seq.joints * seq.channels);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = S(seq.data[std::size_t(i)] / unit);
  return m;
}

}  // namespace igm
