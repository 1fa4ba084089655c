#include "plab/nn.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "plab/rng.hpp"

namespace plab {

std::string_view to_string(Family f) {
  switch (f) {
    case Family::transformer: return "transformer";
    case Family::gated_mlp: return "gated_mlp";
    case Family::rnn: return "rnn";
    case Family::linear: return "linear";
  }
  return "unknown";
}

Family family_from_string(std::string_view s) {
  if (s == "transformer") return Family::transformer;
  if (s == "gated_mlp" || s == "gated-mlp") return Family::gated_mlp;
  if (s == "rnn") return Family::rnn;
  if (s == "linear") return Family::linear;
  throw std::invalid_argument("unknown architecture family: " + std::string(s));
}

void ArchDescriptor::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(std::string("invalid architecture: ") + what);
  };
  require(d_model > 0, "d_model must be positive");
  require(vocab_size > 0, "vocab_size must be positive");
  require(max_seq_len > 0, "max_seq_len must be positive");
  if (family == Family::transformer || family == Family::gated_mlp) {
    require(n_layers > 0, "n_layers must be positive");
    require(d_mlp > 0, "d_mlp must be positive");
  }
  if (family == Family::transformer) {
    require(n_heads > 0, "n_heads must be positive");
    require(d_model % n_heads == 0, "d_model must be divisible by n_heads");
  }
}

std::string ArchDescriptor::to_text() const {
  std::ostringstream os;
  os << "family=" << to_string(family) << " n_layers=" << n_layers << " d_model=" << d_model
     << " n_heads=" << n_heads << " d_mlp=" << d_mlp << " vocab_size=" << vocab_size
     << " max_seq_len=" << max_seq_len;
  return os.str();
}

ArchDescriptor ArchDescriptor::from_text(std::string_view text) {
  ArchDescriptor a;
  std::istringstream is{std::string(text)};
  std::string kv;
  while (is >> kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("malformed architecture field: " + kv);
    const std::string key = kv.substr(0, eq);
    const std::string val = kv.substr(eq + 1);
    if (key == "family") a.family = family_from_string(val);
    else if (key == "n_layers") a.n_layers = std::stoi(val);
    else if (key == "d_model") a.d_model = std::stoi(val);
    else if (key == "n_heads") a.n_heads = std::stoi(val);
    else if (key == "d_mlp") a.d_mlp = std::stoi(val);
    else if (key == "vocab_size") a.vocab_size = std::stoi(val);
    else if (key == "max_seq_len") a.max_seq_len = std::stoi(val);
    else throw std::invalid_argument("unknown architecture field: " + key);
  }
  a.validate();
  return a;
}

void ParamLayout::add(std::string name, int rows, int cols) {
  ParamSlot s{std::move(name), total_, rows, cols};
  total_ += s.size();
  slots_.push_back(std::move(s));
}

ParamLayout::ParamLayout(const ArchDescriptor& a) {
  a.validate();
  const int d = a.d_model, v = a.vocab_size, f = a.d_mlp;
  switch (a.family) {
    case Family::transformer:
      add("tok_emb", v, d);
      add("pos_emb", a.max_seq_len, d);
      for (int l = 0; l < a.n_layers; ++l) {
        const std::string p = "blocks." + std::to_string(l) + ".";
        add(p + "ln1.g", 1, d);
        add(p + "ln1.b", 1, d);
        add(p + "attn.w_qkv", d, 3 * d);
        add(p + "attn.b_qkv", 1, 3 * d);
        add(p + "attn.w_o", d, d);
        add(p + "attn.b_o", 1, d);
        add(p + "ln2.g", 1, d);
        add(p + "ln2.b", 1, d);
        add(p + "mlp.w_in", d, f);
        add(p + "mlp.b_in", 1, f);
        add(p + "mlp.w_out", f, d);
        add(p + "mlp.b_out", 1, d);
      }
      add("ln_f.g", 1, d);
      add("ln_f.b", 1, d);
      add("unembed.w", d, v);
      add("unembed.b", 1, v);
      break;
    case Family::gated_mlp:
      add("tok_emb", v, d);
      add("pos_emb", a.max_seq_len, d);
      for (int l = 0; l < a.n_layers; ++l) {
        const std::string p = "blocks." + std::to_string(l) + ".";
        add(p + "ln.g", 1, d);
        add(p + "ln.b", 1, d);
        add(p + "w_in", d, f);
        add(p + "b_in", 1, f);
        add(p + "w_gate", d, f);
        add(p + "b_gate", 1, f);
        add(p + "w_out", f, d);
        add(p + "b_out", 1, d);
      }
      add("ln_f.g", 1, d);
      add("ln_f.b", 1, d);
      add("unembed.w", d, v);
      add("unembed.b", 1, v);
      break;
    case Family::rnn:
      add("tok_emb", v, d);
      add("gru.w_x", d, 3 * d);
      add("gru.b_x", 1, 3 * d);
      add("gru.w_h", d, 3 * d);
      add("gru.b_h", 1, 3 * d);
      add("unembed.w", d, v);
      add("unembed.b", 1, v);
      break;
    case Family::linear:
      // One embedding row per (position, token) pair; the hidden state at t is
      // the sum of rows for positions <= t.
      add("emb", a.max_seq_len * v, d);
      add("mix.w", d, d);
      add("mix.b", 1, d);
      add("unembed.w", d, v);
      add("unembed.b", 1, v);
      break;
  }
}

const ParamSlot& ParamLayout::at(std::string_view name) const {
  for (const auto& s : slots_) {
    if (s.name == name) return s;
  }
  throw std::out_of_range("no parameter named " + std::string(name));
}

bool ParamLayout::contains(std::string_view name) const {
  return std::any_of(slots_.begin(), slots_.end(), [&](const ParamSlot& s) { return s.name == name; });
}

bool ModelState::all_finite() const {
  return std::all_of(params.begin(), params.end(), [](float x) { return std::isfinite(x); });
}

ModelState init(const ArchDescriptor& arch, std::uint64_t seed) {
  ParamLayout layout(arch);
  ModelState m{arch, std::vector<float>(layout.total(), 0.0f)};
  Rng rng(seed, "init");
  const double rec_std = 1.0 / std::sqrt(static_cast<double>(arch.d_model));
  for (const auto& s : layout.slots()) {
    auto ends_with = [&](std::string_view suf) {
      return s.name.size() >= suf.size() && s.name.compare(s.name.size() - suf.size(), suf.size(), suf) == 0;
    };
    float* p = m.params.data() + s.offset;
    if (ends_with(".g")) {
      std::fill(p, p + s.size(), 1.0f);
    } else if (s.rows == 1) {
      // biases stay zero
    } else {
      const double sd = (s.name == "gru.w_h" || s.name == "gru.w_x") ? rec_std : 0.02;
      for (std::size_t i = 0; i < s.size(); ++i) p[i] = static_cast<float>(sd * rng.normal());
    }
  }
  return m;
}

void AblationMask::validate(const ArchDescriptor& arch) const {
  if (empty()) return;
  if (arch.family != Family::transformer) {
    throw std::invalid_argument("head ablation requires the transformer family");
  }
  for (auto [l, h] : zeroed_heads) {
    if (l < 0 || l >= arch.n_layers || h < 0 || h >= arch.n_heads) {
      throw std::invalid_argument("ablated head (" + std::to_string(l) + "," + std::to_string(h) +
                                  ") outside architecture bounds");
    }
  }
}

void validate_batch(const ArchDescriptor& arch, const TokenBatch& b) {
  if (b.n <= 0) throw std::invalid_argument("empty batch");
  if (b.seq_len <= 1) throw std::invalid_argument("sequence length must exceed 1");
  if (b.seq_len > arch.max_seq_len) {
    throw std::invalid_argument("sequence length " + std::to_string(b.seq_len) + " exceeds max_seq_len " +
                                std::to_string(arch.max_seq_len));
  }
  const auto cells = static_cast<std::size_t>(b.n) * static_cast<std::size_t>(b.seq_len);
  if (b.tokens.size() != cells || b.loss_mask.size() != cells) {
    throw std::invalid_argument("batch buffers do not match n * seq_len");
  }
  for (auto t : b.tokens) {
    if (t < 0 || t >= arch.vocab_size) {
      throw std::invalid_argument("token id " + std::to_string(t) + " out of range");
    }
  }
  for (int n = 0; n < b.n; ++n) {
    if (b.is_target(n, 0)) throw std::invalid_argument("position 0 cannot be a target");
  }
}

// ---------------------------------------------------------------------------
// Engine internals.

namespace {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using CMap = Eigen::Map<const Mat<S>>;
template <typename S>
using MMap = Eigen::Map<Mat<S>>;
template <typename S>
using CRow = Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>;
template <typename S>
using MRow = Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>>;
template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

constexpr double kLnEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)


// Parameter and gradient views keyed by slot name.
template <typename S>
struct Views {
  const ParamLayout* layout;
  std::span<const S> params;
  std::span<S> grad;

  CMap<S> w(std::string_view name) const {
    const auto& s = layout->at(name);
    return CMap<S>(params.data() + s.offset, s.rows, s.cols);
  }
  CRow<S> b(std::string_view name) const {
    const auto& s = layout->at(name);
    return CRow<S>(params.data() + s.offset, static_cast<Eigen::Index>(s.size()));
  }
  MMap<S> gw(std::string_view name) const {
    const auto& s = layout->at(name);
    return MMap<S>(grad.data() + s.offset, s.rows, s.cols);
  }
  MRow<S> gb(std::string_view name) const {
    const auto& s = layout->at(name);
    return MRow<S>(grad.data() + s.offset, static_cast<Eigen::Index>(s.size()));
  }
};

template <typename S>
struct LayerNormCache {
  Mat<S> xhat;
  Vec<S> rstd;
};

template <typename S>
void layer_norm_forward(const Mat<S>& x, const CRow<S>& g, const CRow<S>& b, LayerNormCache<S>& c, Mat<S>& y) {
  const Eigen::Index d = x.cols();
  const Vec<S> mean = x.rowwise().sum() / S(d);
  c.xhat = x.colwise() - mean;
  c.rstd = ((c.xhat.array().square().rowwise().sum() / S(d)) + S(kLnEps)).rsqrt();
  c.xhat.array().colwise() *= c.rstd.array();
  y = (c.xhat.array().rowwise() * g.array()).matrix();
  y.rowwise() += b;
}

// Accumulates into dx.
template <typename S>
void layer_norm_backward(const Mat<S>& dy, const CRow<S>& g, const LayerNormCache<S>& c, MRow<S> dg, MRow<S> db,
                         Mat<S>& dx) {
  const Eigen::Index d = dy.cols();
  dg += dy.cwiseProduct(c.xhat).colwise().sum();
  db += dy.colwise().sum();
  const Mat<S> dxhat = (dy.array().rowwise() * g.array()).matrix();
  const Vec<S> m1 = dxhat.rowwise().sum() / S(d);
  const Vec<S> m2 = dxhat.cwiseProduct(c.xhat).rowwise().sum() / S(d);
  dx.array() += ((dxhat.colwise() - m1).array() - c.xhat.array().colwise() * m2.array()).colwise() * c.rstd.array();
}

// GELU (tanh form). gelu_tanh stores tanh(c (u + 0.044715 u^3)) for reuse in
// the backward pass.
template <typename S>
void gelu_forward(const Mat<S>& u, Mat<S>& th, Mat<S>& out) {
  th = (S(kGeluC) * (u.array() + S(0.044715) * u.array().cube())).tanh().matrix();
  out = (S(0.5) * u.array() * (S(1) + th.array())).matrix();
}

template <typename S>
auto gelu_derivative(const Mat<S>& u, const Mat<S>& th) {
  return S(0.5) * (S(1) + th.array()) +
         S(0.5) * u.array() * (S(1) - th.array().square()) * S(kGeluC) *
             (S(1) + S(3 * 0.044715) * u.array().square());
}

// Output head: logits = hidden * W + b, cross-entropy on target positions.
// Writes dhidden when a gradient is requested.
template <typename S>
// `batch` supplies the targets; hidden holds t_in positions per sequence, which
// is batch.seq_len or one less when the final input position was dropped.
double head_forward_backward(const Mat<S>& hidden, const Views<S>& v, const TokenBatch& batch, int t_in,
                             const typename Engine<S>::Request& req, Mat<S>& logits, Mat<S>& dhidden) {
  const auto wu = v.w("unembed.w");
  const auto bu = v.b("unembed.b");
  logits.noalias() = hidden * wu;
  logits.rowwise() += bu;
  const int n = batch.n, t_len = std::min(batch.seq_len, t_in + 1);
  const Eigen::Index vocab = logits.cols();
  const bool want_grad = !req.grad.empty();
  Mat<S> dlogits;
  if (want_grad) dlogits = Mat<S>::Zero(logits.rows(), vocab);
  if (req.per_example) req.per_example->assign(static_cast<std::size_t>(n), 0.0);
  double total = 0.0;
  const S inv_n = S(1) / S(n);
  for (int s = 0; s < n; ++s) {
    double seq_loss = 0.0;
    for (int t = 1; t < t_len; ++t) {
      if (!batch.is_target(s, t)) continue;
      const Eigen::Index row = static_cast<Eigen::Index>(s) * t_in + (t - 1);
      const int target = batch.token(s, t);
      const auto lrow = logits.row(row);
      const double mx = static_cast<double>(lrow.maxCoeff());
      double z = 0.0;
      for (Eigen::Index k = 0; k < vocab; ++k) z += std::exp(static_cast<double>(lrow(k)) - mx);
      const double lse = mx + std::log(z);
      seq_loss += lse - static_cast<double>(lrow(target));
      if (want_grad) {
        for (Eigen::Index k = 0; k < vocab; ++k) {
          dlogits(row, k) = static_cast<S>(std::exp(static_cast<double>(lrow(k)) - lse)) * inv_n;
        }
        dlogits(row, target) -= inv_n;
      }
    }
    if (req.per_example) (*req.per_example)[static_cast<std::size_t>(s)] = seq_loss;
    total += seq_loss;
  }
  if (req.logits) {
    req.logits->resize(static_cast<std::size_t>(logits.size()));
    for (Eigen::Index i = 0; i < logits.size(); ++i) (*req.logits)[static_cast<std::size_t>(i)] = static_cast<float>(logits.data()[i]);
  }
  if (want_grad) {
    v.gw("unembed.w").noalias() += hidden.transpose() * dlogits;
    v.gb("unembed.b") += dlogits.colwise().sum();
    dhidden.noalias() = dlogits * wu.transpose();
  }
  return total / n;
}

template <typename S>
struct FamilyImpl {
  explicit FamilyImpl(const ArchDescriptor& a) : arch(a), layout(a) {}
  virtual ~FamilyImpl() = default;
  virtual double run(const Views<S>& v, const TokenBatch& batch, const typename Engine<S>::Request& req) = 0;

  ArchDescriptor arch;
  ParamLayout layout;
  const TokenBatch* targets = nullptr;
  TokenBatch trimmed;
  Mat<S> logits, dhidden;
};

// --- transformer -----------------------------------------------------------

template <typename S>
struct TransformerImpl final : FamilyImpl<S> {
  using FamilyImpl<S>::FamilyImpl;

  struct Layer {
    Mat<S> h1, qkv, o, h2, u, th, a;
    LayerNormCache<S> ln1, ln2;
    std::vector<S> probs;  // [n][head][t][t], causal, zero above the diagonal
  };
  std::vector<Layer> layers;
  LayerNormCache<S> lnf;
  Mat<S> x, hf;
  Mat<S> dx, dh, dqkv, d_o, da, dp, dsc;

  void embed(const Views<S>& v, const TokenBatch& batch) {
    const int n = batch.n, t_len = batch.seq_len;
    const auto tok = v.w("tok_emb");
    const auto pos = v.w("pos_emb");
    x.resize(static_cast<Eigen::Index>(n) * t_len, this->arch.d_model);
    for (int s = 0; s < n; ++s) {
      for (int t = 0; t < t_len; ++t) {
        x.row(static_cast<Eigen::Index>(s) * t_len + t) = tok.row(batch.token(s, t)) + pos.row(t);
      }
    }
  }

  double run(const Views<S>& v, const TokenBatch& batch, const typename Engine<S>::Request& req) override {
    const ArchDescriptor& A = this->arch;
    const int n = batch.n, t_len = batch.seq_len, d = A.d_model, heads = A.n_heads, hd = d / heads;
    const Eigen::Index rows = static_cast<Eigen::Index>(n) * t_len;
    const S scale = S(1) / std::sqrt(S(hd));
    const S neg_inf = -std::numeric_limits<S>::infinity();
    layers.resize(static_cast<std::size_t>(A.n_layers));
    auto ablated = [&](int l, int h) { return req.mask && req.mask->zeroed_heads.count({l, h}) > 0; };
    auto probs_of = [&](Layer& L, int s, int h) {
      return MMap<S>(L.probs.data() + (static_cast<std::size_t>(s) * heads + h) * t_len * t_len, t_len, t_len);
    };

    embed(v, batch);
    for (int l = 0; l < A.n_layers; ++l) {
      Layer& L = layers[static_cast<std::size_t>(l)];
      const std::string p = "blocks." + std::to_string(l) + ".";
      layer_norm_forward<S>(x, v.b(p + "ln1.g"), v.b(p + "ln1.b"), L.ln1, L.h1);
      L.qkv.noalias() = L.h1 * v.w(p + "attn.w_qkv");
      L.qkv.rowwise() += v.b(p + "attn.b_qkv");
      L.o.setZero(rows, d);
      L.probs.resize(static_cast<std::size_t>(n) * heads * t_len * t_len);
      for (int s = 0; s < n; ++s) {
        const Eigen::Index r0 = static_cast<Eigen::Index>(s) * t_len;
        for (int h = 0; h < heads; ++h) {
          auto P = probs_of(L, s, h);
          const auto q = L.qkv.block(r0, h * hd, t_len, hd);
          const auto k = L.qkv.block(r0, d + h * hd, t_len, hd);
          P.noalias() = q.lazyProduct(k.transpose()) * scale;
          for (int i = 0; i < t_len; ++i) {
            auto row = P.row(i);
            for (int j = i + 1; j < t_len; ++j) row(j) = neg_inf;
            const S mx = row.head(i + 1).maxCoeff();
            row = (row.array() - mx).exp();
            row /= row.sum();
          }
          if (ablated(l, h)) continue;
          L.o.block(r0, h * hd, t_len, hd).noalias() = P.lazyProduct(L.qkv.block(r0, 2 * d + h * hd, t_len, hd));
        }
      }
      x.noalias() += L.o * v.w(p + "attn.w_o");
      x.rowwise() += v.b(p + "attn.b_o");
      layer_norm_forward<S>(x, v.b(p + "ln2.g"), v.b(p + "ln2.b"), L.ln2, L.h2);
      L.u.noalias() = L.h2 * v.w(p + "mlp.w_in");
      L.u.rowwise() += v.b(p + "mlp.b_in");
      gelu_forward<S>(L.u, L.th, L.a);
      x.noalias() += L.a * v.w(p + "mlp.w_out");
      x.rowwise() += v.b(p + "mlp.b_out");
    }
    layer_norm_forward<S>(x, v.b("ln_f.g"), v.b("ln_f.b"), lnf, hf);
    const double loss = head_forward_backward<S>(hf, v, *this->targets, batch.seq_len, req, this->logits, this->dhidden);
    if (req.grad.empty()) return loss;

    dx.setZero(rows, d);
    layer_norm_backward<S>(this->dhidden, v.b("ln_f.g"), lnf, v.gb("ln_f.g"), v.gb("ln_f.b"), dx);
    for (int l = A.n_layers - 1; l >= 0; --l) {
      Layer& L = layers[static_cast<std::size_t>(l)];
      const std::string p = "blocks." + std::to_string(l) + ".";
      // MLP
      v.gw(p + "mlp.w_out").noalias() += L.a.transpose() * dx;
      v.gb(p + "mlp.b_out") += dx.colwise().sum();
      da.noalias() = dx * v.w(p + "mlp.w_out").transpose();
      da.array() *= gelu_derivative<S>(L.u, L.th);
      v.gw(p + "mlp.w_in").noalias() += L.h2.transpose() * da;
      v.gb(p + "mlp.b_in") += da.colwise().sum();
      dh.noalias() = da * v.w(p + "mlp.w_in").transpose();
      layer_norm_backward<S>(dh, v.b(p + "ln2.g"), L.ln2, v.gb(p + "ln2.g"), v.gb(p + "ln2.b"), dx);
      // attention
      v.gw(p + "attn.w_o").noalias() += L.o.transpose() * dx;
      v.gb(p + "attn.b_o") += dx.colwise().sum();
      d_o.noalias() = dx * v.w(p + "attn.w_o").transpose();
      dqkv.setZero(rows, 3 * d);
      for (int s = 0; s < n; ++s) {
        const Eigen::Index r0 = static_cast<Eigen::Index>(s) * t_len;
        for (int h = 0; h < heads; ++h) {
          if (ablated(l, h)) continue;
          const auto P = probs_of(L, s, h);
          const auto dout = d_o.block(r0, h * hd, t_len, hd);
          dp.noalias() = dout * L.qkv.block(r0, 2 * d + h * hd, t_len, hd).transpose();
          dqkv.block(r0, 2 * d + h * hd, t_len, hd).noalias() += P.transpose() * dout;
          const Vec<S> rowdot = P.cwiseProduct(dp).rowwise().sum();
          dsc = (P.array() * (dp.colwise() - rowdot).array() * scale).matrix();
          dqkv.block(r0, h * hd, t_len, hd).noalias() += dsc * L.qkv.block(r0, d + h * hd, t_len, hd);
          dqkv.block(r0, d + h * hd, t_len, hd).noalias() += dsc.transpose() * L.qkv.block(r0, h * hd, t_len, hd);
        }
      }
      v.gw(p + "attn.w_qkv").noalias() += L.h1.transpose() * dqkv;
      v.gb(p + "attn.b_qkv") += dqkv.colwise().sum();
      dh.noalias() = dqkv * v.w(p + "attn.w_qkv").transpose();
      layer_norm_backward<S>(dh, v.b(p + "ln1.g"), L.ln1, v.gb(p + "ln1.g"), v.gb(p + "ln1.b"), dx);
    }
    auto gtok = v.gw("tok_emb");
    auto gpos = v.gw("pos_emb");
    for (int s = 0; s < n; ++s) {
      for (int t = 0; t < t_len; ++t) {
        const auto row = dx.row(static_cast<Eigen::Index>(s) * t_len + t);
        gtok.row(batch.token(s, t)) += row;
        gpos.row(t) += row;
      }
    }
    return loss;
  }
};

// --- gated MLP -------------------------------------------------------------
// Per layer: h = LN(x); s_t = mean of h over positions <= t;
// x += (gelu(h W_in + b_in) * gelu(s W_gate + b_gate)) W_out + b_out.

template <typename S>
struct GatedMlpImpl final : FamilyImpl<S> {
  using FamilyImpl<S>::FamilyImpl;

  struct Layer {
    Mat<S> h, s, u, g, tu, tg, gu, gg;
    LayerNormCache<S> ln;
  };
  std::vector<Layer> layers;
  LayerNormCache<S> lnf;
  Mat<S> x, hf, dx, dh, ds, du, dg, a;

  double run(const Views<S>& v, const TokenBatch& batch, const typename Engine<S>::Request& req) override {
    const ArchDescriptor& A = this->arch;
    const int n = batch.n, t_len = batch.seq_len, d = A.d_model;
    const Eigen::Index rows = static_cast<Eigen::Index>(n) * t_len;
    layers.resize(static_cast<std::size_t>(A.n_layers));
    const auto tok = v.w("tok_emb");
    const auto pos = v.w("pos_emb");
    x.resize(rows, d);
    for (int s = 0; s < n; ++s) {
      for (int t = 0; t < t_len; ++t) {
        x.row(static_cast<Eigen::Index>(s) * t_len + t) = tok.row(batch.token(s, t)) + pos.row(t);
      }
    }
    for (int l = 0; l < A.n_layers; ++l) {
      Layer& L = layers[static_cast<std::size_t>(l)];
      const std::string p = "blocks." + std::to_string(l) + ".";
      layer_norm_forward<S>(x, v.b(p + "ln.g"), v.b(p + "ln.b"), L.ln, L.h);
      L.s.resize(rows, d);
      for (int s = 0; s < n; ++s) {
        const Eigen::Index r0 = static_cast<Eigen::Index>(s) * t_len;
        Eigen::Matrix<S, 1, Eigen::Dynamic> acc = Eigen::Matrix<S, 1, Eigen::Dynamic>::Zero(d);
        for (int t = 0; t < t_len; ++t) {
          acc += L.h.row(r0 + t);
          L.s.row(r0 + t) = acc / S(t + 1);
        }
      }
      L.u.noalias() = L.h * v.w(p + "w_in");
      L.u.rowwise() += v.b(p + "b_in");
      L.g.noalias() = L.s * v.w(p + "w_gate");
      L.g.rowwise() += v.b(p + "b_gate");
      gelu_forward<S>(L.u, L.tu, L.gu);
      gelu_forward<S>(L.g, L.tg, L.gg);
      a = L.gu.cwiseProduct(L.gg);
      x.noalias() += a * v.w(p + "w_out");
      x.rowwise() += v.b(p + "b_out");
    }
    layer_norm_forward<S>(x, v.b("ln_f.g"), v.b("ln_f.b"), lnf, hf);
    const double loss = head_forward_backward<S>(hf, v, *this->targets, batch.seq_len, req, this->logits, this->dhidden);
    if (req.grad.empty()) return loss;

    dx.setZero(rows, d);
    layer_norm_backward<S>(this->dhidden, v.b("ln_f.g"), lnf, v.gb("ln_f.g"), v.gb("ln_f.b"), dx);
    for (int l = A.n_layers - 1; l >= 0; --l) {
      Layer& L = layers[static_cast<std::size_t>(l)];
      const std::string p = "blocks." + std::to_string(l) + ".";
      a = L.gu.cwiseProduct(L.gg);
      v.gw(p + "w_out").noalias() += a.transpose() * dx;
      v.gb(p + "b_out") += dx.colwise().sum();
      Mat<S> dact = dx * v.w(p + "w_out").transpose();
      du = (dact.array() * L.gg.array() * gelu_derivative<S>(L.u, L.tu)).matrix();
      dg = (dact.array() * L.gu.array() * gelu_derivative<S>(L.g, L.tg)).matrix();
      v.gw(p + "w_in").noalias() += L.h.transpose() * du;
      v.gb(p + "b_in") += du.colwise().sum();
      v.gw(p + "w_gate").noalias() += L.s.transpose() * dg;
      v.gb(p + "b_gate") += dg.colwise().sum();
      dh.noalias() = du * v.w(p + "w_in").transpose();
      ds.noalias() = dg * v.w(p + "w_gate").transpose();
      for (int s = 0; s < n; ++s) {
        const Eigen::Index r0 = static_cast<Eigen::Index>(s) * t_len;
        Eigen::Matrix<S, 1, Eigen::Dynamic> acc = Eigen::Matrix<S, 1, Eigen::Dynamic>::Zero(d);
        for (int t = t_len - 1; t >= 0; --t) {
          acc += ds.row(r0 + t) / S(t + 1);
          dh.row(r0 + t) += acc;
        }
      }
      layer_norm_backward<S>(dh, v.b(p + "ln.g"), L.ln, v.gb(p + "ln.g"), v.gb(p + "ln.b"), dx);
    }
    auto gtok = v.gw("tok_emb");
    auto gpos = v.gw("pos_emb");
    for (int s = 0; s < n; ++s) {
      for (int t = 0; t < t_len; ++t) {
        const auto row = dx.row(static_cast<Eigen::Index>(s) * t_len + t);
        gtok.row(batch.token(s, t)) += row;
        gpos.row(t) += row;
      }
    }
    return loss;
  }
};

// --- GRU -------------------------------------------------------------------
// Gate order in the 3d-wide blocks: update z, reset r, candidate n.
// z = sig(x Wz + h Uz), r = sig(x Wr + h Ur), n = tanh(x Wn + r * (h Un)),
// h' = (1 - z) * n + z * h. Internally stored time-major.

template <typename S>
struct RnnImpl final : FamilyImpl<S> {
  using FamilyImpl<S>::FamilyImpl;

  Mat<S> xs, gx, gh, hs, zg, rg, ng, hidden, dhs, dgx, dgh_t, dxs;

  double run(const Views<S>& v, const TokenBatch& batch, const typename Engine<S>::Request& req) override {
    const int n = batch.n, t_len = batch.seq_len, d = this->arch.d_model;
    const Eigen::Index rows = static_cast<Eigen::Index>(n) * t_len;
    auto tm = [&](int t, int s) { return static_cast<Eigen::Index>(t) * n + s; };   // time-major row
    auto bm = [&](int t, int s) { return static_cast<Eigen::Index>(s) * t_len + t; };  // batch-major row
    const auto tok = v.w("tok_emb");
    const auto wx = v.w("gru.w_x");
    const auto wh = v.w("gru.w_h");
    const auto bx = v.b("gru.b_x");
    const auto bh = v.b("gru.b_h");
    xs.resize(rows, d);
    for (int t = 0; t < t_len; ++t)
      for (int s = 0; s < n; ++s) xs.row(tm(t, s)) = tok.row(batch.token(s, t));
    gx.noalias() = xs * wx;
    gx.rowwise() += bx;
    gh.resize(rows, 3 * d);
    hs.resize(rows, d);
    zg.resize(rows, d);
    rg.resize(rows, d);
    ng.resize(rows, d);
    Mat<S> hprev = Mat<S>::Zero(n, d);
    for (int t = 0; t < t_len; ++t) {
      auto ght = gh.middleRows(static_cast<Eigen::Index>(t) * n, n);
      ght.noalias() = hprev * wh;
      ght.rowwise() += bh;
      const auto gxt = gx.middleRows(static_cast<Eigen::Index>(t) * n, n);
      auto z = zg.middleRows(static_cast<Eigen::Index>(t) * n, n);
      auto r = rg.middleRows(static_cast<Eigen::Index>(t) * n, n);
      auto c = ng.middleRows(static_cast<Eigen::Index>(t) * n, n);
      z = (S(1) / (S(1) + (-(gxt.leftCols(d) + ght.leftCols(d)).array()).exp())).matrix();
      r = (S(1) / (S(1) + (-(gxt.middleCols(d, d) + ght.middleCols(d, d)).array()).exp())).matrix();
      c = (gxt.rightCols(d).array() + r.array() * ght.rightCols(d).array()).tanh().matrix();
      auto ht = hs.middleRows(static_cast<Eigen::Index>(t) * n, n);
      ht = ((S(1) - z.array()) * c.array() + z.array() * hprev.array()).matrix();
      hprev = ht;
    }
    hidden.resize(rows, d);
    for (int t = 0; t < t_len; ++t)
      for (int s = 0; s < n; ++s) hidden.row(bm(t, s)) = hs.row(tm(t, s));
    const double loss = head_forward_backward<S>(hidden, v, *this->targets, batch.seq_len, req, this->logits, this->dhidden);
    if (req.grad.empty()) return loss;

    dgx.resize(rows, 3 * d);
    Mat<S> dh_next = Mat<S>::Zero(n, d);
    Mat<S> dgh(n, 3 * d);
    auto gwh = v.gw("gru.w_h");
    auto gbh = v.gb("gru.b_h");
    for (int t = t_len - 1; t >= 0; --t) {
      Mat<S> dht = dh_next;
      for (int s = 0; s < n; ++s) dht.row(s) += this->dhidden.row(bm(t, s));
      const Eigen::Index o = static_cast<Eigen::Index>(t) * n;
      const auto z = zg.middleRows(o, n).array();
      const auto r = rg.middleRows(o, n).array();
      const auto c = ng.middleRows(o, n).array();
      const auto ghn = gh.middleRows(o, n).rightCols(d).array();
      Mat<S> hp = t > 0 ? Mat<S>(hs.middleRows(o - n, n)) : Mat<S>::Zero(n, d);
      const auto dha = dht.array();
      const auto dcn = (dha * (S(1) - z) * (S(1) - c * c)).eval();
      const auto dz = (dha * (hp.array() - c) * z * (S(1) - z)).eval();
      const auto dr = (dcn * ghn * r * (S(1) - r)).eval();
      auto dgxt = dgx.middleRows(o, n);
      dgxt.leftCols(d) = dz.matrix();
      dgxt.middleCols(d, d) = dr.matrix();
      dgxt.rightCols(d) = dcn.matrix();
      dgh.leftCols(d) = dz.matrix();
      dgh.middleCols(d, d) = dr.matrix();
      dgh.rightCols(d) = (dcn * r).matrix();
      gwh.noalias() += hp.transpose() * dgh;
      gbh += dgh.colwise().sum();
      dh_next = (dha * z).matrix();
      dh_next.noalias() += dgh * wh.transpose();
    }
    v.gw("gru.w_x").noalias() += xs.transpose() * dgx;
    v.gb("gru.b_x") += dgx.colwise().sum();
    dxs.noalias() = dgx * wx.transpose();
    auto gtok = v.gw("tok_emb");
    for (int t = 0; t < t_len; ++t)
      for (int s = 0; s < n; ++s) gtok.row(batch.token(s, t)) += dxs.row(tm(t, s));
    return loss;
  }
};

// --- two-layer linear ------------------------------------------------------
// e_t = sum_{p <= t} emb[p, tok_p];  h = e W_mix + b;  logits = h W_U + b_U.

template <typename S>
struct LinearImpl final : FamilyImpl<S> {
  using FamilyImpl<S>::FamilyImpl;

  Mat<S> e, h, de, dh;

  double run(const Views<S>& v, const TokenBatch& batch, const typename Engine<S>::Request& req) override {
    const int n = batch.n, t_len = batch.seq_len, d = this->arch.d_model, vocab = this->arch.vocab_size;
    const Eigen::Index rows = static_cast<Eigen::Index>(n) * t_len;
    const auto emb = v.w("emb");
    e.resize(rows, d);
    for (int s = 0; s < n; ++s) {
      Eigen::Matrix<S, 1, Eigen::Dynamic> acc = Eigen::Matrix<S, 1, Eigen::Dynamic>::Zero(d);
      for (int t = 0; t < t_len; ++t) {
        acc += emb.row(static_cast<Eigen::Index>(t) * vocab + batch.token(s, t));
        e.row(static_cast<Eigen::Index>(s) * t_len + t) = acc;
      }
    }
    h.noalias() = e * v.w("mix.w");
    h.rowwise() += v.b("mix.b");
    const double loss = head_forward_backward<S>(h, v, *this->targets, batch.seq_len, req, this->logits, this->dhidden);
    if (req.grad.empty()) return loss;
    v.gw("mix.w").noalias() += e.transpose() * this->dhidden;
    v.gb("mix.b") += this->dhidden.colwise().sum();
    de.noalias() = this->dhidden * v.w("mix.w").transpose();
    auto gemb = v.gw("emb");
    for (int s = 0; s < n; ++s) {
      Eigen::Matrix<S, 1, Eigen::Dynamic> acc = Eigen::Matrix<S, 1, Eigen::Dynamic>::Zero(d);
      for (int t = t_len - 1; t >= 0; --t) {
        acc += de.row(static_cast<Eigen::Index>(s) * t_len + t);
        gemb.row(static_cast<Eigen::Index>(t) * vocab + batch.token(s, t)) += acc;
      }
    }
    return loss;
  }
};

template <typename S>
std::unique_ptr<FamilyImpl<S>> make_impl(const ArchDescriptor& a) {
  switch (a.family) {
    case Family::transformer: return std::make_unique<TransformerImpl<S>>(a);
    case Family::gated_mlp: return std::make_unique<GatedMlpImpl<S>>(a);
    case Family::rnn: return std::make_unique<RnnImpl<S>>(a);
    case Family::linear: return std::make_unique<LinearImpl<S>>(a);
  }
  throw std::invalid_argument("unknown family");
}

}  // namespace

template <typename S>
struct Engine<S>::Impl {
  std::unique_ptr<FamilyImpl<S>> family;
  // Eigen peels unaligned heads off vectorised reductions, so the summation
  // order follows the buffer address. Working on owned aligned copies keeps
  // results bit-stable across allocations.
  std::vector<S, Eigen::aligned_allocator<S>> params;
  std::vector<S, Eigen::aligned_allocator<S>> grad;
};

template <typename S>
Engine<S>::Engine(const ArchDescriptor& arch) : impl_(std::make_unique<Impl>()) {
  impl_->family = make_impl<S>(arch);
}

template <typename S>
Engine<S>::~Engine() = default;
template <typename S>
Engine<S>::Engine(Engine&&) noexcept = default;
template <typename S>
Engine<S>& Engine<S>::operator=(Engine&&) noexcept = default;

template <typename S>
const ArchDescriptor& Engine<S>::arch() const {
  return impl_->family->arch;
}

template <typename S>
double Engine<S>::run(std::span<const S> params, const TokenBatch& batch, const Request& req) {
  auto& fam = *impl_->family;
  if (params.size() != fam.layout.total()) throw std::invalid_argument("parameter vector has wrong length");
  if (!req.grad.empty() && req.grad.size() != params.size()) {
    throw std::invalid_argument("gradient buffer has wrong length");
  }
  validate_batch(fam.arch, batch);
  if (req.mask) req.mask->validate(fam.arch);
  auto& own_p = impl_->params;
  auto& own_g = impl_->grad;
  own_p.assign(params.begin(), params.end());
  if (!req.grad.empty()) own_g.assign(params.size(), S(0));
  Views<S> v{&fam.layout, std::span<const S>(own_p.data(), own_p.size()),
             req.grad.empty() ? std::span<S>() : std::span<S>(own_g.data(), own_g.size())};
  // The last position is never an input to a prediction, so it is dropped
  // unless full logits were asked for.
  fam.targets = &batch;
  const TokenBatch* inputs = &batch;
  if (!req.logits && batch.seq_len > 2) {
    TokenBatch& tb = fam.trimmed;
    tb.n = batch.n;
    tb.seq_len = batch.seq_len - 1;
    tb.tokens.resize(static_cast<std::size_t>(tb.n) * tb.seq_len);
    tb.loss_mask.resize(tb.tokens.size());
    for (int s = 0; s < batch.n; ++s) {
      for (int t = 0; t < tb.seq_len; ++t) {
        const std::size_t i = static_cast<std::size_t>(s) * tb.seq_len + t;
        tb.tokens[i] = batch.token(s, t);
        tb.loss_mask[i] = batch.is_target(s, t) ? 1 : 0;
      }
    }
    inputs = &tb;
  }
  const double loss = fam.run(v, *inputs, req);
  fam.targets = nullptr;
  if (!req.grad.empty()) std::copy(own_g.begin(), own_g.end(), req.grad.begin());
  if (!std::isfinite(loss)) {
    throw std::runtime_error("non-finite loss (" + std::to_string(loss) + ") on a batch of " +
                             std::to_string(batch.n) + " sequences");
  }
  return loss;
}

template class Engine<float>;
template class Engine<double>;

ForwardResult forward(const ModelState& model, const TokenBatch& batch, const AblationMask* mask) {
  Engine<float> engine(model.arch);
  ForwardResult r;
  r.n = batch.n;
  r.seq_len = batch.seq_len;
  r.vocab = model.arch.vocab_size;
  Engine<float>::Request req;
  req.per_example = &r.per_example_loss;
  req.logits = &r.logits;
  req.mask = mask;
  r.loss = engine.run(model.params, batch, req);
  return r;
}

std::vector<float> backward(const ModelState& model, const TokenBatch& batch) {
  Engine<float> engine(model.arch);
  std::vector<float> grad(model.params.size());
  Engine<float>::Request req;
  req.grad = grad;
  engine.run(model.params, batch, req);
  return grad;
}

double loss_f64(const ArchDescriptor& arch, std::span<const double> params, const TokenBatch& batch) {
  Engine<double> engine(arch);
  return engine.run(params, batch, {});
}

double loss_and_gradient_f64(const ArchDescriptor& arch, std::span<const double> params, const TokenBatch& batch,
                             std::span<double> grad) {
  Engine<double> engine(arch);
  Engine<double>::Request req;
  req.grad = grad;
  return engine.run(params, batch, req);
}

HessianOperator::HessianOperator(const ModelState& model, TokenBatch batch, double eps0)
    : arch_(model.arch),
      batch_(std::move(batch)),
      eps0_(eps0),
      theta_(model.params.begin(), model.params.end()),
      work_theta_(theta_.size()),
      g_plus_(theta_.size()),
      g_minus_(theta_.size()),
      engine_(std::make_unique<Engine<double>>(model.arch)) {
  validate_batch(arch_, batch_);
}

HessianOperator::~HessianOperator() = default;

std::vector<double> HessianOperator::apply(std::span<const double> v) {
  if (v.size() != theta_.size()) throw std::invalid_argument("hvp: vector length does not match parameter count");
  double norm2 = 0.0;
  for (double x : v) norm2 += x * x;
  if (!(norm2 > 0.0)) throw std::invalid_argument("hvp: direction vector is zero");
  const double eps = eps0_ / std::sqrt(norm2);
  Engine<double>::Request req;
  for (std::size_t i = 0; i < theta_.size(); ++i) work_theta_[i] = theta_[i] + eps * v[i];
  req.grad = g_plus_;
  engine_->run(work_theta_, batch_, req);
  for (std::size_t i = 0; i < theta_.size(); ++i) work_theta_[i] = theta_[i] - eps * v[i];
  req.grad = g_minus_;
  engine_->run(work_theta_, batch_, req);
  std::vector<double> out(theta_.size());
  for (std::size_t i = 0; i < theta_.size(); ++i) out[i] = (g_plus_[i] - g_minus_[i]) / (2.0 * eps);
  ++calls_;
  return out;
}

std::vector<double> hvp(const ModelState& model, const TokenBatch& batch, std::span<const double> v, double eps0) {
  HessianOperator op(model, batch, eps0);
  return op.apply(v);
}

}  // namespace plab
