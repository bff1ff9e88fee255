#include "attrgen/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "attrgen/common.hpp"
#include "attrgen/rng.hpp"
#include "attrgen/textproc.hpp"

namespace attrgen::model {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "checkpoint tensors are stored little-endian");

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

const Matrix& tensor(const Parameters& params, const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw ValidationError("missing tensor: " + name);
  return it->second;
}

Matrix& mutable_tensor(Parameters& params, const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw ValidationError("missing tensor: " + name);
  return it->second;
}

Matrix slice_cols(const Matrix& m, int c0, int w) {
  Matrix out(m.rows, w);
  for (int i = 0; i < m.rows; ++i) {
    std::memcpy(out.row(i), m.row(i) + c0, sizeof(double) * static_cast<std::size_t>(w));
  }
  return out;
}

// Like slice_cols but restricted to the first n_rows rows (incremental decode
// reads only the filled prefix of the key/value buffers).
Matrix slice_block(const Matrix& m, int n_rows, int c0, int w) {
  Matrix out(n_rows, w);
  for (int i = 0; i < n_rows; ++i) {
    std::memcpy(out.row(i), m.row(i) + c0, sizeof(double) * static_cast<std::size_t>(w));
  }
  return out;
}

void paste_cols(Matrix& dst, const Matrix& src, int c0) {
  for (int i = 0; i < src.rows; ++i) {
    std::memcpy(dst.row(i) + c0, src.row(i), sizeof(double) * static_cast<std::size_t>(src.cols));
  }
}

void add_cols(Matrix& dst, const Matrix& src, int c0) {
  for (int i = 0; i < src.rows; ++i) {
    double* d = dst.row(i) + c0;
    const double* s = src.row(i);
    for (int j = 0; j < src.cols; ++j) d[j] += s[j];
  }
}

void add_col_sums(Matrix& bias_grad, const Matrix& d) {
  for (int i = 0; i < d.rows; ++i) {
    const double* row = d.row(i);
    double* g = bias_grad.row(0);
    for (int j = 0; j < d.cols; ++j) g[j] += row[j];
  }
}

Matrix linear(const Matrix& x, const Matrix& w, const Matrix& b) {
  Matrix y(x.rows, w.cols);
  kernels::matmul(x, w, y);
  add_row_vector(y, b);
  return y;
}

// Key projections carry no bias: a shared shift of every key moves each
// attention row by a constant, which softmax cancels exactly, so a key bias
// could never affect the loss and would only put dead weight in the
// finite-difference gradient audit.
Matrix linear_nobias(const Matrix& x, const Matrix& w) {
  Matrix y(x.rows, w.cols);
  kernels::matmul(x, w, y);
  return y;
}

Matrix linear_nobias_bwd(const Matrix& x, const Matrix& w, const Matrix& dy, Matrix& dw) {
  kernels::matmul_tn_acc(x, dy, dw);
  Matrix dx(x.rows, x.cols);
  kernels::matmul_nt(dy, w, dx);
  return dx;
}

// y = x @ w + b backward: accumulates dw/db and returns dx.
Matrix linear_bwd(const Matrix& x, const Matrix& w, const Matrix& dy, Matrix& dw, Matrix& db) {
  kernels::matmul_tn_acc(x, dy, dw);
  add_col_sums(db, dy);
  Matrix dx(x.rows, x.cols);
  kernels::matmul_nt(dy, w, dx);
  return dx;
}

// ---------------------------------------------------------------------------
// Layer norm

struct LnCache {
  Matrix xhat;
  std::vector<double> inv_sigma;
};

Matrix ln_fwd(const Matrix& x, const Matrix& g, const Matrix& b, LnCache* cache) {
  Matrix y(x.rows, x.cols);
  if (cache) {
    cache->xhat = Matrix(x.rows, x.cols);
    cache->inv_sigma.assign(static_cast<std::size_t>(x.rows), 0.0);
  }
  const int n = x.cols;
  for (int i = 0; i < x.rows; ++i) {
    const double* xr = x.row(i);
    double mean = 0.0;
    for (int j = 0; j < n; ++j) mean += xr[j];
    mean /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) {
      const double d = xr[j] - mean;
      var += d * d;
    }
    var /= n;
    const double inv = 1.0 / std::sqrt(var + kLnEps);
    double* yr = y.row(i);
    const double* gr = g.row(0);
    const double* br = b.row(0);
    for (int j = 0; j < n; ++j) {
      const double xhat = (xr[j] - mean) * inv;
      if (cache) cache->xhat.at(i, j) = xhat;
      yr[j] = xhat * gr[j] + br[j];
    }
    if (cache) cache->inv_sigma[static_cast<std::size_t>(i)] = inv;
  }
  return y;
}

Matrix ln_bwd(const Matrix& dy, const LnCache& cache, const Matrix& g, Matrix& dg, Matrix& db) {
  const int n = dy.cols;
  Matrix dx(dy.rows, dy.cols);
  for (int i = 0; i < dy.rows; ++i) {
    const double* dyr = dy.row(i);
    const double* xh = cache.xhat.row(i);
    const double* gr = g.row(0);
    double m1 = 0.0, m2 = 0.0;
    for (int j = 0; j < n; ++j) {
      const double dxhat = dyr[j] * gr[j];
      m1 += dxhat;
      m2 += dxhat * xh[j];
    }
    m1 /= n;
    m2 /= n;
    const double inv = cache.inv_sigma[static_cast<std::size_t>(i)];
    double* dxr = dx.row(i);
    double* dgr = dg.row(0);
    double* dbr = db.row(0);
    for (int j = 0; j < n; ++j) {
      const double dxhat = dyr[j] * gr[j];
      dxr[j] = inv * (dxhat - m1 - xh[j] * m2);
      dgr[j] += dyr[j] * xh[j];
      dbr[j] += dyr[j];
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// GELU feed-forward

double gelu(double x) {
  const double u = kGeluC * (x + kGeluA * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_grad(double x) {
  const double u = kGeluC * (x + kGeluA * x * x * x);
  const double t = std::tanh(u);
  const double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

struct FfnCache {
  Matrix x, hpre, hact;
};

Matrix ffn_fwd(const Parameters& params, const std::string& prefix, const Matrix& x,
               FfnCache* cache) {
  Matrix hpre = linear(x, tensor(params, prefix + "w1"), tensor(params, prefix + "b1"));
  Matrix hact(hpre.rows, hpre.cols);
  for (std::size_t i = 0; i < hpre.data.size(); ++i) hact.data[i] = gelu(hpre.data[i]);
  Matrix y = linear(hact, tensor(params, prefix + "w2"), tensor(params, prefix + "b2"));
  if (cache) {
    cache->x = x;
    cache->hpre = std::move(hpre);
    cache->hact = std::move(hact);
  }
  return y;
}

Matrix ffn_bwd(const Parameters& params, const std::string& prefix, const FfnCache& cache,
               const Matrix& dy, Parameters& grads) {
  Matrix dhact = linear_bwd(cache.hact, tensor(params, prefix + "w2"), dy,
                            mutable_tensor(grads, prefix + "w2"),
                            mutable_tensor(grads, prefix + "b2"));
  Matrix dhpre(dhact.rows, dhact.cols);
  for (std::size_t i = 0; i < dhact.data.size(); ++i) {
    dhpre.data[i] = dhact.data[i] * gelu_grad(cache.hpre.data[i]);
  }
  return linear_bwd(cache.x, tensor(params, prefix + "w1"), dhpre,
                    mutable_tensor(grads, prefix + "w1"),
                    mutable_tensor(grads, prefix + "b1"));
}

// ---------------------------------------------------------------------------
// Multi-head attention

struct AttnCache {
  Matrix xq, xkv;
  Matrix q, k, v;
  Matrix o;               // concatenated head outputs before the out projection
  std::vector<Matrix> p;  // per-head attention weights, post softmax
};

Matrix attn_fwd(const ModelConfig& config, const Parameters& params, const std::string& prefix,
                const Matrix& xq, const Matrix& xkv, bool causal,
                std::span<const unsigned char> key_mask, AttnCache* cache) {
  Matrix q = linear(xq, tensor(params, prefix + "wq"), tensor(params, prefix + "bq"));
  Matrix k = linear_nobias(xkv, tensor(params, prefix + "wk"));
  Matrix v = linear(xkv, tensor(params, prefix + "wv"), tensor(params, prefix + "bv"));
  const int dh = config.head_dim();
  const double alpha = 1.0 / std::sqrt(static_cast<double>(dh));
  Matrix o(q.rows, config.d_model);
  if (cache) cache->p.clear();
  for (int h = 0; h < config.n_heads; ++h) {
    Matrix qh = slice_cols(q, h * dh, dh);
    Matrix kh = slice_cols(k, h * dh, dh);
    Matrix vh = slice_cols(v, h * dh, dh);
    Matrix s(qh.rows, kh.rows);
    kernels::matmul_nt(qh, kh, s);
    scale_inplace(s, alpha);
    if (causal) {
      kernels::softmax_rows_causal(s, kh.rows - qh.rows);
    } else {
      kernels::softmax_rows(s, key_mask);
    }
    Matrix oh(qh.rows, dh);
    kernels::matmul(s, vh, oh);
    paste_cols(o, oh, h * dh);
    if (cache) cache->p.push_back(std::move(s));
  }
  Matrix out = linear(o, tensor(params, prefix + "wo"), tensor(params, prefix + "bo"));
  if (cache) {
    cache->xq = xq;
    cache->xkv = xkv;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->o = std::move(o);
  }
  return out;
}

// Returns (dxq, dxkv); the caller folds them into the residual stream (for
// self-attention they address the same input and are summed).
std::pair<Matrix, Matrix> attn_bwd(const ModelConfig& config, const Parameters& params,
                                   const std::string& prefix, const AttnCache& cache,
                                   const Matrix& dout, Parameters& grads) {
  const int dh = config.head_dim();
  const double alpha = 1.0 / std::sqrt(static_cast<double>(dh));
  Matrix dO = linear_bwd(cache.o, tensor(params, prefix + "wo"), dout,
                         mutable_tensor(grads, prefix + "wo"),
                         mutable_tensor(grads, prefix + "bo"));
  Matrix dq(cache.q.rows, cache.q.cols);
  Matrix dk(cache.k.rows, cache.k.cols);
  Matrix dv(cache.v.rows, cache.v.cols);
  for (int h = 0; h < config.n_heads; ++h) {
    Matrix doh = slice_cols(dO, h * dh, dh);
    Matrix qh = slice_cols(cache.q, h * dh, dh);
    Matrix kh = slice_cols(cache.k, h * dh, dh);
    Matrix vh = slice_cols(cache.v, h * dh, dh);
    const Matrix& p = cache.p[static_cast<std::size_t>(h)];
    Matrix dp(p.rows, p.cols);
    kernels::matmul_nt(doh, vh, dp);
    Matrix dvh(vh.rows, vh.cols);
    kernels::matmul_tn(p, doh, dvh);
    // Softmax backward: ds = p * (dp - sum_j dp_j p_j), rows independent.
    // Masked and causally-dead columns have p = 0 and drop out on their own.
    Matrix ds(p.rows, p.cols);
    for (int i = 0; i < p.rows; ++i) {
      const double* pr = p.row(i);
      const double* dpr = dp.row(i);
      double dot = 0.0;
      for (int j = 0; j < p.cols; ++j) dot += dpr[j] * pr[j];
      double* dsr = ds.row(i);
      for (int j = 0; j < p.cols; ++j) dsr[j] = pr[j] * (dpr[j] - dot);
    }
    scale_inplace(ds, alpha);
    Matrix dqh(qh.rows, qh.cols);
    kernels::matmul(ds, kh, dqh);
    Matrix dkh(kh.rows, kh.cols);
    kernels::matmul_tn(ds, qh, dkh);
    add_cols(dq, dqh, h * dh);
    add_cols(dk, dkh, h * dh);
    add_cols(dv, dvh, h * dh);
  }
  Matrix dxq = linear_bwd(cache.xq, tensor(params, prefix + "wq"), dq,
                          mutable_tensor(grads, prefix + "wq"),
                          mutable_tensor(grads, prefix + "bq"));
  Matrix dxkv = linear_nobias_bwd(cache.xkv, tensor(params, prefix + "wk"), dk,
                                  mutable_tensor(grads, prefix + "wk"));
  Matrix dxkv2 = linear_bwd(cache.xkv, tensor(params, prefix + "wv"), dv,
                            mutable_tensor(grads, prefix + "wv"),
                            mutable_tensor(grads, prefix + "bv"));
  add_inplace(dxkv, dxkv2);
  return {std::move(dxq), std::move(dxkv)};
}

// ---------------------------------------------------------------------------
// Dropout (training only; masks derived from the batch dropout seed so any
// repeated call sees the same masks and finite-difference checks stay valid)

Matrix make_dropout_mask(int rows, int cols, double rate, Rng& rng) {
  Matrix m(rows, cols);
  const double keep_scale = 1.0 / (1.0 - rate);
  for (double& x : m.data) x = (rng.next_double() >= rate) ? keep_scale : 0.0;
  return m;
}

void apply_mask(Matrix& y, const Matrix& mask) {
  if (mask.rows == 0) return;
  for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] *= mask.data[i];
}

// ---------------------------------------------------------------------------
// Encoder

struct EncLayerCache {
  LnCache ln1, ln2;
  AttnCache attn;
  FfnCache ffn;
  Matrix drop1, drop2;  // rows == 0 when dropout is off
};

struct EncCache {
  std::vector<EncLayerCache> layers;
  LnCache final_ln;
};

std::string enc_prefix(int layer) { return "enc" + std::to_string(layer) + "."; }
std::string dec_prefix(int layer) { return "dec" + std::to_string(layer) + "."; }

// Full-row key mask from a user mask that may cover the tokens only, the
// tokens plus the [IMG] row, or nothing (all live).
std::vector<unsigned char> resolve_input_mask(std::size_t n_tokens, bool with_img,
                                              std::span<const unsigned char> user) {
  const std::size_t rows = n_tokens + (with_img ? 1 : 0);
  std::vector<unsigned char> full(rows, 1);
  if (user.empty()) return full;
  if (user.size() == rows) {
    std::copy(user.begin(), user.end(), full.begin());
  } else if (user.size() == n_tokens && with_img) {
    std::copy(user.begin(), user.end(), full.begin() + 1);
  } else {
    throw ValidationError("input mask must cover the tokens or all encoder rows");
  }
  return full;
}

// Embeds tokens (and the optional fused embedding at row 0). Token i always
// takes positional row i+1; row 0 of enc_pos belongs to the [IMG] slot.
Matrix embed_encoder_input(const ModelConfig& config, const Parameters& params,
                           std::span<const int> tokens, const std::vector<double>* embedding) {
  const bool with_img = config.use_embedding_channel && embedding != nullptr;
  const int off = with_img ? 1 : 0;
  const Matrix& tok_emb = tensor(params, "tok_emb");
  const Matrix& enc_pos = tensor(params, "enc_pos");
  Matrix x(static_cast<int>(tokens.size()) + off, config.d_model);
  if (with_img) {
    Matrix e(1, config.embedding_dim);
    std::copy(embedding->begin(), embedding->end(), e.data.begin());
    Matrix proj = linear(e, tensor(params, "img_proj.w"), tensor(params, "img_proj.b"));
    for (int j = 0; j < config.d_model; ++j) x.at(0, j) = proj.at(0, j) + enc_pos.at(0, j);
  }
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const int r = static_cast<int>(i) + off;
    for (int j = 0; j < config.d_model; ++j) {
      x.at(r, j) = tok_emb.at(tokens[i], j) + enc_pos.at(static_cast<int>(i) + 1, j);
    }
  }
  return x;
}

Matrix encoder_forward(const ModelConfig& config, const Parameters& params, Matrix x,
                       std::span<const unsigned char> key_mask, EncCache* cache, Rng* drop_rng) {
  const bool dropout = drop_rng != nullptr && config.dropout_rate > 0.0;
  if (cache) cache->layers.resize(static_cast<std::size_t>(config.n_enc_layers));
  for (int l = 0; l < config.n_enc_layers; ++l) {
    EncLayerCache* lc = cache ? &cache->layers[static_cast<std::size_t>(l)] : nullptr;
    const std::string p = enc_prefix(l);
    Matrix x1 = ln_fwd(x, tensor(params, p + "ln1.g"), tensor(params, p + "ln1.b"),
                       lc ? &lc->ln1 : nullptr);
    Matrix a = attn_fwd(config, params, p + "attn.", x1, x1, /*causal=*/false, key_mask,
                        lc ? &lc->attn : nullptr);
    if (dropout) {
      Matrix m = make_dropout_mask(a.rows, a.cols, config.dropout_rate, *drop_rng);
      apply_mask(a, m);
      if (lc) lc->drop1 = std::move(m);
    }
    add_inplace(x, a);
    Matrix x2 = ln_fwd(x, tensor(params, p + "ln2.g"), tensor(params, p + "ln2.b"),
                       lc ? &lc->ln2 : nullptr);
    Matrix f = ffn_fwd(params, p + "ffn.", x2, lc ? &lc->ffn : nullptr);
    if (dropout) {
      Matrix m = make_dropout_mask(f.rows, f.cols, config.dropout_rate, *drop_rng);
      apply_mask(f, m);
      if (lc) lc->drop2 = std::move(m);
    }
    add_inplace(x, f);
  }
  return ln_fwd(x, tensor(params, "enc_ln.g"), tensor(params, "enc_ln.b"),
                cache ? &cache->final_ln : nullptr);
}

// Returns the gradient w.r.t. the embedded input rows.
Matrix encoder_backward(const ModelConfig& config, const Parameters& params,
                        const EncCache& cache, const Matrix& dh, Parameters& grads) {
  Matrix dx = ln_bwd(dh, cache.final_ln, tensor(params, "enc_ln.g"),
                     mutable_tensor(grads, "enc_ln.g"), mutable_tensor(grads, "enc_ln.b"));
  for (int l = config.n_enc_layers - 1; l >= 0; --l) {
    const EncLayerCache& lc = cache.layers[static_cast<std::size_t>(l)];
    const std::string p = enc_prefix(l);
    Matrix df = dx;
    apply_mask(df, lc.drop2);
    Matrix dx2 = ffn_bwd(params, p + "ffn.", lc.ffn, df, grads);
    Matrix dres = ln_bwd(dx2, lc.ln2, tensor(params, p + "ln2.g"),
                         mutable_tensor(grads, p + "ln2.g"), mutable_tensor(grads, p + "ln2.b"));
    add_inplace(dx, dres);
    Matrix da = dx;
    apply_mask(da, lc.drop1);
    auto [dxq, dxkv] = attn_bwd(config, params, p + "attn.", lc.attn, da, grads);
    add_inplace(dxq, dxkv);
    Matrix dres1 = ln_bwd(dxq, lc.ln1, tensor(params, p + "ln1.g"),
                          mutable_tensor(grads, p + "ln1.g"), mutable_tensor(grads, p + "ln1.b"));
    add_inplace(dx, dres1);
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Decoder

struct DecLayerCache {
  LnCache ln1, ln2, ln3;
  AttnCache self_a, cross_a;
  FfnCache ffn;
  Matrix drop1, drop2, drop3;
};

struct DecCache {
  std::vector<DecLayerCache> layers;
  LnCache final_ln;
  Matrix h_final;  // decoder output rows, needed for the tied-logits backward
};

Matrix embed_decoder_input(const ModelConfig& config, const Parameters& params,
                           std::span<const int> prefix) {
  const Matrix& tok_emb = tensor(params, "tok_emb");
  const Matrix& dec_pos = tensor(params, "dec_pos");
  Matrix x(static_cast<int>(prefix.size()), config.d_model);
  for (std::size_t r = 0; r < prefix.size(); ++r) {
    for (int j = 0; j < config.d_model; ++j) {
      x.at(static_cast<int>(r), j) = tok_emb.at(prefix[r], j) + dec_pos.at(static_cast<int>(r), j);
    }
  }
  return x;
}

Matrix decoder_forward(const ModelConfig& config, const Parameters& params,
                       const EncoderOutput& enc, std::span<const int> prefix, DecCache* cache,
                       Rng* drop_rng) {
  const bool dropout = drop_rng != nullptr && config.dropout_rate > 0.0;
  Matrix x = embed_decoder_input(config, params, prefix);
  if (cache) cache->layers.resize(static_cast<std::size_t>(config.n_dec_layers));
  for (int l = 0; l < config.n_dec_layers; ++l) {
    DecLayerCache* lc = cache ? &cache->layers[static_cast<std::size_t>(l)] : nullptr;
    const std::string p = dec_prefix(l);
    Matrix x1 = ln_fwd(x, tensor(params, p + "ln1.g"), tensor(params, p + "ln1.b"),
                       lc ? &lc->ln1 : nullptr);
    Matrix a = attn_fwd(config, params, p + "self.", x1, x1, /*causal=*/true, {},
                        lc ? &lc->self_a : nullptr);
    if (dropout) {
      Matrix m = make_dropout_mask(a.rows, a.cols, config.dropout_rate, *drop_rng);
      apply_mask(a, m);
      if (lc) lc->drop1 = std::move(m);
    }
    add_inplace(x, a);
    Matrix x2 = ln_fwd(x, tensor(params, p + "ln2.g"), tensor(params, p + "ln2.b"),
                       lc ? &lc->ln2 : nullptr);
    Matrix c = attn_fwd(config, params, p + "cross.", x2, enc.h, /*causal=*/false, enc.mask,
                        lc ? &lc->cross_a : nullptr);
    if (dropout) {
      Matrix m = make_dropout_mask(c.rows, c.cols, config.dropout_rate, *drop_rng);
      apply_mask(c, m);
      if (lc) lc->drop2 = std::move(m);
    }
    add_inplace(x, c);
    Matrix x3 = ln_fwd(x, tensor(params, p + "ln3.g"), tensor(params, p + "ln3.b"),
                       lc ? &lc->ln3 : nullptr);
    Matrix f = ffn_fwd(params, p + "ffn.", x3, lc ? &lc->ffn : nullptr);
    if (dropout) {
      Matrix m = make_dropout_mask(f.rows, f.cols, config.dropout_rate, *drop_rng);
      apply_mask(f, m);
      if (lc) lc->drop3 = std::move(m);
    }
    add_inplace(x, f);
  }
  Matrix h = ln_fwd(x, tensor(params, "dec_ln.g"), tensor(params, "dec_ln.b"),
                    cache ? &cache->final_ln : nullptr);
  // Tied output projection: logits = h @ tok_emb^T.
  const Matrix& tok_emb = tensor(params, "tok_emb");
  Matrix logits(h.rows, config.vocab_size);
  kernels::matmul_nt(h, tok_emb, logits);
  if (cache) cache->h_final = std::move(h);
  return logits;
}

// Returns (d embedded decoder input, d encoder output).
std::pair<Matrix, Matrix> decoder_backward(const ModelConfig& config, const Parameters& params,
                                           const DecCache& cache, const EncoderOutput& enc,
                                           const Matrix& dlogits, Parameters& grads) {
  const Matrix& tok_emb = tensor(params, "tok_emb");
  Matrix dh(cache.h_final.rows, cache.h_final.cols);
  kernels::matmul(dlogits, tok_emb, dh);
  kernels::matmul_tn_acc(dlogits, cache.h_final, mutable_tensor(grads, "tok_emb"));
  Matrix dx = ln_bwd(dh, cache.final_ln, tensor(params, "dec_ln.g"),
                     mutable_tensor(grads, "dec_ln.g"), mutable_tensor(grads, "dec_ln.b"));
  Matrix denc(enc.h.rows, enc.h.cols);
  for (int l = config.n_dec_layers - 1; l >= 0; --l) {
    const DecLayerCache& lc = cache.layers[static_cast<std::size_t>(l)];
    const std::string p = dec_prefix(l);
    Matrix df = dx;
    apply_mask(df, lc.drop3);
    Matrix dx3 = ffn_bwd(params, p + "ffn.", lc.ffn, df, grads);
    Matrix dres3 = ln_bwd(dx3, lc.ln3, tensor(params, p + "ln3.g"),
                          mutable_tensor(grads, p + "ln3.g"), mutable_tensor(grads, p + "ln3.b"));
    add_inplace(dx, dres3);
    Matrix dc = dx;
    apply_mask(dc, lc.drop2);
    auto [dxq2, dxkv2] = attn_bwd(config, params, p + "cross.", lc.cross_a, dc, grads);
    add_inplace(denc, dxkv2);
    Matrix dres2 = ln_bwd(dxq2, lc.ln2, tensor(params, p + "ln2.g"),
                          mutable_tensor(grads, p + "ln2.g"), mutable_tensor(grads, p + "ln2.b"));
    add_inplace(dx, dres2);
    Matrix da = dx;
    apply_mask(da, lc.drop1);
    auto [dxq1, dxkv1] = attn_bwd(config, params, p + "self.", lc.self_a, da, grads);
    add_inplace(dxq1, dxkv1);
    Matrix dres1 = ln_bwd(dxq1, lc.ln1, tensor(params, p + "ln1.g"),
                          mutable_tensor(grads, p + "ln1.g"), mutable_tensor(grads, p + "ln1.b"));
    add_inplace(dx, dres1);
  }
  return {std::move(dx), std::move(denc)};
}

void check_tokens(std::span<const int> tokens, int vocab_size, const char* what) {
  for (int t : tokens) {
    if (t < 0 || t >= vocab_size) {
      throw ValidationError(std::string(what) + " token id out of range: " + std::to_string(t));
    }
  }
}

void init_tensor_normal(Parameters& params, const std::string& name, int rows, int cols,
                        double scale, std::uint64_t seed) {
  Matrix m(rows, cols);
  Rng rng(mix_seed(seed, fnv1a64(name)));
  for (double& x : m.data) x = rng.next_normal() * scale;
  params.emplace(name, std::move(m));
}

void init_tensor_const(Parameters& params, const std::string& name, int rows, int cols,
                       double value) {
  Matrix m(rows, cols);
  std::fill(m.data.begin(), m.data.end(), value);
  params.emplace(name, std::move(m));
}

void init_attn_block(Parameters& params, const std::string& prefix, int d_model, double scale,
                     std::uint64_t seed) {
  for (const char* w : {"wq", "wk", "wv", "wo"}) {
    init_tensor_normal(params, prefix + w, d_model, d_model, scale, seed);
  }
  for (const char* b : {"bq", "bv", "bo"}) {
    init_tensor_const(params, prefix + b, 1, d_model, 0.0);
  }
}

void init_ln_block(Parameters& params, const std::string& prefix, int d_model) {
  init_tensor_const(params, prefix + "g", 1, d_model, 1.0);
  init_tensor_const(params, prefix + "b", 1, d_model, 0.0);
}

void init_ffn_block(Parameters& params, const std::string& prefix, int d_model, int d_ff,
                    double scale, std::uint64_t seed) {
  init_tensor_normal(params, prefix + "w1", d_model, d_ff, scale, seed);
  init_tensor_const(params, prefix + "b1", 1, d_ff, 0.0);
  init_tensor_normal(params, prefix + "w2", d_ff, d_model, scale, seed);
  init_tensor_const(params, prefix + "b2", 1, d_model, 0.0);
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

void ModelConfig::validate() const {
  if (vocab_size <= 0) throw ValidationError("ModelConfig.vocab_size must be positive");
  if (d_model <= 0) throw ValidationError("ModelConfig.d_model must be positive");
  if (n_heads <= 0) throw ValidationError("ModelConfig.n_heads must be positive");
  if (d_model % n_heads != 0) {
    throw ValidationError("ModelConfig.d_model must be divisible by n_heads");
  }
  if (n_enc_layers <= 0) throw ValidationError("ModelConfig.n_enc_layers must be positive");
  if (n_dec_layers <= 0) throw ValidationError("ModelConfig.n_dec_layers must be positive");
  if (d_ff <= 0) throw ValidationError("ModelConfig.d_ff must be positive");
  if (max_input_len < 4) throw ValidationError("ModelConfig.max_input_len must be >= 4");
  if (max_output_len < 4) throw ValidationError("ModelConfig.max_output_len must be >= 4");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
    throw ValidationError("ModelConfig.dropout_rate must be in [0, 1)");
  }
  if (use_embedding_channel && embedding_dim <= 0) {
    throw ValidationError("ModelConfig.embedding_dim must be positive");
  }
}

std::string ModelConfig::to_json() const {
  json j;
  j["vocab_size"] = vocab_size;
  j["d_model"] = d_model;
  j["n_heads"] = n_heads;
  j["n_enc_layers"] = n_enc_layers;
  j["n_dec_layers"] = n_dec_layers;
  j["d_ff"] = d_ff;
  j["max_input_len"] = max_input_len;
  j["max_output_len"] = max_output_len;
  j["dropout_rate"] = dropout_rate;
  j["use_embedding_channel"] = use_embedding_channel;
  j["embedding_dim"] = embedding_dim;
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  json j = json::parse(text, nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded() || !j.is_object()) {
    throw ValidationError("malformed model config JSON");
  }
  ModelConfig c;
  try {
    c.vocab_size = j.at("vocab_size").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.n_enc_layers = j.at("n_enc_layers").get<int>();
    c.n_dec_layers = j.at("n_dec_layers").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.max_input_len = j.at("max_input_len").get<int>();
    c.max_output_len = j.at("max_output_len").get<int>();
    c.dropout_rate = j.at("dropout_rate").get<double>();
    c.use_embedding_channel = j.at("use_embedding_channel").get<bool>();
    c.embedding_dim = j.at("embedding_dim").get<int>();
  } catch (const json::exception& e) {
    throw ValidationError(std::string("model config JSON: ") + e.what());
  }
  return c;
}

// ---------------------------------------------------------------------------
// Parameters

Parameters init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Parameters params;
  const double scale = 1.0 / std::sqrt(static_cast<double>(config.d_model));
  init_tensor_normal(params, "tok_emb", config.vocab_size, config.d_model, scale, seed);
  // Row 0 is the [IMG] slot; token i always uses row i+1 so text-only and
  // multimodal configurations agree on every token position.
  init_tensor_normal(params, "enc_pos", config.max_input_len + 1, config.d_model, scale, seed);
  init_tensor_normal(params, "dec_pos", config.max_output_len, config.d_model, scale, seed);
  if (config.use_embedding_channel) {
    init_tensor_normal(params, "img_proj.w", config.embedding_dim, config.d_model, scale, seed);
    init_tensor_const(params, "img_proj.b", 1, config.d_model, 0.0);
  }
  for (int l = 0; l < config.n_enc_layers; ++l) {
    const std::string p = enc_prefix(l);
    init_ln_block(params, p + "ln1.", config.d_model);
    init_attn_block(params, p + "attn.", config.d_model, scale, seed);
    init_ln_block(params, p + "ln2.", config.d_model);
    init_ffn_block(params, p + "ffn.", config.d_model, config.d_ff, scale, seed);
  }
  init_ln_block(params, "enc_ln.", config.d_model);
  for (int l = 0; l < config.n_dec_layers; ++l) {
    const std::string p = dec_prefix(l);
    init_ln_block(params, p + "ln1.", config.d_model);
    init_attn_block(params, p + "self.", config.d_model, scale, seed);
    init_ln_block(params, p + "ln2.", config.d_model);
    init_attn_block(params, p + "cross.", config.d_model, scale, seed);
    init_ln_block(params, p + "ln3.", config.d_model);
    init_ffn_block(params, p + "ffn.", config.d_model, config.d_ff, scale, seed);
  }
  init_ln_block(params, "dec_ln.", config.d_model);
  return params;
}

Parameters init_tagger_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Parameters params;
  const double scale = 1.0 / std::sqrt(static_cast<double>(config.d_model));
  init_tensor_normal(params, "tok_emb", config.vocab_size, config.d_model, scale, seed);
  init_tensor_normal(params, "enc_pos", config.max_input_len + 1, config.d_model, scale, seed);
  if (config.use_embedding_channel) {
    init_tensor_normal(params, "img_proj.w", config.embedding_dim, config.d_model, scale, seed);
    init_tensor_const(params, "img_proj.b", 1, config.d_model, 0.0);
  }
  for (int l = 0; l < config.n_enc_layers; ++l) {
    const std::string p = enc_prefix(l);
    init_ln_block(params, p + "ln1.", config.d_model);
    init_attn_block(params, p + "attn.", config.d_model, scale, seed);
    init_ln_block(params, p + "ln2.", config.d_model);
    init_ffn_block(params, p + "ffn.", config.d_model, config.d_ff, scale, seed);
  }
  init_ln_block(params, "enc_ln.", config.d_model);
  init_tensor_normal(params, "tag_head.w", config.d_model, kNumTags, scale, seed);
  init_tensor_const(params, "tag_head.b", 1, kNumTags, 0.0);
  return params;
}

Matrix tag_probs(const ModelConfig& config, const Parameters& params,
                 std::span<const int> tokens, const std::vector<double>* embedding) {
  if (tokens.empty()) throw ValidationError("tagger input must be non-empty");
  if (static_cast<int>(tokens.size()) > config.max_input_len) {
    throw ValidationError("input length exceeds max_input_len");
  }
  check_tokens(tokens, config.vocab_size, "input");
  const std::vector<double>* emb =
      (config.use_embedding_channel && embedding != nullptr) ? embedding : nullptr;
  if (emb != nullptr && static_cast<int>(emb->size()) != config.embedding_dim) {
    throw ValidationError("embedding size does not match embedding_dim");
  }
  const bool with_img = emb != nullptr;
  const auto mask = resolve_input_mask(tokens.size(), with_img, {});
  Matrix x0 = embed_encoder_input(config, params, tokens, emb);
  Matrix h = encoder_forward(config, params, std::move(x0), mask, nullptr, nullptr);
  Matrix logits = linear(h, tensor(params, "tag_head.w"), tensor(params, "tag_head.b"));
  const int off = with_img ? 1 : 0;
  Matrix probs(static_cast<int>(tokens.size()), kNumTags);
  for (int r = 0; r < probs.rows; ++r) {
    std::memcpy(probs.row(r), logits.row(r + off),
                sizeof(double) * static_cast<std::size_t>(kNumTags));
  }
  kernels::softmax_rows(probs);
  return probs;
}

LossGrads tagger_loss_and_grads(const ModelConfig& config, const Parameters& params,
                                const TagBatch& batch, double o_weight) {
  if (batch.examples.empty()) throw ValidationError("empty tagger batch");
  if (!(o_weight > 0.0 && o_weight <= 1.0)) throw ValidationError("o_weight must be in (0, 1]");
  LossGrads out;
  for (const auto& [name, m] : params) out.grads.emplace(name, Matrix(m.rows, m.cols));

  // Weighted mean: the normalizer is the total tag weight, so re-weighting O
  // rescales its pull on the loss instead of just shrinking the loss value.
  double weight_total = 0.0;
  for (const TagExample& ex : batch.examples) {
    if (ex.tags.size() != ex.input_tokens.size()) {
      throw ValidationError("tag count must equal input token count");
    }
    for (int t : ex.tags) {
      if (t < 0 || t >= kNumTags) throw ValidationError("tag id out of range");
      weight_total += t == kTagO ? o_weight : 1.0;
      out.n_tokens += 1;
    }
  }
  if (weight_total <= 0.0) throw ValidationError("batch has no tagged positions");
  const double inv_w = 1.0 / weight_total;

  Rng drop_rng(mix_seed(batch.dropout_seed, fnv1a64("dropout")));
  Rng* drop = config.dropout_rate > 0.0 ? &drop_rng : nullptr;

  for (const TagExample& ex : batch.examples) {
    if (static_cast<int>(ex.input_tokens.size()) > config.max_input_len) {
      throw ValidationError("input length exceeds max_input_len");
    }
    check_tokens(ex.input_tokens, config.vocab_size, "input");
    const std::vector<double>* emb =
        (config.use_embedding_channel && ex.embedding.has_value()) ? &*ex.embedding : nullptr;
    if (emb != nullptr && static_cast<int>(emb->size()) != config.embedding_dim) {
      throw ValidationError("embedding size does not match embedding_dim");
    }
    const bool with_img = emb != nullptr;
    const int off = with_img ? 1 : 0;
    const auto mask = resolve_input_mask(ex.input_tokens.size(), with_img, {});
    Matrix x0 = embed_encoder_input(config, params, ex.input_tokens, emb);
    EncCache enc_cache;
    Matrix h = encoder_forward(config, params, std::move(x0), mask, &enc_cache, drop);
    Matrix logits = linear(h, tensor(params, "tag_head.w"), tensor(params, "tag_head.b"));

    // Softmax + weighted CE on token rows; the [IMG] row carries no tag.
    Matrix dlogits(logits.rows, logits.cols);
    for (std::size_t i = 0; i < ex.tags.size(); ++i) {
      const int r = static_cast<int>(i) + off;
      const int tag = ex.tags[i];
      const double w = (tag == kTagO ? o_weight : 1.0) * inv_w;
      const double* lr = logits.row(r);
      double mx = lr[0];
      for (int j = 1; j < kNumTags; ++j) mx = std::max(mx, lr[j]);
      double sum = 0.0;
      for (int j = 0; j < kNumTags; ++j) sum += std::exp(lr[j] - mx);
      out.loss += w * (mx + std::log(sum) - lr[tag]);
      double* dr = dlogits.row(r);
      const double inv_sum = 1.0 / sum;
      for (int j = 0; j < kNumTags; ++j) dr[j] = std::exp(lr[j] - mx) * inv_sum * w;
      dr[tag] -= w;
    }

    Matrix dh = linear_bwd(h, tensor(params, "tag_head.w"), dlogits,
                           mutable_tensor(out.grads, "tag_head.w"),
                           mutable_tensor(out.grads, "tag_head.b"));
    Matrix dx = encoder_backward(config, params, enc_cache, dh, out.grads);

    Matrix& gtok = mutable_tensor(out.grads, "tok_emb");
    Matrix& genc_pos = mutable_tensor(out.grads, "enc_pos");
    if (with_img) {
      Matrix drow0(1, config.d_model);
      std::memcpy(drow0.row(0), dx.row(0),
                  sizeof(double) * static_cast<std::size_t>(config.d_model));
      Matrix e(1, config.embedding_dim);
      std::copy(emb->begin(), emb->end(), e.data.begin());
      kernels::matmul_tn_acc(e, drow0, mutable_tensor(out.grads, "img_proj.w"));
      add_col_sums(mutable_tensor(out.grads, "img_proj.b"), drow0);
      for (int j = 0; j < config.d_model; ++j) genc_pos.at(0, j) += drow0.at(0, j);
    }
    for (std::size_t i = 0; i < ex.input_tokens.size(); ++i) {
      const double* src = dx.row(static_cast<int>(i) + off);
      double* t = gtok.row(ex.input_tokens[i]);
      double* pp = genc_pos.row(static_cast<int>(i) + 1);
      for (int j = 0; j < config.d_model; ++j) {
        t[j] += src[j];
        pp[j] += src[j];
      }
    }
  }
  // Report the weighted-mean loss directly; gradients already carry inv_w.
  return out;
}

Parameters init_classifier_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Parameters params;
  const double scale = 1.0 / std::sqrt(static_cast<double>(config.d_model));
  init_tensor_normal(params, "tok_emb", config.vocab_size, config.d_model, scale, seed);
  init_tensor_normal(params, "enc_pos", config.max_input_len + 1, config.d_model, scale, seed);
  if (config.use_embedding_channel) {
    init_tensor_normal(params, "img_proj.w", config.embedding_dim, config.d_model, scale, seed);
    init_tensor_const(params, "img_proj.b", 1, config.d_model, 0.0);
  }
  for (int l = 0; l < config.n_enc_layers; ++l) {
    const std::string p = enc_prefix(l);
    init_ln_block(params, p + "ln1.", config.d_model);
    init_attn_block(params, p + "attn.", config.d_model, scale, seed);
    init_ln_block(params, p + "ln2.", config.d_model);
    init_ffn_block(params, p + "ffn.", config.d_model, config.d_ff, scale, seed);
  }
  init_ln_block(params, "enc_ln.", config.d_model);
  init_tensor_normal(params, "cls_head.w", config.d_model, 1, scale, seed);
  init_tensor_const(params, "cls_head.b", 1, 1, 0.0);
  return params;
}

namespace {

// Shared validation + encoder pass for the classifier head; returns the
// encoder output and the readout row index.
Matrix classifier_encode(const ModelConfig& config, const Parameters& params,
                         std::span<const int> tokens, const std::vector<double>* emb,
                         int& readout_row, EncCache* cache, Rng* drop) {
  if (tokens.empty()) throw ValidationError("classifier input must be non-empty");
  if (static_cast<int>(tokens.size()) > config.max_input_len) {
    throw ValidationError("input length exceeds max_input_len");
  }
  check_tokens(tokens, config.vocab_size, "input");
  if (emb != nullptr && static_cast<int>(emb->size()) != config.embedding_dim) {
    throw ValidationError("embedding size does not match embedding_dim");
  }
  const bool with_img = emb != nullptr;
  readout_row = with_img ? 1 : 0;
  const auto mask = resolve_input_mask(tokens.size(), with_img, {});
  Matrix x0 = embed_encoder_input(config, params, tokens, emb);
  return encoder_forward(config, params, std::move(x0), mask, cache, drop);
}

double sigmoid_stable(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace

double classifier_prob(const ModelConfig& config, const Parameters& params,
                       std::span<const int> tokens, const std::vector<double>* embedding) {
  const std::vector<double>* emb =
      (config.use_embedding_channel && embedding != nullptr) ? embedding : nullptr;
  int row = 0;
  Matrix h = classifier_encode(config, params, tokens, emb, row, nullptr, nullptr);
  const Matrix& w = tensor(params, "cls_head.w");
  double z = tensor(params, "cls_head.b").at(0, 0);
  for (int j = 0; j < config.d_model; ++j) z += h.at(row, j) * w.at(j, 0);
  return sigmoid_stable(z);
}

LossGrads classifier_loss_and_grads(const ModelConfig& config, const Parameters& params,
                                    const ClsBatch& batch) {
  if (batch.examples.empty()) throw ValidationError("empty classifier batch");
  LossGrads out;
  for (const auto& [name, m] : params) out.grads.emplace(name, Matrix(m.rows, m.cols));
  const double inv_n = 1.0 / static_cast<double>(batch.examples.size());

  Rng drop_rng(mix_seed(batch.dropout_seed, fnv1a64("dropout")));
  Rng* drop = config.dropout_rate > 0.0 ? &drop_rng : nullptr;

  for (const ClsExample& ex : batch.examples) {
    if (ex.label != 0 && ex.label != 1) throw ValidationError("classifier label must be 0 or 1");
    const std::vector<double>* emb =
        (config.use_embedding_channel && ex.embedding.has_value()) ? &*ex.embedding : nullptr;
    int row = 0;
    EncCache enc_cache;
    Matrix h = classifier_encode(config, params, ex.input_tokens, emb, row, &enc_cache, drop);

    const Matrix& w = tensor(params, "cls_head.w");
    double z = tensor(params, "cls_head.b").at(0, 0);
    for (int j = 0; j < config.d_model; ++j) z += h.at(row, j) * w.at(j, 0);
    const double p = sigmoid_stable(z);
    // -log p(label) written against the logit for stability at saturation.
    out.loss += inv_n * (std::max(z, 0.0) - z * ex.label + std::log1p(std::exp(-std::abs(z))));
    out.n_tokens += 1;
    const double dz = (p - static_cast<double>(ex.label)) * inv_n;

    Matrix& gw = mutable_tensor(out.grads, "cls_head.w");
    for (int j = 0; j < config.d_model; ++j) gw.at(j, 0) += dz * h.at(row, j);
    mutable_tensor(out.grads, "cls_head.b").at(0, 0) += dz;

    Matrix dh(h.rows, h.cols);
    for (int j = 0; j < config.d_model; ++j) dh.at(row, j) = dz * w.at(j, 0);
    Matrix dx = encoder_backward(config, params, enc_cache, dh, out.grads);

    const bool with_img = emb != nullptr;
    const int off = with_img ? 1 : 0;
    Matrix& gtok = mutable_tensor(out.grads, "tok_emb");
    Matrix& genc_pos = mutable_tensor(out.grads, "enc_pos");
    if (with_img) {
      Matrix drow0(1, config.d_model);
      std::memcpy(drow0.row(0), dx.row(0),
                  sizeof(double) * static_cast<std::size_t>(config.d_model));
      Matrix e(1, config.embedding_dim);
      std::copy(emb->begin(), emb->end(), e.data.begin());
      kernels::matmul_tn_acc(e, drow0, mutable_tensor(out.grads, "img_proj.w"));
      add_col_sums(mutable_tensor(out.grads, "img_proj.b"), drow0);
      for (int j = 0; j < config.d_model; ++j) genc_pos.at(0, j) += drow0.at(0, j);
    }
    for (std::size_t i = 0; i < ex.input_tokens.size(); ++i) {
      const double* src = dx.row(static_cast<int>(i) + off);
      double* t = gtok.row(ex.input_tokens[i]);
      double* pp = genc_pos.row(static_cast<int>(i) + 1);
      for (int j = 0; j < config.d_model; ++j) {
        t[j] += src[j];
        pp[j] += src[j];
      }
    }
  }
  return out;
}

long long param_count(const Parameters& params) {
  long long total = 0;
  for (const auto& [name, m] : params) total += static_cast<long long>(m.size());
  return total;
}

std::vector<std::string> transfer_params(Parameters& dst, const Parameters& src) {
  std::vector<std::string> copied;
  for (const auto& [name, m] : src) {
    auto it = dst.find(name);
    if (it != dst.end() && it->second.same_shape(m)) {
      it->second = m;
      copied.push_back(name);
    }
  }
  return copied;
}


// ---------------------------------------------------------------------------
// Forward passes

EncoderOutput encode(const ModelConfig& config, const Parameters& params,
                     std::span<const int> tokens, std::span<const unsigned char> mask,
                     const std::vector<double>* embedding) {
  if (static_cast<int>(tokens.size()) > config.max_input_len) {
    throw ValidationError("input length " + std::to_string(tokens.size()) +
                          " exceeds max_input_len " + std::to_string(config.max_input_len));
  }
  check_tokens(tokens, config.vocab_size, "input");
  // A model without the embedding channel ignores embeddings, so text-only
  // baselines can run on multimodal datasets unchanged.
  const bool with_img = config.use_embedding_channel && embedding != nullptr;
  if (with_img && static_cast<int>(embedding->size()) != config.embedding_dim) {
    throw ValidationError("embedding size " + std::to_string(embedding->size()) +
                          " does not match embedding_dim " +
                          std::to_string(config.embedding_dim));
  }
  EncoderOutput out;
  out.has_img = with_img;
  out.mask = resolve_input_mask(tokens.size(), with_img, mask);
  Matrix x = embed_encoder_input(config, params, tokens, with_img ? embedding : nullptr);
  out.h = encoder_forward(config, params, std::move(x), out.mask, nullptr, nullptr);
  return out;
}

Matrix decode_logits(const ModelConfig& config, const Parameters& params,
                     const EncoderOutput& enc, std::span<const int> prefix) {
  if (static_cast<int>(prefix.size()) > config.max_output_len) {
    throw ValidationError("prefix length " + std::to_string(prefix.size()) +
                          " exceeds max_output_len " + std::to_string(config.max_output_len));
  }
  check_tokens(prefix, config.vocab_size, "prefix");
  return decoder_forward(config, params, enc, prefix, nullptr, nullptr);
}

// ---------------------------------------------------------------------------
// Incremental decoding

DecoderState init_decoder_state(const ModelConfig& config, const Parameters& params,
                                const EncoderOutput& enc) {
  DecoderState st;
  st.self_k.reserve(static_cast<std::size_t>(config.n_dec_layers));
  st.self_v.reserve(static_cast<std::size_t>(config.n_dec_layers));
  st.cross_k.reserve(static_cast<std::size_t>(config.n_dec_layers));
  st.cross_v.reserve(static_cast<std::size_t>(config.n_dec_layers));
  for (int l = 0; l < config.n_dec_layers; ++l) {
    const std::string p = dec_prefix(l) + "cross.";
    st.self_k.emplace_back(config.max_output_len, config.d_model);
    st.self_v.emplace_back(config.max_output_len, config.d_model);
    st.cross_k.push_back(linear_nobias(enc.h, tensor(params, p + "wk")));
    st.cross_v.push_back(linear(enc.h, tensor(params, p + "wv"), tensor(params, p + "bv")));
  }
  return st;
}

std::vector<double> decode_step(const ModelConfig& config, const Parameters& params,
                                const EncoderOutput& enc, DecoderState& state, int token) {
  if (state.pos >= config.max_output_len) {
    throw ValidationError("decode_step past max_output_len");
  }
  if (token < 0 || token >= config.vocab_size) {
    throw ValidationError("decode_step token id out of range: " + std::to_string(token));
  }
  const int dh = config.head_dim();
  const double alpha = 1.0 / std::sqrt(static_cast<double>(dh));
  const Matrix& tok_emb = tensor(params, "tok_emb");
  const Matrix& dec_pos = tensor(params, "dec_pos");
  Matrix x(1, config.d_model);
  for (int j = 0; j < config.d_model; ++j) {
    x.at(0, j) = tok_emb.at(token, j) + dec_pos.at(state.pos, j);
  }
  for (int l = 0; l < config.n_dec_layers; ++l) {
    const std::string p = dec_prefix(l);
    Matrix& sk = state.self_k[static_cast<std::size_t>(l)];
    Matrix& sv = state.self_v[static_cast<std::size_t>(l)];
    // Self-attention over the cached prefix plus the new row.
    Matrix x1 = ln_fwd(x, tensor(params, p + "ln1.g"), tensor(params, p + "ln1.b"), nullptr);
    Matrix q = linear(x1, tensor(params, p + "self.wq"), tensor(params, p + "self.bq"));
    Matrix krow = linear_nobias(x1, tensor(params, p + "self.wk"));
    Matrix vrow = linear(x1, tensor(params, p + "self.wv"), tensor(params, p + "self.bv"));
    std::memcpy(sk.row(state.pos), krow.row(0),
                sizeof(double) * static_cast<std::size_t>(config.d_model));
    std::memcpy(sv.row(state.pos), vrow.row(0),
                sizeof(double) * static_cast<std::size_t>(config.d_model));
    const int live = state.pos + 1;
    Matrix o(1, config.d_model);
    for (int h = 0; h < config.n_heads; ++h) {
      Matrix qh = slice_cols(q, h * dh, dh);
      Matrix kh = slice_block(sk, live, h * dh, dh);
      Matrix vh = slice_block(sv, live, h * dh, dh);
      Matrix s(1, live);
      kernels::matmul_nt(qh, kh, s);
      scale_inplace(s, alpha);
      kernels::softmax_rows(s);
      Matrix oh(1, dh);
      kernels::matmul(s, vh, oh);
      paste_cols(o, oh, h * dh);
    }
    Matrix a = linear(o, tensor(params, p + "self.wo"), tensor(params, p + "self.bo"));
    add_inplace(x, a);
    // Cross-attention against the precomputed encoder keys/values.
    Matrix x2 = ln_fwd(x, tensor(params, p + "ln2.g"), tensor(params, p + "ln2.b"), nullptr);
    Matrix q2 = linear(x2, tensor(params, p + "cross.wq"), tensor(params, p + "cross.bq"));
    const Matrix& ck = state.cross_k[static_cast<std::size_t>(l)];
    const Matrix& cv = state.cross_v[static_cast<std::size_t>(l)];
    Matrix o2(1, config.d_model);
    for (int h = 0; h < config.n_heads; ++h) {
      Matrix qh = slice_cols(q2, h * dh, dh);
      Matrix kh = slice_cols(ck, h * dh, dh);
      Matrix vh = slice_cols(cv, h * dh, dh);
      Matrix s(1, kh.rows);
      kernels::matmul_nt(qh, kh, s);
      scale_inplace(s, alpha);
      kernels::softmax_rows(s, enc.mask);
      Matrix oh(1, dh);
      kernels::matmul(s, vh, oh);
      paste_cols(o2, oh, h * dh);
    }
    Matrix c = linear(o2, tensor(params, p + "cross.wo"), tensor(params, p + "cross.bo"));
    add_inplace(x, c);
    Matrix x3 = ln_fwd(x, tensor(params, p + "ln3.g"), tensor(params, p + "ln3.b"), nullptr);
    Matrix f = ffn_fwd(params, p + "ffn.", x3, nullptr);
    add_inplace(x, f);
  }
  Matrix h = ln_fwd(x, tensor(params, "dec_ln.g"), tensor(params, "dec_ln.b"), nullptr);
  Matrix logits(1, config.vocab_size);
  kernels::matmul_nt(h, tok_emb, logits);
  state.pos += 1;
  return logits.data;
}

// ---------------------------------------------------------------------------
// Loss and gradients

LossGrads loss_and_grads(const ModelConfig& config, const Parameters& params,
                         const TrainBatch& batch) {
  if (batch.examples.empty()) throw ValidationError("empty training batch");
  LossGrads out;
  for (const auto& [name, m] : params) out.grads.emplace(name, Matrix(m.rows, m.cols));

  // The loss is the mean over all non-pad target tokens in the batch, so the
  // per-position logit gradients are scaled by 1/n_tokens as they are made.
  for (const TrainExample& ex : batch.examples) {
    if (ex.target_tokens.size() < 2) {
      throw ValidationError("target must contain at least [BOS] and one label token");
    }
    if (static_cast<int>(ex.target_tokens.size()) > config.max_output_len + 1) {
      throw ValidationError("target length exceeds max_output_len + 1");
    }
    const int dec_len = static_cast<int>(ex.target_tokens.size()) - 1;
    for (int r = 0; r < dec_len; ++r) {
      if (ex.target_tokens[static_cast<std::size_t>(r) + 1] != textproc::kPad) out.n_tokens += 1;
    }
  }
  if (out.n_tokens == 0) throw ValidationError("batch has no non-pad target tokens");
  const double inv_n = 1.0 / static_cast<double>(out.n_tokens);

  Rng drop_rng(mix_seed(batch.dropout_seed, fnv1a64("dropout")));
  Rng* drop = config.dropout_rate > 0.0 ? &drop_rng : nullptr;

  for (const TrainExample& ex : batch.examples) {
    if (static_cast<int>(ex.input_tokens.size()) > config.max_input_len) {
      throw ValidationError("input length exceeds max_input_len");
    }
    check_tokens(ex.input_tokens, config.vocab_size, "input");
    check_tokens(ex.target_tokens, config.vocab_size, "target");
    const std::vector<double>* emb =
        (config.use_embedding_channel && ex.embedding.has_value()) ? &*ex.embedding : nullptr;
    if (emb != nullptr && static_cast<int>(emb->size()) != config.embedding_dim) {
      throw ValidationError("embedding size does not match embedding_dim");
    }

    EncoderOutput enc;
    enc.has_img = emb != nullptr;
    enc.mask = resolve_input_mask(ex.input_tokens.size(), enc.has_img, ex.input_mask);
    Matrix x0 = embed_encoder_input(config, params, ex.input_tokens, emb);
    EncCache enc_cache;
    enc.h = encoder_forward(config, params, std::move(x0), enc.mask, &enc_cache, drop);

    const int dec_len = static_cast<int>(ex.target_tokens.size()) - 1;
    std::span<const int> prefix(ex.target_tokens.data(), static_cast<std::size_t>(dec_len));
    DecCache dec_cache;
    Matrix logits = decoder_forward(config, params, enc, prefix, &dec_cache, drop);

    Matrix dlogits(logits.rows, logits.cols);
    for (int r = 0; r < dec_len; ++r) {
      const int label = ex.target_tokens[static_cast<std::size_t>(r) + 1];
      if (label == textproc::kPad) continue;
      const double* lr = logits.row(r);
      double mx = lr[0];
      for (int j = 1; j < logits.cols; ++j) mx = std::max(mx, lr[j]);
      double sum = 0.0;
      for (int j = 0; j < logits.cols; ++j) sum += std::exp(lr[j] - mx);
      out.loss += mx + std::log(sum) - lr[label];
      double* dr = dlogits.row(r);
      const double inv_sum = 1.0 / sum;
      for (int j = 0; j < logits.cols; ++j) dr[j] = std::exp(lr[j] - mx) * inv_sum * inv_n;
      dr[label] -= inv_n;
    }

    auto [dx_dec, denc] = decoder_backward(config, params, dec_cache, enc, dlogits, out.grads);
    Matrix& gtok = mutable_tensor(out.grads, "tok_emb");
    Matrix& gdec_pos = mutable_tensor(out.grads, "dec_pos");
    for (int r = 0; r < dec_len; ++r) {
      const double* src = dx_dec.row(r);
      double* t = gtok.row(prefix[static_cast<std::size_t>(r)]);
      double* pp = gdec_pos.row(r);
      for (int j = 0; j < config.d_model; ++j) {
        t[j] += src[j];
        pp[j] += src[j];
      }
    }

    Matrix dx_enc = encoder_backward(config, params, enc_cache, denc, out.grads);
    Matrix& genc_pos = mutable_tensor(out.grads, "enc_pos");
    const int off = enc.has_img ? 1 : 0;
    if (enc.has_img) {
      Matrix drow0(1, config.d_model);
      std::memcpy(drow0.row(0), dx_enc.row(0),
                  sizeof(double) * static_cast<std::size_t>(config.d_model));
      Matrix e(1, config.embedding_dim);
      std::copy(emb->begin(), emb->end(), e.data.begin());
      kernels::matmul_tn_acc(e, drow0, mutable_tensor(out.grads, "img_proj.w"));
      add_col_sums(mutable_tensor(out.grads, "img_proj.b"), drow0);
      for (int j = 0; j < config.d_model; ++j) genc_pos.at(0, j) += drow0.at(0, j);
    }
    for (std::size_t i = 0; i < ex.input_tokens.size(); ++i) {
      const double* src = dx_enc.row(static_cast<int>(i) + off);
      double* t = gtok.row(ex.input_tokens[i]);
      double* pp = genc_pos.row(static_cast<int>(i) + 1);
      for (int j = 0; j < config.d_model; ++j) {
        t[j] += src[j];
        pp[j] += src[j];
      }
    }
  }
  out.loss *= inv_n;
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer

void apply_update(Parameters& params, const Parameters& grads, AdamState& state,
                  const OptimizerConfig& opt) {
  if (grads.size() != params.size()) {
    throw ValidationError("gradient tensor set does not match parameters");
  }
  double sq_norm = 0.0;
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end() || !it->second.same_shape(g)) {
      throw ValidationError("gradient shape mismatch for tensor: " + name);
    }
    for (double x : g.data) {
      if (!std::isfinite(x)) throw ValidationError("non-finite gradient in tensor: " + name);
      sq_norm += x * x;
    }
  }
  if (!std::isfinite(sq_norm)) throw ValidationError("non-finite gradient norm");
  const double norm = std::sqrt(sq_norm);
  const double clip_scale =
      (opt.clip_norm > 0.0 && norm > opt.clip_norm) ? opt.clip_norm / norm : 1.0;

  if (state.m.empty()) {
    for (const auto& [name, g] : grads) {
      state.m.emplace(name, Matrix(g.rows, g.cols));
      state.v.emplace(name, Matrix(g.rows, g.cols));
    }
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.step));
  for (auto& [name, p] : params) {
    const Matrix& g = grads.at(name);
    Matrix& m = state.m.at(name);
    Matrix& v = state.v.at(name);
    for (std::size_t i = 0; i < p.data.size(); ++i) {
      const double gi = g.data[i] * clip_scale;
      m.data[i] = opt.beta1 * m.data[i] + (1.0 - opt.beta1) * gi;
      v.data[i] = opt.beta2 * v.data[i] + (1.0 - opt.beta2) * gi * gi;
      const double mhat = m.data[i] / bc1;
      const double vhat = v.data[i] / bc2;
      p.data[i] -= opt.lr * mhat / (std::sqrt(vhat) + opt.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const std::string& dir, const Checkpoint& ckpt) {
  fs::create_directories(dir);
  json manifest;
  manifest["format"] = "attrgen-checkpoint-v1";
  manifest["config"] = json::parse(ckpt.config.to_json());
  manifest["step"] = ckpt.step;
  manifest["seed"] = ckpt.seed;
  json index = json::array();
  long long offset = 0;  // in doubles, not bytes
  for (const auto& [name, m] : ckpt.params) {
    index.push_back({{"name", name}, {"rows", m.rows}, {"cols", m.cols}, {"offset", offset}});
    offset += static_cast<long long>(m.size());
  }
  manifest["tensors"] = std::move(index);

  const fs::path bin_path = fs::path(dir) / "tensors.bin";
  std::ofstream bin(bin_path, std::ios::binary | std::ios::trunc);
  if (!bin) throw IoError("cannot write " + bin_path.string());
  for (const auto& [name, m] : ckpt.params) {
    bin.write(reinterpret_cast<const char*>(m.data.data()),
              static_cast<std::streamsize>(m.size() * sizeof(double)));
  }
  bin.flush();
  if (!bin) throw IoError("failed writing " + bin_path.string());
  write_text_file(fs::path(dir) / "manifest.json", manifest.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::string& dir) {
  const fs::path manifest_path = fs::path(dir) / "manifest.json";
  json manifest = json::parse(read_text_file(manifest_path), nullptr,
                              /*allow_exceptions=*/false);
  if (manifest.is_discarded() || !manifest.is_object()) {
    throw IoError("malformed checkpoint manifest: " + manifest_path.string());
  }
  Checkpoint ckpt;
  try {
    if (manifest.at("format").get<std::string>() != "attrgen-checkpoint-v1") {
      throw IoError("unsupported checkpoint format in " + manifest_path.string());
    }
    ckpt.config = ModelConfig::from_json(manifest.at("config").dump());
    ckpt.step = manifest.at("step").get<long long>();
    ckpt.seed = manifest.at("seed").get<std::uint64_t>();
    const fs::path bin_path = fs::path(dir) / "tensors.bin";
    std::ifstream bin(bin_path, std::ios::binary);
    if (!bin) throw IoError("cannot read " + bin_path.string());
    long long expected = 0;
    for (const auto& entry : manifest.at("tensors")) {
      const auto name = entry.at("name").get<std::string>();
      const int rows = entry.at("rows").get<int>();
      const int cols = entry.at("cols").get<int>();
      if (rows <= 0 || cols <= 0) throw IoError("bad tensor shape in manifest: " + name);
      if (entry.at("offset").get<long long>() != expected) {
        throw IoError("non-contiguous tensor offset in manifest: " + name);
      }
      Matrix m(rows, cols);
      bin.read(reinterpret_cast<char*>(m.data.data()),
               static_cast<std::streamsize>(m.size() * sizeof(double)));
      if (bin.gcount() != static_cast<std::streamsize>(m.size() * sizeof(double))) {
        throw IoError("tensor data truncated: " + name);
      }
      expected += static_cast<long long>(m.size());
      ckpt.params.emplace(name, std::move(m));
    }
    char extra = 0;
    if (bin.read(&extra, 1).gcount() != 0) {
      throw IoError("trailing bytes in " + bin_path.string());
    }
  } catch (const json::exception& e) {
    throw IoError("checkpoint manifest " + manifest_path.string() + ": " + e.what());
  }
  ckpt.config.validate();
  for (double x : tensor(ckpt.params, "tok_emb").data) {
    if (!std::isfinite(x)) throw IoError("non-finite tensor data in checkpoint");
  }
  return ckpt;
}

}  // namespace attrgen::model
