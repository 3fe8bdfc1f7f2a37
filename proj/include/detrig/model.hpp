#pragma once

// Micro classifier / dual-encoder over token id sequences. Small enough to
// train in seconds on a CPU, big enough to memorize identifier-level
// triggers. All gradients are derived by hand and checked against finite
// differences in the test suite.
//
// Shared trunk: embedding lookup, position-weighted mean pooling where the
// weights are a learned softmax over positions. Heads: a tanh MLP for
// binary classification, and projection matrices Pq/Pc with cosine
// similarity for retrieval (in-batch contrastive cross-entropy).

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "detrig/rng.hpp"
#include "detrig/tensor.hpp"
#include "detrig/vocab.hpp"

namespace detrig {

struct ModelConfig {
  int vocab_size = 0;
  int dim = 64;
  int hidden = 128;
  int classes = 2;
  int max_len = 256;
  // Temperature applied to classification logits and retrieval cosine
  // similarities before softmax. Raw margins stay small, which keeps the
  // trunk representation from collapsing once the task is fit.
  double logit_scale = 10.0;

  bool operator==(const ModelConfig&) const = default;
};

struct ModelMeta {
  std::uint64_t seed = 0;
  std::uint64_t vocab_hash = 0;  // hash of the vocabulary used at train time
  std::string task;              // "classify" / "retrieve", set by the trainer
  double final_train_loss = 0.0;

  bool operator==(const ModelMeta&) const = default;
};

struct MicroModel {
  ModelConfig cfg;
  ModelMeta meta;
  Matrix E;                   // vocab_size x dim
  std::vector<double> pos_w;  // max_len
  Matrix W1;                  // hidden x dim
  std::vector<double> b1;     // hidden
  Matrix W2;                  // classes x hidden
  std::vector<double> b2;     // classes
  Matrix Pq;                  // dim x dim
  Matrix Pc;                  // dim x dim
};

inline MicroModel init_model(const ModelConfig& cfg, std::uint64_t seed) {
  if (cfg.vocab_size <= 0) throw std::invalid_argument("init_model: vocab_size must be set");
  MicroModel m;
  m.cfg = cfg;
  m.meta.seed = seed;
  Rng rng(derive_seed(seed, "model/init"));
  m.E = Matrix(static_cast<std::size_t>(cfg.vocab_size), static_cast<std::size_t>(cfg.dim));
  for (auto& x : m.E.data) x = rng.normal(0.0, 0.1);
  m.pos_w.assign(static_cast<std::size_t>(cfg.max_len), 0.0);
  m.W1 = Matrix(static_cast<std::size_t>(cfg.hidden), static_cast<std::size_t>(cfg.dim));
  for (auto& x : m.W1.data) x = rng.normal(0.0, 1.0 / std::sqrt(static_cast<double>(cfg.dim)));
  m.b1.assign(static_cast<std::size_t>(cfg.hidden), 0.0);
  m.W2 = Matrix(static_cast<std::size_t>(cfg.classes), static_cast<std::size_t>(cfg.hidden));
  for (auto& x : m.W2.data) x = rng.normal(0.0, 1.0 / std::sqrt(static_cast<double>(cfg.hidden)));
  m.b2.assign(static_cast<std::size_t>(cfg.classes), 0.0);
  m.Pq = Matrix(static_cast<std::size_t>(cfg.dim), static_cast<std::size_t>(cfg.dim));
  m.Pc = Matrix(static_cast<std::size_t>(cfg.dim), static_cast<std::size_t>(cfg.dim));
  for (std::size_t i = 0; i < m.Pq.rows; ++i)
    for (std::size_t j = 0; j < m.Pq.cols; ++j) {
      m.Pq.at(i, j) = (i == j ? 1.0 : 0.0) + rng.normal(0.0, 0.01);
      m.Pc.at(i, j) = (i == j ? 1.0 : 0.0) + rng.normal(0.0, 0.01);
    }
  return m;
}

namespace detail {

inline void softmax_inplace(std::vector<double>& v) {
  double mx = v[0];
  for (double x : v) mx = std::max(mx, x);
  double sum = 0.0;
  for (auto& x : v) {
    x = std::exp(x - mx);
    sum += x;
  }
  for (auto& x : v) x /= sum;
}

}  // namespace detail

// Forward intermediates of the shared trunk for one sequence.
struct Pooled {
  std::size_t n = 0;            // used length (after truncation)
  std::vector<double> attn;     // n, softmax of pos_w prefix
  std::vector<double> h;        // dim
};

inline Pooled pool_sequence(const MicroModel& m, const std::vector<int>& ids) {
  if (ids.empty()) throw std::invalid_argument("pool_sequence: empty sequence");
  Pooled p;
  p.n = std::min(ids.size(), static_cast<std::size_t>(m.cfg.max_len));
  p.attn.assign(m.pos_w.begin(), m.pos_w.begin() + static_cast<std::ptrdiff_t>(p.n));
  detail::softmax_inplace(p.attn);
  p.h.assign(static_cast<std::size_t>(m.cfg.dim), 0.0);
  for (std::size_t i = 0; i < p.n; ++i)
    axpy(p.attn[i], m.E.row(static_cast<std::size_t>(ids[i])), p.h);
  return p;
}

// Backpropagate d(loss)/dh through the pooling into dE and dpos_w.
// Pass null pointers for grads that are not needed.
inline void pool_backward(const MicroModel& m, const std::vector<int>& ids, const Pooled& p,
                          const std::vector<double>& dh, Matrix* dE,
                          std::vector<double>* dpos_w) {
  std::vector<double> da(p.n, 0.0);
  for (std::size_t i = 0; i < p.n; ++i) {
    da[i] = dot(dh, m.E.row(static_cast<std::size_t>(ids[i])));
    if (dE) axpy(p.attn[i], dh, dE->row(static_cast<std::size_t>(ids[i])));
  }
  if (dpos_w) {
    double mix = 0.0;
    for (std::size_t i = 0; i < p.n; ++i) mix += p.attn[i] * da[i];
    for (std::size_t i = 0; i < p.n; ++i) (*dpos_w)[i] += p.attn[i] * (da[i] - mix);
  }
}

struct ClassifyForward {
  Pooled pooled;
  std::vector<double> u;       // hidden, tanh activations
  std::vector<double> probs;   // classes
  double loss = 0.0;           // set when a label was given
};

inline ClassifyForward classify_forward(const MicroModel& m, const std::vector<int>& ids,
                                        int label = -1) {
  ClassifyForward f;
  f.pooled = pool_sequence(m, ids);
  f.u.assign(static_cast<std::size_t>(m.cfg.hidden), 0.0);
  matvec(m.W1, f.pooled.h, f.u);
  for (std::size_t i = 0; i < f.u.size(); ++i) f.u[i] = std::tanh(f.u[i] + m.b1[i]);
  f.probs.assign(static_cast<std::size_t>(m.cfg.classes), 0.0);
  matvec(m.W2, f.u, f.probs);
  for (std::size_t i = 0; i < f.probs.size(); ++i)
    f.probs[i] = (f.probs[i] + m.b2[i]) * m.cfg.logit_scale;
  detail::softmax_inplace(f.probs);
  if (label >= 0)
    f.loss = -std::log(std::max(f.probs[static_cast<std::size_t>(label)], 1e-300));
  return f;
}

inline int classify_predict(const MicroModel& m, const std::vector<int>& ids) {
  auto f = classify_forward(m, ids);
  int best = 0;
  for (int c = 1; c < m.cfg.classes; ++c)
    if (f.probs[static_cast<std::size_t>(c)] > f.probs[static_cast<std::size_t>(best)]) best = c;
  return best;
}

inline double classify_loss(const MicroModel& m, const std::vector<int>& ids, int label) {
  return classify_forward(m, ids, label).loss;
}

struct ModelGrads {
  Matrix dE;
  std::vector<double> dpos_w;
  Matrix dW1;
  std::vector<double> db1;
  Matrix dW2;
  std::vector<double> db2;
  Matrix dPq;
  Matrix dPc;
};

inline ModelGrads zero_grads(const MicroModel& m) {
  ModelGrads g;
  g.dE = Matrix(m.E.rows, m.E.cols);
  g.dpos_w.assign(m.pos_w.size(), 0.0);
  g.dW1 = Matrix(m.W1.rows, m.W1.cols);
  g.db1.assign(m.b1.size(), 0.0);
  g.dW2 = Matrix(m.W2.rows, m.W2.cols);
  g.db2.assign(m.b2.size(), 0.0);
  g.dPq = Matrix(m.Pq.rows, m.Pq.cols);
  g.dPc = Matrix(m.Pc.rows, m.Pc.cols);
  return g;
}

struct EncodedSample {
  std::vector<int> ids;
  int label = 0;
};

// Accumulate scale * d(CE)/d(params) for one already-forwarded sample.
inline void classify_backward_sample(const MicroModel& m, const std::vector<int>& ids,
                                     const ClassifyForward& f, int label, double scale,
                                     ModelGrads& g) {
  std::vector<double> dlogits(static_cast<std::size_t>(m.cfg.classes));
  std::vector<double> du(static_cast<std::size_t>(m.cfg.hidden));
  std::vector<double> dh(static_cast<std::size_t>(m.cfg.dim));
  for (int c = 0; c < m.cfg.classes; ++c)
    dlogits[static_cast<std::size_t>(c)] =
        scale * m.cfg.logit_scale *
        (f.probs[static_cast<std::size_t>(c)] - (c == label ? 1.0 : 0.0));
  for (std::size_t i = 0; i < g.dW2.rows; ++i) {
    axpy(dlogits[i], f.u, g.dW2.row(i));
    g.db2[i] += dlogits[i];
  }
  matvec_t(m.W2, dlogits, du);
  for (std::size_t i = 0; i < du.size(); ++i) du[i] *= 1.0 - f.u[i] * f.u[i];
  for (std::size_t i = 0; i < g.dW1.rows; ++i) {
    axpy(du[i], f.pooled.h, g.dW1.row(i));
    g.db1[i] += du[i];
  }
  matvec_t(m.W1, du, dh);
  pool_backward(m, ids, f.pooled, dh, &g.dE, &g.dpos_w);
}

// Mean loss over the batch; accumulates scaled gradients into g. With
// per-sample weights (used by unlearning, where trigger terms enter with
// weight -1) the objective is mean_i w_i * CE_i.
inline double classify_batch_grad(const MicroModel& m, const std::vector<EncodedSample>& batch,
                                  ModelGrads& g, const std::vector<double>* weights = nullptr) {
  if (batch.empty()) throw std::invalid_argument("classify_batch_grad: empty batch");
  const double inv = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  for (std::size_t s = 0; s < batch.size(); ++s) {
    const double w = weights ? (*weights)[s] : 1.0;
    auto f = classify_forward(m, batch[s].ids, batch[s].label);
    total += w * f.loss;
    classify_backward_sample(m, batch[s].ids, f, batch[s].label, w * inv, g);
  }
  return total * inv;
}

// ---------------------------------------------------------------------------
// Retrieval head

struct EncodedPair {
  std::vector<int> query;
  std::vector<int> code;
};

inline std::vector<double> project(const Matrix& P, const std::vector<double>& h) {
  std::vector<double> e(P.rows, 0.0);
  matvec(P, h, e);
  return e;
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double na = std::sqrt(dot(a, a));
  double nb = std::sqrt(dot(b, b));
  return dot(a, b) / std::max(na * nb, 1e-12);
}

inline std::vector<double> code_embedding(const MicroModel& m, const std::vector<int>& ids) {
  return project(m.Pc, pool_sequence(m, ids).h);
}

inline std::vector<double> query_embedding(const MicroModel& m, const std::vector<int>& ids) {
  return project(m.Pq, pool_sequence(m, ids).h);
}

// d cos(a,b) / d a = b/(|a||b|) - cos * a/|a|^2
inline void cosine_backward(const std::vector<double>& a, const std::vector<double>& b,
                            double cos_ab, double dcos, std::vector<double>& da,
                            std::vector<double>& db) {
  double na = std::max(std::sqrt(dot(a, a)), 1e-12);
  double nb = std::max(std::sqrt(dot(b, b)), 1e-12);
  double inv = 1.0 / (na * nb);
  for (std::size_t i = 0; i < a.size(); ++i) {
    da[i] += dcos * (b[i] * inv - cos_ab * a[i] / (na * na));
    db[i] += dcos * (a[i] * inv - cos_ab * b[i] / (nb * nb));
  }
}

// In-batch contrastive loss: row i of the scaled cosine matrix is a softmax
// over all codes in the batch with code i as the positive.
// In-batch contrastive loss: each query ranks its own code against the other
// codes in the batch. Objective = mean_i w_i * CE_i with w_i = 1 when
// row_weights is null. Negative-weight rows (loss ascent) whose CE already
// reached neg_row_clip drop out of the batch, which keeps the negated term
// from running away.
inline double retrieval_batch_grad(const MicroModel& m, const std::vector<EncodedPair>& batch,
                                   ModelGrads* g,
                                   const std::vector<double>* row_weights = nullptr,
                                   double neg_row_clip = std::numeric_limits<double>::infinity()) {
  const std::size_t B = batch.size();
  if (B < 2) throw std::invalid_argument("retrieval_batch_grad: need at least 2 pairs");
  if (row_weights && row_weights->size() != B)
    throw std::invalid_argument("retrieval_batch_grad: weights/batch size mismatch");
  std::vector<Pooled> pq(B), pc(B);
  std::vector<std::vector<double>> eq(B), ec(B);
  for (std::size_t i = 0; i < B; ++i) {
    pq[i] = pool_sequence(m, batch[i].query);
    pc[i] = pool_sequence(m, batch[i].code);
    eq[i] = project(m.Pq, pq[i].h);
    ec[i] = project(m.Pc, pc[i].h);
  }
  Matrix cosm(B, B);
  double loss = 0.0;
  std::vector<double> row(B);
  Matrix dcos(B, B);
  for (std::size_t i = 0; i < B; ++i) {
    for (std::size_t j = 0; j < B; ++j) {
      cosm.at(i, j) = cosine(eq[i], ec[j]);
      row[j] = cosm.at(i, j) * m.cfg.logit_scale;
    }
    detail::softmax_inplace(row);
    double ce = -std::log(std::max(row[i], 1e-300));
    double w = row_weights ? (*row_weights)[i] : 1.0;
    if (w < 0.0 && ce >= neg_row_clip) w = 0.0;
    loss += w * ce;
    if (g)
      for (std::size_t j = 0; j < B; ++j)
        dcos.at(i, j) = w * (row[j] - (i == j ? 1.0 : 0.0)) * m.cfg.logit_scale /
                        static_cast<double>(B);
  }
  loss /= static_cast<double>(B);
  if (!g) return loss;

  std::vector<std::vector<double>> deq(B, std::vector<double>(eq[0].size(), 0.0));
  std::vector<std::vector<double>> dec(B, std::vector<double>(ec[0].size(), 0.0));
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t j = 0; j < B; ++j)
      if (dcos.at(i, j) != 0.0)
        cosine_backward(eq[i], ec[j], cosm.at(i, j), dcos.at(i, j), deq[i], dec[j]);

  std::vector<double> dh(static_cast<std::size_t>(m.cfg.dim));
  for (std::size_t i = 0; i < B; ++i) {
    for (std::size_t r = 0; r < m.Pq.rows; ++r) axpy(deq[i][r], pq[i].h, g->dPq.row(r));
    std::fill(dh.begin(), dh.end(), 0.0);
    matvec_t(m.Pq, deq[i], dh);
    pool_backward(m, batch[i].query, pq[i], dh, &g->dE, &g->dpos_w);

    for (std::size_t r = 0; r < m.Pc.rows; ++r) axpy(dec[i][r], pc[i].h, g->dPc.row(r));
    std::fill(dh.begin(), dh.end(), 0.0);
    matvec_t(m.Pc, dec[i], dh);
    pool_backward(m, batch[i].code, pc[i], dh, &g->dE, &g->dpos_w);
  }
  return loss;
}

// ---------------------------------------------------------------------------
// One-hot trigger gradient for inversion

// An occurrence of the trigger inside an encoded sequence.
struct TriggerSlot {
  std::vector<int> ids;  // full sequence with current trigger ids in place
  std::size_t offset = 0;  // index of the first trigger token
};

// Gradient of the mean classification loss toward `label` w.r.t. the
// one-hot trigger rows: out[j][v] = mean_s attn_s[offset+j] * (dh_s . E[v]).
// Rows for slots truncated away stay zero.
inline Matrix trigger_grad_classify(const MicroModel& m, const std::vector<TriggerSlot>& batch,
                                    std::size_t trigger_len, int label) {
  if (batch.empty()) throw std::invalid_argument("trigger_grad_classify: empty batch");
  Matrix out(trigger_len, static_cast<std::size_t>(m.cfg.vocab_size));
  const double inv = 1.0 / static_cast<double>(batch.size());
  std::vector<double> dlogits(static_cast<std::size_t>(m.cfg.classes));
  std::vector<double> du(static_cast<std::size_t>(m.cfg.hidden));
  std::vector<double> dh(static_cast<std::size_t>(m.cfg.dim));
  std::vector<double> gvec(static_cast<std::size_t>(m.cfg.vocab_size));
  for (const auto& slot : batch) {
    auto f = classify_forward(m, slot.ids, label);
    for (int c = 0; c < m.cfg.classes; ++c)
      dlogits[static_cast<std::size_t>(c)] =
          m.cfg.logit_scale *
          (f.probs[static_cast<std::size_t>(c)] - (c == label ? 1.0 : 0.0));
    matvec_t(m.W2, dlogits, du);
    for (std::size_t i = 0; i < du.size(); ++i) du[i] *= 1.0 - f.u[i] * f.u[i];
    matvec_t(m.W1, du, dh);
    matvec(m.E, dh, gvec);  // gvec[v] = dh . E[v]
    for (std::size_t j = 0; j < trigger_len; ++j) {
      std::size_t pos = slot.offset + j;
      if (pos >= f.pooled.n) continue;
      axpy(inv * f.pooled.attn[pos], gvec, out.row(j));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

enum class TrainScope { full, last_layer };

struct TrainConfig {
  int epochs = 5;
  std::size_t batch_size = 16;
  double lr = 2e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  TrainScope scope = TrainScope::full;
};

namespace detail {

struct TensorRef {
  double* p;
  const double* g;
  std::size_t n;
};

inline std::vector<TensorRef> scope_refs(MicroModel& m, const ModelGrads& g, TrainScope scope,
                                         bool retrieval) {
  std::vector<TensorRef> refs;
  if (scope == TrainScope::full) {
    refs.push_back({m.E.data.data(), g.dE.data.data(), m.E.data.size()});
    refs.push_back({m.pos_w.data(), g.dpos_w.data(), m.pos_w.size()});
    if (retrieval) {
      refs.push_back({m.Pq.data.data(), g.dPq.data.data(), m.Pq.data.size()});
      refs.push_back({m.Pc.data.data(), g.dPc.data.data(), m.Pc.data.size()});
    } else {
      refs.push_back({m.W1.data.data(), g.dW1.data.data(), m.W1.data.size()});
      refs.push_back({m.b1.data(), g.db1.data(), m.b1.size()});
      refs.push_back({m.W2.data.data(), g.dW2.data.data(), m.W2.data.size()});
      refs.push_back({m.b2.data(), g.db2.data(), m.b2.size()});
    }
  } else {
    if (retrieval) {
      refs.push_back({m.Pq.data.data(), g.dPq.data.data(), m.Pq.data.size()});
      refs.push_back({m.Pc.data.data(), g.dPc.data.data(), m.Pc.data.size()});
    } else {
      refs.push_back({m.W2.data.data(), g.dW2.data.data(), m.W2.data.size()});
      refs.push_back({m.b2.data(), g.db2.data(), m.b2.size()});
    }
  }
  return refs;
}

struct Adam {
  std::vector<double> mom, vel;
  int t = 0;

  void init(const std::vector<TensorRef>& refs) {
    std::size_t total = 0;
    for (const auto& r : refs) total += r.n;
    mom.assign(total, 0.0);
    vel.assign(total, 0.0);
  }

  void step(const std::vector<TensorRef>& refs, const TrainConfig& cfg) {
    ++t;
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);
    std::size_t k = 0;
    for (const auto& r : refs) {
      for (std::size_t i = 0; i < r.n; ++i, ++k) {
        mom[k] = cfg.beta1 * mom[k] + (1.0 - cfg.beta1) * r.g[i];
        vel[k] = cfg.beta2 * vel[k] + (1.0 - cfg.beta2) * r.g[i] * r.g[i];
        double mhat = mom[k] / bc1;
        double vhat = vel[k] / bc2;
        r.p[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
      }
    }
  }
};

}  // namespace detail

// Minibatch Adam over the classification head (and trunk, under full
// scope). Returns the mean loss of the final epoch. Optional per-sample
// weights follow the samples through shuffling.
inline double train_classifier(MicroModel& m, const std::vector<EncodedSample>& samples,
                               const TrainConfig& cfg, std::uint64_t seed,
                               const std::vector<double>* weights = nullptr) {
  if (samples.empty()) throw std::invalid_argument("train_classifier: no samples");
  Rng rng(derive_seed(seed, "model/train_classifier"));
  std::vector<std::size_t> order(samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  ModelGrads g = zero_grads(m);
  auto refs = detail::scope_refs(m, g, cfg.scope, /*retrieval=*/false);
  detail::Adam adam;
  adam.init(refs);
  double epoch_loss = 0.0;
  for (int e = 0; e < cfg.epochs; ++e) {
    rng.shuffle(order);
    epoch_loss = 0.0;
    std::size_t nbatches = 0;
    for (std::size_t b = 0; b < samples.size(); b += cfg.batch_size) {
      std::size_t end = std::min(samples.size(), b + cfg.batch_size);
      std::vector<EncodedSample> batch(end - b);
      std::vector<double> w(end - b, 1.0);
      for (std::size_t i = b; i < end; ++i) {
        batch[i - b] = samples[order[i]];
        if (weights) w[i - b] = (*weights)[order[i]];
      }
      g.dE.zero();
      std::fill(g.dpos_w.begin(), g.dpos_w.end(), 0.0);
      g.dW1.zero();
      std::fill(g.db1.begin(), g.db1.end(), 0.0);
      g.dW2.zero();
      std::fill(g.db2.begin(), g.db2.end(), 0.0);
      epoch_loss += classify_batch_grad(m, batch, g, weights ? &w : nullptr);
      adam.step(refs, cfg);
      ++nbatches;
    }
    epoch_loss /= static_cast<double>(nbatches);
    if (!std::isfinite(epoch_loss))
      throw std::runtime_error("train_classifier: diverged (non-finite loss) at epoch " +
                               std::to_string(e));
  }
  m.meta.task = "classify";
  m.meta.final_train_loss = epoch_loss;
  return epoch_loss;
}

inline double train_dual_encoder(MicroModel& m, const std::vector<EncodedPair>& pairs,
                                 const TrainConfig& cfg, std::uint64_t seed) {
  if (pairs.size() < 2) throw std::invalid_argument("train_dual_encoder: need >= 2 pairs");
  Rng rng(derive_seed(seed, "model/train_dual_encoder"));
  std::vector<std::size_t> order(pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  ModelGrads g = zero_grads(m);
  auto refs = detail::scope_refs(m, g, cfg.scope, /*retrieval=*/true);
  detail::Adam adam;
  adam.init(refs);
  double epoch_loss = 0.0;
  for (int e = 0; e < cfg.epochs; ++e) {
    rng.shuffle(order);
    epoch_loss = 0.0;
    std::size_t nbatches = 0;
    for (std::size_t b = 0; b + 1 < pairs.size(); b += cfg.batch_size) {
      std::size_t end = std::min(pairs.size(), b + cfg.batch_size);
      std::vector<EncodedPair> batch(end - b);
      for (std::size_t i = b; i < end; ++i) batch[i - b] = pairs[order[i]];
      g.dE.zero();
      std::fill(g.dpos_w.begin(), g.dpos_w.end(), 0.0);
      g.dPq.zero();
      g.dPc.zero();
      epoch_loss += retrieval_batch_grad(m, batch, &g);
      adam.step(refs, cfg);
      ++nbatches;
    }
    epoch_loss /= static_cast<double>(nbatches);
    if (!std::isfinite(epoch_loss))
      throw std::runtime_error("train_dual_encoder: diverged (non-finite loss) at epoch " +
                               std::to_string(e));
  }
  m.meta.task = "retrieve";
  m.meta.final_train_loss = epoch_loss;
  return epoch_loss;
}

// ---------------------------------------------------------------------------
// Checkpoints. Self-describing container: a magic line, a JSON header naming
// every tensor with its shape plus the metadata, then the tensor payloads as
// row-major little-endian 64-bit floats in header order. The header carries
// an FNV-64 checksum over (header-without-checksum + payload); load refuses
// a file whose checksum does not match, so neither the metadata (e.g. the
// vocab hash) nor the payload can be altered unnoticed.

namespace detail {

struct NamedTensor {
  const char* name;
  const std::vector<double>* data;
  std::vector<std::size_t> shape;
};

inline std::vector<NamedTensor> model_tensors(const MicroModel& m) {
  auto d = [](int x) { return static_cast<std::size_t>(x); };
  return {{"E", &m.E.data, {d(m.cfg.vocab_size), d(m.cfg.dim)}},
          {"pos_w", &m.pos_w, {d(m.cfg.max_len)}},
          {"W1", &m.W1.data, {d(m.cfg.hidden), d(m.cfg.dim)}},
          {"b1", &m.b1, {d(m.cfg.hidden)}},
          {"W2", &m.W2.data, {d(m.cfg.classes), d(m.cfg.hidden)}},
          {"b2", &m.b2, {d(m.cfg.classes)}},
          {"Pq", &m.Pq.data, {d(m.cfg.dim), d(m.cfg.dim)}},
          {"Pc", &m.Pc.data, {d(m.cfg.dim), d(m.cfg.dim)}}};
}

inline void doubles_to_bytes(const std::vector<double>& v, std::string& out) {
  for (double x : v) {
    std::uint64_t bits;
    std::memcpy(&bits, &x, 8);
    for (int i = 0; i < 8; ++i)
      out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
  }
}

inline void bytes_to_doubles(const std::string& in, std::size_t offset,
                             std::vector<double>& v) {
  for (auto& x : v) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i)
      bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[offset++])) << (8 * i);
    std::memcpy(&x, &bits, 8);
  }
}

inline nlohmann::json checkpoint_header(const MicroModel& m) {
  nlohmann::json h;
  h["config"] = {{"vocab_size", m.cfg.vocab_size}, {"dim", m.cfg.dim},
                 {"hidden", m.cfg.hidden},         {"classes", m.cfg.classes},
                 {"max_len", m.cfg.max_len},       {"logit_scale", m.cfg.logit_scale}};
  h["meta"] = {{"seed", m.meta.seed},
               {"vocab_hash", m.meta.vocab_hash},
               {"task", m.meta.task},
               {"final_train_loss", m.meta.final_train_loss}};
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& t : model_tensors(m)) tensors.push_back({{"name", t.name}, {"shape", t.shape}});
  h["tensors"] = tensors;
  return h;
}

}  // namespace detail

inline constexpr const char* kCheckpointMagic = "DTRGMDL2";

inline void save_model(const MicroModel& m, const std::string& path) {
  std::string payload;
  for (const auto& t : detail::model_tensors(m)) {
    std::size_t n = 1;
    for (std::size_t s : t.shape) n *= s;
    if (t.data->size() != n)
      throw std::runtime_error(std::string("save_model: bad shape for tensor ") + t.name);
    detail::doubles_to_bytes(*t.data, payload);
  }
  nlohmann::json h = detail::checkpoint_header(m);
  std::string unsealed = h.dump();
  std::uint64_t sum = fnv1a64(payload, fnv1a64(unsealed));
  h["checksum"] = sum;
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for write: " + path);
  out << kCheckpointMagic << "\n" << h.dump() << "\n" << payload;
  if (!out) throw std::runtime_error("write failed: " + path);
}

inline MicroModel load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open for read: " + path);
  std::string magic, header_line;
  if (!std::getline(in, magic) || magic != kCheckpointMagic)
    throw std::runtime_error("bad model file (magic): " + path);
  if (!std::getline(in, header_line))
    throw std::runtime_error("bad model file (header): " + path);
  nlohmann::json h = nlohmann::json::parse(header_line, nullptr, false);
  if (h.is_discarded() || !h.contains("checksum"))
    throw std::runtime_error("bad model file (header): " + path);
  std::string payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  const std::uint64_t stored = h.at("checksum").get<std::uint64_t>();
  h.erase("checksum");
  if (fnv1a64(payload, fnv1a64(h.dump())) != stored)
    throw std::runtime_error("model file rejected (checksum mismatch): " + path);

  MicroModel m;
  const auto& c = h.at("config");
  m.cfg.vocab_size = c.at("vocab_size").get<int>();
  m.cfg.dim = c.at("dim").get<int>();
  m.cfg.hidden = c.at("hidden").get<int>();
  m.cfg.classes = c.at("classes").get<int>();
  m.cfg.max_len = c.at("max_len").get<int>();
  m.cfg.logit_scale = c.at("logit_scale").get<double>();
  const auto& me = h.at("meta");
  m.meta.seed = me.at("seed").get<std::uint64_t>();
  m.meta.vocab_hash = me.at("vocab_hash").get<std::uint64_t>();
  m.meta.task = me.at("task").get<std::string>();
  m.meta.final_train_loss = me.at("final_train_loss").get<double>();

  m.E = Matrix(static_cast<std::size_t>(m.cfg.vocab_size), static_cast<std::size_t>(m.cfg.dim));
  m.pos_w.assign(static_cast<std::size_t>(m.cfg.max_len), 0.0);
  m.W1 = Matrix(static_cast<std::size_t>(m.cfg.hidden), static_cast<std::size_t>(m.cfg.dim));
  m.b1.assign(static_cast<std::size_t>(m.cfg.hidden), 0.0);
  m.W2 = Matrix(static_cast<std::size_t>(m.cfg.classes), static_cast<std::size_t>(m.cfg.hidden));
  m.b2.assign(static_cast<std::size_t>(m.cfg.classes), 0.0);
  m.Pq = Matrix(static_cast<std::size_t>(m.cfg.dim), static_cast<std::size_t>(m.cfg.dim));
  m.Pc = Matrix(static_cast<std::size_t>(m.cfg.dim), static_cast<std::size_t>(m.cfg.dim));

  auto tensors = detail::model_tensors(m);
  const auto& th = h.at("tensors");
  if (th.size() != tensors.size())
    throw std::runtime_error("model file rejected (tensor list mismatch): " + path);
  std::size_t total = 0;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (th[i].at("name").get<std::string>() != tensors[i].name ||
        th[i].at("shape").get<std::vector<std::size_t>>() != tensors[i].shape)
      throw std::runtime_error("model file rejected (shape mismatch): " + path);
    total += tensors[i].data->size();
  }
  if (payload.size() != total * 8)
    throw std::runtime_error("truncated model file: " + path);
  std::size_t offset = 0;
  for (auto& t : tensors) {
    auto* dst = const_cast<std::vector<double>*>(t.data);
    detail::bytes_to_doubles(payload, offset, *dst);
    offset += dst->size() * 8;
  }
  return m;
}

inline bool models_equal(const MicroModel& a, const MicroModel& b) {
  return a.cfg == b.cfg && a.meta == b.meta && a.E.data == b.E.data && a.pos_w == b.pos_w &&
         a.W1.data == b.W1.data && a.b1 == b.b1 && a.W2.data == b.W2.data && a.b2 == b.b2 &&
         a.Pq.data == b.Pq.data && a.Pc.data == b.Pc.data;
}

inline std::vector<EncodedSample> encode_classify(const Vocab& v, const std::vector<Sample>& samples) {
  std::vector<EncodedSample> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back({v.encode(s.snippet.tokens), s.label});
  return out;
}

inline std::vector<EncodedPair> encode_retrieve(const Vocab& v,
                                                const std::vector<RetrievalSample>& samples) {
  std::vector<EncodedPair> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back({v.encode(s.query), v.encode(s.snippet.tokens)});
  return out;
}

}  // namespace detrig
