#include "dseal/tape.hpp"

#include <cblas.h>

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "dseal/parallel.hpp"

namespace dseal {

bool all_finite(const Tensor& t) {
  for (float v : t.data)
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace dseal

namespace dseal::ad {
namespace {

struct Scratch {
  std::vector<float> col;
  std::vector<float> aux;
};

Scratch& tl_scratch() {
  thread_local Scratch s;
  return s;
}

float* grow(std::vector<float>& buf, size_t n) {
  if (buf.size() < n) buf.resize(n);
  return buf.data();
}

void sgemm(bool ta, bool tb, int m, int n, int k, float alpha, const float* a,
           int lda, const float* b, int ldb, float beta, float* c, int ldc) {
  cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans,
              tb ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb,
              beta, c, ldc);
}

void check(bool cond, const char* msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace

Node* Tape::make(Tensor value, std::vector<Node*> parents, bool requires_grad) {
  auto n = std::make_unique<Node>();
  n->value = std::move(value);
  n->parents = std::move(parents);
  n->requires_grad = requires_grad;
  for (Node* p : n->parents) n->requires_grad = n->requires_grad || p->requires_grad;
  nodes_.push_back(std::move(n));
  return nodes_.back().get();
}

Node* Tape::input(Tensor value) { return make(std::move(value), {}, false); }

Node* Tape::input_grad(Tensor value) { return make(std::move(value), {}, true); }

Node* Tape::param(Param& p) {
  auto it = bound_.find(&p);
  if (it != bound_.end()) return it->second;
  Node* n = make(p.value, {}, true);
  Param* pp = &p;
  n->backward_fn = [pp](Node& self) {
    const auto& g = self.grad.data;
    auto& acc = pp->grad.data;
    for (size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
  };
  bound_[&p] = n;
  return n;
}

void ensure_grad(Node* n) {
  if (!n->grad_ready) {
    n->grad = Tensor(n->value.shape);
    n->grad_ready = true;
  }
}

void accumulate(Node* dst, const Tensor& g) {
  if (!dst->requires_grad) return;
  ensure_grad(dst);
  auto& d = dst->grad.data;
  for (size_t i = 0; i < d.size(); ++i) d[i] += g.data[i];
}

void Tape::backward(Node* root) {
  for (auto& n : nodes_) n->reachable = false;
  std::vector<Node*> stack{root};
  root->reachable = true;
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    for (Node* p : n->parents) {
      if (!p->reachable) {
        p->reachable = true;
        stack.push_back(p);
      }
    }
  }
  ensure_grad(root);
  std::fill(root->grad.data.begin(), root->grad.data.end(), 1.0f);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node* n = it->get();
    if (n->reachable && n->requires_grad && n->grad_ready && n->backward_fn)
      n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

namespace {

template <class Fwd, class Bwd>
Node* unary_op(Tape& t, Node* a, Fwd fwd, Bwd bwd) {
  Tensor out(a->value.shape);
  const auto& x = a->value.data;
  for (size_t i = 0; i < x.size(); ++i) out.data[i] = fwd(x[i]);
  Node* n = t.make(std::move(out), {a}, false);
  if (n->requires_grad) {
    n->backward_fn = [a, bwd](Node& self) {
      if (!a->requires_grad) return;
      ensure_grad(a);
      const auto& x = a->value.data;
      const auto& y = self.value.data;
      const auto& g = self.grad.data;
      auto& da = a->grad.data;
      for (size_t i = 0; i < x.size(); ++i) da[i] += g[i] * bwd(x[i], y[i]);
    };
  }
  return n;
}

}  // namespace

Node* add(Tape& t, Node* a, Node* b) { return add_scaled(t, a, b, 1.0f); }

Node* sub(Tape& t, Node* a, Node* b) { return add_scaled(t, a, b, -1.0f); }

Node* add_scaled(Tape& t, Node* a, Node* b, float alpha) {
  check(a->value.same_shape(b->value), "add: shape mismatch");
  Tensor out(a->value.shape);
  for (size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = a->value.data[i] + alpha * b->value.data[i];
  Node* n = t.make(std::move(out), {a, b}, false);
  if (n->requires_grad) {
    n->backward_fn = [a, b, alpha](Node& self) {
      const auto& g = self.grad.data;
      if (a->requires_grad) {
        ensure_grad(a);
        for (size_t i = 0; i < g.size(); ++i) a->grad.data[i] += g[i];
      }
      if (b->requires_grad) {
        ensure_grad(b);
        for (size_t i = 0; i < g.size(); ++i) b->grad.data[i] += alpha * g[i];
      }
    };
  }
  return n;
}

Node* mul(Tape& t, Node* a, Node* b) {
  check(a->value.same_shape(b->value), "mul: shape mismatch");
  Tensor out(a->value.shape);
  for (size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = a->value.data[i] * b->value.data[i];
  Node* n = t.make(std::move(out), {a, b}, false);
  if (n->requires_grad) {
    n->backward_fn = [a, b](Node& self) {
      const auto& g = self.grad.data;
      if (a->requires_grad) {
        ensure_grad(a);
        for (size_t i = 0; i < g.size(); ++i) a->grad.data[i] += g[i] * b->value.data[i];
      }
      if (b->requires_grad) {
        ensure_grad(b);
        for (size_t i = 0; i < g.size(); ++i) b->grad.data[i] += g[i] * a->value.data[i];
      }
    };
  }
  return n;
}

Node* scale(Tape& t, Node* a, float s) {
  return unary_op(t, a, [s](float x) { return s * x; },
                  [s](float, float) { return s; });
}

Node* add_scalar(Tape& t, Node* a, float s) {
  return unary_op(t, a, [s](float x) { return x + s; },
                  [](float, float) { return 1.0f; });
}

Node* silu(Tape& t, Node* a) {
  return unary_op(
      t, a,
      [](float x) { return x / (1.0f + std::exp(-x)); },
      [](float x, float) {
        float s = 1.0f / (1.0f + std::exp(-x));
        return s * (1.0f + x * (1.0f - s));
      });
}

Node* sigmoid(Tape& t, Node* a) {
  return unary_op(t, a, [](float x) { return 1.0f / (1.0f + std::exp(-x)); },
                  [](float, float y) { return y * (1.0f - y); });
}

Node* leaky_relu(Tape& t, Node* a, float slope) {
  return unary_op(t, a, [slope](float x) { return x >= 0 ? x : slope * x; },
                  [slope](float x, float) { return x >= 0 ? 1.0f : slope; });
}

Node* relu(Tape& t, Node* a) { return leaky_relu(t, a, 0.0f); }

Node* clamp01(Tape& t, Node* a) {
  return unary_op(
      t, a, [](float x) { return std::min(1.0f, std::max(0.0f, x)); },
      [](float x, float) { return (x >= 0.0f && x <= 1.0f) ? 1.0f : 0.0f; });
}

Node* square(Tape& t, Node* a) {
  return unary_op(t, a, [](float x) { return x * x; },
                  [](float x, float) { return 2.0f * x; });
}

Node* round_st(Tape& t, Node* a) {
  return unary_op(t, a, [](float x) { return std::round(x); },
                  [](float, float) { return 1.0f; });
}

Node* detach(Tape& t, Node* a) { return t.input(a->value); }

// ---------------------------------------------------------------------------
// shape
// ---------------------------------------------------------------------------

Node* reshape(Tape& t, Node* a, std::vector<int> shape) {
  check(Tensor::count(shape) == a->value.numel(), "reshape: count mismatch");
  Tensor out(std::move(shape), a->value.data);
  Node* n = t.make(std::move(out), {a}, false);
  if (n->requires_grad) {
    n->backward_fn = [a](Node& self) {
      if (!a->requires_grad) return;
      ensure_grad(a);
      for (size_t i = 0; i < self.grad.data.size(); ++i)
        a->grad.data[i] += self.grad.data[i];
    };
  }
  return n;
}

Node* concat_channels(Tape& t, Node* a, Node* b) {
  const auto& sa = a->value.shape;
  const auto& sb = b->value.shape;
  check(sa.size() == 4 && sb.size() == 4 && sa[0] == sb[0] && sa[2] == sb[2] &&
            sa[3] == sb[3],
        "concat_channels: incompatible shapes");
  int B = sa[0], Ca = sa[1], Cb = sb[1], H = sa[2], W = sa[3];
  int64_t plane = int64_t(H) * W;
  Tensor out({B, Ca + Cb, H, W});
  for (int i = 0; i < B; ++i) {
    std::memcpy(out.ptr() + i * (Ca + Cb) * plane, a->value.ptr() + i * Ca * plane,
                sizeof(float) * Ca * plane);
    std::memcpy(out.ptr() + (i * (Ca + Cb) + Ca) * plane,
                b->value.ptr() + i * Cb * plane, sizeof(float) * Cb * plane);
  }
  Node* n = t.make(std::move(out), {a, b}, false);
  if (n->requires_grad) {
    n->backward_fn = [a, b, B, Ca, Cb, plane](Node& self) {
      const float* g = self.grad.ptr();
      if (a->requires_grad) {
        ensure_grad(a);
        for (int i = 0; i < B; ++i)
          for (int64_t j = 0; j < Ca * plane; ++j)
            a->grad.data[i * Ca * plane + j] += g[i * (Ca + Cb) * plane + j];
      }
      if (b->requires_grad) {
        ensure_grad(b);
        for (int i = 0; i < B; ++i)
          for (int64_t j = 0; j < Cb * plane; ++j)
            b->grad.data[i * Cb * plane + j] +=
                g[(int64_t(i) * (Ca + Cb) + Ca) * plane + j];
      }
    };
  }
  return n;
}

Node* slice_channels(Tape& t, Node* a, int c0, int c1) {
  const auto& s = a->value.shape;
  check(s.size() == 4 && c0 >= 0 && c1 <= s[1] && c0 < c1, "slice_channels: bad range");
  int B = s[0], C = s[1], H = s[2], W = s[3], Cs = c1 - c0;
  int64_t plane = int64_t(H) * W;
  Tensor out({B, Cs, H, W});
  for (int i = 0; i < B; ++i)
    std::memcpy(out.ptr() + i * Cs * plane,
                a->value.ptr() + (int64_t(i) * C + c0) * plane,
                sizeof(float) * Cs * plane);
  Node* n = t.make(std::move(out), {a}, false);
  if (n->requires_grad) {
    n->backward_fn = [a, B, C, c0, Cs, plane](Node& self) {
      if (!a->requires_grad) return;
      ensure_grad(a);
      const float* g = self.grad.ptr();
      for (int i = 0; i < B; ++i)
        for (int64_t j = 0; j < Cs * plane; ++j)
          a->grad.data[(int64_t(i) * C + c0) * plane + j] += g[i * Cs * plane + j];
    };
  }
  return n;
}

namespace {

void permute_copy(const Tensor& in, const std::vector<int>& perm, Tensor& out,
                  bool add_mode) {
  int r = in.rank();
  std::vector<int64_t> in_stride(r, 1), out_stride(r, 1);
  for (int i = r - 2; i >= 0; --i)
    in_stride[i] = in_stride[i + 1] * in.shape[i + 1];
  std::vector<int> out_shape(r);
  for (int i = 0; i < r; ++i) out_shape[i] = in.shape[perm[i]];
  for (int i = r - 2; i >= 0; --i)
    out_stride[i] = out_stride[i + 1] * out_shape[i + 1];
  std::vector<int> idx(r, 0);
  int64_t n = in.numel();
  for (int64_t flat_out = 0; flat_out < n; ++flat_out) {
    int64_t rem = flat_out;
    int64_t src = 0;
    for (int i = 0; i < r; ++i) {
      int64_t d = rem / out_stride[i];
      rem -= d * out_stride[i];
      src += d * in_stride[perm[i]];
    }
    if (add_mode)
      out.data[src] += in.data[flat_out];
    else
      out.data[flat_out] = in.data[src];
  }
}

}  // namespace

Node* permute(Tape& t, Node* a, std::vector<int> perm) {
  int r = a->value.rank();
  check(static_cast<int>(perm.size()) == r, "permute: rank mismatch");
  std::vector<int> out_shape(r);
  for (int i = 0; i < r; ++i) out_shape[i] = a->value.shape[perm[i]];
  Tensor out(out_shape);
  permute_copy(a->value, perm, out, false);
  Node* n = t.make(std::move(out), {a}, false);
  if (n->requires_grad) {
    n->backward_fn = [a, perm](Node& self) {
      if (!a->requires_grad) return;
      ensure_grad(a);
      // scatter: walk output grad in order, add into permuted source slots
      Tensor& g = self.grad;
      permute_copy(g, perm, a->grad, true);
    };
  }
  return n;
}

// ---------------------------------------------------------------------------
// reductions / broadcasts
// ---------------------------------------------------------------------------

Node* sum_all(Tape& t, Node* a) {
  double acc = 0;
  for (float v : a->value.data) acc += v;
  Tensor out({1});
  out.data[0] = static_cast<float>(acc);
  Node* n = t.make(std::move(out), {a}, false);
  if (n->requires_grad) {
    n->backward_fn = [a](Node& self) {
      if (!a->requires_grad) return;
      ensure_grad(a);
      float g = self.grad.data[0];
      for (auto& v : a->grad.data) v += g;
    };
  }
  return n;
}

Node* mean_all(Tape& t, Node* a) {
  int64_t n_el = a->value.numel();
  Node* s = sum_all(t, a);
  return scale(t, s, 1.0f / static_cast<float>(n_el));
}

Node* global_mean_pool(Tape& t, Node* a) {
  const auto& s = a->value.shape;
  check(s.size() == 4, "global_mean_pool: need (B,C,H,W)");
  int B = s[0], C = s[1];
  int64_t plane = int64_t(s[2]) * s[3];
  Tensor out({B, C});
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      double acc = 0;
      const float* p = a->value.ptr() + (int64_t(b) * C + c) * plane;
      for (int64_t i = 0; i < plane; ++i) acc += p[i];
      out.data[b * C + c] = static_cast<float>(acc / plane);
    }
  Node* n = t.make(std::move(out), {a}, false);
  if (n->requires_grad) {
    n->backward_fn = [a, B, C, plane](Node& self) {
      if (!a->requires_grad) return;
      ensure_grad(a);
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
          float g = self.grad.data[b * C + c] / plane;
          float* p = a->grad.ptr() + (int64_t(b) * C + c) * plane;
          for (int64_t i = 0; i < plane; ++i) p[i] += g;
        }
    };
  }
  return n;
}

Node* mean_per_sample(Tape& t, Node* a) {
  const auto& s = a->value.shape;
  check(s.size() >= 2, "mean_per_sample: need batch dim");
  int B = s[0];
  int64_t rest = a->value.numel() / B;
  Tensor out({B});
  for (int b = 0; b < B; ++b) {
    double acc = 0;
    const float* p = a->value.ptr() + b * rest;
    for (int64_t i = 0; i < rest; ++i) acc += p[i];
    out.data[b] = static_cast<float>(acc / rest);
  }
  Node* n = t.make(std::move(out), {a}, false);
  if (n->requires_grad) {
    n->backward_fn = [a, B, rest](Node& self) {
      if (!a->requires_grad) return;
      ensure_grad(a);
      for (int b = 0; b < B; ++b) {
        float g = self.grad.data[b] / rest;
        float* p = a->grad.ptr() + b * rest;
        for (int64_t i = 0; i < rest; ++i) p[i] += g;
      }
    };
  }
  return n;
}

Node* add_per_sample(Tape& t, Node* a, Node* s, float alpha) {
  const auto& sh = a->value.shape;
  int B = sh[0];
  check(s->value.numel() == B, "add_per_sample: scalar-per-sample mismatch");
  int64_t rest = a->value.numel() / B;
  Tensor out(a->value.shape);
  for (int b = 0; b < B; ++b) {
    float add_v = alpha * s->value.data[b];
    const float* p = a->value.ptr() + b * rest;
    float* q = out.ptr() + b * rest;
    for (int64_t i = 0; i < rest; ++i) q[i] = p[i] + add_v;
  }
  Node* n = t.make(std::move(out), {a, s}, false);
  if (n->requires_grad) {
    n->backward_fn = [a, s, alpha, B, rest](Node& self) {
      const float* g = self.grad.ptr();
      if (a->requires_grad) {
        ensure_grad(a);
        for (int64_t i = 0; i < int64_t(B) * rest; ++i) a->grad.data[i] += g[i];
      }
      if (s->requires_grad) {
        ensure_grad(s);
        for (int b = 0; b < B; ++b) {
          double acc = 0;
          for (int64_t i = 0; i < rest; ++i) acc += g[b * rest + i];
          s->grad.data[b] += static_cast<float>(alpha * acc);
        }
      }
    };
  }
  return n;
}

Node* add_channel_bias(Tape& t, Node* a, Node* bias) {
  const auto& s = a->value.shape;
  check(s.size() == 4, "add_channel_bias: need (B,C,H,W)");
  int B = s[0], C = s[1];
  int64_t plane = int64_t(s[2]) * s[3];
  check(bias->value.numel() == int64_t(B) * C, "add_channel_bias: bias (B,C)");
  Tensor out(a->value.shape);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      float add_v = bias->value.data[b * C + c];
      const float* p = a->value.ptr() + (int64_t(b) * C + c) * plane;
      float* q = out.ptr() + (int64_t(b) * C + c) * plane;
      for (int64_t i = 0; i < plane; ++i) q[i] = p[i] + add_v;
    }
  Node* n = t.make(std::move(out), {a, bias}, false);
  if (n->requires_grad) {
    n->backward_fn = [a, bias, B, C, plane](Node& self) {
      const float* g = self.grad.ptr();
      if (a->requires_grad) {
        ensure_grad(a);
        for (size_t i = 0; i < a->grad.data.size(); ++i) a->grad.data[i] += g[i];
      }
      if (bias->requires_grad) {
        ensure_grad(bias);
        for (int b = 0; b < B; ++b)
          for (int c = 0; c < C; ++c) {
            double acc = 0;
            const float* p = g + (int64_t(b) * C + c) * plane;
            for (int64_t i = 0; i < plane; ++i) acc += p[i];
            bias->grad.data[b * C + c] += static_cast<float>(acc);
          }
      }
    };
  }
  return n;
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

Node* matmul(Tape& t, Node* a, Node* b) {
  const auto& sa = a->value.shape;
  const auto& sb = b->value.shape;
  check(sa.size() == 2 && sb.size() == 2 && sa[1] == sb[0], "matmul: shape");
  int M = sa[0], K = sa[1], N = sb[1];
  Tensor out({M, N});
  sgemm(false, false, M, N, K, 1.0f, a->value.ptr(), K, b->value.ptr(), N, 0.0f,
        out.ptr(), N);
  Node* n = t.make(std::move(out), {a, b}, false);
  if (n->requires_grad) {
    n->backward_fn = [a, b, M, K, N](Node& self) {
      if (a->requires_grad) {
        ensure_grad(a);
        sgemm(false, true, M, K, N, 1.0f, self.grad.ptr(), N, b->value.ptr(), N,
              1.0f, a->grad.ptr(), K);
      }
      if (b->requires_grad) {
        ensure_grad(b);
        sgemm(true, false, K, N, M, 1.0f, a->value.ptr(), K, self.grad.ptr(), N,
              1.0f, b->grad.ptr(), N);
      }
    };
  }
  return n;
}

Node* linear(Tape& t, Node* x, Node* w, Node* b) {
  const auto& sx = x->value.shape;
  const auto& sw = w->value.shape;
  check(sx.size() == 2 && sw.size() == 2 && sx[1] == sw[1], "linear: shape");
  int N = sx[0], in = sx[1], out_f = sw[0];
  check(!b || b->value.numel() == out_f, "linear: bias size");
  Tensor out({N, out_f});
  sgemm(false, true, N, out_f, in, 1.0f, x->value.ptr(), in, w->value.ptr(), in,
        0.0f, out.ptr(), out_f);
  if (b)
    for (int i = 0; i < N; ++i)
      for (int j = 0; j < out_f; ++j) out.data[i * out_f + j] += b->value.data[j];
  std::vector<Node*> parents{x, w};
  if (b) parents.push_back(b);
  Node* n = t.make(std::move(out), parents, false);
  if (n->requires_grad) {
    n->backward_fn = [x, w, b, N, in, out_f](Node& self) {
      const float* g = self.grad.ptr();
      if (x->requires_grad) {
        ensure_grad(x);
        sgemm(false, false, N, in, out_f, 1.0f, g, out_f, w->value.ptr(), in, 1.0f,
              x->grad.ptr(), in);
      }
      if (w->requires_grad) {
        ensure_grad(w);
        sgemm(true, false, out_f, in, N, 1.0f, g, out_f, x->value.ptr(), in, 1.0f,
              w->grad.ptr(), in);
      }
      if (b && b->requires_grad) {
        ensure_grad(b);
        for (int i = 0; i < N; ++i)
          for (int j = 0; j < out_f; ++j) b->grad.data[j] += g[i * out_f + j];
      }
    };
  }
  return n;
}

Node* bmm(Tape& t, Node* a, Node* b, bool trans_a, bool trans_b) {
  const auto& sa = a->value.shape;
  const auto& sb = b->value.shape;
  check(sa.size() == 3 && sb.size() == 3 && sa[0] == sb[0], "bmm: shape");
  int G = sa[0];
  int M = trans_a ? sa[2] : sa[1];
  int K = trans_a ? sa[1] : sa[2];
  int Kb = trans_b ? sb[2] : sb[1];
  int N = trans_b ? sb[1] : sb[2];
  check(K == Kb, "bmm: inner dim");
  int lda = sa[2], ldb = sb[2];
  Tensor out({G, M, N});
  int64_t a_sz = int64_t(sa[1]) * sa[2], b_sz = int64_t(sb[1]) * sb[2],
          c_sz = int64_t(M) * N;
  for (int g = 0; g < G; ++g)
    sgemm(trans_a, trans_b, M, N, K, 1.0f, a->value.ptr() + g * a_sz, lda,
          b->value.ptr() + g * b_sz, ldb, 0.0f, out.ptr() + g * c_sz, N);
  Node* n = t.make(std::move(out), {a, b}, false);
  if (n->requires_grad) {
    n->backward_fn = [=](Node& self) {
      const float* g_all = self.grad.ptr();
      for (int g = 0; g < G; ++g) {
        const float* gc = g_all + g * c_sz;
        const float* av = a->value.ptr() + g * a_sz;
        const float* bv = b->value.ptr() + g * b_sz;
        if (a->requires_grad) {
          ensure_grad(a);
          float* da = a->grad.ptr() + g * a_sz;
          if (!trans_a)
            sgemm(false, !trans_b, M, K, N, 1.0f, gc, N, bv, ldb, 1.0f, da, lda);
          else
            sgemm(trans_b, true, K, M, N, 1.0f, bv, ldb, gc, N, 1.0f, da, lda);
        }
        if (b->requires_grad) {
          ensure_grad(b);
          float* db = b->grad.ptr() + g * b_sz;
          if (!trans_b)
            sgemm(!trans_a, false, K, N, M, 1.0f, av, lda, gc, N, 1.0f, db, ldb);
          else
            sgemm(true, trans_a, N, K, M, 1.0f, gc, N, av, lda, 1.0f, db, ldb);
        }
      }
    };
  }
  return n;
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

namespace {

void im2col(const float* x, int Ci, int H, int W, int kh, int kw, int stride,
            int pad, int Ho, int Wo, float* col) {
  for (int ci = 0; ci < Ci; ++ci) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        float* dst = col + ((int64_t(ci) * kh + ky) * kw + kx) * Ho * Wo;
        for (int oy = 0; oy < Ho; ++oy) {
          int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= H) {
            std::memset(dst + int64_t(oy) * Wo, 0, sizeof(float) * Wo);
            continue;
          }
          const float* src_row = x + (int64_t(ci) * H + iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            int ix = ox * stride + kx - pad;
            dst[int64_t(oy) * Wo + ox] =
                (ix >= 0 && ix < W) ? src_row[ix] : 0.0f;
          }
        }
      }
    }
  }
}

void col2im_add(const float* col, int Ci, int H, int W, int kh, int kw,
                int stride, int pad, int Ho, int Wo, float* dx) {
  for (int ci = 0; ci < Ci; ++ci) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        const float* src = col + ((int64_t(ci) * kh + ky) * kw + kx) * Ho * Wo;
        for (int oy = 0; oy < Ho; ++oy) {
          int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= H) continue;
          float* dst_row = dx + (int64_t(ci) * H + iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            int ix = ox * stride + kx - pad;
            if (ix >= 0 && ix < W) dst_row[ix] += src[int64_t(oy) * Wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Node* conv2d(Tape& t, Node* x, Node* w, Node* b, int stride, int pad) {
  const auto& sx = x->value.shape;
  const auto& sw = w->value.shape;
  check(sx.size() == 4 && sw.size() == 4 && sx[1] == sw[1], "conv2d: shape");
  int B = sx[0], Ci = sx[1], H = sx[2], W = sx[3];
  int Co = sw[0], kh = sw[2], kw = sw[3];
  int Ho = (H + 2 * pad - kh) / stride + 1;
  int Wo = (W + 2 * pad - kw) / stride + 1;
  check(Ho > 0 && Wo > 0, "conv2d: empty output");
  check(!b || b->value.numel() == Co, "conv2d: bias size");
  int K = Ci * kh * kw;
  int64_t P = int64_t(Ho) * Wo;
  Tensor out({B, Co, Ho, Wo});
  {
    const float* xv = x->value.ptr();
    const float* wv = w->value.ptr();
    const float* bv = b ? b->value.ptr() : nullptr;
    float* ov = out.ptr();
    parallel_for(B, [&](int64_t i) {
      float* col = grow(tl_scratch().col, size_t(K) * P);
      im2col(xv + i * Ci * int64_t(H) * W, Ci, H, W, kh, kw, stride, pad, Ho, Wo, col);
      float* y = ov + i * Co * P;
      sgemm(false, false, Co, static_cast<int>(P), K, 1.0f, wv, K, col,
            static_cast<int>(P), 0.0f, y, static_cast<int>(P));
      if (bv)
        for (int c = 0; c < Co; ++c)
          for (int64_t p = 0; p < P; ++p) y[c * P + p] += bv[c];
    });
  }
  std::vector<Node*> parents{x, w};
  if (b) parents.push_back(b);
  Node* n = t.make(std::move(out), parents, false);
  if (n->requires_grad) {
    n->backward_fn = [=](Node& self) {
      const float* g = self.grad.ptr();
      bool need_dw = w->requires_grad;
      bool need_dx = x->requires_grad;
      std::vector<float> dw_slab;
      if (need_dw) dw_slab.assign(size_t(B) * Co * K, 0.0f);
      if (need_dx) ensure_grad(x);
      float* dxv = need_dx ? x->grad.ptr() : nullptr;
      const float* xv = x->value.ptr();
      const float* wv = w->value.ptr();
      float* slab = dw_slab.data();
      parallel_for(B, [&](int64_t i) {
        auto& sc = tl_scratch();
        const float* gy = g + i * Co * P;
        if (need_dw) {
          float* col = grow(sc.col, size_t(K) * P);
          im2col(xv + i * Ci * int64_t(H) * W, Ci, H, W, kh, kw, stride, pad, Ho,
                 Wo, col);
          sgemm(false, true, Co, K, static_cast<int>(P), 1.0f, gy,
                static_cast<int>(P), col, static_cast<int>(P), 0.0f,
                slab + i * Co * K, K);
        }
        if (need_dx) {
          float* dcol = grow(sc.aux, size_t(K) * P);
          sgemm(true, false, K, static_cast<int>(P), Co, 1.0f, wv, K, gy,
                static_cast<int>(P), 0.0f, dcol, static_cast<int>(P));
          col2im_add(dcol, Ci, H, W, kh, kw, stride, pad, Ho, Wo,
                     dxv + i * Ci * int64_t(H) * W);
        }
      });
      if (need_dw) {
        ensure_grad(w);
        float* dw = w->grad.ptr();
        for (int i = 0; i < B; ++i) {
          const float* s = slab + int64_t(i) * Co * K;
          for (int64_t j = 0; j < int64_t(Co) * K; ++j) dw[j] += s[j];
        }
      }
      if (b && b->requires_grad) {
        ensure_grad(b);
        for (int i = 0; i < B; ++i)
          for (int c = 0; c < Co; ++c) {
            double acc = 0;
            const float* gy = g + (int64_t(i) * Co + c) * P;
            for (int64_t p = 0; p < P; ++p) acc += gy[p];
            b->grad.data[c] += static_cast<float>(acc);
          }
      }
    };
  }
  return n;
}

Node* upsample_nearest2x(Tape& t, Node* x) {
  const auto& s = x->value.shape;
  check(s.size() == 4, "upsample: need (B,C,H,W)");
  int B = s[0], C = s[1], H = s[2], W = s[3];
  Tensor out({B, C, 2 * H, 2 * W});
  for (int64_t bc = 0; bc < int64_t(B) * C; ++bc) {
    const float* src = x->value.ptr() + bc * H * W;
    float* dst = out.ptr() + bc * 4 * H * W;
    for (int y = 0; y < H; ++y)
      for (int xx = 0; xx < W; ++xx) {
        float v = src[y * W + xx];
        float* d = dst + (2 * y) * 2 * W + 2 * xx;
        d[0] = v;
        d[1] = v;
        d[2 * W] = v;
        d[2 * W + 1] = v;
      }
  }
  Node* n = t.make(std::move(out), {x}, false);
  if (n->requires_grad) {
    n->backward_fn = [x, B, C, H, W](Node& self) {
      if (!x->requires_grad) return;
      ensure_grad(x);
      for (int64_t bc = 0; bc < int64_t(B) * C; ++bc) {
        float* dst = x->grad.ptr() + bc * H * W;
        const float* g = self.grad.ptr() + bc * 4 * H * W;
        for (int y = 0; y < H; ++y)
          for (int xx = 0; xx < W; ++xx) {
            const float* s = g + (2 * y) * 2 * W + 2 * xx;
            dst[y * W + xx] += s[0] + s[1] + s[2 * W] + s[2 * W + 1];
          }
      }
    };
  }
  return n;
}

Node* avg_pool2x2(Tape& t, Node* x) {
  const auto& s = x->value.shape;
  check(s.size() == 4 && s[2] % 2 == 0 && s[3] % 2 == 0, "avg_pool2x2: shape");
  int B = s[0], C = s[1], H = s[2], W = s[3];
  int Ho = H / 2, Wo = W / 2;
  Tensor out({B, C, Ho, Wo});
  for (int64_t bc = 0; bc < int64_t(B) * C; ++bc) {
    const float* src = x->value.ptr() + bc * H * W;
    float* dst = out.ptr() + bc * Ho * Wo;
    for (int y = 0; y < Ho; ++y)
      for (int xx = 0; xx < Wo; ++xx) {
        const float* p = src + (2 * y) * W + 2 * xx;
        dst[y * Wo + xx] = 0.25f * (p[0] + p[1] + p[W] + p[W + 1]);
      }
  }
  Node* n = t.make(std::move(out), {x}, false);
  if (n->requires_grad) {
    n->backward_fn = [x, B, C, H, W, Ho, Wo](Node& self) {
      if (!x->requires_grad) return;
      ensure_grad(x);
      for (int64_t bc = 0; bc < int64_t(B) * C; ++bc) {
        float* dst = x->grad.ptr() + bc * H * W;
        const float* g = self.grad.ptr() + bc * Ho * Wo;
        for (int y = 0; y < Ho; ++y)
          for (int xx = 0; xx < Wo; ++xx) {
            float v = 0.25f * g[y * Wo + xx];
            float* p = dst + (2 * y) * W + 2 * xx;
            p[0] += v;
            p[1] += v;
            p[W] += v;
            p[W + 1] += v;
          }
      }
    };
  }
  return n;
}

Node* hflip(Tape& t, Node* x) {
  const auto& s = x->value.shape;
  check(s.size() == 4, "hflip: need (B,C,H,W)");
  int B = s[0], C = s[1], H = s[2], W = s[3];
  Tensor out(x->value.shape);
  for (int64_t bc = 0; bc < int64_t(B) * C; ++bc)
    for (int y = 0; y < H; ++y) {
      const float* src = x->value.ptr() + (bc * H + y) * W;
      float* dst = out.ptr() + (bc * H + y) * W;
      for (int xx = 0; xx < W; ++xx) dst[xx] = src[W - 1 - xx];
    }
  Node* n = t.make(std::move(out), {x}, false);
  if (n->requires_grad) {
    n->backward_fn = [x, B, C, H, W](Node& self) {
      if (!x->requires_grad) return;
      ensure_grad(x);
      for (int64_t bc = 0; bc < int64_t(B) * C; ++bc)
        for (int y = 0; y < H; ++y) {
          const float* g = self.grad.ptr() + (bc * H + y) * W;
          float* dst = x->grad.ptr() + (bc * H + y) * W;
          for (int xx = 0; xx < W; ++xx) dst[W - 1 - xx] += g[xx];
        }
    };
  }
  return n;
}

// ---------------------------------------------------------------------------
// resampling
// ---------------------------------------------------------------------------

ResamplePlan make_resize_plan(int in_h, int in_w, int out_h, int out_w) {
  ResamplePlan p;
  p.in_h = in_h;
  p.in_w = in_w;
  p.out_h = out_h;
  p.out_w = out_w;
  p.idx.resize(size_t(out_h) * out_w * 4);
  p.wgt.resize(size_t(out_h) * out_w * 4);
  double sy = double(in_h) / out_h, sx = double(in_w) / out_w;
  for (int oy = 0; oy < out_h; ++oy) {
    double fy = (oy + 0.5) * sy - 0.5;
    int y0 = static_cast<int>(std::floor(fy));
    double wy = fy - y0;
    int y0c = std::clamp(y0, 0, in_h - 1), y1c = std::clamp(y0 + 1, 0, in_h - 1);
    for (int ox = 0; ox < out_w; ++ox) {
      double fx = (ox + 0.5) * sx - 0.5;
      int x0 = static_cast<int>(std::floor(fx));
      double wx = fx - x0;
      int x0c = std::clamp(x0, 0, in_w - 1), x1c = std::clamp(x0 + 1, 0, in_w - 1);
      size_t o = (size_t(oy) * out_w + ox) * 4;
      p.idx[o + 0] = y0c * in_w + x0c;
      p.idx[o + 1] = y0c * in_w + x1c;
      p.idx[o + 2] = y1c * in_w + x0c;
      p.idx[o + 3] = y1c * in_w + x1c;
      p.wgt[o + 0] = static_cast<float>((1 - wy) * (1 - wx));
      p.wgt[o + 1] = static_cast<float>((1 - wy) * wx);
      p.wgt[o + 2] = static_cast<float>(wy * (1 - wx));
      p.wgt[o + 3] = static_cast<float>(wy * wx);
    }
  }
  return p;
}

ResamplePlan make_rotate_plan(int h, int w, double angle_deg) {
  ResamplePlan p;
  p.in_h = h;
  p.in_w = w;
  p.out_h = h;
  p.out_w = w;
  p.idx.assign(size_t(h) * w * 4, -1);
  p.wgt.assign(size_t(h) * w * 4, 0.0f);
  double th = angle_deg * M_PI / 180.0;
  double c = std::cos(th), s = std::sin(th);
  double cy = 0.5 * (h - 1), cx = 0.5 * (w - 1);
  for (int oy = 0; oy < h; ++oy) {
    for (int ox = 0; ox < w; ++ox) {
      // inverse rotation of the output pixel back into the source frame
      double dy = oy - cy, dx = ox - cx;
      double fy = c * dy + s * dx + cy;
      double fx = -s * dy + c * dx + cx;
      int y0 = static_cast<int>(std::floor(fy));
      int x0 = static_cast<int>(std::floor(fx));
      double wy = fy - y0, wx = fx - x0;
      size_t o = (size_t(oy) * w + ox) * 4;
      const int ys[2] = {y0, y0 + 1};
      const int xs[2] = {x0, x0 + 1};
      const double wys[2] = {1 - wy, wy};
      const double wxs[2] = {1 - wx, wx};
      int k = 0;
      for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b, ++k) {
          if (ys[a] >= 0 && ys[a] < h && xs[b] >= 0 && xs[b] < w) {
            p.idx[o + k] = ys[a] * w + xs[b];
            p.wgt[o + k] = static_cast<float>(wys[a] * wxs[b]);
          }
        }
    }
  }
  return p;
}

ResamplePlan make_center_crop_plan(int h, int w, double side_ratio) {
  int ch = std::max(1, static_cast<int>(std::lround(h * side_ratio)));
  int cw = std::max(1, static_cast<int>(std::lround(w * side_ratio)));
  ch = std::min(ch, h);
  cw = std::min(cw, w);
  int oy0 = (h - ch) / 2, ox0 = (w - cw) / 2;
  ResamplePlan p;
  p.in_h = h;
  p.in_w = w;
  p.out_h = ch;
  p.out_w = cw;
  p.idx.assign(size_t(ch) * cw * 4, -1);
  p.wgt.assign(size_t(ch) * cw * 4, 0.0f);
  for (int y = 0; y < ch; ++y)
    for (int x = 0; x < cw; ++x) {
      size_t o = (size_t(y) * cw + x) * 4;
      p.idx[o] = (y + oy0) * w + (x + ox0);
      p.wgt[o] = 1.0f;
    }
  return p;
}

void resample_apply(const ResamplePlan& p, const float* in, float* out,
                    int channels) {
  int64_t in_plane = int64_t(p.in_h) * p.in_w;
  int64_t out_plane = int64_t(p.out_h) * p.out_w;
  for (int c = 0; c < channels; ++c) {
    const float* src = in + c * in_plane;
    float* dst = out + c * out_plane;
    for (int64_t i = 0; i < out_plane; ++i) {
      const int* id = &p.idx[i * 4];
      const float* wg = &p.wgt[i * 4];
      float acc = 0.0f;
      for (int k = 0; k < 4; ++k)
        if (id[k] >= 0) acc += wg[k] * src[id[k]];
      dst[i] = acc;
    }
  }
}

Node* resample(Tape& t, Node* x, const ResamplePlan& plan) {
  const auto& s = x->value.shape;
  check(s.size() == 4 && s[2] == plan.in_h && s[3] == plan.in_w,
        "resample: plan/input mismatch");
  int B = s[0], C = s[1];
  Tensor out({B, C, plan.out_h, plan.out_w});
  int64_t in_sz = int64_t(C) * plan.in_h * plan.in_w;
  int64_t out_sz = int64_t(C) * plan.out_h * plan.out_w;
  for (int b = 0; b < B; ++b)
    resample_apply(plan, x->value.ptr() + b * in_sz, out.ptr() + b * out_sz, C);
  ResamplePlan plan_copy = plan;
  Node* n = t.make(std::move(out), {x}, false);
  if (n->requires_grad) {
    n->backward_fn = [x, B, C, plan = std::move(plan_copy)](Node& self) {
      if (!x->requires_grad) return;
      ensure_grad(x);
      int64_t in_plane = int64_t(plan.in_h) * plan.in_w;
      int64_t out_plane = int64_t(plan.out_h) * plan.out_w;
      for (int64_t bc = 0; bc < int64_t(B) * C; ++bc) {
        float* dx = x->grad.ptr() + bc * in_plane;
        const float* g = self.grad.ptr() + bc * out_plane;
        for (int64_t i = 0; i < out_plane; ++i) {
          const int* id = &plan.idx[i * 4];
          const float* wg = &plan.wgt[i * 4];
          for (int k = 0; k < 4; ++k)
            if (id[k] >= 0) dx[id[k]] += wg[k] * g[i];
        }
      }
    };
  }
  return n;
}

Node* separable_filter(Tape& t, Node* x, const std::vector<float>& k1d) {
  const auto& s = x->value.shape;
  check(s.size() == 4, "separable_filter: need (B,C,H,W)");
  check(k1d.size() % 2 == 1, "separable_filter: odd kernel");
  int B = s[0], C = s[1], H = s[2], W = s[3];
  int r = static_cast<int>(k1d.size()) / 2;
  auto pass = [&](const float* in, float* out, bool vertical) {
    // replicate padding at the borders
    for (int64_t bc = 0; bc < int64_t(B) * C; ++bc) {
      const float* src = in + bc * H * W;
      float* dst = out + bc * H * W;
      for (int y = 0; y < H; ++y)
        for (int xx = 0; xx < W; ++xx) {
          double acc = 0;
          for (int k = -r; k <= r; ++k) {
            int yy = vertical ? std::clamp(y + k, 0, H - 1) : y;
            int xc = vertical ? xx : std::clamp(xx + k, 0, W - 1);
            acc += k1d[k + r] * src[yy * W + xc];
          }
          dst[y * W + xx] = static_cast<float>(acc);
        }
    }
  };
  Tensor tmp(x->value.shape), out(x->value.shape);
  pass(x->value.ptr(), tmp.ptr(), false);
  pass(tmp.ptr(), out.ptr(), true);
  Node* n = t.make(std::move(out), {x}, false);
  if (n->requires_grad) {
    std::vector<float> kk = k1d;
    n->backward_fn = [x, B, C, H, W, r, kk](Node& self) {
      if (!x->requires_grad) return;
      ensure_grad(x);
      // transpose of clamp-padded filtering: scatter taps back
      Tensor tmp({B, C, H, W});
      auto scatter = [&](const float* g, float* dst, bool vertical) {
        for (int64_t bc = 0; bc < int64_t(B) * C; ++bc) {
          const float* gg = g + bc * H * W;
          float* dd = dst + bc * H * W;
          for (int y = 0; y < H; ++y)
            for (int xx = 0; xx < W; ++xx) {
              float gv = gg[y * W + xx];
              for (int k = -r; k <= r; ++k) {
                int yy = vertical ? std::clamp(y + k, 0, H - 1) : y;
                int xc = vertical ? xx : std::clamp(xx + k, 0, W - 1);
                dd[yy * W + xc] += kk[k + r] * gv;
              }
            }
        }
      };
      tmp.zero();
      scatter(self.grad.ptr(), tmp.ptr(), true);
      scatter(tmp.ptr(), x->grad.ptr(), false);
    };
  }
  return n;
}

Node* color_transform(Tape& t, Node* x, const float M[3][3], const float bias[3]) {
  const auto& s = x->value.shape;
  check(s.size() == 4 && s[1] == 3, "color_transform: need (B,3,H,W)");
  int B = s[0], H = s[2], W = s[3];
  int64_t plane = int64_t(H) * W;
  Tensor out(x->value.shape);
  float m[3][3];
  float bb[3];
  std::memcpy(m, M, sizeof(m));
  std::memcpy(bb, bias, sizeof(bb));
  for (int b = 0; b < B; ++b) {
    const float* p = x->value.ptr() + b * 3 * plane;
    float* q = out.ptr() + b * 3 * plane;
    for (int64_t i = 0; i < plane; ++i) {
      float r = p[i], g = p[plane + i], bl = p[2 * plane + i];
      q[i] = m[0][0] * r + m[0][1] * g + m[0][2] * bl + bb[0];
      q[plane + i] = m[1][0] * r + m[1][1] * g + m[1][2] * bl + bb[1];
      q[2 * plane + i] = m[2][0] * r + m[2][1] * g + m[2][2] * bl + bb[2];
    }
  }
  Node* n = t.make(std::move(out), {x}, false);
  if (n->requires_grad) {
    struct Mat {
      float m[3][3];
    } mat;
    std::memcpy(mat.m, M, sizeof(mat.m));
    n->backward_fn = [x, B, plane, mat](Node& self) {
      if (!x->requires_grad) return;
      ensure_grad(x);
      for (int b = 0; b < B; ++b) {
        const float* g = self.grad.ptr() + b * 3 * plane;
        float* d = x->grad.ptr() + b * 3 * plane;
        for (int64_t i = 0; i < plane; ++i) {
          float g0 = g[i], g1 = g[plane + i], g2 = g[2 * plane + i];
          d[i] += mat.m[0][0] * g0 + mat.m[1][0] * g1 + mat.m[2][0] * g2;
          d[plane + i] += mat.m[0][1] * g0 + mat.m[1][1] * g1 + mat.m[2][1] * g2;
          d[2 * plane + i] += mat.m[0][2] * g0 + mat.m[1][2] * g1 + mat.m[2][2] * g2;
        }
      }
    };
  }
  return n;
}

// ---------------------------------------------------------------------------
// blockwise DCT
// ---------------------------------------------------------------------------

namespace {

struct DctBasis {
  float d[8][8];
  DctBasis() {
    for (int k = 0; k < 8; ++k) {
      double ck = k == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0);
      for (int n = 0; n < 8; ++n)
        d[k][n] = static_cast<float>(ck * std::cos((2 * n + 1) * k * M_PI / 16.0));
    }
  }
};

const DctBasis& dct_basis() {
  static DctBasis b;
  return b;
}

// y = D x D^T per 8x8 block (forward=true) or y = D^T x D (inverse).
void dct_blocks(const float* in, float* out, int planes, int H, int W,
                bool forward) {
  const auto& D = dct_basis().d;
  for (int pl = 0; pl < planes; ++pl) {
    const float* src = in + int64_t(pl) * H * W;
    float* dst = out + int64_t(pl) * H * W;
    for (int by = 0; by < H; by += 8)
      for (int bx = 0; bx < W; bx += 8) {
        float tmp[8][8];
        // rows: tmp = X * D^T (forward) or X * D (inverse)
        for (int i = 0; i < 8; ++i)
          for (int j = 0; j < 8; ++j) {
            double acc = 0;
            for (int k = 0; k < 8; ++k) {
              float x = src[(by + i) * W + bx + k];
              acc += x * (forward ? D[j][k] : D[k][j]);
            }
            tmp[i][j] = static_cast<float>(acc);
          }
        for (int i = 0; i < 8; ++i)
          for (int j = 0; j < 8; ++j) {
            double acc = 0;
            for (int k = 0; k < 8; ++k)
              acc += (forward ? D[i][k] : D[k][i]) * tmp[k][j];
            dst[(by + i) * W + bx + j] = static_cast<float>(acc);
          }
      }
  }
}

Node* dct_node(Tape& t, Node* x, bool forward) {
  const auto& s = x->value.shape;
  check(s.size() == 4 && s[2] % 8 == 0 && s[3] % 8 == 0, "dct8x8: dims % 8");
  int B = s[0], C = s[1], H = s[2], W = s[3];
  Tensor out(x->value.shape);
  dct_blocks(x->value.ptr(), out.ptr(), B * C, H, W, forward);
  Node* n = t.make(std::move(out), {x}, false);
  if (n->requires_grad) {
    n->backward_fn = [x, B, C, H, W, forward](Node& self) {
      if (!x->requires_grad) return;
      ensure_grad(x);
      Tensor tmp({B, C, H, W});
      dct_blocks(self.grad.ptr(), tmp.ptr(), B * C, H, W, !forward);
      for (size_t i = 0; i < tmp.data.size(); ++i) x->grad.data[i] += tmp.data[i];
    };
  }
  return n;
}

}  // namespace

Node* dct8x8(Tape& t, Node* x) { return dct_node(t, x, true); }
Node* idct8x8(Tape& t, Node* x) { return dct_node(t, x, false); }

Node* block_mask_mul(Tape& t, Node* x, const Tensor& mask) {
  const auto& s = x->value.shape;
  check(s.size() == 4 && mask.rank() == 3 && mask.dim(0) == s[1] &&
            mask.dim(1) == 8 && mask.dim(2) == 8,
        "block_mask_mul: mask (C,8,8)");
  int B = s[0], C = s[1], H = s[2], W = s[3];
  Tensor out(x->value.shape);
  auto apply = [&](const float* in, float* dst) {
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) {
        const float* mk = mask.ptr() + c * 64;
        const float* src = in + (int64_t(b) * C + c) * H * W;
        float* d = dst + (int64_t(b) * C + c) * H * W;
        for (int y = 0; y < H; ++y)
          for (int xx = 0; xx < W; ++xx)
            d[y * W + xx] = src[y * W + xx] * mk[(y % 8) * 8 + (xx % 8)];
      }
  };
  apply(x->value.ptr(), out.ptr());
  Tensor mask_copy = mask;
  Node* n = t.make(std::move(out), {x}, false);
  if (n->requires_grad) {
    n->backward_fn = [x, B, C, H, W, mask = std::move(mask_copy)](Node& self) {
      if (!x->requires_grad) return;
      ensure_grad(x);
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
          const float* mk = mask.ptr() + c * 64;
          const float* g = self.grad.ptr() + (int64_t(b) * C + c) * H * W;
          float* d = x->grad.ptr() + (int64_t(b) * C + c) * H * W;
          for (int y = 0; y < H; ++y)
            for (int xx = 0; xx < W; ++xx)
              d[y * W + xx] += g[y * W + xx] * mk[(y % 8) * 8 + (xx % 8)];
        }
    };
  }
  return n;
}

// ---------------------------------------------------------------------------
// norms
// ---------------------------------------------------------------------------

Node* group_norm(Tape& t, Node* x, Node* gamma, Node* beta, int groups, float eps) {
  const auto& s = x->value.shape;
  check(s.size() == 4 && s[1] % groups == 0, "group_norm: channels % groups");
  int B = s[0], C = s[1], H = s[2], W = s[3];
  int cg = C / groups;
  int64_t gsz = int64_t(cg) * H * W;
  Tensor out(x->value.shape);
  Tensor mean({B, groups}), rstd({B, groups});
  for (int b = 0; b < B; ++b)
    for (int g = 0; g < groups; ++g) {
      const float* p = x->value.ptr() + (int64_t(b) * C + g * cg) * H * W;
      double m = 0;
      for (int64_t i = 0; i < gsz; ++i) m += p[i];
      m /= gsz;
      double var = 0;
      for (int64_t i = 0; i < gsz; ++i) {
        double d = p[i] - m;
        var += d * d;
      }
      var /= gsz;
      double rs = 1.0 / std::sqrt(var + eps);
      mean.data[b * groups + g] = static_cast<float>(m);
      rstd.data[b * groups + g] = static_cast<float>(rs);
      float* q = out.ptr() + (int64_t(b) * C + g * cg) * H * W;
      for (int c = 0; c < cg; ++c) {
        float ga = gamma->value.data[g * cg + c];
        float be = beta->value.data[g * cg + c];
        const float* pc = p + int64_t(c) * H * W;
        float* qc = q + int64_t(c) * H * W;
        for (int64_t i = 0; i < int64_t(H) * W; ++i)
          qc[i] = static_cast<float>((pc[i] - m) * rs) * ga + be;
      }
    }
  Node* n = t.make(std::move(out), {x, gamma, beta}, false);
  if (n->requires_grad) {
    Tensor mean_c = std::move(mean), rstd_c = std::move(rstd);
    n->backward_fn = [x, gamma, beta, B, C, H, W, groups, cg, gsz,
                      mean = std::move(mean_c),
                      rstd = std::move(rstd_c)](Node& self) {
      int64_t plane = int64_t(H) * W;
      const float* g_out = self.grad.ptr();
      for (int b = 0; b < B; ++b)
        for (int g = 0; g < groups; ++g) {
          double m = mean.data[b * groups + g];
          double rs = rstd.data[b * groups + g];
          const float* xv = x->value.ptr() + (int64_t(b) * C + g * cg) * plane;
          const float* gv = g_out + (int64_t(b) * C + g * cg) * plane;
          // accumulate per-channel gamma/beta grads and group stats
          double sum_gy = 0, sum_gy_xhat = 0;
          for (int c = 0; c < cg; ++c) {
            float ga = gamma->value.data[g * cg + c];
            const float* xc = xv + int64_t(c) * plane;
            const float* gc = gv + int64_t(c) * plane;
            double dgamma = 0, dbeta = 0;
            for (int64_t i = 0; i < plane; ++i) {
              double xhat = (xc[i] - m) * rs;
              dgamma += gc[i] * xhat;
              dbeta += gc[i];
              sum_gy += gc[i] * ga;
              sum_gy_xhat += gc[i] * ga * xhat;
            }
            if (gamma->requires_grad) {
              ensure_grad(gamma);
              gamma->grad.data[g * cg + c] += static_cast<float>(dgamma);
            }
            if (beta->requires_grad) {
              ensure_grad(beta);
              beta->grad.data[g * cg + c] += static_cast<float>(dbeta);
            }
          }
          if (x->requires_grad) {
            ensure_grad(x);
            double mean_gy = sum_gy / gsz;
            double mean_gy_xhat = sum_gy_xhat / gsz;
            float* dx = x->grad.ptr() + (int64_t(b) * C + g * cg) * plane;
            for (int c = 0; c < cg; ++c) {
              float ga = gamma->value.data[g * cg + c];
              const float* xc = xv + int64_t(c) * plane;
              const float* gc = gv + int64_t(c) * plane;
              float* dc = dx + int64_t(c) * plane;
              for (int64_t i = 0; i < plane; ++i) {
                double xhat = (xc[i] - m) * rs;
                dc[i] += static_cast<float>(
                    rs * (gc[i] * ga - mean_gy - xhat * mean_gy_xhat));
              }
            }
          }
        }
    };
  }
  return n;
}

Node* layer_norm(Tape& t, Node* x, Node* gamma, Node* beta, float eps) {
  const auto& s = x->value.shape;
  int D = s.back();
  int64_t rows = x->value.numel() / D;
  check(gamma->value.numel() == D && beta->value.numel() == D, "layer_norm: dims");
  Tensor out(x->value.shape);
  Tensor mean({static_cast<int>(rows)}), rstd({static_cast<int>(rows)});
  for (int64_t r = 0; r < rows; ++r) {
    const float* p = x->value.ptr() + r * D;
    double m = 0;
    for (int i = 0; i < D; ++i) m += p[i];
    m /= D;
    double var = 0;
    for (int i = 0; i < D; ++i) {
      double d = p[i] - m;
      var += d * d;
    }
    var /= D;
    double rs = 1.0 / std::sqrt(var + eps);
    mean.data[r] = static_cast<float>(m);
    rstd.data[r] = static_cast<float>(rs);
    float* q = out.ptr() + r * D;
    for (int i = 0; i < D; ++i)
      q[i] = static_cast<float>((p[i] - m) * rs) * gamma->value.data[i] +
             beta->value.data[i];
  }
  Node* n = t.make(std::move(out), {x, gamma, beta}, false);
  if (n->requires_grad) {
    Tensor mean_c = std::move(mean), rstd_c = std::move(rstd);
    n->backward_fn = [x, gamma, beta, D, rows, mean = std::move(mean_c),
                      rstd = std::move(rstd_c)](Node& self) {
      for (int64_t r = 0; r < rows; ++r) {
        double m = mean.data[r], rs = rstd.data[r];
        const float* xv = x->value.ptr() + r * D;
        const float* g = self.grad.ptr() + r * D;
        double sum_gy = 0, sum_gy_xhat = 0;
        for (int i = 0; i < D; ++i) {
          double xhat = (xv[i] - m) * rs;
          double gy = g[i] * gamma->value.data[i];
          sum_gy += gy;
          sum_gy_xhat += gy * xhat;
          if (gamma->requires_grad) {
            ensure_grad(gamma);
            gamma->grad.data[i] += static_cast<float>(g[i] * xhat);
          }
          if (beta->requires_grad) {
            ensure_grad(beta);
            beta->grad.data[i] += g[i];
          }
        }
        if (x->requires_grad) {
          ensure_grad(x);
          double mean_gy = sum_gy / D, mean_gy_xhat = sum_gy_xhat / D;
          float* dx = x->grad.ptr() + r * D;
          for (int i = 0; i < D; ++i) {
            double xhat = (xv[i] - m) * rs;
            double gy = g[i] * gamma->value.data[i];
            dx[i] += static_cast<float>(rs * (gy - mean_gy - xhat * mean_gy_xhat));
          }
        }
      }
    };
  }
  return n;
}

// ---------------------------------------------------------------------------
// attention / sequence
// ---------------------------------------------------------------------------

Node* softmax_causal(Tape& t, Node* scores) {
  const auto& s = scores->value.shape;
  check(s.size() == 3 && s[1] == s[2], "softmax_causal: need (G,T,T)");
  int G = s[0], T = s[1];
  Tensor out({G, T, T});
  for (int g = 0; g < G; ++g)
    for (int i = 0; i < T; ++i) {
      const float* row = scores->value.ptr() + (int64_t(g) * T + i) * T;
      float* orow = out.ptr() + (int64_t(g) * T + i) * T;
      float mx = row[0];
      for (int j = 1; j <= i; ++j) mx = std::max(mx, row[j]);
      double sum = 0;
      for (int j = 0; j <= i; ++j) {
        double e = std::exp(double(row[j]) - mx);
        orow[j] = static_cast<float>(e);
        sum += e;
      }
      double inv = 1.0 / sum;
      for (int j = 0; j <= i; ++j) orow[j] = static_cast<float>(orow[j] * inv);
      for (int j = i + 1; j < T; ++j) orow[j] = 0.0f;
    }
  Node* n = t.make(std::move(out), {scores}, false);
  if (n->requires_grad) {
    n->backward_fn = [scores, G, T](Node& self) {
      if (!scores->requires_grad) return;
      ensure_grad(scores);
      for (int g = 0; g < G; ++g)
        for (int i = 0; i < T; ++i) {
          const float* p = self.value.ptr() + (int64_t(g) * T + i) * T;
          const float* gy = self.grad.ptr() + (int64_t(g) * T + i) * T;
          float* dx = scores->grad.ptr() + (int64_t(g) * T + i) * T;
          double dot = 0;
          for (int j = 0; j <= i; ++j) dot += double(gy[j]) * p[j];
          for (int j = 0; j <= i; ++j)
            dx[j] += static_cast<float>(p[j] * (gy[j] - dot));
        }
    };
  }
  return n;
}

Node* embedding(Tape& t, Node* table, const std::vector<int>& ids) {
  const auto& s = table->value.shape;
  check(s.size() == 2, "embedding: table (V,D)");
  int V = s[0], D = s[1];
  int n_ids = static_cast<int>(ids.size());
  Tensor out({n_ids, D});
  for (int i = 0; i < n_ids; ++i) {
    check(ids[i] >= 0 && ids[i] < V, "embedding: id out of range");
    std::memcpy(out.ptr() + int64_t(i) * D, table->value.ptr() + int64_t(ids[i]) * D,
                sizeof(float) * D);
  }
  std::vector<int> ids_copy = ids;
  Node* n = t.make(std::move(out), {table}, false);
  if (n->requires_grad) {
    n->backward_fn = [table, D, ids = std::move(ids_copy)](Node& self) {
      if (!table->requires_grad) return;
      ensure_grad(table);
      for (size_t i = 0; i < ids.size(); ++i) {
        const float* g = self.grad.ptr() + int64_t(i) * D;
        float* dst = table->grad.ptr() + int64_t(ids[i]) * D;
        for (int d = 0; d < D; ++d) dst[d] += g[d];
      }
    };
  }
  return n;
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

Node* bce_with_logits_mean(Tape& t, Node* logits, const Tensor& targets) {
  check(logits->value.numel() == targets.numel(), "bce: size mismatch");
  int64_t n_el = logits->value.numel();
  double acc = 0;
  for (int64_t i = 0; i < n_el; ++i) {
    double z = logits->value.data[i], y = targets.data[i];
    acc += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
  }
  Tensor out({1});
  out.data[0] = static_cast<float>(acc / n_el);
  Tensor targets_copy = targets;
  Node* n = t.make(std::move(out), {logits}, false);
  if (n->requires_grad) {
    n->backward_fn = [logits, n_el, tg = std::move(targets_copy)](Node& self) {
      if (!logits->requires_grad) return;
      ensure_grad(logits);
      float g = self.grad.data[0] / n_el;
      for (int64_t i = 0; i < n_el; ++i) {
        double z = logits->value.data[i];
        double sig = 1.0 / (1.0 + std::exp(-z));
        logits->grad.data[i] += static_cast<float>(g * (sig - tg.data[i]));
      }
    };
  }
  return n;
}

Node* mse_loss(Tape& t, Node* a, Node* target) {
  check(a->value.same_shape(target->value), "mse: shape");
  int64_t n_el = a->value.numel();
  double acc = 0;
  for (int64_t i = 0; i < n_el; ++i) {
    double d = double(a->value.data[i]) - target->value.data[i];
    acc += d * d;
  }
  Tensor out({1});
  out.data[0] = static_cast<float>(acc / n_el);
  Node* n = t.make(std::move(out), {a, target}, false);
  if (n->requires_grad) {
    n->backward_fn = [a, target, n_el](Node& self) {
      float g = 2.0f * self.grad.data[0] / n_el;
      for (int64_t i = 0; i < n_el; ++i) {
        float d = a->value.data[i] - target->value.data[i];
        if (a->requires_grad) {
          ensure_grad(a);
          a->grad.data[i] += g * d;
        }
        if (target->requires_grad) {
          ensure_grad(target);
          target->grad.data[i] -= g * d;
        }
      }
    };
  }
  return n;
}

Node* l1_loss(Tape& t, Node* a, Node* target) {
  check(a->value.same_shape(target->value), "l1: shape");
  int64_t n_el = a->value.numel();
  double acc = 0;
  for (int64_t i = 0; i < n_el; ++i)
    acc += std::abs(double(a->value.data[i]) - target->value.data[i]);
  Tensor out({1});
  out.data[0] = static_cast<float>(acc / n_el);
  Node* n = t.make(std::move(out), {a, target}, false);
  if (n->requires_grad) {
    n->backward_fn = [a, target, n_el](Node& self) {
      float g = self.grad.data[0] / n_el;
      for (int64_t i = 0; i < n_el; ++i) {
        float d = a->value.data[i] - target->value.data[i];
        float sg = d > 0 ? 1.0f : (d < 0 ? -1.0f : 0.0f);
        if (a->requires_grad) {
          ensure_grad(a);
          a->grad.data[i] += g * sg;
        }
        if (target->requires_grad) {
          ensure_grad(target);
          target->grad.data[i] -= g * sg;
        }
      }
    };
  }
  return n;
}

Node* cross_entropy_logits(Tape& t, Node* logits, const std::vector<int>& targets) {
  const auto& s = logits->value.shape;
  check(s.size() == 2 && s[0] == static_cast<int>(targets.size()), "ce: shape");
  int N = s[0], V = s[1];
  double acc = 0;
  for (int i = 0; i < N; ++i) {
    const float* row = logits->value.ptr() + int64_t(i) * V;
    float mx = row[0];
    for (int j = 1; j < V; ++j) mx = std::max(mx, row[j]);
    double sum = 0;
    for (int j = 0; j < V; ++j) sum += std::exp(double(row[j]) - mx);
    acc += std::log(sum) + mx - row[targets[i]];
  }
  Tensor out({1});
  out.data[0] = static_cast<float>(acc / N);
  std::vector<int> tg = targets;
  Node* n = t.make(std::move(out), {logits}, false);
  if (n->requires_grad) {
    n->backward_fn = [logits, N, V, tg = std::move(tg)](Node& self) {
      if (!logits->requires_grad) return;
      ensure_grad(logits);
      float g = self.grad.data[0] / N;
      for (int i = 0; i < N; ++i) {
        const float* row = logits->value.ptr() + int64_t(i) * V;
        float* d = logits->grad.ptr() + int64_t(i) * V;
        float mx = row[0];
        for (int j = 1; j < V; ++j) mx = std::max(mx, row[j]);
        double sum = 0;
        for (int j = 0; j < V; ++j) sum += std::exp(double(row[j]) - mx);
        for (int j = 0; j < V; ++j) {
          double p = std::exp(double(row[j]) - mx) / sum;
          d[j] += static_cast<float>(g * (p - (j == tg[i] ? 1.0 : 0.0)));
        }
      }
    };
  }
  return n;
}

// ---------------------------------------------------------------------------
// quantization
// ---------------------------------------------------------------------------

Node* nearest_codebook_st(Tape& t, Node* x, const Tensor& codebook,
                          std::vector<int>* tokens_out) {
  const auto& s = x->value.shape;
  check(s.size() == 4, "quantize: need (B,C,H,W)");
  check(codebook.rank() == 2 && codebook.dim(1) == s[1], "quantize: codebook (K,C)");
  check(codebook.dim(0) >= 1, "quantize: empty codebook");
  int B = s[0], C = s[1], H = s[2], W = s[3];
  int K = codebook.dim(0);
  int64_t plane = int64_t(H) * W;
  Tensor out(x->value.shape);
  if (tokens_out) tokens_out->assign(size_t(B) * plane, 0);
  for (int b = 0; b < B; ++b) {
    const float* xb = x->value.ptr() + int64_t(b) * C * plane;
    float* ob = out.ptr() + int64_t(b) * C * plane;
    for (int64_t p = 0; p < plane; ++p) {
      int best = 0;
      double best_d = 1e300;
      for (int k = 0; k < K; ++k) {
        const float* e = codebook.ptr() + int64_t(k) * C;
        double d = 0;
        for (int c = 0; c < C; ++c) {
          double diff = double(xb[c * plane + p]) - e[c];
          d += diff * diff;
        }
        if (d < best_d) {  // strict: ties keep the lowest index
          best_d = d;
          best = k;
        }
      }
      const float* e = codebook.ptr() + int64_t(best) * C;
      for (int c = 0; c < C; ++c) ob[c * plane + p] = e[c];
      if (tokens_out) (*tokens_out)[size_t(b) * plane + p] = best;
    }
  }
  Node* n = t.make(std::move(out), {x}, false);
  if (n->requires_grad) {
    n->backward_fn = [x](Node& self) {
      if (!x->requires_grad) return;
      ensure_grad(x);
      for (size_t i = 0; i < self.grad.data.size(); ++i)
        x->grad.data[i] += self.grad.data[i];
    };
  }
  return n;
}

}  // namespace dseal::ad
