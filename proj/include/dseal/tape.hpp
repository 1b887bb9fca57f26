#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "dseal/tensor.hpp"

namespace dseal::ad {

// A trainable tensor with persistent gradient and Adam state. Gradients
// accumulate across backward() calls until the optimizer consumes them.
struct Param {
  std::string name;
  Tensor value;
  Tensor grad;
  Tensor adam_m, adam_v;

  Param() = default;
  Param(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {
    grad = Tensor(value.shape);
    adam_m = Tensor(value.shape);
    adam_v = Tensor(value.shape);
  }
};

struct Node {
  Tensor value;
  Tensor grad;  // allocated lazily during backward
  bool requires_grad = false;
  bool grad_ready = false;
  bool reachable = false;
  std::vector<Node*> parents;
  std::function<void(Node&)> backward_fn;

  Tensor& g() { return grad; }
};

// Dynamic reverse-mode tape. Nodes are created in topological order by the
// op builders below; backward() walks them in reverse. One tape per training
// step; destroying it frees all intermediate buffers.
class Tape {
 public:
  Node* make(Tensor value, std::vector<Node*> parents, bool requires_grad);
  Node* input(Tensor value);                 // no gradient tracking
  Node* input_grad(Tensor value);            // gradient flows, not a param
  Node* param(Param& p);                     // leaf bound to a Param
  Node* constant(const Tensor& value) { return input(value); }

  void backward(Node* root);

  size_t size() const { return nodes_.size(); }

 private:
  std::vector<std::unique_ptr<Node>> nodes_;
  std::unordered_map<Param*, Node*> bound_;
};

void ensure_grad(Node* n);
void accumulate(Node* dst, const Tensor& g);

// ---- elementwise ----
Node* add(Tape& t, Node* a, Node* b);
Node* sub(Tape& t, Node* a, Node* b);
Node* mul(Tape& t, Node* a, Node* b);
Node* add_scaled(Tape& t, Node* a, Node* b, float alpha);  // a + alpha*b
Node* scale(Tape& t, Node* a, float s);
Node* add_scalar(Tape& t, Node* a, float s);
Node* silu(Tape& t, Node* a);
Node* sigmoid(Tape& t, Node* a);
Node* leaky_relu(Tape& t, Node* a, float slope);
Node* relu(Tape& t, Node* a);
Node* clamp01(Tape& t, Node* a);
Node* square(Tape& t, Node* a);
Node* round_st(Tape& t, Node* a);  // round forward, identity gradient
Node* detach(Tape& t, Node* a);

// ---- shape ----
Node* reshape(Tape& t, Node* a, std::vector<int> shape);
Node* concat_channels(Tape& t, Node* a, Node* b);          // (B,C,H,W) pairs
Node* slice_channels(Tape& t, Node* a, int c0, int c1);
Node* permute(Tape& t, Node* a, std::vector<int> perm);

// ---- reductions / broadcasts (activations are (B,C,H,W)) ----
Node* mean_all(Tape& t, Node* a);                          // -> (1)
Node* sum_all(Tape& t, Node* a);                           // -> (1)
Node* global_mean_pool(Tape& t, Node* a);                  // -> (B,C)
Node* mean_per_sample(Tape& t, Node* a);                   // -> (B)
Node* add_per_sample(Tape& t, Node* a, Node* s, float alpha);  // x[b]+=alpha*s[b]
Node* add_channel_bias(Tape& t, Node* a, Node* bias);      // bias (B,C)

// ---- linear algebra ----
Node* matmul(Tape& t, Node* a, Node* b);                   // (M,K)x(K,N)
Node* linear(Tape& t, Node* x, Node* w, Node* b);          // x(N,in) w(out,in)
Node* bmm(Tape& t, Node* a, Node* b, bool trans_a, bool trans_b);  // (G,.,.)

// ---- conv / pooling / resampling ----
Node* conv2d(Tape& t, Node* x, Node* w, Node* b, int stride, int pad);
Node* upsample_nearest2x(Tape& t, Node* x);
Node* avg_pool2x2(Tape& t, Node* x);
Node* hflip(Tape& t, Node* x);

struct ResamplePlan {
  int in_h = 0, in_w = 0, out_h = 0, out_w = 0;
  std::vector<int> idx;    // 4 taps per output pixel; -1 contributes zero
  std::vector<float> wgt;  // 4 weights per output pixel
};
ResamplePlan make_resize_plan(int in_h, int in_w, int out_h, int out_w);
ResamplePlan make_rotate_plan(int h, int w, double angle_deg);
ResamplePlan make_center_crop_plan(int h, int w, double side_ratio);
void resample_apply(const ResamplePlan& p, const float* in, float* out, int channels);
Node* resample(Tape& t, Node* x, const ResamplePlan& plan);

// Depthwise convolution with a fixed (non-trainable) separable kernel and
// replicate padding; used by the blur surrogate.
Node* separable_filter(Tape& t, Node* x, const std::vector<float>& k1d);

// Per-pixel 3x3 color transform: out_c = sum_d M[c][d]*in_d + bias_c.
Node* color_transform(Tape& t, Node* x, const float M[3][3], const float bias[3]);

// Blockwise 8x8 orthonormal DCT-II and its inverse (H, W divisible by 8).
Node* dct8x8(Tape& t, Node* x);
Node* idct8x8(Tape& t, Node* x);
// Multiply each 8x8 block elementwise by mask (C,8,8).
Node* block_mask_mul(Tape& t, Node* x, const Tensor& mask);

// ---- norms ----
Node* group_norm(Tape& t, Node* x, Node* gamma, Node* beta, int groups, float eps);
Node* layer_norm(Tape& t, Node* x, Node* gamma, Node* beta, float eps);

// ---- attention / sequence ----
Node* softmax_causal(Tape& t, Node* scores);  // (G,T,T), row i attends <= i
Node* embedding(Tape& t, Node* table, const std::vector<int>& ids);

// ---- losses ----
Node* bce_with_logits_mean(Tape& t, Node* logits, const Tensor& targets);
Node* mse_loss(Tape& t, Node* a, Node* target);
Node* l1_loss(Tape& t, Node* a, Node* target);
Node* cross_entropy_logits(Tape& t, Node* logits, const std::vector<int>& targets);

// ---- quantization ----
// Nearest codebook entry per spatial c-vector (ties -> lowest index).
// Forward emits the dequantized grid; backward passes gradients through
// unchanged (straight-through). x is (B,C,H,W); codebook (K,C).
Node* nearest_codebook_st(Tape& t, Node* x, const Tensor& codebook,
                          std::vector<int>* tokens_out);

}  // namespace dseal::ad
