#pragma once

#include <vector>

#include "latx/tensor.hpp"

namespace latx {

// Elementwise
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double c);
Tensor scale_t(const Tensor& a, const Tensor& s);  // s is a [1] tensor
Tensor relu(const Tensor& x);
Tensor leaky_relu(const Tensor& x, double slope);
Tensor sigmoid(const Tensor& x);

// Reductions
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

// Shape plumbing
Tensor reshape(const Tensor& x, const Shape& shape);
Tensor concat_ch(const Tensor& a, const Tensor& b);             // [B,C,H,W] channel axis
Tensor slice_ch(const Tensor& x, int c0, int c1);               // channels [c0,c1)
Tensor pad2d(const Tensor& x, int top, int bottom, int left, int right);
Tensor crop2d(const Tensor& x, int top, int height, int left, int width);
Tensor tokens_from_map(const Tensor& x);                        // [B,C,H,W] -> [B,HW,C]
Tensor map_from_tokens(const Tensor& x, int h, int w);          // [B,HW,C] -> [B,C,H,W]
Tensor transpose_last2(const Tensor& x);                        // rank 2 or 3

// Linear algebra
Tensor matmul(const Tensor& a, const Tensor& b);                // 2-D, or batched 3-D
Tensor bmm_transb(const Tensor& a, const Tensor& b);            // [B,M,K] x [B,N,K]^T
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);  // last-dim affine
Tensor softmax(const Tensor& x, int axis);

// Convolution family
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);
Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);
Tensor deform_conv2d(const Tensor& x, const Tensor& w, const Tensor& b, const Tensor& offsets,
                     int pad);

// Pooling / normalisation
Tensor global_avg_pool2d(const Tensor& x);
Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   std::vector<double>* running_mean, std::vector<double>* running_var,
                   bool training, double momentum = 0.9, double eps = 1e-5);

// Bilinear sampling. grid is [B,Ho,Wo,2] with (x,y) in [-1,1], zero padding
// outside; pixel mapping follows the align_corners=false convention,
// ix = ((gx + 1) * W - 1) / 2.
Tensor grid_sample(const Tensor& x, const Tensor& grid);

// Scalar losses
Tensor l1_loss(const Tensor& pred, const Tensor& gt);
Tensor mse_loss(const Tensor& pred, const Tensor& gt);
Tensor bce_with_logits(const Tensor& logits, double target);

}  // namespace latx
