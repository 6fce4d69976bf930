#pragma once

// Minimal convolutional network with exact reverse-mode gradients, used by the
// toy detector. Feature maps are (positions x channels) matrices so that a
// planar image maps onto a feature map without copying channel data around.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "tpa/errors.hpp"

namespace tpa::nn {

using Mat = Eigen::MatrixXd;
using RowVec = Eigen::RowVectorXd;

struct Feature {
  int height = 0;
  int width = 0;
  Mat data;  // (height * width) x channels, row index y * width + x

  int channels() const { return static_cast<int>(data.cols()); }
};

struct ConvSpec {
  int in = 0;
  int out = 0;
  int kernel = 1;
  int stride = 1;
  int pad = 0;
  int dilation = 1;

  friend bool operator==(const ConvSpec&, const ConvSpec&) = default;

  int out_size(int n) const { return (n + 2 * pad - dilation * (kernel - 1) - 1) / stride + 1; }
  int fan_in() const { return in * kernel * kernel; }
};

class Conv2d {
 public:
  explicit Conv2d(ConvSpec spec)
      : spec_(spec), weight_(Mat::Zero(spec.fan_in(), spec.out)), bias_(RowVec::Zero(spec.out)) {}

  const ConvSpec& spec() const { return spec_; }
  Mat& weight() { return weight_; }  // fan_in x out, row (ci * k + ky) * k + kx
  const Mat& weight() const { return weight_; }
  RowVec& bias() { return bias_; }
  const RowVec& bias() const { return bias_; }

  Mat im2col(const Feature& x, int oh, int ow) const {
    const int k = spec_.kernel;
    Mat col(static_cast<Eigen::Index>(oh) * ow, spec_.fan_in());
    for (int ci = 0; ci < spec_.in; ++ci) {
      const double* src = x.data.col(ci).data();
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          double* dst = col.col((ci * k + ky) * k + kx).data();
          for (int oy = 0; oy < oh; ++oy) {
            const int iy = oy * spec_.stride - spec_.pad + ky * spec_.dilation;
            double* row = dst + static_cast<std::ptrdiff_t>(oy) * ow;
            if (iy < 0 || iy >= x.height) {
              for (int ox = 0; ox < ow; ++ox) row[ox] = 0.0;
              continue;
            }
            const double* line = src + static_cast<std::ptrdiff_t>(iy) * x.width;
            for (int ox = 0; ox < ow; ++ox) {
              const int ix = ox * spec_.stride - spec_.pad + kx * spec_.dilation;
              row[ox] = (ix < 0 || ix >= x.width) ? 0.0 : line[ix];
            }
          }
        }
    }
    return col;
  }

  void col2im(const Mat& dcol, Feature& dx) const {
    const int k = spec_.kernel;
    const int oh = spec_.out_size(dx.height), ow = spec_.out_size(dx.width);
    for (int ci = 0; ci < spec_.in; ++ci) {
      double* dst = dx.data.col(ci).data();
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          const double* src = dcol.col((ci * k + ky) * k + kx).data();
          for (int oy = 0; oy < oh; ++oy) {
            const int iy = oy * spec_.stride - spec_.pad + ky * spec_.dilation;
            if (iy < 0 || iy >= dx.height) continue;
            const double* row = src + static_cast<std::ptrdiff_t>(oy) * ow;
            double* line = dst + static_cast<std::ptrdiff_t>(iy) * dx.width;
            for (int ox = 0; ox < ow; ++ox) {
              const int ix = ox * spec_.stride - spec_.pad + kx * spec_.dilation;
              if (ix >= 0 && ix < dx.width) line[ix] += row[ox];
            }
          }
        }
    }
  }

  /// Forward pass; when `col_out` is given the im2col matrix is kept for backward.
  Feature forward(const Feature& x, Mat* col_out = nullptr) const {
    if (x.channels() != spec_.in) throw ContractError("conv input channel mismatch");
    Feature y;
    y.height = spec_.out_size(x.height);
    y.width = spec_.out_size(x.width);
    Mat col = im2col(x, y.height, y.width);
    y.data.noalias() = col * weight_;
    y.data.rowwise() += bias_;
    if (col_out) *col_out = std::move(col);
    return y;
  }

  /// Backward pass. Accumulates parameter gradients when the pointers are set
  /// and returns the gradient w.r.t. the input feature map.
  Feature backward(const Mat& col, const Mat& dy, int in_h, int in_w, Mat* dweight,
                   RowVec* dbias) const {
    if (dweight) dweight->noalias() += col.transpose() * dy;
    if (dbias) *dbias += dy.colwise().sum();
    Mat dcol = dy * weight_.transpose();
    Feature dx;
    dx.height = in_h;
    dx.width = in_w;
    dx.data = Mat::Zero(static_cast<Eigen::Index>(in_h) * in_w, spec_.in);
    col2im(dcol, dx);
    return dx;
  }

 private:
  ConvSpec spec_;
  Mat weight_;
  RowVec bias_;
};

inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

/// SiLU, x * sigmoid(x). Smooth, so finite differences agree with the
/// analytic input gradient everywhere.
inline Mat silu(const Mat& x) {
  return x.unaryExpr([](double v) { return v * sigmoid(v); });
}

inline Mat silu_grad(const Mat& pre, const Mat& dy) {
  return dy.binaryExpr(pre, [](double g, double v) {
    const double s = sigmoid(v);
    return g * s * (1.0 + v * (1.0 - s));
  });
}

/// Stack of convolutions with SiLU between them; the last layer is linear.
class Network {
 public:
  struct Trace {
    std::vector<Feature> inputs;
    std::vector<Mat> cols;
    std::vector<Mat> pre;
  };

  struct Gradients {
    std::vector<Mat> weight;
    std::vector<RowVec> bias;

    void scale(double s) {
      for (auto& w : weight) w *= s;
      for (auto& b : bias) b *= s;
    }
    void add(const Gradients& o) {
      for (std::size_t i = 0; i < weight.size(); ++i) {
        weight[i] += o.weight[i];
        bias[i] += o.bias[i];
      }
    }
  };

  Network() = default;
  explicit Network(const std::vector<ConvSpec>& specs) {
    for (const auto& s : specs) layers_.emplace_back(s);
  }

  std::vector<Conv2d>& layers() { return layers_; }
  const std::vector<Conv2d>& layers() const { return layers_; }

  std::vector<ConvSpec> specs() const {
    std::vector<ConvSpec> s;
    for (const auto& l : layers_) s.push_back(l.spec());
    return s;
  }

  Gradients zero_gradients() const {
    Gradients g;
    for (const auto& l : layers_) {
      g.weight.push_back(Mat::Zero(l.weight().rows(), l.weight().cols()));
      g.bias.push_back(RowVec::Zero(l.bias().size()));
    }
    return g;
  }

  /// He-normal weights; the last layer starts small.
  void initialize(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      auto& l = layers_[i];
      const bool last = i + 1 == layers_.size();
      const double sd = last ? 0.01 : std::sqrt(2.0 / l.spec().fan_in());
      for (Eigen::Index r = 0; r < l.weight().rows(); ++r)
        for (Eigen::Index c = 0; c < l.weight().cols(); ++c) l.weight()(r, c) = sd * normal(rng);
      l.bias().setZero();
    }
    snap_to_float();
  }

  /// Rounds every parameter to the nearest float so that the in-memory model
  /// equals what a float32 checkpoint stores.
  void snap_to_float() {
    auto snap = [](double v) { return static_cast<double>(static_cast<float>(v)); };
    for (auto& l : layers_) {
      l.weight() = l.weight().unaryExpr(snap);
      l.bias() = l.bias().unaryExpr(snap);
    }
  }

  Feature forward(const Feature& x, Trace* trace = nullptr) const {
    Feature cur = x;
    if (trace) {
      trace->inputs.clear();
      trace->cols.clear();
      trace->pre.clear();
    }
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      Mat col;
      Feature y = layers_[i].forward(cur, trace ? &col : nullptr);
      if (trace) {
        trace->inputs.push_back(Feature{cur.height, cur.width, Mat()});
        trace->cols.push_back(std::move(col));
        trace->pre.push_back(y.data);
      }
      if (i + 1 < layers_.size()) y.data = silu(y.data);
      cur = std::move(y);
    }
    return cur;
  }

  /// Backpropagates d(loss)/d(output) to the input; parameter gradients are
  /// accumulated into `grads` when given.
  Feature backward(const Trace& trace, const Mat& dout, Gradients* grads) const {
    Mat d = dout;
    Feature dx;
    for (std::size_t i = layers_.size(); i-- > 0;) {
      if (i + 1 < layers_.size()) d = silu_grad(trace.pre[i], d);
      dx = layers_[i].backward(trace.cols[i], d, trace.inputs[i].height, trace.inputs[i].width,
                               grads ? &grads->weight[i] : nullptr,
                               grads ? &grads->bias[i] : nullptr);
      d = std::move(dx.data);
      dx.data = Mat();
    }
    dx.data = std::move(d);
    return dx;
  }

 private:
  std::vector<Conv2d> layers_;
};

}  // namespace tpa::nn
