#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace neurofuse::nn {

using Matrix = Eigen::MatrixXd;

/// Feature maps as a channels x (batch * height * width) matrix. Columns
/// are pixels in (n, row, col) order, col fastest, so each column holds one
/// pixel's channel vector contiguously.
struct Tensor {
  int n = 0;
  int h = 0;
  int w = 0;
  Matrix data;

  int channels() const { return static_cast<int>(data.rows()); }
  int pixels() const { return n * h * w; }
  Eigen::Index column(int sample, int row, int col) const {
    return (static_cast<Eigen::Index>(sample) * h + row) * w + col;
  }
};

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::string name, int in_channels, int out_channels, int kernel, int stride, int padding);

  void init_kaiming(std::mt19937_64& rng);
  Tensor forward(const Tensor& x, bool keep_cache);
  Tensor backward(const Tensor& grad_out);
  void collect(std::vector<Parameter*>& params) { params.push_back(&weight_); }
  int out_channels() const { return out_; }

 private:
  int in_ = 0, out_ = 0, kernel_ = 1, stride_ = 1, padding_ = 0;
  Parameter weight_;  // out x (kernel * kernel * in), ordered (ky, kx, in)
  Matrix cols_;
  int in_n_ = 0, in_h_ = 0, in_w_ = 0, out_h_ = 0, out_w_ = 0;
};

/// Batch statistics in training mode, running statistics otherwise.
class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  BatchNorm2d(std::string name, int channels);

  Tensor forward(const Tensor& x, bool training);
  Tensor backward(const Tensor& grad_out);
  void collect(std::vector<Parameter*>& params) {
    params.push_back(&gamma_);
    params.push_back(&beta_);
  }
  void collect_buffers(std::vector<Matrix*>& buffers) {
    buffers.push_back(&running_mean_);
    buffers.push_back(&running_var_);
  }

  static constexpr double kEps = 1e-5;
  static constexpr double kMomentum = 0.1;

 private:
  Parameter gamma_, beta_;
  Matrix running_mean_, running_var_;
  Matrix xhat_;
  Eigen::VectorXd inv_std_;
  bool trained_pass_ = false;
  int n_ = 0, h_ = 0, w_ = 0;
};

class Relu {
 public:
  Tensor forward(const Tensor& x, bool keep_cache);
  Tensor backward(const Tensor& grad_out) const;

 private:
  Matrix mask_;
};

/// 3x3 window, stride 2, padding 1.
class MaxPool2d {
 public:
  Tensor forward(const Tensor& x, bool keep_cache);
  Tensor backward(const Tensor& grad_out) const;

 private:
  std::vector<Eigen::Index> argmax_;
  int in_n_ = 0, in_h_ = 0, in_w_ = 0, channels_ = 0;
};

/// Mean over all pixels of each sample: returns channels x batch with h = w = 1.
class GlobalAvgPool {
 public:
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& grad_out) const;

 private:
  int n_ = 0, h_ = 0, w_ = 0;
};

class Linear {
 public:
  Linear() = default;
  Linear(std::string name, int in_features, int out_features);

  /// Uniform in +-1/sqrt(fan_in) for weight and bias.
  void init_uniform(std::mt19937_64& rng);
  Matrix forward(const Matrix& x, bool keep_cache);
  Matrix backward(const Matrix& grad_out, bool need_input_grad = true);
  void collect(std::vector<Parameter*>& params) {
    params.push_back(&weight_);
    params.push_back(&bias_);
  }
  int in_features() const { return static_cast<int>(weight_.value.cols()); }
  int out_features() const { return static_cast<int>(weight_.value.rows()); }

 private:
  Parameter weight_, bias_;
  Matrix input_;
};

struct LossResult {
  double loss = 0.0;
  Matrix grad;  // d(mean loss)/d(scores)
};

/// Mean softmax cross-entropy over columns of `scores` (classes x batch).
LossResult softmax_cross_entropy(const Matrix& scores, const std::vector<int>& targets);

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class Adam {
 public:
  Adam(std::vector<Parameter*> params, AdamConfig config = {});
  void step();
  void zero_grad();
  long steps() const { return t_; }

 private:
  std::vector<Parameter*> params_;
  std::vector<Matrix> m_, v_;
  AdamConfig config_;
  long t_ = 0;
};

}  // namespace neurofuse::nn
