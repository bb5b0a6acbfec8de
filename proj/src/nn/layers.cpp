#include "neurofuse/nn/layers.hpp"

#include <cmath>
#include <cstring>
#include <limits>

#include "neurofuse/error.hpp"

namespace neurofuse::nn {

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw Error(ErrorCode::ShapeMismatch, what);
}

}  // namespace

Conv2d::Conv2d(std::string name, int in_channels, int out_channels, int kernel, int stride, int padding)
    : in_(in_channels), out_(out_channels), kernel_(kernel), stride_(stride), padding_(padding) {
  weight_.name = std::move(name);
  weight_.value = Matrix::Zero(out_, static_cast<Eigen::Index>(kernel_) * kernel_ * in_);
  weight_.zero_grad();
}

void Conv2d::init_kaiming(std::mt19937_64& rng) {
  // He initialisation with fan-out, as for ReLU residual networks.
  const double stddev = std::sqrt(2.0 / (static_cast<double>(out_) * kernel_ * kernel_));
  std::normal_distribution<double> normal(0.0, stddev);
  for (Eigen::Index i = 0; i < weight_.value.size(); ++i) weight_.value.data()[i] = normal(rng);
}

Tensor Conv2d::forward(const Tensor& x, bool keep_cache) {
  require(x.channels() == in_, weight_.name + ": expected " + std::to_string(in_) + " input channels");
  in_n_ = x.n;
  in_h_ = x.h;
  in_w_ = x.w;
  out_h_ = (x.h + 2 * padding_ - kernel_) / stride_ + 1;
  out_w_ = (x.w + 2 * padding_ - kernel_) / stride_ + 1;
  require(out_h_ > 0 && out_w_ > 0, weight_.name + ": input smaller than kernel");

  const Eigen::Index rows = static_cast<Eigen::Index>(kernel_) * kernel_ * in_;
  const Eigen::Index pixels = static_cast<Eigen::Index>(x.n) * out_h_ * out_w_;
  Matrix cols = Matrix::Zero(rows, pixels);
  const double* src = x.data.data();
  double* dst = cols.data();
  const std::size_t run = static_cast<std::size_t>(in_) * sizeof(double);
  for (int s = 0; s < x.n; ++s)
    for (int oy = 0; oy < out_h_; ++oy)
      for (int ox = 0; ox < out_w_; ++ox) {
        double* column = dst + ((static_cast<Eigen::Index>(s) * out_h_ + oy) * out_w_ + ox) * rows;
        for (int ky = 0; ky < kernel_; ++ky) {
          const int iy = oy * stride_ - padding_ + ky;
          if (iy < 0 || iy >= x.h) continue;
          for (int kx = 0; kx < kernel_; ++kx) {
            const int ix = ox * stride_ - padding_ + kx;
            if (ix < 0 || ix >= x.w) continue;
            std::memcpy(column + (ky * kernel_ + kx) * in_, src + x.column(s, iy, ix) * in_, run);
          }
        }
      }

  Tensor y{x.n, out_h_, out_w_, Matrix()};
  y.data.noalias() = weight_.value * cols;
  if (keep_cache) cols_ = std::move(cols);
  return y;
}

Tensor Conv2d::backward(const Tensor& grad_out) {
  require(grad_out.data.cols() == cols_.cols(), weight_.name + ": backward without matching forward");
  weight_.grad.noalias() += grad_out.data * cols_.transpose();
  const Matrix dcols = weight_.value.transpose() * grad_out.data;

  Tensor dx{in_n_, in_h_, in_w_, Matrix::Zero(in_, static_cast<Eigen::Index>(in_n_) * in_h_ * in_w_)};
  const Eigen::Index rows = dcols.rows();
  const double* src = dcols.data();
  double* dst = dx.data.data();
  for (int s = 0; s < in_n_; ++s)
    for (int oy = 0; oy < out_h_; ++oy)
      for (int ox = 0; ox < out_w_; ++ox) {
        const double* column = src + ((static_cast<Eigen::Index>(s) * out_h_ + oy) * out_w_ + ox) * rows;
        for (int ky = 0; ky < kernel_; ++ky) {
          const int iy = oy * stride_ - padding_ + ky;
          if (iy < 0 || iy >= in_h_) continue;
          for (int kx = 0; kx < kernel_; ++kx) {
            const int ix = ox * stride_ - padding_ + kx;
            if (ix < 0 || ix >= in_w_) continue;
            double* target = dst + dx.column(s, iy, ix) * in_;
            const double* from = column + (ky * kernel_ + kx) * in_;
            for (int c = 0; c < in_; ++c) target[c] += from[c];
          }
        }
      }
  return dx;
}

BatchNorm2d::BatchNorm2d(std::string name, int channels) {
  gamma_.name = name + ".gamma";
  gamma_.value = Matrix::Ones(channels, 1);
  gamma_.zero_grad();
  beta_.name = name + ".beta";
  beta_.value = Matrix::Zero(channels, 1);
  beta_.zero_grad();
  running_mean_ = Matrix::Zero(channels, 1);
  running_var_ = Matrix::Ones(channels, 1);
}

Tensor BatchNorm2d::forward(const Tensor& x, bool training) {
  require(x.channels() == gamma_.value.rows(), gamma_.name + ": channel mismatch");
  n_ = x.n;
  h_ = x.h;
  w_ = x.w;
  trained_pass_ = training;
  const auto pixels = static_cast<double>(x.data.cols());
  Eigen::VectorXd mean, var;
  if (training) {
    mean = x.data.rowwise().mean();
    var = (x.data.colwise() - mean).array().square().rowwise().mean();
    const double unbias = pixels > 1 ? pixels / (pixels - 1) : 1.0;
    running_mean_ = (1 - kMomentum) * running_mean_ + kMomentum * mean;
    running_var_ = (1 - kMomentum) * running_var_ + kMomentum * (var * unbias);
  } else {
    mean = running_mean_.col(0);
    var = running_var_.col(0);
  }
  inv_std_ = (var.array() + kEps).rsqrt();
  xhat_ = ((x.data.colwise() - mean).array().colwise() * inv_std_.array()).matrix();
  Tensor y{x.n, x.h, x.w, Matrix()};
  y.data = ((xhat_.array().colwise() * gamma_.value.col(0).array()).colwise() + beta_.value.col(0).array()).matrix();
  return y;
}

Tensor BatchNorm2d::backward(const Tensor& grad_out) {
  require(grad_out.data.cols() == xhat_.cols(), gamma_.name + ": backward without matching forward");
  const Matrix& dy = grad_out.data;
  gamma_.grad.col(0) += (dy.array() * xhat_.array()).rowwise().sum().matrix();
  beta_.grad.col(0) += dy.rowwise().sum();
  const Eigen::ArrayXd g = gamma_.value.col(0).array();

  Tensor dx{n_, h_, w_, Matrix()};
  if (!trained_pass_) {
    dx.data = (dy.array().colwise() * (g * inv_std_.array())).matrix();
    return dx;
  }
  const auto pixels = static_cast<double>(dy.cols());
  const Eigen::ArrayXXd dxhat = dy.array().colwise() * g;
  const Eigen::ArrayXd sum_dxhat = dxhat.rowwise().sum();
  const Eigen::ArrayXd sum_dxhat_xhat = (dxhat * xhat_.array()).rowwise().sum();
  dx.data = (((pixels * dxhat).colwise() - sum_dxhat - (xhat_.array().colwise() * sum_dxhat_xhat)).colwise() *
             (inv_std_.array() / pixels))
                .matrix();
  return dx;
}

Tensor Relu::forward(const Tensor& x, bool keep_cache) {
  Tensor y{x.n, x.h, x.w, x.data.cwiseMax(0.0)};
  if (keep_cache) mask_ = (x.data.array() > 0.0).cast<double>().matrix();
  return y;
}

Tensor Relu::backward(const Tensor& grad_out) const {
  return Tensor{grad_out.n, grad_out.h, grad_out.w, grad_out.data.cwiseProduct(mask_)};
}

Tensor MaxPool2d::forward(const Tensor& x, bool keep_cache) {
  constexpr int kWindow = 3, kStride = 2, kPad = 1;
  const int oh = (x.h + 2 * kPad - kWindow) / kStride + 1;
  const int ow = (x.w + 2 * kPad - kWindow) / kStride + 1;
  const int c = x.channels();
  Tensor y{x.n, oh, ow, Matrix(c, static_cast<Eigen::Index>(x.n) * oh * ow)};
  std::vector<Eigen::Index> argmax(static_cast<std::size_t>(y.data.size()));
  const double* src = x.data.data();
  for (int s = 0; s < x.n; ++s)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        const Eigen::Index q = y.column(s, oy, ox);
        for (int ch = 0; ch < c; ++ch) {
          double best = -std::numeric_limits<double>::infinity();
          Eigen::Index where = -1;
          for (int ky = 0; ky < kWindow; ++ky) {
            const int iy = oy * kStride - kPad + ky;
            if (iy < 0 || iy >= x.h) continue;
            for (int kx = 0; kx < kWindow; ++kx) {
              const int ix = ox * kStride - kPad + kx;
              if (ix < 0 || ix >= x.w) continue;
              const Eigen::Index flat = x.column(s, iy, ix) * c + ch;
              if (src[flat] > best) {
                best = src[flat];
                where = flat;
              }
            }
          }
          y.data(ch, q) = best;
          argmax[static_cast<std::size_t>(q * c + ch)] = where;
        }
      }
  if (keep_cache) {
    argmax_ = std::move(argmax);
    in_n_ = x.n;
    in_h_ = x.h;
    in_w_ = x.w;
    channels_ = c;
  }
  return y;
}

Tensor MaxPool2d::backward(const Tensor& grad_out) const {
  Tensor dx{in_n_, in_h_, in_w_, Matrix::Zero(channels_, static_cast<Eigen::Index>(in_n_) * in_h_ * in_w_)};
  const double* g = grad_out.data.data();
  double* d = dx.data.data();
  for (std::size_t i = 0; i < argmax_.size(); ++i) d[argmax_[i]] += g[i];
  return dx;
}

Tensor GlobalAvgPool::forward(const Tensor& x) {
  n_ = x.n;
  h_ = x.h;
  w_ = x.w;
  const Eigen::Index per = static_cast<Eigen::Index>(x.h) * x.w;
  Tensor y{x.n, 1, 1, Matrix(x.channels(), x.n)};
  for (int s = 0; s < x.n; ++s) y.data.col(s) = x.data.middleCols(s * per, per).rowwise().mean();
  return y;
}

Tensor GlobalAvgPool::backward(const Tensor& grad_out) const {
  const Eigen::Index per = static_cast<Eigen::Index>(h_) * w_;
  Tensor dx{n_, h_, w_, Matrix(grad_out.data.rows(), n_ * per)};
  for (int s = 0; s < n_; ++s) {
    dx.data.middleCols(s * per, per) = (grad_out.data.col(s) / static_cast<double>(per)).replicate(1, per);
  }
  return dx;
}

Linear::Linear(std::string name, int in_features, int out_features) {
  weight_.name = name + ".weight";
  weight_.value = Matrix::Zero(out_features, in_features);
  weight_.zero_grad();
  bias_.name = name + ".bias";
  bias_.value = Matrix::Zero(out_features, 1);
  bias_.zero_grad();
}

void Linear::init_uniform(std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(weight_.value.cols()));
  std::uniform_real_distribution<double> uniform(-bound, bound);
  for (Eigen::Index i = 0; i < weight_.value.size(); ++i) weight_.value.data()[i] = uniform(rng);
  for (Eigen::Index i = 0; i < bias_.value.size(); ++i) bias_.value.data()[i] = uniform(rng);
}

Matrix Linear::forward(const Matrix& x, bool keep_cache) {
  require(x.rows() == weight_.value.cols(), weight_.name + ": expected " +
                                                std::to_string(weight_.value.cols()) + " features");
  if (keep_cache) input_ = x;
  Matrix y = weight_.value * x;
  y.colwise() += bias_.value.col(0);
  return y;
}

Matrix Linear::backward(const Matrix& grad_out, bool need_input_grad) {
  weight_.grad.noalias() += grad_out * input_.transpose();
  bias_.grad.col(0) += grad_out.rowwise().sum();
  if (!need_input_grad) return Matrix();
  return weight_.value.transpose() * grad_out;
}

LossResult softmax_cross_entropy(const Matrix& scores, const std::vector<int>& targets) {
  require(static_cast<Eigen::Index>(targets.size()) == scores.cols(), "one target per score column");
  LossResult r;
  r.grad.resize(scores.rows(), scores.cols());
  const auto batch = static_cast<double>(scores.cols());
  for (Eigen::Index s = 0; s < scores.cols(); ++s) {
    const double top = scores.col(s).maxCoeff();
    const Eigen::VectorXd e = (scores.col(s).array() - top).exp().matrix();
    const double z = e.sum();
    r.loss -= (scores(targets[s], s) - top - std::log(z)) / batch;
    r.grad.col(s) = e / z / batch;
    r.grad(targets[s], s) -= 1.0 / batch;
  }
  return r;
}

Adam::Adam(std::vector<Parameter*> params, AdamConfig config) : params_(std::move(params)), config_(config) {
  for (Parameter* p : params_) {
    m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
  }
}

void Adam::zero_grad() {
  for (Parameter* p : params_) p->zero_grad();
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i];
    m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * p.grad;
    v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * p.grad.cwiseAbs2();
    p.value.array() -= config_.learning_rate * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + config_.epsilon);
  }
}

}  // namespace neurofuse::nn
