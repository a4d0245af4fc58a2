#include "racemop/network.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace racemop {

std::vector<int> NetworkSpec::conv_lengths() const {
  std::vector<int> lengths{in_length};
  for (const auto& c : conv) lengths.push_back((lengths.back() - c.kernel) / c.stride + 1);
  return lengths;
}

std::size_t NetworkSpec::conv_parameter_count() const {
  std::size_t n = 0;
  int channels = in_channels;
  for (const auto& c : conv) {
    n += static_cast<std::size_t>(c.filters) * channels * c.kernel + c.filters;
    channels = c.filters;
  }
  const std::size_t flat = static_cast<std::size_t>(channels) * conv_lengths().back();
  return n + flat * projection + projection;
}

std::size_t NetworkSpec::head_parameter_count() const {
  const std::size_t joint = static_cast<std::size_t>(projection) + proprio;
  const std::size_t policy = joint * hidden + hidden + static_cast<std::size_t>(hidden) * action_dim + action_dim;
  const std::size_t value = joint * hidden + hidden + hidden + 1;
  return policy + value;
}

std::size_t NetworkSpec::parameter_count() const {
  return conv_parameter_count() + head_parameter_count() + action_dim;
}

void NetworkSpec::validate() const {
  if (in_channels <= 0 || in_length <= 0 || conv.empty() || projection <= 0 || proprio < 0 ||
      hidden <= 0 || action_dim <= 0) {
    throw std::invalid_argument("NetworkSpec: non-positive dimension");
  }
  const auto lengths = conv_lengths();
  for (std::size_t i = 0; i < conv.size(); ++i) {
    if (conv[i].filters <= 0 || conv[i].kernel <= 0 || conv[i].stride <= 0 || lengths[i] < conv[i].kernel) {
      throw std::invalid_argument("NetworkSpec: conv layer " + std::to_string(i) + " does not fit its input");
    }
  }
}

nlohmann::json NetworkSpec::to_json() const {
  nlohmann::json j;
  j["in_channels"] = in_channels;
  j["in_length"] = in_length;
  j["conv"] = nlohmann::json::array();
  for (const auto& c : conv) j["conv"].push_back({c.filters, c.kernel, c.stride});
  j["projection"] = projection;
  j["proprio"] = proprio;
  j["hidden"] = hidden;
  j["action_dim"] = action_dim;
  j["parameter_count"] = parameter_count();
  return j;
}

NetworkSpec NetworkSpec::from_json(const nlohmann::json& j) {
  NetworkSpec s;
  s.in_channels = j.at("in_channels").get<int>();
  s.in_length = j.at("in_length").get<int>();
  s.conv.clear();
  for (const auto& c : j.at("conv")) s.conv.push_back({c.at(0).get<int>(), c.at(1).get<int>(), c.at(2).get<int>()});
  s.projection = j.at("projection").get<int>();
  s.proprio = j.at("proprio").get<int>();
  s.hidden = j.at("hidden").get<int>();
  s.action_dim = j.at("action_dim").get<int>();
  s.validate();
  return s;
}

namespace {

// Orthogonal rows or columns (whichever is fewer), scaled by gain.
Eigen::MatrixXd orthogonal(int rows, int cols, double gain, Rng& rng) {
  const bool tall = rows >= cols;
  const int r = tall ? rows : cols;
  const int c = tall ? cols : rows;
  Eigen::MatrixXd a(r, c);
  for (int j = 0; j < c; ++j) {
    for (int i = 0; i < r; ++i) a(i, j) = standard_normal(rng);
  }
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(r, c);
  const Eigen::MatrixXd rr = qr.matrixQR().topRows(c).triangularView<Eigen::Upper>();
  for (int j = 0; j < c; ++j) {
    if (rr(j, j) < 0.0) q.col(j) = -q.col(j);
  }
  return gain * (tall ? q : Eigen::MatrixXd(q.transpose()));
}

}  // namespace

template <class T>
ResidualNetwork<T>::ResidualNetwork(const NetworkSpec& spec) : spec_(spec) {
  spec_.validate();
  std::size_t offset = 0;
  auto dense = [&offset](int out, int in) {
    Dense d;
    d.out = out;
    d.in = in;
    d.w = offset;
    offset += static_cast<std::size_t>(out) * in;
    d.b = offset;
    offset += out;
    return d;
  };
  const auto lengths = spec_.conv_lengths();
  int channels = spec_.in_channels;
  for (std::size_t i = 0; i < spec_.conv.size(); ++i) {
    Conv c;
    c.c = spec_.conv[i];
    c.in_channels = channels;
    c.in_length = lengths[i];
    c.out_length = lengths[i + 1];
    c.d = dense(c.c.filters, channels * c.c.kernel);
    conv_.push_back(c);
    channels = c.c.filters;
  }
  proj_ = dense(spec_.projection, channels * lengths.back());
  const int joint = spec_.projection + spec_.proprio;
  pol1_ = dense(spec_.hidden, joint);
  pol2_ = dense(spec_.action_dim, spec_.hidden);
  val1_ = dense(spec_.hidden, joint);
  val2_ = dense(1, spec_.hidden);
  offset += spec_.action_dim;
  if (offset != spec_.parameter_count()) throw std::logic_error("ResidualNetwork: layout/count mismatch");
  params_ = Vec::Zero(static_cast<Eigen::Index>(offset));
  grads_ = Vec::Zero(static_cast<Eigen::Index>(offset));
  cols_.resize(conv_.size());
  conv_out_.resize(conv_.size());
}

template <class T>
void ResidualNetwork<T>::initialize(Rng& rng, double policy_gain, double log_sigma_init) {
  params_.setZero();
  const double relu_gain = std::sqrt(2.0);
  auto init = [&](const Dense& d, double gain) {
    weight(params_, d) = orthogonal(d.out, d.in, gain, rng).template cast<T>();
  };
  for (const auto& c : conv_) init(c.d, relu_gain);
  init(proj_, 1.0);
  init(pol1_, relu_gain);
  init(pol2_, policy_gain);
  init(val1_, relu_gain);
  init(val2_, 1.0);
  for (int i = 0; i < spec_.action_dim; ++i) params_[static_cast<Eigen::Index>(log_sigma_offset()) + i] = static_cast<T>(log_sigma_init);
}

template <class T>
void ResidualNetwork<T>::forward(const T* lidar, const T* proprio, int batch, Output& out,
                                 bool keep_cache) {
  if (batch <= 0) throw std::invalid_argument("ResidualNetwork::forward: empty batch");
  batch_ = batch;
  Mat local_cols;
  Mat input;
  const T* x = lidar;
  for (std::size_t l = 0; l < conv_.size(); ++l) {
    const Conv& c = conv_[l];
    const int patch = c.in_channels * c.c.kernel;
    Mat& cols = keep_cache ? cols_[l] : local_cols;
    cols.resize(patch, static_cast<Eigen::Index>(batch) * c.out_length);
    for (int b = 0; b < batch; ++b) {
      const T* src = x + static_cast<std::size_t>(b) * c.in_length * c.in_channels;
      T* dst = cols.data() + static_cast<std::size_t>(b) * c.out_length * patch;
      for (int j = 0; j < c.out_length; ++j) {
        std::memcpy(dst + static_cast<std::size_t>(j) * patch,
                    src + static_cast<std::size_t>(j) * c.c.stride * c.in_channels, sizeof(T) * patch);
      }
    }
    Mat& y = conv_out_[l];
    y.resize(c.c.filters, cols.cols());
    y.noalias() = weight(params_, c.d) * cols;
    y.colwise() += bias(params_, c.d);
    y = y.cwiseMax(T(0));
    x = y.data();
  }
  const Mat& last = conv_out_.back();
  const Eigen::Map<const Mat> flat(last.data(), proj_.in, batch);
  z_.resize(proj_.out, batch);
  z_.noalias() = weight(params_, proj_) * flat;
  z_.colwise() += bias(params_, proj_);

  joint_.resize(pol1_.in, batch);
  joint_.topRows(proj_.out) = z_;
  if (spec_.proprio > 0) {
    joint_.bottomRows(spec_.proprio) = Eigen::Map<const Mat>(proprio, spec_.proprio, batch);
  }

  h_pol_.resize(pol1_.out, batch);
  h_pol_.noalias() = weight(params_, pol1_) * joint_;
  h_pol_.colwise() += bias(params_, pol1_);
  h_pol_ = h_pol_.cwiseMax(T(0));
  mu_.resize(pol2_.out, batch);
  mu_.noalias() = weight(params_, pol2_) * h_pol_;
  mu_.colwise() += bias(params_, pol2_);
  mu_ = mu_.array().tanh().matrix();

  h_val_.resize(val1_.out, batch);
  h_val_.noalias() = weight(params_, val1_) * joint_;
  h_val_.colwise() += bias(params_, val1_);
  h_val_ = h_val_.cwiseMax(T(0));
  out.value.resize(1, batch);
  out.value.noalias() = weight(params_, val2_) * h_val_;
  out.value.colwise() += bias(params_, val2_);
  out.mu = mu_;
}

template <class T>
void ResidualNetwork<T>::backward(const Mat& d_mu, const Mat& d_value) {
  const int batch = batch_;
  if (d_mu.rows() != spec_.action_dim || d_mu.cols() != batch || d_value.rows() != 1 || d_value.cols() != batch) {
    throw std::invalid_argument("ResidualNetwork::backward: gradient shape mismatch");
  }
  if (cols_.front().cols() != static_cast<Eigen::Index>(batch) * conv_.front().out_length) {
    throw std::logic_error("ResidualNetwork::backward: forward was not run with keep_cache");
  }
  const Mat d_pre_mu = (d_mu.array() * (T(1) - mu_.array().square())).matrix();
  weight(grads_, pol2_).noalias() += d_pre_mu * h_pol_.transpose();
  bias(grads_, pol2_) += d_pre_mu.rowwise().sum();
  Mat d_h = weight(params_, pol2_).transpose() * d_pre_mu;
  d_h = (h_pol_.array() > T(0)).select(d_h, T(0));
  weight(grads_, pol1_).noalias() += d_h * joint_.transpose();
  bias(grads_, pol1_) += d_h.rowwise().sum();
  Mat d_joint = weight(params_, pol1_).transpose() * d_h;

  weight(grads_, val2_).noalias() += d_value * h_val_.transpose();
  bias(grads_, val2_) += d_value.rowwise().sum();
  Mat d_hv = weight(params_, val2_).transpose() * d_value;
  d_hv = (h_val_.array() > T(0)).select(d_hv, T(0));
  weight(grads_, val1_).noalias() += d_hv * joint_.transpose();
  bias(grads_, val1_) += d_hv.rowwise().sum();
  d_joint.noalias() += weight(params_, val1_).transpose() * d_hv;

  const Mat d_z = d_joint.topRows(proj_.out);
  const Mat& last = conv_out_.back();
  const Eigen::Map<const Mat> flat(last.data(), proj_.in, batch);
  weight(grads_, proj_).noalias() += d_z * flat.transpose();
  bias(grads_, proj_) += d_z.rowwise().sum();
  Mat d_y(last.rows(), last.cols());
  Eigen::Map<Mat>(d_y.data(), proj_.in, batch).noalias() = weight(params_, proj_).transpose() * d_z;

  for (std::size_t l = conv_.size(); l-- > 0;) {
    const Conv& c = conv_[l];
    d_y = (conv_out_[l].array() > T(0)).select(d_y, T(0));
    weight(grads_, c.d).noalias() += d_y * cols_[l].transpose();
    bias(grads_, c.d) += d_y.rowwise().sum();
    if (l == 0) break;
    const int patch = c.in_channels * c.c.kernel;
    const Mat d_cols = weight(params_, c.d).transpose() * d_y;
    Mat d_x = Mat::Zero(c.in_channels, static_cast<Eigen::Index>(batch) * c.in_length);
    for (int b = 0; b < batch; ++b) {
      T* dst = d_x.data() + static_cast<std::size_t>(b) * c.in_length * c.in_channels;
      const T* src = d_cols.data() + static_cast<std::size_t>(b) * c.out_length * patch;
      for (int j = 0; j < c.out_length; ++j) {
        T* o = dst + static_cast<std::size_t>(j) * c.c.stride * c.in_channels;
        const T* g = src + static_cast<std::size_t>(j) * patch;
        for (int k = 0; k < patch; ++k) o[k] += g[k];
      }
    }
    d_y = std::move(d_x);
  }
}

template class ResidualNetwork<float>;
template class ResidualNetwork<double>;

RunningMeanStd::RunningMeanStd(std::size_t dim) : mean_(dim, 0.0), m2_(dim, 0.0) {}

void RunningMeanStd::update(const double* x) {
  count_ += 1.0;
  for (std::size_t i = 0; i < mean_.size(); ++i) {
    const double delta = x[i] - mean_[i];
    mean_[i] += delta / count_;
    m2_[i] += delta * (x[i] - mean_[i]);
  }
}

void RunningMeanStd::update(const float* x) {
  std::vector<double> tmp(x, x + mean_.size());
  update(tmp.data());
}

double RunningMeanStd::variance(std::size_t i) const { return count_ > 0.0 ? m2_[i] / count_ : 1.0; }

std::vector<double> RunningMeanStd::variance() const {
  std::vector<double> v(mean_.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = variance(i);
  return v;
}

void RunningMeanStd::normalize(const double* x, float* out, double clip, double eps) const {
  for (std::size_t i = 0; i < mean_.size(); ++i) {
    const double z = (x[i] - mean_[i]) / std::sqrt(variance(i) + eps);
    out[i] = static_cast<float>(std::clamp(z, -clip, clip));
  }
}

nlohmann::json RunningMeanStd::to_json() const {
  return {{"count", count_}, {"mean", mean_}, {"m2", m2_}};
}

RunningMeanStd RunningMeanStd::from_json(const nlohmann::json& j) {
  RunningMeanStd r;
  r.count_ = j.at("count").get<double>();
  r.mean_ = j.at("mean").get<std::vector<double>>();
  r.m2_ = j.at("m2").get<std::vector<double>>();
  if (r.mean_.size() != r.m2_.size()) throw std::invalid_argument("RunningMeanStd: size mismatch");
  return r;
}

std::vector<long> stack_indices(long t, int n_f, int n_s, long episode_start) {
  std::vector<long> idx;
  idx.reserve(n_f + 1);
  for (int k = n_f; k >= 0; --k) idx.push_back(std::max(t - static_cast<long>(k) * (1 + n_s), episode_start));
  return idx;
}

}  // namespace racemop
