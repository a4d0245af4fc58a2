#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "racemop/rng.hpp"

namespace racemop {

struct ConvSpec {
  int filters = 0;
  int kernel = 0;
  int stride = 1;
  bool operator==(const ConvSpec&) const = default;
};

struct NetworkSpec {
  int in_channels = 7;  // stacked frames
  int in_length = 1080; // beams
  std::vector<ConvSpec> conv{{64, 6, 4}, {128, 3, 2}, {256, 3, 2}, {256, 3, 2}, {256, 3, 2}};
  int projection = 64;
  int proprio = 56;  // 7 frames x 8 values
  int hidden = 256;
  int action_dim = 2;

  /// Output length of every conv layer, starting with in_length.
  std::vector<int> conv_lengths() const;
  std::size_t conv_parameter_count() const;  // conv stack and projection
  std::size_t head_parameter_count() const;  // policy and value heads
  std::size_t parameter_count() const;       // everything incl. log sigma
  void validate() const;

  nlohmann::json to_json() const;
  static NetworkSpec from_json(const nlohmann::json& j);
  bool operator==(const NetworkSpec&) const = default;
};

/// Shared 1D-conv LiDAR encoder, linear projection, concatenation with the
/// proprioceptive values, and separate policy (tanh) and value heads. The
/// two log-sigma values are free parameters at the end of the flat vector.
///
/// Input layout per sample: lidar is position-major with channels
/// interleaved (lidar[pos * in_channels + c]), proprio is a flat vector.
template <class T>
class ResidualNetwork {
 public:
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
  using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

  explicit ResidualNetwork(const NetworkSpec& spec);

  const NetworkSpec& spec() const { return spec_; }
  std::size_t size() const { return static_cast<std::size_t>(params_.size()); }
  Vec& params() { return params_; }
  const Vec& params() const { return params_; }
  Vec& grads() { return grads_; }
  const Vec& grads() const { return grads_; }
  void zero_grad() { grads_.setZero(); }

  /// Orthogonal weights (gain sqrt(2) for ReLU layers, 1 for the projection
  /// and value output, `policy_gain` for the policy output), zero biases,
  /// log sigma = log_sigma_init.
  void initialize(Rng& rng, double policy_gain = 0.01, double log_sigma_init = -0.7);

  T log_sigma(int i) const { return params_[static_cast<Eigen::Index>(size()) - spec_.action_dim + i]; }

  struct Output {
    Mat mu;     // action_dim x batch, tanh-squashed
    Mat value;  // 1 x batch
  };

  /// Runs the network on `batch` samples. With keep_cache the activations
  /// are retained for one subsequent backward().
  void forward(const T* lidar, const T* proprio, int batch, Output& out, bool keep_cache = false);

  /// Accumulates parameter gradients of sum_b (d_mu[:, b] . mu[:, b] +
  /// d_value[b] * value[b]) into grads(). log sigma gradients are the
  /// caller's to add (they do not pass through the network).
  void backward(const Mat& d_mu, const Mat& d_value);

  std::size_t log_sigma_offset() const { return size() - spec_.action_dim; }

 private:
  struct Dense {
    std::size_t w = 0;  // offset of the row-major-free (column-major) weight block
    std::size_t b = 0;
    int out = 0;
    int in = 0;
  };
  struct Conv {
    Dense d;
    ConvSpec c;
    int in_channels = 0;
    int in_length = 0;
    int out_length = 0;
  };

  Eigen::Map<Mat> weight(Vec& v, const Dense& d) { return {v.data() + d.w, d.out, d.in}; }
  Eigen::Map<Vec> bias(Vec& v, const Dense& d) { return {v.data() + d.b, d.out}; }

  NetworkSpec spec_;
  std::vector<Conv> conv_;
  Dense proj_;
  Dense pol1_;
  Dense pol2_;
  Dense val1_;
  Dense val2_;
  Vec params_;
  Vec grads_;

  // Activation cache; column blocks of width L per sample.
  int batch_ = 0;
  std::vector<Mat> cols_;     // im2col input of each conv layer
  std::vector<Mat> conv_out_; // post-ReLU output of each conv layer
  Mat z_;                     // projection output (linear)
  Mat joint_;                 // [projection; proprio]
  Mat h_pol_;
  Mat h_val_;
  Mat mu_;
};

extern template class ResidualNetwork<float>;
extern template class ResidualNetwork<double>;

/// Welford running mean and variance per dimension, with parallel-merge
/// updates for batches.
class RunningMeanStd {
 public:
  explicit RunningMeanStd(std::size_t dim = 0);

  void update(const double* x);
  void update(const float* x);
  /// (x - mean) / sqrt(var + eps), clipped to [-clip, clip].
  void normalize(const double* x, float* out, double clip = 10.0, double eps = 1e-8) const;

  std::size_t dim() const { return mean_.size(); }
  double count() const { return count_; }
  const std::vector<double>& mean() const { return mean_; }
  /// Population variance (M2 / count); 1 before the first sample.
  std::vector<double> variance() const;
  double variance(std::size_t i) const;

  nlohmann::json to_json() const;
  static RunningMeanStd from_json(const nlohmann::json& j);

 private:
  double count_ = 0.0;
  std::vector<double> mean_;
  std::vector<double> m2_;
};

/// Indices of the stacked frames for time t: t - k (1 + n_s) for k = n_f..0,
/// oldest first; indices before `episode_start` are replaced by it.
std::vector<long> stack_indices(long t, int n_f, int n_s, long episode_start = 0);

}  // namespace racemop
