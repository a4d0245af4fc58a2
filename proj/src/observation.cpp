#include "racemop/observation.hpp"

#include <algorithm>
#include <cstring>
#include <stdexcept>

namespace racemop {

void stack_frames(std::span<const float* const> frames, int beams, int proprio_per_frame,
                  float* lidar_out, float* proprio_out) {
  const int channels = static_cast<int>(frames.size());
  for (int c = 0; c < channels; ++c) {
    const float* f = frames[c];
    for (int pos = 0; pos < beams; ++pos) lidar_out[pos * channels + c] = f[pos];
    std::memcpy(proprio_out + c * proprio_per_frame, f + beams, sizeof(float) * proprio_per_frame);
  }
}

FrameHistory::FrameHistory(int frame_size, int n_f, int n_s)
    : frame_size_(frame_size), n_f_(n_f), n_s_(n_s), capacity_(n_f * (1 + n_s) + 1) {
  if (frame_size <= 0 || n_f < 0 || n_s < 0) throw std::invalid_argument("FrameHistory: bad dimensions");
  data_.assign(static_cast<std::size_t>(capacity_) * frame_size_, 0.0f);
}

void FrameHistory::reset(const float* first_frame) {
  head_ = 0;
  count_ = 1;
  std::memcpy(data_.data(), first_frame, sizeof(float) * frame_size_);
}

void FrameHistory::push(const float* frame) {
  if (count_ == 0) {
    reset(frame);
    return;
  }
  head_ = (head_ + 1) % capacity_;
  ++count_;
  std::memcpy(data_.data() + static_cast<std::size_t>(head_) * frame_size_, frame, sizeof(float) * frame_size_);
}

const float* FrameHistory::frame_at(int age) const {
  if (count_ == 0) throw std::logic_error("FrameHistory: empty");
  age = std::min<long>(std::min(age, capacity_ - 1), count_ - 1);
  const int slot = ((head_ - age) % capacity_ + capacity_) % capacity_;
  return data_.data() + static_cast<std::size_t>(slot) * frame_size_;
}

std::vector<const float*> FrameHistory::stacked() const {
  std::vector<const float*> out;
  out.reserve(n_f_ + 1);
  for (int k = n_f_; k >= 0; --k) out.push_back(frame_at(k * (1 + n_s_)));
  return out;
}

nlohmann::json FrameHistory::to_json_meta() const {
  return {{"frame_size", frame_size_}, {"n_f", n_f_}, {"n_s", n_s_}, {"head", head_}, {"count", count_}};
}

std::vector<float> FrameHistory::export_frames() const { return data_; }

void FrameHistory::import_frames(const nlohmann::json& meta, std::span<const float> frames) {
  if (meta.at("frame_size").get<int>() != frame_size_ || meta.at("n_f").get<int>() != n_f_ ||
      meta.at("n_s").get<int>() != n_s_ || frames.size() != data_.size()) {
    throw std::invalid_argument("FrameHistory::import_frames: shape mismatch");
  }
  head_ = meta.at("head");
  count_ = meta.at("count");
  std::copy(frames.begin(), frames.end(), data_.begin());
}

}  // namespace racemop
