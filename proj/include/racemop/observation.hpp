#pragma once

#include <span>
#include <vector>

#include "json.hpp"

namespace racemop {

/// Copies n_f + 1 normalized frames (oldest first) into the network input
/// layout: lidar[pos * channels + c] and proprio[c * proprio_per_frame + k].
void stack_frames(std::span<const float* const> frames, int beams, int proprio_per_frame,
                  float* lidar_out, float* proprio_out);

/// Normalized frames of the running episode, enough for one stacked
/// observation. Frames before the episode start repeat the first frame.
class FrameHistory {
 public:
  FrameHistory(int frame_size, int n_f, int n_s);

  void reset(const float* first_frame);
  void push(const float* frame);

  /// Frame `age` steps ago (0 = current), clamped to the episode start.
  const float* frame_at(int age) const;
  /// Pointers to the frames of the stacked observation, oldest first.
  std::vector<const float*> stacked() const;

  int frame_size() const { return frame_size_; }
  int span() const { return capacity_ - 1; }  // n_f (1 + n_s)
  int n_f() const { return n_f_; }
  int n_s() const { return n_s_; }

  nlohmann::json to_json_meta() const;
  /// Raw ring storage, for checkpointing together with to_json_meta().
  std::vector<float> export_frames() const;
  void import_frames(const nlohmann::json& meta, std::span<const float> frames);

 private:
  int frame_size_;
  int n_f_;
  int n_s_;
  int capacity_;
  int head_ = 0;   // slot of the current frame
  long count_ = 0; // frames since the episode start
  std::vector<float> data_;
};

}  // namespace racemop
