#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json_fwd.hpp>

#include "poisonlab/image.hpp"

namespace poisonlab {

template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <class T>
using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

// Encoder: conv3x3 -> group norm -> relu blocks, global average pool, then a
// linear embedding to feature_dim. Head: feature_dim -> head_hidden -> relu ->
// proj_dim.
struct Arch {
  int in_channels = 3;
  std::vector<int> widths{32, 64, 128};
  std::vector<int> strides{2, 2, 2};
  int norm_groups = 8;
  int feature_dim = 128;
  int head_hidden = 128;
  int proj_dim = 64;

  void validate() const;
  friend bool operator==(const Arch&, const Arch&) = default;
};

void to_json(nlohmann::json& j, const Arch& arch);
void from_json(const nlohmann::json& j, Arch& arch);

struct ParamEntry {
  std::string name;
  int rows = 0;
  int cols = 0;
  std::size_t offset = 0;
  std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
};

struct ParamLayout {
  std::vector<ParamEntry> entries;
  std::size_t total = 0;

  const ParamEntry& find(const std::string& name) const;
};

ParamLayout encoder_layout(const Arch& arch);
ParamLayout head_layout(const Arch& arch);

// FIFO of key vectors; the oldest keys are evicted beyond capacity.
template <class T>
class KeyQueue {
 public:
  KeyQueue() = default;
  KeyQueue(std::size_t capacity, int dim) : capacity_(capacity), dim_(dim) {}

  // Rows of `keys` are appended in order.
  void enqueue(const Matrix<T>& keys);

  std::size_t size() const { return keys_.size(); }
  std::size_t capacity() const { return capacity_; }
  int dim() const { return dim_; }
  bool empty() const { return keys_.empty(); }
  const std::deque<Vector<T>>& keys() const { return keys_; }

  // size() x dim, oldest first.
  Matrix<T> as_matrix() const;

 private:
  std::size_t capacity_ = 0;
  int dim_ = 0;
  std::deque<Vector<T>> keys_;
};

template <class T>
struct BasicEncoderState {
  Arch arch;
  std::vector<T> encoder;
  std::vector<T> head;
  std::optional<std::vector<T>> momentum_encoder;
  std::optional<std::vector<T>> momentum_head;
  KeyQueue<T> dictionary;
  std::vector<std::string> history;

  template <class U>
  BasicEncoderState<U> cast() const;
};

using EncoderState = BasicEncoderState<float>;

EncoderState init(const Arch& arch, std::uint64_t seed);

// Copies the query encoder and head into the momentum slots and sets up an
// empty dictionary of the given capacity.
template <class T>
void attach_momentum(BasicEncoderState<T>& state, std::size_t dictionary_capacity);

// Stacks images into a C x (B*H*W) matrix; column b*H*W + y*W + x holds the
// channel vector of pixel (y, x) of image b.
template <class T>
Matrix<T> pack_images(std::span<const Image> images);

// B x feature_dim.
template <class T>
Matrix<T> forward_features(const BasicEncoderState<T>& state, std::span<const Image> images);

// B x proj_dim, equal to h(f(x)).
template <class T>
Matrix<T> forward_projection(const BasicEncoderState<T>& state, std::span<const Image> images);

// Same computations through the momentum copies.
template <class T>
Matrix<T> forward_momentum_projection(const BasicEncoderState<T>& state,
                                      std::span<const Image> images);

// f_m <- m * f_m + (1 - m) * f_q, for encoder and head.
template <class T>
void momentum_update(BasicEncoderState<T>& state, double m);

// Rows of `keys` must have length proj_dim.
template <class T>
void enqueue_keys(BasicEncoderState<T>& state, const Matrix<T>& keys);

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> encode_checkpoint(const EncoderState& state);
EncoderState decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const EncoderState& state, const std::filesystem::path& path);
EncoderState load_checkpoint(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Differentiable building blocks. Activations are column-per-sample (or
// column-per-pixel for conv maps); parameters are flat spans laid out by
// encoder_layout / head_layout.

template <class T>
struct BlockTrace {
  int in_height = 0;
  int in_width = 0;
  int out_height = 0;
  int out_width = 0;
  Matrix<T> cols;     // im2col of the block input
  Matrix<T> xhat;     // normalized pre-affine activations
  Vector<T> inv_std;  // per (sample, group)
  Matrix<T> out;      // post-relu output
};

template <class T>
struct EncoderTrace {
  int batch = 0;
  std::vector<BlockTrace<T>> blocks;
  Matrix<T> pooled;  // C_last x B
};

template <class T>
struct HeadTrace {
  Matrix<T> features;  // feature_dim x B
  Matrix<T> hidden;    // post-relu
};

// Input: C x (B*H*W) from pack_images. Output: feature_dim x B.
template <class T>
Matrix<T> encoder_forward(const Arch& arch, std::span<const T> params, const Matrix<T>& input,
                          int batch, int height, int width, EncoderTrace<T>* trace);

// Accumulates into grad_params.
template <class T>
void encoder_backward(const Arch& arch, std::span<const T> params, const EncoderTrace<T>& trace,
                      const Matrix<T>& grad_features, std::span<T> grad_params);

// Input: feature_dim x B. Output: proj_dim x B.
template <class T>
Matrix<T> head_forward(const Arch& arch, std::span<const T> params, const Matrix<T>& features,
                       HeadTrace<T>* trace);

// Accumulates into grad_params and returns d loss / d features.
template <class T>
Matrix<T> head_backward(const Arch& arch, std::span<const T> params, const HeadTrace<T>& trace,
                        const Matrix<T>& grad_projection, std::span<T> grad_params);

}  // namespace poisonlab
