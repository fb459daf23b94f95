#include "poisonlab/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "byte_io.hpp"
#include "poisonlab/rng.hpp"

namespace poisonlab {
namespace {

using Json = nlohmann::json;

constexpr double kNormEps = 1e-5;
constexpr int kKernel = 3;
constexpr int kTaps = kKernel * kKernel;
// Forward passes over large image sets run in chunks of this many images.
constexpr std::size_t kForwardChunk = 256;

template <class T>
using MapMat = Eigen::Map<Matrix<T>>;
template <class T>
using ConstMapMat = Eigen::Map<const Matrix<T>>;

int conv_out(int in, int stride) { return (in - 1) / stride + 1; }

// Copied into aligned Eigen storage so vectorized results do not depend on
// where the allocator placed the parameter buffer.
template <class T>
Matrix<T> view(std::span<const T> params, const ParamEntry& e) {
  return ConstMapMat<T>(params.data() + e.offset, e.rows, e.cols);
}

template <class T, class Derived>
void accumulate(std::span<T> grads, const ParamEntry& e, const Eigen::MatrixBase<Derived>& delta) {
  const Matrix<T> d = delta;
  MapMat<T>(grads.data() + e.offset, e.rows, e.cols) += d;
}

// cols: (9*C) x (B*Ho*Wo); row block k*C..k*C+C holds tap k = ky*3 + kx.
template <class T>
void im2col(const Matrix<T>& in, int channels, int batch, int h, int w, int stride, int ho, int wo,
            Matrix<T>& cols) {
  cols.setZero(kTaps * channels, static_cast<Eigen::Index>(batch) * ho * wo);
  for (int b = 0; b < batch; ++b) {
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        const Eigen::Index col = (static_cast<Eigen::Index>(b) * ho + oy) * wo + ox;
        for (int ky = 0; ky < kKernel; ++ky) {
          const int iy = oy * stride + ky - 1;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < kKernel; ++kx) {
            const int ix = ox * stride + kx - 1;
            if (ix < 0 || ix >= w) continue;
            const Eigen::Index src = (static_cast<Eigen::Index>(b) * h + iy) * w + ix;
            cols.block((ky * kKernel + kx) * channels, col, channels, 1) = in.col(src);
          }
        }
      }
    }
  }
}

template <class T>
void col2im(const Matrix<T>& cols, int channels, int batch, int h, int w, int stride, int ho, int wo,
            Matrix<T>& out) {
  out.setZero(channels, static_cast<Eigen::Index>(batch) * h * w);
  for (int b = 0; b < batch; ++b) {
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        const Eigen::Index col = (static_cast<Eigen::Index>(b) * ho + oy) * wo + ox;
        for (int ky = 0; ky < kKernel; ++ky) {
          const int iy = oy * stride + ky - 1;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < kKernel; ++kx) {
            const int ix = ox * stride + kx - 1;
            if (ix < 0 || ix >= w) continue;
            const Eigen::Index dst = (static_cast<Eigen::Index>(b) * h + iy) * w + ix;
            out.col(dst) += cols.block((ky * kKernel + kx) * channels, col, channels, 1);
          }
        }
      }
    }
  }
}

template <class T>
void fill_uniform(std::span<T> params, const ParamEntry& e, double bound, Rng& rng) {
  for (std::size_t i = 0; i < e.size(); ++i) params[e.offset + i] = static_cast<T>(uniform(rng, -bound, bound));
}

template <class T>
void check_momentum(const BasicEncoderState<T>& state) {
  if (!state.momentum_encoder || !state.momentum_head) {
    throw std::invalid_argument("encoder state has no momentum parameters");
  }
}

template <class T>
Matrix<T> run_features(const Arch& arch, std::span<const T> params, std::span<const Image> images) {
  const ImageShape shape = common_shape(images);
  if (shape.channels != arch.in_channels) {
    throw std::invalid_argument("image channels do not match the encoder input channels");
  }
  Matrix<T> out(arch.feature_dim, static_cast<Eigen::Index>(images.size()));
  for (std::size_t start = 0; start < images.size(); start += kForwardChunk) {
    const std::size_t n = std::min(kForwardChunk, images.size() - start);
    auto chunk = images.subspan(start, n);
    const Matrix<T> input = pack_images<T>(chunk);
    out.middleCols(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(n)) =
        encoder_forward<T>(arch, params, input, static_cast<int>(n), shape.height, shape.width, nullptr);
  }
  return out;
}

template <class U, class T>
std::vector<U> convert(const std::vector<T>& v) {
  return std::vector<U>(v.begin(), v.end());
}

}  // namespace

void Arch::validate() const {
  if (in_channels != 1 && in_channels != 3) throw std::invalid_argument("arch.in_channels must be 1 or 3");
  if (widths.empty()) throw std::invalid_argument("arch.widths must be nonempty");
  if (strides.size() != widths.size()) throw std::invalid_argument("arch.strides must match arch.widths");
  if (norm_groups < 1) throw std::invalid_argument("arch.norm_groups must be >= 1");
  for (std::size_t i = 0; i < widths.size(); ++i) {
    if (widths[i] < 1) throw std::invalid_argument("arch.widths entries must be >= 1");
    if (widths[i] % norm_groups != 0) {
      throw std::invalid_argument("arch.norm_groups must divide every width");
    }
    if (strides[i] < 1) throw std::invalid_argument("arch.strides entries must be >= 1");
  }
  if (feature_dim < 1 || head_hidden < 1 || proj_dim < 1) {
    throw std::invalid_argument("arch dimensions must be >= 1");
  }
}

void to_json(Json& j, const Arch& arch) {
  j = Json{{"in_channels", arch.in_channels}, {"widths", arch.widths},
           {"strides", arch.strides},         {"norm_groups", arch.norm_groups},
           {"feature_dim", arch.feature_dim}, {"head_hidden", arch.head_hidden},
           {"proj_dim", arch.proj_dim}};
}

void from_json(const Json& j, Arch& arch) {
  arch.in_channels = j.value("in_channels", arch.in_channels);
  arch.widths = j.value("widths", arch.widths);
  arch.strides = j.value("strides", std::vector<int>(arch.widths.size(), 2));
  arch.norm_groups = j.value("norm_groups", arch.norm_groups);
  arch.feature_dim = j.value("feature_dim", arch.feature_dim);
  arch.head_hidden = j.value("head_hidden", arch.head_hidden);
  arch.proj_dim = j.value("proj_dim", arch.proj_dim);
}

const ParamEntry& ParamLayout::find(const std::string& name) const {
  for (const auto& e : entries) {
    if (e.name == name) return e;
  }
  throw std::out_of_range("no parameter named " + name);
}

ParamLayout encoder_layout(const Arch& arch) {
  ParamLayout layout;
  auto add = [&](std::string name, int rows, int cols) {
    layout.entries.push_back({std::move(name), rows, cols, layout.total});
    layout.total += static_cast<std::size_t>(rows) * cols;
  };
  int in = arch.in_channels;
  for (std::size_t i = 0; i < arch.widths.size(); ++i) {
    const std::string prefix = "block" + std::to_string(i);
    add(prefix + ".conv.weight", arch.widths[i], kTaps * in);
    add(prefix + ".norm.weight", arch.widths[i], 1);
    add(prefix + ".norm.bias", arch.widths[i], 1);
    in = arch.widths[i];
  }
  add("embed.weight", arch.feature_dim, in);
  add("embed.bias", arch.feature_dim, 1);
  return layout;
}

ParamLayout head_layout(const Arch& arch) {
  ParamLayout layout;
  auto add = [&](std::string name, int rows, int cols) {
    layout.entries.push_back({std::move(name), rows, cols, layout.total});
    layout.total += static_cast<std::size_t>(rows) * cols;
  };
  add("head.fc1.weight", arch.head_hidden, arch.feature_dim);
  add("head.fc1.bias", arch.head_hidden, 1);
  add("head.fc2.weight", arch.proj_dim, arch.head_hidden);
  add("head.fc2.bias", arch.proj_dim, 1);
  return layout;
}

template <class T>
void KeyQueue<T>::enqueue(const Matrix<T>& keys) {
  if (keys.rows() > 0 && keys.cols() != dim_) {
    throw std::invalid_argument("key length " + std::to_string(keys.cols()) +
                                " does not match dictionary dimension " + std::to_string(dim_));
  }
  for (Eigen::Index r = 0; r < keys.rows(); ++r) {
    keys_.push_back(keys.row(r).transpose());
    while (keys_.size() > capacity_) keys_.pop_front();
  }
}

template <class T>
Matrix<T> KeyQueue<T>::as_matrix() const {
  Matrix<T> m(static_cast<Eigen::Index>(keys_.size()), dim_);
  for (std::size_t i = 0; i < keys_.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = keys_[i].transpose();
  return m;
}

template <class T>
template <class U>
BasicEncoderState<U> BasicEncoderState<T>::cast() const {
  BasicEncoderState<U> out;
  out.arch = arch;
  out.encoder = convert<U>(encoder);
  out.head = convert<U>(head);
  if (momentum_encoder) out.momentum_encoder = convert<U>(*momentum_encoder);
  if (momentum_head) out.momentum_head = convert<U>(*momentum_head);
  out.dictionary = KeyQueue<U>(dictionary.capacity(), dictionary.dim());
  if (!dictionary.empty()) out.dictionary.enqueue(dictionary.as_matrix().template cast<U>());
  out.history = history;
  return out;
}

EncoderState init(const Arch& arch, std::uint64_t seed) {
  arch.validate();
  EncoderState state;
  state.arch = arch;

  const ParamLayout enc = encoder_layout(arch);
  state.encoder.assign(enc.total, 0.0f);
  Rng enc_rng(derive_seed(seed, 1));
  for (const auto& e : enc.entries) {
    if (e.name.ends_with(".norm.weight")) {
      std::fill_n(state.encoder.begin() + static_cast<std::ptrdiff_t>(e.offset), e.size(), 1.0f);
    } else if (e.name.ends_with(".norm.bias")) {
      // zero
    } else {
      const int fan_in = e.name == "embed.bias" ? enc.find("embed.weight").cols
                                                : (e.cols > 1 ? e.cols : 1);
      fill_uniform<float>(state.encoder, e, 1.0 / std::sqrt(static_cast<double>(fan_in)), enc_rng);
    }
  }

  const ParamLayout head = head_layout(arch);
  state.head.assign(head.total, 0.0f);
  Rng head_rng(derive_seed(seed, 2));
  fill_uniform<float>(state.head, head.find("head.fc1.weight"), 1.0 / std::sqrt(arch.feature_dim), head_rng);
  fill_uniform<float>(state.head, head.find("head.fc1.bias"), 1.0 / std::sqrt(arch.feature_dim), head_rng);
  fill_uniform<float>(state.head, head.find("head.fc2.weight"), 1.0 / std::sqrt(arch.head_hidden), head_rng);
  fill_uniform<float>(state.head, head.find("head.fc2.bias"), 1.0 / std::sqrt(arch.head_hidden), head_rng);

  state.dictionary = KeyQueue<float>(0, arch.proj_dim);
  state.history.push_back("init:seed=" + std::to_string(seed));
  return state;
}

template <class T>
void attach_momentum(BasicEncoderState<T>& state, std::size_t dictionary_capacity) {
  state.momentum_encoder = state.encoder;
  state.momentum_head = state.head;
  state.dictionary = KeyQueue<T>(dictionary_capacity, state.arch.proj_dim);
}

template <class T>
Matrix<T> pack_images(std::span<const Image> images) {
  const ImageShape shape = common_shape(images);
  const Eigen::Index per_image = static_cast<Eigen::Index>(shape.height) * shape.width;
  Matrix<T> out(shape.channels, per_image * static_cast<Eigen::Index>(images.size()));
  T* dst = out.data();
  for (const auto& img : images) {
    for (float v : img.pixels()) *dst++ = static_cast<T>(v);
  }
  return out;
}

template <class T>
Matrix<T> encoder_forward(const Arch& arch, std::span<const T> params, const Matrix<T>& input,
                          int batch, int height, int width, EncoderTrace<T>* trace) {
  const ParamLayout layout = encoder_layout(arch);
  if (params.size() != layout.total) throw std::invalid_argument("encoder parameter count mismatch");
  if (input.rows() != arch.in_channels ||
      input.cols() != static_cast<Eigen::Index>(batch) * height * width) {
    throw std::invalid_argument("encoder input shape mismatch");
  }
  if (trace != nullptr) {
    trace->batch = batch;
    trace->blocks.assign(arch.widths.size(), {});
  }

  Matrix<T> x = input;
  int channels = arch.in_channels, h = height, w = width;
  Matrix<T> cols;
  for (std::size_t i = 0; i < arch.widths.size(); ++i) {
    const std::string prefix = "block" + std::to_string(i);
    const int out_c = arch.widths[i];
    const int stride = arch.strides[i];
    const int ho = conv_out(h, stride), wo = conv_out(w, stride);
    const Eigen::Index hw = static_cast<Eigen::Index>(ho) * wo;

    im2col(x, channels, batch, h, w, stride, ho, wo, cols);
    Matrix<T> y = view(params, layout.find(prefix + ".conv.weight")) * cols;

    const auto gamma = view(params, layout.find(prefix + ".norm.weight"));
    const auto beta = view(params, layout.find(prefix + ".norm.bias"));
    const int groups = arch.norm_groups;
    const int cg = out_c / groups;
    const T count = static_cast<T>(cg * hw);
    Vector<T> inv_std(static_cast<Eigen::Index>(batch) * groups);
    for (int b = 0; b < batch; ++b) {
      for (int g = 0; g < groups; ++g) {
        auto blk = y.block(g * cg, b * hw, cg, hw);
        const T mean = blk.sum() / count;
        blk.array() -= mean;
        const T var = blk.squaredNorm() / count;
        const T is = static_cast<T>(1.0 / std::sqrt(static_cast<double>(var) + kNormEps));
        blk *= is;
        inv_std(b * groups + g) = is;
      }
    }
    // y now holds xhat.
    Matrix<T> out = ((y.array().colwise() * gamma.col(0).array()).colwise() + beta.col(0).array())
                        .cwiseMax(T(0))
                        .matrix();
    if (trace != nullptr) {
      auto& bt = trace->blocks[i];
      bt.in_height = h;
      bt.in_width = w;
      bt.out_height = ho;
      bt.out_width = wo;
      bt.cols = std::move(cols);
      bt.xhat = std::move(y);
      bt.inv_std = std::move(inv_std);
      bt.out = out;
    }
    x = std::move(out);
    channels = out_c;
    h = ho;
    w = wo;
  }

  const Eigen::Index hw = static_cast<Eigen::Index>(h) * w;
  Matrix<T> pooled(channels, batch);
  for (int b = 0; b < batch; ++b) pooled.col(b) = x.middleCols(b * hw, hw).rowwise().mean();
  Matrix<T> features = view(params, layout.find("embed.weight")) * pooled;
  features.colwise() += view(params, layout.find("embed.bias")).col(0);
  if (trace != nullptr) trace->pooled = std::move(pooled);
  return features;
}

template <class T>
void encoder_backward(const Arch& arch, std::span<const T> params, const EncoderTrace<T>& trace,
                      const Matrix<T>& grad_features, std::span<T> grad_params) {
  const ParamLayout layout = encoder_layout(arch);
  if (grad_params.size() != layout.total) throw std::invalid_argument("encoder gradient size mismatch");
  const int batch = trace.batch;

  const auto& embed_w = layout.find("embed.weight");
  accumulate(grad_params, embed_w, grad_features * trace.pooled.transpose());
  accumulate(grad_params, layout.find("embed.bias"), grad_features.rowwise().sum());
  const Matrix<T> grad_pooled = view(params, embed_w).transpose() * grad_features;

  const auto& last = trace.blocks.back();
  const Eigen::Index last_hw = static_cast<Eigen::Index>(last.out_height) * last.out_width;
  Matrix<T> grad_out(grad_pooled.rows(), static_cast<Eigen::Index>(batch) * last_hw);
  for (int b = 0; b < batch; ++b) {
    grad_out.middleCols(b * last_hw, last_hw).colwise() = grad_pooled.col(b) / static_cast<T>(last_hw);
  }

  for (std::size_t ii = arch.widths.size(); ii-- > 0;) {
    const auto& bt = trace.blocks[ii];
    const std::string prefix = "block" + std::to_string(ii);
    const int out_c = arch.widths[ii];
    const int in_c = ii == 0 ? arch.in_channels : arch.widths[ii - 1];
    const Eigen::Index hw = static_cast<Eigen::Index>(bt.out_height) * bt.out_width;

    // relu
    Matrix<T> dy = (bt.out.array() > T(0)).select(grad_out.array(), T(0)).matrix();

    const auto gamma = view(params, layout.find(prefix + ".norm.weight"));
    accumulate(grad_params, layout.find(prefix + ".norm.weight"),
               (dy.array() * bt.xhat.array()).rowwise().sum().matrix());
    accumulate(grad_params, layout.find(prefix + ".norm.bias"), dy.rowwise().sum());

    // dxhat, then group norm input gradient in place.
    dy.array().colwise() *= gamma.col(0).array();
    const int groups = arch.norm_groups;
    const int cg = out_c / groups;
    const T count = static_cast<T>(cg * hw);
    for (int b = 0; b < batch; ++b) {
      for (int g = 0; g < groups; ++g) {
        auto d = dy.block(g * cg, b * hw, cg, hw);
        const auto xh = bt.xhat.block(g * cg, b * hw, cg, hw);
        const T sum_d = d.sum();
        const T sum_dx = (d.array() * xh.array()).sum();
        const T is = bt.inv_std(b * groups + g);
        d = ((d.array() * count - sum_d - xh.array() * sum_dx) * (is / count)).matrix();
      }
    }

    const auto& conv_w = layout.find(prefix + ".conv.weight");
    accumulate(grad_params, conv_w, dy * bt.cols.transpose());
    if (ii > 0) {
      const Matrix<T> dcols = view(params, conv_w).transpose() * dy;
      col2im(dcols, in_c, batch, bt.in_height, bt.in_width, arch.strides[ii], bt.out_height,
             bt.out_width, grad_out);
    }
  }
}

template <class T>
Matrix<T> head_forward(const Arch& arch, std::span<const T> params, const Matrix<T>& features,
                       HeadTrace<T>* trace) {
  const ParamLayout layout = head_layout(arch);
  if (params.size() != layout.total) throw std::invalid_argument("head parameter count mismatch");
  Matrix<T> hidden = view(params, layout.find("head.fc1.weight")) * features;
  hidden.colwise() += view(params, layout.find("head.fc1.bias")).col(0);
  hidden = hidden.cwiseMax(T(0));
  Matrix<T> proj = view(params, layout.find("head.fc2.weight")) * hidden;
  proj.colwise() += view(params, layout.find("head.fc2.bias")).col(0);
  if (trace != nullptr) {
    trace->features = features;
    trace->hidden = std::move(hidden);
  }
  return proj;
}

template <class T>
Matrix<T> head_backward(const Arch& arch, std::span<const T> params, const HeadTrace<T>& trace,
                        const Matrix<T>& grad_projection, std::span<T> grad_params) {
  const ParamLayout layout = head_layout(arch);
  const auto& w2 = layout.find("head.fc2.weight");
  const auto& w1 = layout.find("head.fc1.weight");
  accumulate(grad_params, w2, grad_projection * trace.hidden.transpose());
  accumulate(grad_params, layout.find("head.fc2.bias"), grad_projection.rowwise().sum());
  Matrix<T> grad_hidden = view(params, w2).transpose() * grad_projection;
  grad_hidden = (trace.hidden.array() > T(0)).select(grad_hidden.array(), T(0)).matrix();
  accumulate(grad_params, w1, grad_hidden * trace.features.transpose());
  accumulate(grad_params, layout.find("head.fc1.bias"), grad_hidden.rowwise().sum());
  return view(params, w1).transpose() * grad_hidden;
}

template <class T>
Matrix<T> forward_features(const BasicEncoderState<T>& state, std::span<const Image> images) {
  return run_features<T>(state.arch, state.encoder, images).transpose();
}

template <class T>
Matrix<T> forward_projection(const BasicEncoderState<T>& state, std::span<const Image> images) {
  const Matrix<T> features = run_features<T>(state.arch, state.encoder, images);
  return head_forward<T>(state.arch, state.head, features, nullptr).transpose();
}

template <class T>
Matrix<T> forward_momentum_projection(const BasicEncoderState<T>& state,
                                      std::span<const Image> images) {
  check_momentum(state);
  const Matrix<T> features = run_features<T>(state.arch, *state.momentum_encoder, images);
  return head_forward<T>(state.arch, *state.momentum_head, features, nullptr).transpose();
}

template <class T>
void momentum_update(BasicEncoderState<T>& state, double m) {
  check_momentum(state);
  if (!(m >= 0.0 && m <= 1.0)) throw std::invalid_argument("momentum must lie in [0, 1]");
  auto blend = [m](std::vector<T>& slow, const std::vector<T>& fast) {
    if (m == 1.0) return;
    if (m == 0.0) {
      slow = fast;
      return;
    }
    const T a = static_cast<T>(m), b = static_cast<T>(1.0 - m);
    for (std::size_t i = 0; i < slow.size(); ++i) slow[i] = a * slow[i] + b * fast[i];
  };
  blend(*state.momentum_encoder, state.encoder);
  blend(*state.momentum_head, state.head);
}

template <class T>
void enqueue_keys(BasicEncoderState<T>& state, const Matrix<T>& keys) {
  if (keys.rows() > 0 && keys.cols() != state.arch.proj_dim) {
    throw std::invalid_argument("key length does not match proj_dim");
  }
  state.dictionary.enqueue(keys);
}

std::vector<std::uint8_t> encode_checkpoint(const EncoderState& state) {
  Json meta{{"arch", state.arch},
            {"history", state.history},
            {"dictionary_capacity", state.dictionary.capacity()},
            {"dictionary_size", state.dictionary.size()},
            {"has_momentum", state.momentum_encoder.has_value()}};
  const std::string meta_text = meta.dump();

  std::vector<std::pair<std::string, std::vector<float>>> blobs;
  blobs.emplace_back("encoder", state.encoder);
  blobs.emplace_back("head", state.head);
  if (state.momentum_encoder) blobs.emplace_back("momentum_encoder", *state.momentum_encoder);
  if (state.momentum_head) blobs.emplace_back("momentum_head", *state.momentum_head);
  {
    std::vector<float> dict;
    dict.reserve(state.dictionary.size() * static_cast<std::size_t>(state.dictionary.dim()));
    for (const auto& k : state.dictionary.keys()) dict.insert(dict.end(), k.data(), k.data() + k.size());
    blobs.emplace_back("dictionary", std::move(dict));
  }

  detail::ByteWriter w;
  w.text("PENW");
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(meta_text.size()));
  w.text(meta_text);
  w.u32(static_cast<std::uint32_t>(blobs.size()));
  for (const auto& [name, data] : blobs) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.text(name);
    w.u64(data.size());
  }
  for (const auto& blob : blobs) {
    for (float v : blob.second) w.f32(v);
  }
  return std::move(w.buffer());
}

EncoderState decode_checkpoint(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  if (r.text(4, "magic") != "PENW") throw FormatError("bad magic, expected PENW", 0);
  const auto version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version), 4);
  }
  const auto meta_offset = r.offset();
  const auto meta_len = r.u32("metadata length");
  const std::string meta_text = r.text(meta_len, "metadata");

  EncoderState state;
  std::size_t dict_capacity = 0, dict_size = 0;
  bool has_momentum = false;
  try {
    const Json meta = Json::parse(meta_text);
    state.arch = meta.at("arch").get<Arch>();
    state.arch.validate();
    state.history = meta.value("history", std::vector<std::string>{});
    dict_capacity = meta.value("dictionary_capacity", std::size_t{0});
    dict_size = meta.value("dictionary_size", std::size_t{0});
    has_momentum = meta.value("has_momentum", false);
  } catch (const std::exception& e) {
    throw FormatError(std::string("invalid checkpoint metadata: ") + e.what(), meta_offset);
  }

  const auto count = r.u32("blob count");
  std::vector<std::pair<std::string, std::uint64_t>> index;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.u32("blob name length");
    std::string name = r.text(name_len, "blob name");
    const auto n = r.u64("blob length");
    if (n > r.remaining() / 4) throw FormatError("blob '" + name + "' exceeds file size", r.offset());
    index.emplace_back(std::move(name), n);
  }
  const std::size_t enc_size = encoder_layout(state.arch).total;
  const std::size_t head_size = head_layout(state.arch).total;
  std::vector<float> dict;
  for (const auto& [name, n] : index) {
    const auto start = r.offset();
    std::vector<float> data(n);
    for (auto& v : data) v = r.f32("parameter blob");
    std::size_t expected = 0;
    if (name == "encoder" || name == "momentum_encoder") {
      expected = enc_size;
    } else if (name == "head" || name == "momentum_head") {
      expected = head_size;
    } else if (name == "dictionary") {
      expected = dict_size * static_cast<std::size_t>(state.arch.proj_dim);
    } else {
      throw FormatError("unknown blob '" + name + "'", start);
    }
    if (data.size() != expected) throw FormatError("blob '" + name + "' has wrong length", start);
    if (name == "encoder") state.encoder = std::move(data);
    else if (name == "head") state.head = std::move(data);
    else if (name == "momentum_encoder") state.momentum_encoder = std::move(data);
    else if (name == "momentum_head") state.momentum_head = std::move(data);
    else dict = std::move(data);
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after parameter blobs", r.offset());
  if (state.encoder.size() != enc_size || state.head.size() != head_size) {
    throw FormatError("checkpoint is missing encoder or head parameters", r.offset());
  }
  if (has_momentum != (state.momentum_encoder.has_value() && state.momentum_head.has_value())) {
    throw FormatError("momentum blobs inconsistent with metadata", r.offset());
  }
  if (dict_size > dict_capacity) throw FormatError("dictionary larger than its capacity", meta_offset);
  state.dictionary = KeyQueue<float>(dict_capacity, state.arch.proj_dim);
  if (dict_size > 0) {
    state.dictionary.enqueue(Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        dict.data(), static_cast<Eigen::Index>(dict_size), state.arch.proj_dim));
  }
  return state;
}

void save_checkpoint(const EncoderState& state, const std::filesystem::path& path) {
  detail::write_file_atomic(path, encode_checkpoint(state));
}

EncoderState load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(detail::read_file(path));
}

#define POISONLAB_INSTANTIATE(T)                                                                   \
  template class KeyQueue<T>;                                                                      \
  template void attach_momentum<T>(BasicEncoderState<T>&, std::size_t);                             \
  template Matrix<T> pack_images<T>(std::span<const Image>);                                        \
  template Matrix<T> encoder_forward<T>(const Arch&, std::span<const T>, const Matrix<T>&, int, int, \
                                        int, EncoderTrace<T>*);                                     \
  template void encoder_backward<T>(const Arch&, std::span<const T>, const EncoderTrace<T>&,        \
                                    const Matrix<T>&, std::span<T>);                                \
  template Matrix<T> head_forward<T>(const Arch&, std::span<const T>, const Matrix<T>&, HeadTrace<T>*); \
  template Matrix<T> head_backward<T>(const Arch&, std::span<const T>, const HeadTrace<T>&,         \
                                      const Matrix<T>&, std::span<T>);                              \
  template Matrix<T> forward_features<T>(const BasicEncoderState<T>&, std::span<const Image>);      \
  template Matrix<T> forward_projection<T>(const BasicEncoderState<T>&, std::span<const Image>);    \
  template Matrix<T> forward_momentum_projection<T>(const BasicEncoderState<T>&,                    \
                                                    std::span<const Image>);                        \
  template void momentum_update<T>(BasicEncoderState<T>&, double);                                  \
  template void enqueue_keys<T>(BasicEncoderState<T>&, const Matrix<T>&);

POISONLAB_INSTANTIATE(float)
POISONLAB_INSTANTIATE(double)
#undef POISONLAB_INSTANTIATE

template BasicEncoderState<double> BasicEncoderState<float>::cast<double>() const;
template BasicEncoderState<float> BasicEncoderState<double>::cast<float>() const;
template BasicEncoderState<float> BasicEncoderState<float>::cast<float>() const;

}  // namespace poisonlab
