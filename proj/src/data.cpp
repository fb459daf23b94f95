#include "poisonlab/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "byte_io.hpp"
#include "poisonlab/rng.hpp"

namespace poisonlab {
namespace {

using Json = nlohmann::json;

constexpr std::array<const char*, 7> kShapeNames = {"circle", "square",  "triangle", "cross",
                                                    "ring",   "diamond", "bar"};

// Shape membership in coordinates normalized by the radius.
bool inside_shape(int shape, double u, double v) {
  const double au = std::abs(u);
  const double av = std::abs(v);
  switch (shape) {
    case 0: return u * u + v * v <= 1.0;
    case 1: return std::max(au, av) <= 0.8;
    case 2: return v >= -0.85 && v <= 0.85 && au <= 0.5 * (v + 0.85);
    case 3: return (au <= 0.3 && av <= 1.0) || (av <= 0.3 && au <= 1.0);
    case 4: {
      const double r2 = u * u + v * v;
      return r2 <= 1.0 && r2 >= 0.3;
    }
    case 5: return au + av <= 1.0;
    default: return au <= 1.0 && av <= 0.35;
  }
}

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  double wrapped = std::fmod(h, 1.0);
  if (wrapped < 0.0) wrapped += 1.0;
  const double hh = wrapped * 6.0;
  const int sector = static_cast<int>(hh) % 6;
  const double f = hh - std::floor(hh);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (sector) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

Image render_sample(int cls, int n_classes, int size, const SyntheticStyle& style, Rng& rng) {
  const int channels = style.colored ? 3 : 1;
  const int shape = (cls + style.shape_offset) % static_cast<int>(kShapeNames.size());
  double hue = static_cast<double>(cls) / n_classes + style.hue_offset;
  if (style.hue_jitter > 0.0) hue += uniform(rng, -style.hue_jitter, style.hue_jitter);
  const auto base = hsv_to_rgb(hue, 0.85, 0.95);

  const double cx = size * (0.5 + uniform(rng, -style.position_jitter, style.position_jitter));
  const double cy = size * (0.5 + uniform(rng, -style.position_jitter, style.position_jitter));
  const double radius = size * uniform(rng, style.min_radius, style.max_radius);

  std::array<double, 3> fg{}, bg{};
  for (int c = 0; c < 3; ++c) {
    fg[c] = std::clamp(base[c] + uniform(rng, -style.color_jitter, style.color_jitter), 0.0, 1.0);
    bg[c] = uniform(rng, 0.0, style.background_level);
  }
  if (!style.colored) {
    // Keep families separable in gray: spread base luminance by class.
    fg[0] = std::clamp(0.55 + 0.45 * (cls + 1.0) / n_classes +
                           uniform(rng, -style.color_jitter, style.color_jitter),
                       0.0, 1.0);
  }
  const double grad_angle = uniform(rng, 0.0, 2.0 * M_PI);
  const double grad_amp = uniform(rng, 0.0, 0.1);
  std::normal_distribution<double> noise(0.0, style.noise_sigma);

  Image img(size, size, channels);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      int hits = 0;
      for (int sy = 0; sy < 2; ++sy) {
        for (int sx = 0; sx < 2; ++sx) {
          const double u = (x + 0.25 + 0.5 * sx - cx) / radius;
          const double v = (y + 0.25 + 0.5 * sy - cy) / radius;
          hits += inside_shape(shape, u, v) ? 1 : 0;
        }
      }
      const double cover = hits / 4.0;
      const double ramp = grad_amp * ((x / static_cast<double>(size) - 0.5) * std::cos(grad_angle) +
                                      (y / static_cast<double>(size) - 0.5) * std::sin(grad_angle));
      for (int c = 0; c < channels; ++c) {
        double value = (1.0 - cover) * (bg[c] + ramp) + cover * fg[c] + noise(rng);
        img.at(y, x, c) = static_cast<float>(std::clamp(value, 0.0, 1.0));
      }
    }
  }
  return quantized(img);
}

Json metadata_json(const std::vector<std::string>& class_names,
                   const std::vector<Provenance>* provenance) {
  Json meta = Json::object();
  meta["class_names"] = class_names;
  if (provenance != nullptr) {
    Json tags = Json::array();
    for (auto p : *provenance) tags.push_back(to_string(p));
    meta["provenance"] = std::move(tags);
  }
  return meta;
}

std::vector<std::uint8_t> encode(const std::vector<Image>& images, const std::vector<int>* labels,
                                 const Json& meta) {
  detail::ByteWriter w;
  w.text("PENC");
  w.u16(kContainerVersion);
  w.u16(labels != nullptr ? 1 : 0);
  const ImageShape shape = images.empty() ? ImageShape{} : common_shape(images);
  w.u32(static_cast<std::uint32_t>(images.size()));
  w.u32(static_cast<std::uint32_t>(shape.height));
  w.u32(static_cast<std::uint32_t>(shape.width));
  w.u32(static_cast<std::uint32_t>(shape.channels));
  for (const auto& img : images) w.bytes(to_bytes(img));
  if (labels != nullptr) {
    for (int y : *labels) w.u32(static_cast<std::uint32_t>(y));
  }
  const std::string trailer = meta.dump();
  w.u32(static_cast<std::uint32_t>(trailer.size()));
  w.text(trailer);
  return std::move(w.buffer());
}

}  // namespace

LabeledDataset generate_synthetic(int n_per_class, int n_classes, int size, std::uint64_t seed,
                                  const SyntheticStyle& style) {
  if (n_per_class < 1) throw std::invalid_argument("n_per_class must be >= 1");
  if (n_classes < 2) throw std::invalid_argument("n_classes must be >= 2");
  if (style.shape_offset < 0) throw std::invalid_argument("shape_offset must be >= 0");
  if (size < 8) throw std::invalid_argument("size must be >= 8");

  LabeledDataset ds;
  for (int c = 0; c < n_classes; ++c) {
    const auto family = static_cast<std::size_t>(c + style.shape_offset);
    std::string name = kShapeNames[family % kShapeNames.size()];
    if (c >= static_cast<int>(kShapeNames.size())) name += "-" + std::to_string(c);
    ds.class_names.push_back(std::move(name));
  }
  ds.images.reserve(static_cast<std::size_t>(n_per_class) * n_classes);
  for (int i = 0; i < n_per_class; ++i) {
    for (int c = 0; c < n_classes; ++c) {
      Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(c), static_cast<std::uint64_t>(i)}));
      ds.images.push_back(render_sample(c, n_classes, size, style, rng));
      ds.labels.push_back(c);
    }
  }
  return ds;
}

Image resize(const Image& img, int out_height, int out_width) {
  if (out_height < 1 || out_width < 1) throw std::invalid_argument("resize target must be >= 1");
  const int h = img.height(), w = img.width(), ch = img.channels();
  if (h == out_height && w == out_width) return img;

  Image out(out_height, out_width, ch);
  const double sy = static_cast<double>(h) / out_height;
  const double sx = static_cast<double>(w) / out_width;
  for (int oy = 0; oy < out_height; ++oy) {
    const double fy = std::clamp((oy + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, h - 1);
    const double wy = fy - y0;
    for (int ox = 0; ox < out_width; ++ox) {
      const double fx = std::clamp((ox + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, w - 1);
      const double wx = fx - x0;
      for (int c = 0; c < ch; ++c) {
        const double top = (1 - wx) * img.at(y0, x0, c) + wx * img.at(y0, x1, c);
        const double bottom = (1 - wx) * img.at(y1, x0, c) + wx * img.at(y1, x1, c);
        out.at(oy, ox, c) = static_cast<float>(std::clamp((1 - wy) * top + wy * bottom, 0.0, 1.0));
      }
    }
  }
  return out;
}

Image rescale(const Image& img, int target) { return resize(img, target, target); }

UnlabeledDataset merge_poison(const UnlabeledDataset& clean, const PoisonBatch& poison,
                              std::uint64_t seed) {
  clean.validate();
  if (!clean.images.empty() && !poison.images.empty() &&
      !(common_shape(clean.images) == common_shape(poison.images))) {
    throw std::invalid_argument("poison images do not match the clean image shape");
  }
  if (!poison.images.empty()) common_shape(poison.images);

  const std::size_t n = clean.size() + poison.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  UnlabeledDataset out;
  out.images.reserve(n);
  out.provenance.reserve(n);
  for (std::size_t idx : order) {
    if (idx < clean.size()) {
      out.images.push_back(clean.images[idx]);
      out.provenance.push_back(clean.provenance[idx]);
    } else {
      out.images.push_back(poison.images[idx - clean.size()]);
      out.provenance.push_back(Provenance::kPoison);
    }
  }
  return out;
}

DedupResult dedup(const UnlabeledDataset& ds) {
  ds.validate();
  DedupResult result;
  std::unordered_map<std::string, std::size_t> seen;
  seen.reserve(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto bytes = to_bytes(ds.images[i]);
    std::string key(reinterpret_cast<const char*>(bytes.data()), bytes.size());
    if (seen.emplace(std::move(key), i).second) {
      result.kept_indices.push_back(i);
      result.dataset.images.push_back(ds.images[i]);
      result.dataset.provenance.push_back(ds.provenance[i]);
    } else {
      result.removed_indices.push_back(i);
    }
  }
  return result;
}

std::vector<std::uint8_t> encode_container(const LabeledDataset& ds) {
  ds.validate();
  return encode(ds.images, &ds.labels, metadata_json(ds.class_names, nullptr));
}

std::vector<std::uint8_t> encode_container(const UnlabeledDataset& ds) {
  ds.validate();
  return encode(ds.images, nullptr, metadata_json({}, &ds.provenance));
}

void write_container(const LabeledDataset& ds, const std::filesystem::path& path) {
  detail::write_file_atomic(path, encode_container(ds));
}

void write_container(const UnlabeledDataset& ds, const std::filesystem::path& path) {
  detail::write_file_atomic(path, encode_container(ds));
}

ContainerContents decode_container(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  if (r.text(4, "magic") != "PENC") throw FormatError("bad magic, expected PENC", 0);
  const auto version = r.u16("version");
  if (version != kContainerVersion) {
    throw FormatError("unsupported container version " + std::to_string(version), 4);
  }
  const auto flags = r.u16("flags");
  if ((flags & ~1u) != 0) throw FormatError("unknown flag bits", 6);

  ContainerContents out;
  out.labeled = (flags & 1u) != 0;
  const std::uint64_t n = r.u32("image count");
  const std::uint64_t h = r.u32("height");
  const std::uint64_t w = r.u32("width");
  const std::uint64_t c = r.u32("channels");
  if (n > 0 && (h < 1 || w < 1 || (c != 1 && c != 3))) {
    throw FormatError("invalid image dimensions", 12);
  }
  const std::uint64_t per_image = h * w * c;
  if (n > 0 && per_image > r.remaining() / n) {
    throw FormatError("pixel payload length exceeds file size", r.offset());
  }
  out.images.reserve(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    out.images.push_back(from_bytes(static_cast<int>(h), static_cast<int>(w), static_cast<int>(c),
                                    r.bytes(per_image, "pixels")));
  }
  if (out.labeled) {
    out.labels.reserve(n);
    for (std::uint64_t i = 0; i < n; ++i) out.labels.push_back(static_cast<int>(r.u32("label")));
  }
  const std::uint64_t meta_offset = r.offset();
  const std::uint32_t meta_len = r.u32("metadata length");
  const std::string meta_text = r.text(meta_len, "metadata");
  if (r.remaining() != 0) throw FormatError("trailing bytes after metadata", r.offset());

  Json meta;
  try {
    meta = Json::parse(meta_text);
    if (meta.contains("class_names")) {
      out.class_names = meta.at("class_names").get<std::vector<std::string>>();
    }
    if (meta.contains("provenance")) {
      for (const auto& tag : meta.at("provenance")) {
        out.provenance.push_back(provenance_from_string(tag.get<std::string>()));
      }
    }
  } catch (const std::exception& e) {
    throw FormatError(std::string("invalid metadata: ") + e.what(), meta_offset);
  }
  if (out.provenance.empty()) out.provenance.assign(n, Provenance::kClean);
  if (out.provenance.size() != n) throw FormatError("provenance count mismatch", meta_offset);
  for (int y : out.labels) {
    if (y < 0 || y >= static_cast<int>(out.class_names.size())) {
      throw FormatError("label " + std::to_string(y) + " has no class name", meta_offset);
    }
  }
  return out;
}

ContainerContents read_container(const std::filesystem::path& path) {
  return decode_container(detail::read_file(path));
}

LabeledDataset read_labeled(const std::filesystem::path& path) {
  auto contents = read_container(path);
  if (!contents.labeled) throw FormatError(path.string() + " is not a labeled container", 6);
  LabeledDataset ds;
  ds.images = std::move(contents.images);
  ds.labels = std::move(contents.labels);
  ds.class_names = std::move(contents.class_names);
  return ds;
}

UnlabeledDataset read_unlabeled(const std::filesystem::path& path) {
  auto contents = read_container(path);
  UnlabeledDataset ds;
  ds.images = std::move(contents.images);
  ds.provenance = std::move(contents.provenance);
  return ds;
}

}  // namespace poisonlab
