#ifndef CARPET_CORE_PATCH_IO_HPP
#define CARPET_CORE_PATCH_IO_HPP

#include <png.h>

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "carpet/core/image.hpp"
#include "carpet/error.hpp"

namespace carpet {

/// Contents of a CBP1 file: an H x W x 3 float grid plus JSON metadata.
/// Patches and noise share the layout; metadata["kind"] tells them apart.
struct PerturbationFile {
  Tensor3 data;  // (3, h, w)
  nlohmann::json metadata = nlohmann::json::object();
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline std::uint32_t get_u32(const std::string& in, std::size_t& pos) {
  if (pos + 4 > in.size()) throw ValidationError("CBP1: truncated file");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += 4;
  return v;
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace detail

/// Serialize to the CBP1 byte layout: "CBP1", u32 h, u32 w, h*w*3 float32
/// (row-major, channel-last), u32 length, UTF-8 JSON. All little-endian.
inline std::string encode_cbp1(const PerturbationFile& file) {
  const Tensor3& t = file.data;
  if (t.channels() != 3) throw ShapeError("CBP1: expected 3 channels");
  std::string out = "CBP1";
  detail::put_u32(out, static_cast<std::uint32_t>(t.height()));
  detail::put_u32(out, static_cast<std::uint32_t>(t.width()));
  for (std::size_t y = 0; y < t.height(); ++y) {
    for (std::size_t x = 0; x < t.width(); ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        detail::put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(t(c, y, x))));
      }
    }
  }
  const std::string meta = file.metadata.dump();
  detail::put_u32(out, static_cast<std::uint32_t>(meta.size()));
  out += meta;
  return out;
}

inline PerturbationFile decode_cbp1(const std::string& bytes) {
  if (bytes.size() < 4 || bytes.compare(0, 4, "CBP1") != 0) throw ValidationError("CBP1: bad magic");
  std::size_t pos = 4;
  const std::uint32_t h = detail::get_u32(bytes, pos);
  const std::uint32_t w = detail::get_u32(bytes, pos);
  if (h == 0 || w == 0) throw ValidationError("CBP1: zero extent");
  const std::size_t n = static_cast<std::size_t>(h) * w * 3;
  if (bytes.size() < pos + 4 * n) throw ValidationError("CBP1: truncated pixel data");
  PerturbationFile file{Tensor3(3, h, w), {}};
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        file.data(c, y, x) = std::bit_cast<float>(detail::get_u32(bytes, pos));
      }
    }
  }
  const std::uint32_t len = detail::get_u32(bytes, pos);
  if (bytes.size() != pos + len) throw ValidationError("CBP1: metadata length mismatch");
  try {
    file.metadata = nlohmann::json::parse(bytes.substr(pos, len));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("CBP1: metadata is not JSON: ") + e.what());
  }
  return file;
}

inline void write_cbp1(const std::filesystem::path& path, const PerturbationFile& file) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw RuntimeFailure("cannot write " + path.string());
  const std::string bytes = encode_cbp1(file);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw RuntimeFailure("write failed for " + path.string());
}

inline PerturbationFile read_cbp1(const std::filesystem::path& path) {
  return decode_cbp1(detail::read_file_bytes(path));
}

inline PerturbationFile to_file(const Patch& patch, nlohmann::json metadata = nlohmann::json::object()) {
  metadata["kind"] = "patch";
  metadata["created_by"] = patch.created_by();
  return {patch.tensor(), std::move(metadata)};
}

inline Patch patch_from_file(const PerturbationFile& file) {
  if (file.metadata.value("kind", "patch") != "patch") throw ValidationError("CBP1: file does not hold a patch");
  Tensor3 t = file.data;
  for (double& v : t.values()) {
    if (!std::isfinite(v)) throw ValidationError("CBP1: non-finite patch value");
    v = std::clamp(v, 0.0, 1.0);
  }
  return Patch(std::move(t), file.metadata.value("created_by", std::string{}));
}

inline PerturbationFile to_file(const Noise& noise, nlohmann::json metadata = nlohmann::json::object()) {
  metadata["kind"] = "noise";
  metadata["epsilon"] = noise.budget().epsilon;
  return {noise.tensor(), std::move(metadata)};
}

inline Noise noise_from_file(const PerturbationFile& file) {
  if (file.metadata.value("kind", "") != "noise") throw ValidationError("CBP1: file does not hold noise");
  const double eps = file.metadata.at("epsilon").get<double>();
  Tensor3 t = file.data;
  // float32 storage can round a value just past the budget
  for (double& v : t.values()) v = std::clamp(v, -eps, eps);
  return Noise(std::move(t), NoiseBudget(eps));
}

/// 8-bit RGB PNG. Values are clamped to [0,1] and rounded; `offset`/`scale`
/// let noise fields be previewed as 0.5 + v * scale.
inline void write_png(const std::filesystem::path& path, const Tensor3& t, double offset = 0.0, double scale = 1.0) {
  if (t.channels() != 3) throw ShapeError("write_png: expected 3 channels");
  std::vector<unsigned char> buf(t.height() * t.width() * 3);
  for (std::size_t y = 0; y < t.height(); ++y) {
    for (std::size_t x = 0; x < t.width(); ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = std::clamp(offset + scale * t(c, y, x), 0.0, 1.0);
        buf[(y * t.width() + x) * 3 + c] = static_cast<unsigned char>(std::lround(v * 255.0));
      }
    }
  }
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(t.width());
  img.height = static_cast<png_uint_32>(t.height());
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, buf.data(), 0, nullptr)) {
    throw RuntimeFailure("write_png: " + path.string() + ": " + img.message);
  }
}

inline Image read_png(const std::filesystem::path& path) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw ValidationError("read_png: " + path.string() + ": " + img.message);
  }
  img.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&img);
    throw ValidationError("read_png: " + path.string() + ": " + img.message);
  }
  Tensor3 t(3, img.height, img.width);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      for (std::size_t c = 0; c < 3; ++c) t(c, y, x) = buf[(y * img.width + x) * 3 + c] / 255.0;
    }
  }
  return Image(std::move(t), path.string());
}

/// Single-channel 8-bit PNG holding class indices (segmentation ground truth).
inline std::vector<int> read_label_png(const std::filesystem::path& path, std::size_t& height, std::size_t& width) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw ValidationError("read_label_png: " + path.string() + ": " + img.message);
  }
  img.format = PNG_FORMAT_GRAY;
  std::vector<unsigned char> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&img);
    throw ValidationError("read_label_png: " + path.string() + ": " + img.message);
  }
  height = img.height;
  width = img.width;
  return {buf.begin(), buf.end()};
}

inline void write_label_png(const std::filesystem::path& path, const std::vector<int>& labels, std::size_t height,
                            std::size_t width) {
  std::vector<unsigned char> buf(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) buf[i] = static_cast<unsigned char>(labels[i]);
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(width);
  img.height = static_cast<png_uint_32>(height);
  img.format = PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&img, path.c_str(), 0, buf.data(), 0, nullptr)) {
    throw RuntimeFailure("write_label_png: " + path.string() + ": " + img.message);
  }
}

}  // namespace carpet

#endif  // CARPET_CORE_PATCH_IO_HPP
