#ifndef CARPET_LOSS_FEATURE_CACHE_HPP
#define CARPET_LOSS_FEATURE_CACHE_HPP

#include <bit>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <tuple>

#include "carpet/core/digest.hpp"
#include "carpet/model/model.hpp"

namespace carpet {

/// Opt-in cache of clean features keyed by (image id, layer, model digest).
/// Lives in memory; when a directory is given (CARPET_CACHE_DIR by default)
/// entries are also persisted there. Images without an id are never cached.
class FeatureCache {
 public:
  explicit FeatureCache(std::optional<std::filesystem::path> dir = env_dir()) : dir_(std::move(dir)) {
    if (dir_) std::filesystem::create_directories(*dir_);
  }

  static std::optional<std::filesystem::path> env_dir() {
    if (const char* d = std::getenv("CARPET_CACHE_DIR"); d && *d) return std::filesystem::path(d);
    return std::nullopt;
  }

  /// Clean features of `x` at `layers`, computing only what is missing.
  FeatureMapSet get(const Model& model, const Image& x, const std::vector<LayerId>& layers) {
    if (x.id().empty()) return model.extract_features(x, layers);
    const std::string digest = model.digest();
    FeatureMapSet out;
    std::vector<LayerId> missing;
    {
      std::lock_guard lock(mu_);
      for (const auto& l : layers) {
        Key key{x.id(), l.name, digest};
        if (auto it = mem_.find(key); it != mem_.end()) {
          out[l.name] = it->second;
        } else if (auto t = load(key)) {
          mem_[key] = *t;
          out[l.name] = std::move(*t);
        } else {
          missing.push_back(l);
        }
      }
    }
    if (!missing.empty()) {
      FeatureMapSet fresh = model.extract_features(x, missing);
      std::lock_guard lock(mu_);
      for (auto& [name, t] : fresh) {
        Key key{x.id(), name, digest};
        store(key, t);
        mem_[key] = t;
        out[name] = std::move(t);
      }
    }
    return out;
  }

  std::size_t size() const {
    std::lock_guard lock(mu_);
    return mem_.size();
  }

 private:
  using Key = std::tuple<std::string, std::string, std::string>;

  std::filesystem::path file_for(const Key& k) const {
    return *dir_ / (sha256_hex(std::get<0>(k) + '\n' + std::get<1>(k) + '\n' + std::get<2>(k)) + ".feat");
  }

  std::optional<Tensor3> load(const Key& k) const {
    if (!dir_) return std::nullopt;
    std::ifstream in(file_for(k), std::ios::binary);
    if (!in) return std::nullopt;
    const std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    if (bytes.size() < 24) return std::nullopt;
    auto u64 = [&bytes](std::size_t pos) {
      std::uint64_t v = 0;
      for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
      return v;
    };
    const std::size_t c = u64(0), h = u64(8), w = u64(16);
    if (bytes.size() != 24 + 8 * c * h * w) return std::nullopt;
    Tensor3 t(c, h, w);
    for (std::size_t i = 0; i < t.size(); ++i) t.values()[i] = std::bit_cast<double>(u64(24 + 8 * i));
    return t;
  }

  void store(const Key& k, const Tensor3& t) const {
    if (!dir_) return;
    std::string out;
    auto put = [&out](std::uint64_t v) {
      for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
    };
    put(t.channels());
    put(t.height());
    put(t.width());
    for (double v : t.values()) put(std::bit_cast<std::uint64_t>(v));
    std::ofstream f(file_for(k), std::ios::binary | std::ios::trunc);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
  }

  std::optional<std::filesystem::path> dir_;
  mutable std::mutex mu_;
  std::map<Key, Tensor3> mem_;
};

}  // namespace carpet

#endif  // CARPET_LOSS_FEATURE_CACHE_HPP
