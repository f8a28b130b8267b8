#pragma once

// Training configuration and its flat `key = value` file format.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "t2i2t/caption_gan.hpp"
#include "t2i2t/image_gan.hpp"

namespace t2i2t {

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct TrainConfig {
  std::string scale = "paper";

  // Optimisation.
  double lr = 1e-4;
  double caption_lr = 0;  // F and E; 0 means `lr`
  double adam_beta1 = 0.5;
  double adam_beta2 = 0.999;
  std::size_t batch_size = 64;
  std::size_t epochs_pretrain_image = 100;
  std::size_t epochs_pretrain_caption = 100;
  std::size_t epochs_joint = 40;
  long caption_warmstart_epochs = -1;  // -1: 10% of the caption phase, at least 1
  double lambda_int = 0.5;
  double interp_beta = 0.5;
  double lambda_c = 2.0;
  double alpha = 1.0;
  double beta_w = 1.0;
  double caption_mle_weight = 1.0;  // teacher-forced term added to the captioner's adversarial step
  bool freeze_captioner = false;
  bool nonsaturating = false;
  std::uint64_t seed = 0;

  // Data and embeddings.
  std::string data_root;
  std::string out_dir = "run";
  std::string embedding_provider = "fallback";
  std::size_t embedding_dim = 2400;
  std::string embedding_cache;    // default: <data_root>/embeddings_<provider>_<dim>.t2ie
  std::string embedding_vectors;  // external provider's vector file
  std::size_t t_max = 20;
  std::size_t min_freq = 1;

  // Architecture.
  ImageGanConfig image;
  CaptionGanConfig caption;

  double effective_caption_lr() const { return caption_lr > 0 ? caption_lr : lr; }

  std::size_t warmstart_epochs() const {
    if (caption_warmstart_epochs >= 0) return std::size_t(caption_warmstart_epochs);
    return epochs_pretrain_caption == 0 ? 0 : std::max<std::size_t>(1, epochs_pretrain_caption / 10);
  }

  std::filesystem::path cache_path() const {
    if (!embedding_cache.empty()) return embedding_cache;
    return std::filesystem::path(data_root) /
           ("embeddings_" + embedding_provider + "_" + std::to_string(embedding_dim) + ".t2ie");
  }

  void validate() const {
    if (!(lr > 0)) throw ConfigError("lr must be positive");
    if (!(caption_lr >= 0)) throw ConfigError("caption_lr must be >= 0");
    if (!(adam_beta1 > 0 && adam_beta1 < 1) || !(adam_beta2 > 0 && adam_beta2 < 1))
      throw ConfigError("adam betas must lie in (0,1)");
    if (batch_size < 2) throw ConfigError("batch_size must be >= 2 (wrong-caption pairing needs two images)");
    if (lambda_int < 0 || lambda_c < 0 || alpha < 0 || beta_w < 0 || caption_mle_weight < 0) throw ConfigError("loss weights must be >= 0");
    if (!(interp_beta >= 0 && interp_beta <= 1)) throw ConfigError("interp_beta must lie in [0,1]");
    if (embedding_provider != "fallback" && embedding_provider != "external")
      throw ConfigError("embedding.provider must be 'fallback' or 'external'");
    if (image.embed_dim != embedding_dim) throw ConfigError("image.embed_dim must equal embedding.dim");
    if (caption.image_size != image.size2) throw ConfigError("captioner input size must equal stage-2 size");
    image.validate();
  }
};

inline void apply_scale_defaults(TrainConfig& c, const std::string& scale) {
  c.scale = scale;
  if (scale == "paper") {
    c.embedding_dim = 2400;
    c.t_max = 20;
    c.image = ImageGanConfig{};
    c.caption = CaptionGanConfig{};
    c.caption.image_size = 128;
  } else if (scale == "toy") {
    c.batch_size = 16;
    c.lr = 5e-4;
    c.caption_lr = 2e-3;
    c.epochs_pretrain_image = 20;
    c.epochs_pretrain_caption = 20;
    c.epochs_joint = 10;
    c.caption_warmstart_epochs = 4;
    c.embedding_dim = 240;
    c.t_max = 12;
    c.image.embed_dim = 240;
    c.image.z_dim = 100;
    c.image.c_dim = 32;
    c.image.size1 = 16;
    c.image.size2 = 32;
    c.image.width = 32;
    c.image.res_blocks = 4;
    c.caption.image_size = 32;
    c.caption.width = 32;
    c.caption.feat_dim = 64;
    c.caption.z_dim = 16;
    c.caption.token_dim = 32;
    c.caption.hidden = 64;
    c.caption.reward_dim = 64;
  } else {
    throw ConfigError("scale must be 'paper' or 'toy', got '" + scale + "'");
  }
  c.image.embed_dim = c.embedding_dim;
  c.caption.t_max = c.t_max;
}

inline TrainConfig default_config(const std::string& scale = "paper") {
  TrainConfig c;
  apply_scale_defaults(c, scale);
  return c;
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class V>
V parse_value(const std::string& key, const std::string& text) {
  std::istringstream is(text);
  V v{};
  if constexpr (std::is_same_v<V, bool>) {
    if (text == "true" || text == "1") return true;
    if (text == "false" || text == "0") return false;
    throw ConfigError("key '" + key + "': expected true/false, got '" + text + "'");
  } else if constexpr (std::is_same_v<V, std::string>) {
    return text;
  } else {
    if constexpr (std::is_unsigned_v<V>)
      if (!text.empty() && text[0] == '-') throw ConfigError("key '" + key + "': negative value '" + text + "'");
    is >> v;
    if (is.fail() || !is.eof()) throw ConfigError("key '" + key + "': cannot parse '" + text + "'");
    return v;
  }
}

// One entry per key: how to read it from and write it to a TrainConfig.
struct KeyBinding {
  std::function<void(TrainConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

template <class V>
KeyBinding bind_key(V TrainConfig::*member) {
  return {[member](TrainConfig& c, const std::string& k, const std::string& v) { c.*member = parse_value<V>(k, v); },
          [member](const TrainConfig& c) {
            std::ostringstream os;
            if constexpr (std::is_same_v<V, bool>)
              os << (c.*member ? "true" : "false");
            else {
              os.precision(17);
              os << c.*member;
            }
            return os.str();
          }};
}

template <class Sub, class V>
KeyBinding bind_key(Sub TrainConfig::*sub, V Sub::*member) {
  return {[sub, member](TrainConfig& c, const std::string& k, const std::string& v) {
            (c.*sub).*member = parse_value<V>(k, v);
          },
          [sub, member](const TrainConfig& c) {
            std::ostringstream os;
            os.precision(17);
            os << (c.*sub).*member;
            return os.str();
          }};
}

inline const std::vector<std::pair<std::string, KeyBinding>>& config_keys() {
  static const std::vector<std::pair<std::string, KeyBinding>> keys = {
      {"lr", bind_key(&TrainConfig::lr)},
      {"caption_lr", bind_key(&TrainConfig::caption_lr)},
      {"adam_beta1", bind_key(&TrainConfig::adam_beta1)},
      {"adam_beta2", bind_key(&TrainConfig::adam_beta2)},
      {"batch_size", bind_key(&TrainConfig::batch_size)},
      {"epochs_pretrain_image", bind_key(&TrainConfig::epochs_pretrain_image)},
      {"epochs_pretrain_caption", bind_key(&TrainConfig::epochs_pretrain_caption)},
      {"epochs_joint", bind_key(&TrainConfig::epochs_joint)},
      {"caption_warmstart_epochs", bind_key(&TrainConfig::caption_warmstart_epochs)},
      {"lambda_int", bind_key(&TrainConfig::lambda_int)},
      {"interp_beta", bind_key(&TrainConfig::interp_beta)},
      {"lambda_c", bind_key(&TrainConfig::lambda_c)},
      {"alpha", bind_key(&TrainConfig::alpha)},
      {"beta_w", bind_key(&TrainConfig::beta_w)},
      {"caption_mle_weight", bind_key(&TrainConfig::caption_mle_weight)},
      {"freeze_captioner", bind_key(&TrainConfig::freeze_captioner)},
      {"nonsaturating", bind_key(&TrainConfig::nonsaturating)},
      {"seed", bind_key(&TrainConfig::seed)},
      {"data_root", bind_key(&TrainConfig::data_root)},
      {"out_dir", bind_key(&TrainConfig::out_dir)},
      {"embedding.provider", bind_key(&TrainConfig::embedding_provider)},
      {"embedding.dim", bind_key(&TrainConfig::embedding_dim)},
      {"embedding.cache", bind_key(&TrainConfig::embedding_cache)},
      {"embedding.vectors", bind_key(&TrainConfig::embedding_vectors)},
      {"t_max", bind_key(&TrainConfig::t_max)},
      {"min_freq", bind_key(&TrainConfig::min_freq)},
      {"image.z_dim", bind_key(&TrainConfig::image, &ImageGanConfig::z_dim)},
      {"image.c_dim", bind_key(&TrainConfig::image, &ImageGanConfig::c_dim)},
      {"image.size1", bind_key(&TrainConfig::image, &ImageGanConfig::size1)},
      {"image.size2", bind_key(&TrainConfig::image, &ImageGanConfig::size2)},
      {"image.width", bind_key(&TrainConfig::image, &ImageGanConfig::width)},
      {"image.min_channels", bind_key(&TrainConfig::image, &ImageGanConfig::min_channels)},
      {"image.res_blocks", bind_key(&TrainConfig::image, &ImageGanConfig::res_blocks)},
      {"caption.width", bind_key(&TrainConfig::caption, &CaptionGanConfig::width)},
      {"caption.feat_dim", bind_key(&TrainConfig::caption, &CaptionGanConfig::feat_dim)},
      {"caption.z_dim", bind_key(&TrainConfig::caption, &CaptionGanConfig::z_dim)},
      {"caption.token_dim", bind_key(&TrainConfig::caption, &CaptionGanConfig::token_dim)},
      {"caption.hidden", bind_key(&TrainConfig::caption, &CaptionGanConfig::hidden)},
      {"caption.reward_dim", bind_key(&TrainConfig::caption, &CaptionGanConfig::reward_dim)},
  };
  return keys;
}

}  // namespace detail

// Parses `key = value` lines; `#` starts a comment. `scale` (if present)
// selects the defaults that all other keys then override.
inline TrainConfig parse_config(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::vector<std::string> order;
  std::istringstream in(text);
  std::size_t lineno = 0;
  for (std::string line; std::getline(in, line);) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": missing '='");
    const auto key = detail::trim(line.substr(0, eq));
    if (kv.count(key)) throw ConfigError("config line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    kv[key] = detail::trim(line.substr(eq + 1));
    order.push_back(key);
  }
  TrainConfig c;
  apply_scale_defaults(c, kv.count("scale") ? kv["scale"] : "paper");
  const auto& keys = detail::config_keys();
  for (const auto& k : order) {
    if (k == "scale") continue;
    auto it = std::find_if(keys.begin(), keys.end(), [&](const auto& p) { return p.first == k; });
    if (it == keys.end()) throw ConfigError("unknown config key '" + k + "'");
    it->second.set(c, k, kv[k]);
  }
  c.image.embed_dim = c.embedding_dim;
  c.caption.t_max = c.t_max;
  c.caption.image_size = c.image.size2;
  c.validate();
  return c;
}

inline TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

inline std::string format_config(const TrainConfig& c) {
  std::string out = "scale = " + c.scale + "\n";
  for (const auto& [k, b] : detail::config_keys()) out += k + " = " + b.get(c) + "\n";
  return out;
}

// Keys that fix parameter shapes; a checkpoint only loads under equal values.
inline std::vector<std::string> structural_keys() {
  return {"embedding.provider", "embedding.dim", "t_max", "min_freq", "image.z_dim", "image.c_dim",
          "image.size1", "image.size2", "image.width", "image.min_channels", "image.res_blocks",
          "caption.width", "caption.feat_dim", "caption.z_dim", "caption.token_dim", "caption.hidden",
          "caption.reward_dim"};
}

inline std::string config_value(const TrainConfig& c, const std::string& key) {
  for (const auto& [k, b] : detail::config_keys())
    if (k == key) return b.get(c);
  throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace t2i2t
