#pragma once

// Dataset records, vocabulary and tokenisation, image preprocessing, the
// synthetic "toy flowers" generator, and seeded mini-batching.
//
// On-disk layout:
//   <root>/images/<id>.png|jpg
//   <root>/captions/<id>.txt     exactly 5 LF-separated captions
//   <root>/toyspec.json          only for generated data

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "t2i2t/color_lexicon.hpp"
#include "t2i2t/image_io.hpp"
#include "t2i2t/nn.hpp"

namespace t2i2t {

inline constexpr std::size_t kCaptionsPerImage = 5;

struct DatasetRecord {
  std::string image_id;
  RgbImage image;  // decoded source, before any resizing
  std::vector<std::string> captions;
  int class_id = -1;  // (shape, petal colour) class, toy data only

  bool operator==(const DatasetRecord&) const = default;
};

struct LoadResult {
  std::vector<DatasetRecord> records;
  std::vector<std::string> diagnostics;
};

// ------------------------------------------------------------------ text

// Lowercase, punctuation removed, whitespace-split.
inline std::vector<std::string> split_caption(const std::string& caption) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char ch : caption) {
    if (std::isspace(ch)) {
      if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
    } else if (!std::ispunct(ch)) {
      cur.push_back(static_cast<char>(std::tolower(ch)));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

inline std::string normalize_caption(const std::string& caption) {
  std::string out;
  for (const auto& tok : split_caption(caption)) {
    if (!out.empty()) out.push_back(' ');
    out += tok;
  }
  return out;
}

class Vocabulary {
 public:
  static constexpr int kPad = 0, kStart = 1, kEnd = 2, kUnk = 3;
  static constexpr std::size_t kNumSpecials = 4;

  Vocabulary() : id_to_token_{"<pad>", "<start>", "<end>", "<unk>"} {}

  explicit Vocabulary(const std::vector<std::string>& words) : Vocabulary() {
    for (const auto& w : words) add(w);
  }

  std::size_t size() const { return id_to_token_.size(); }

  int id(const std::string& token) const {
    auto it = token_to_id_.find(token);
    return it == token_to_id_.end() ? kUnk : it->second;
  }
  const std::string& token(int id) const { return id_to_token_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& tokens() const { return id_to_token_; }

  bool operator==(const Vocabulary& o) const { return id_to_token_ == o.id_to_token_; }

 private:
  void add(const std::string& w) {
    if (token_to_id_.count(w)) throw std::invalid_argument("duplicate vocabulary token: " + w);
    token_to_id_[w] = static_cast<int>(id_to_token_.size());
    id_to_token_.push_back(w);
  }

  std::unordered_map<std::string, int> token_to_id_;
  std::vector<std::string> id_to_token_;
};

// Words with frequency >= min_freq, ordered by descending frequency then
// lexicographically.
inline Vocabulary build_vocabulary(const std::vector<std::string>& captions, std::size_t min_freq = 1) {
  std::map<std::string, std::size_t> freq;
  for (const auto& c : captions)
    for (const auto& t : split_caption(c)) ++freq[t];
  if (freq.empty()) throw std::invalid_argument("build_vocabulary: empty corpus");
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (const auto& [w, f] : freq)
    if (f >= min_freq) kept.emplace_back(w, f);
  std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> words;
  for (auto& [w, f] : kept) words.push_back(w);
  return Vocabulary(words);
}

inline Vocabulary build_vocabulary(const std::vector<DatasetRecord>& records, std::size_t min_freq = 1) {
  std::vector<std::string> all;
  for (const auto& r : records) all.insert(all.end(), r.captions.begin(), r.captions.end());
  return build_vocabulary(all, min_freq);
}

// START, words..., END, PAD... with ids.size() == t_max. `length` counts the
// predicted positions after START: the words plus END.
struct CaptionTokens {
  std::vector<int> ids;
  std::size_t length = 0;

  bool operator==(const CaptionTokens&) const = default;

  // Position of END, i.e. index of the last real token.
  std::size_t end_pos() const { return length; }
};

inline bool valid_caption_tokens(const CaptionTokens& c, std::size_t vocab_size) {
  if (c.ids.size() < 2 || c.ids[0] != Vocabulary::kStart) return false;
  if (c.length < 1 || c.length >= c.ids.size()) return false;
  std::size_t ends = 0;
  for (std::size_t i = 0; i < c.ids.size(); ++i) {
    const int id = c.ids[i];
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_size) return false;
    if (id == Vocabulary::kEnd) ++ends;
    if (i >= 1 && i < c.length && (id == Vocabulary::kPad || id == Vocabulary::kStart || id == Vocabulary::kEnd))
      return false;
    if (i == c.length && id != Vocabulary::kEnd) return false;
    if (i > c.length && id != Vocabulary::kPad) return false;
  }
  return ends == 1;
}

inline CaptionTokens tokenize(const std::string& caption, const Vocabulary& vocab, std::size_t t_max) {
  if (t_max < 3) throw std::invalid_argument("tokenize: t_max must be >= 3");
  auto words = split_caption(caption);
  if (words.size() > t_max - 2) words.resize(t_max - 2);
  CaptionTokens out;
  out.ids.assign(t_max, Vocabulary::kPad);
  out.ids[0] = Vocabulary::kStart;
  for (std::size_t i = 0; i < words.size(); ++i) out.ids[i + 1] = vocab.id(words[i]);
  out.ids[words.size() + 1] = Vocabulary::kEnd;
  out.length = words.size() + 1;
  return out;
}

// Builds a caption from decoded word ids (no START/END), truncating to fit.
inline CaptionTokens make_caption(const std::vector<int>& words, std::size_t t_max) {
  CaptionTokens out;
  out.ids.assign(t_max, Vocabulary::kPad);
  out.ids[0] = Vocabulary::kStart;
  const std::size_t n = std::min(words.size(), t_max - 2);
  for (std::size_t i = 0; i < n; ++i) out.ids[i + 1] = words[i];
  out.ids[n + 1] = Vocabulary::kEnd;
  out.length = n + 1;
  return out;
}

inline std::string detokenize(const CaptionTokens& c, const Vocabulary& vocab) {
  std::string out;
  for (std::size_t i = 1; i < c.length && i < c.ids.size(); ++i) {
    if (!out.empty()) out.push_back(' ');
    out += vocab.token(c.ids[i]);
  }
  return out;
}

// ------------------------------------------------------------------ images

// Bilinear (half-pixel centred) resize to size x size, then [0,255] -> [-1,1].
// Returns [3, size, size].
template <class T>
Tensor<T> resize_and_normalize(const RgbImage& img, std::size_t size) {
  if (size == 0) throw std::invalid_argument("resize_and_normalize: size must be > 0");
  if (img.width == 0 || img.height == 0 || img.pixels.size() != img.width * img.height * 3)
    throw ImageDecodeError("resize_and_normalize: empty or malformed image");
  Tensor<T> out({3, size, size});
  const double sx = double(img.width) / double(size), sy = double(img.height) / double(size);
  for (std::size_t y = 0; y < size; ++y) {
    const double fy = std::clamp((double(y) + 0.5) * sy - 0.5, 0.0, double(img.height - 1));
    const std::size_t y0 = static_cast<std::size_t>(fy), y1 = std::min(y0 + 1, img.height - 1);
    const double wy = fy - double(y0);
    for (std::size_t x = 0; x < size; ++x) {
      const double fx = std::clamp((double(x) + 0.5) * sx - 0.5, 0.0, double(img.width - 1));
      const std::size_t x0 = static_cast<std::size_t>(fx), x1 = std::min(x0 + 1, img.width - 1);
      const double wx = fx - double(x0);
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = (1 - wy) * ((1 - wx) * img.at(x0, y0)[c] + wx * img.at(x1, y0)[c]) +
                         wy * ((1 - wx) * img.at(x0, y1)[c] + wx * img.at(x1, y1)[c]);
        out[(c * size + y) * size + x] = static_cast<T>(std::clamp(v * (2.0 / 255.0) - 1.0, -1.0, 1.0));
      }
    }
  }
  return out;
}

// Inverse map of one [3,H,W] tensor (values in [-1,1]) back to 8-bit RGB.
template <class T>
RgbImage tensor_to_image(const T* chw, std::size_t size) {
  RgbImage img(size, size);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = (double(chw[(c * size + y) * size + x]) + 1.0) * 127.5;
        img.at(x, y)[c] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
      }
  return img;
}

template <class T>
RgbImage tensor_to_image(const Tensor<T>& chw) {
  if (chw.rank() != 3 || chw.dim(0) != 3 || chw.dim(1) != chw.dim(2))
    throw ShapeError("tensor_to_image: expected [3,s,s], got " + shape_str(chw.shape()));
  return tensor_to_image(chw.data(), chw.dim(1));
}

// ------------------------------------------------------------------ loading

inline LoadResult load_dataset(const std::filesystem::path& root);

// ------------------------------------------------------------------ toy data

struct ToySpec {
  std::size_t n_images = 500;
  std::size_t image_size = 32;
  std::vector<std::string> shapes{"round", "square", "triangular"};
  std::vector<std::string> colors{"red", "orange", "yellow", "green", "blue", "purple",
                                  "pink", "white", "black", "brown", "gray"};
  std::uint64_t seed = 0;

  void validate(const ColorLexicon& lex = basic_color_lexicon()) const {
    if (image_size != 16 && image_size != 32 && image_size != 64)
      throw std::invalid_argument("toy image_size must be 16, 32 or 64");
    if (shapes.empty() || colors.empty()) throw std::invalid_argument("toy spec needs shapes and colors");
    for (const auto& s : shapes)
      if (s != "round" && s != "square" && s != "triangular")
        throw std::invalid_argument("unknown toy shape: " + s);
    for (const auto& c : colors)
      if (!lex.contains(c)) throw std::invalid_argument("toy color not in lexicon: " + c);
  }

  std::size_t num_classes() const { return shapes.size() * colors.size(); }
};

inline void to_json(nlohmann::json& j, const ToySpec& s) {
  j = {{"n_images", s.n_images}, {"image_size", s.image_size}, {"shapes", s.shapes},
       {"colors", s.colors}, {"seed", s.seed}};
}
inline void from_json(const nlohmann::json& j, ToySpec& s) {
  j.at("n_images").get_to(s.n_images);
  j.at("image_size").get_to(s.image_size);
  j.at("shapes").get_to(s.shapes);
  j.at("colors").get_to(s.colors);
  j.at("seed").get_to(s.seed);
}

inline constexpr Rgb kToyBackground{30, 45, 60};

inline std::vector<std::string> toy_captions(const std::string& shape, const std::string& petal,
                                             const std::string& center) {
  return {
      "this flower has " + petal + " petals and a " + center + " center",
      "a " + shape + " flower with " + petal + " petals and a " + center + " center",
      "the petals are " + petal + " and the center is " + center,
      "this " + shape + " flower is " + petal + " with a " + center + " middle",
      "a flower with " + petal + " " + shape + " petals surrounding a " + center + " center",
  };
}

namespace detail {

inline std::size_t bounded(Rng& rng, std::size_t n) {
  // Rejection sampling; identical draws across standard libraries.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x;
  do x = rng();
  while (x >= limit);
  return static_cast<std::size_t>(x % n);
}

inline double unit(Rng& rng) { return double(rng() >> 11) * 0x1.0p-53; }

inline bool inside_shape(const std::string& shape, double dx, double dy, double r) {
  if (shape == "round") return dx * dx + dy * dy <= r * r;
  if (shape == "square") return std::abs(dx) <= 0.8 * r && std::abs(dy) <= 0.8 * r;
  // Upward triangle: apex at -r, base at +0.7r.
  if (dy < -r || dy > 0.7 * r) return false;
  return std::abs(dx) <= (dy + r) / 1.7 * 0.95;
}

}  // namespace detail

// Deterministic synthetic flowers: one filled shape in the petal colour with
// a disc of the centre colour, on a fixed non-lexicon background.
inline std::vector<DatasetRecord> generate_toy_dataset(const ToySpec& spec) {
  spec.validate();
  std::vector<DatasetRecord> out;
  out.reserve(spec.n_images);
  const auto lex = basic_color_lexicon();
  const double s = double(spec.image_size);
  for (std::size_t i = 0; i < spec.n_images; ++i) {
    Rng rng(derive_seed(spec.seed, {i}));
    const std::size_t shape_i = detail::bounded(rng, spec.shapes.size());
    const std::size_t petal_i = detail::bounded(rng, spec.colors.size());
    std::size_t center_i = petal_i;
    if (spec.colors.size() > 1) {
      center_i = detail::bounded(rng, spec.colors.size() - 1);
      if (center_i >= petal_i) ++center_i;
    }
    const double cx = s / 2 + (detail::unit(rng) - 0.5) * s / 8;
    const double cy = s / 2 + (detail::unit(rng) - 0.5) * s / 8;
    const double r = s * (0.30 + 0.08 * detail::unit(rng));
    const double rc = s * 0.12;
    const auto& shape = spec.shapes[shape_i];
    const Rgb petal = lex.at(spec.colors[petal_i]);
    const Rgb center = lex.at(spec.colors[center_i]);

    RgbImage img(spec.image_size, spec.image_size);
    for (std::size_t y = 0; y < spec.image_size; ++y)
      for (std::size_t x = 0; x < spec.image_size; ++x) {
        const double dx = double(x) + 0.5 - cx, dy = double(y) + 0.5 - cy;
        const Rgb* c = &kToyBackground;
        if (detail::inside_shape(shape, dx, dy, r)) c = &petal;
        if (dx * dx + dy * dy <= rc * rc) c = &center;
        std::copy(c->begin(), c->end(), img.at(x, y));
      }

    char id[32];
    std::snprintf(id, sizeof id, "toy_%05zu", i);
    out.push_back({id, std::move(img), toy_captions(shape, spec.colors[petal_i], spec.colors[center_i]),
                   static_cast<int>(shape_i * spec.colors.size() + petal_i)});
  }
  return out;
}

inline void write_dataset(const std::filesystem::path& root, const std::vector<DatasetRecord>& records,
                          const std::optional<ToySpec>& spec = std::nullopt) {
  namespace fs = std::filesystem;
  fs::create_directories(root / "images");
  fs::create_directories(root / "captions");
  for (const auto& r : records) {
    write_png(root / "images" / (r.image_id + ".png"), r.image);
    std::ofstream cap(root / "captions" / (r.image_id + ".txt"), std::ios::binary);
    for (const auto& c : r.captions) cap << c << '\n';
  }
  if (spec) {
    nlohmann::json j = *spec;
    nlohmann::json labels = nlohmann::json::object();
    for (const auto& r : records) labels[r.image_id] = r.class_id;
    j["class_ids"] = labels;
    std::ofstream(root / "toyspec.json") << j.dump(2) << '\n';
  }
}

inline std::optional<ToySpec> read_toyspec(const std::filesystem::path& root) {
  std::ifstream in(root / "toyspec.json");
  if (!in) return std::nullopt;
  return nlohmann::json::parse(in).get<ToySpec>();
}

inline LoadResult load_dataset(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root / "images"))
    throw std::invalid_argument("dataset root has no images/ directory: " + root.string());
  LoadResult res;
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(root / "images")) {
    if (!e.is_regular_file()) continue;
    auto ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".png" || ext == ".jpg" || ext == ".jpeg") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end(),
            [](const fs::path& a, const fs::path& b) { return a.stem().string() < b.stem().string(); });

  nlohmann::json class_ids;
  if (std::ifstream spec_in(root / "toyspec.json"); spec_in) {
    auto j = nlohmann::json::parse(spec_in);
    if (j.contains("class_ids")) class_ids = j["class_ids"];
  }

  for (const auto& f : files) {
    const std::string id = f.stem().string();
    const fs::path cap_path = root / "captions" / (id + ".txt");
    std::ifstream cap(cap_path, std::ios::binary);
    if (!cap) {
      res.diagnostics.push_back(id + ": missing captions file " + cap_path.string());
      continue;
    }
    std::vector<std::string> caps;
    for (std::string line; std::getline(cap, line);) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      caps.push_back(line);
    }
    if (caps.size() != kCaptionsPerImage) {
      res.diagnostics.push_back(id + ": expected 5 captions, found " + std::to_string(caps.size()));
      continue;
    }
    DatasetRecord rec;
    rec.image_id = id;
    rec.captions = std::move(caps);
    try {
      rec.image = read_image(f);
    } catch (const ImageDecodeError& e) {
      res.diagnostics.push_back(id + ": " + e.what());
      continue;
    }
    if (class_ids.is_object() && class_ids.contains(id)) rec.class_id = class_ids[id].get<int>();
    res.records.push_back(std::move(rec));
  }
  return res;
}

// ------------------------------------------------------------------ batching

struct BatchItem {
  std::size_t record = 0;
  std::size_t caption = 0;
  bool operator==(const BatchItem&) const = default;
};
using Batch = std::vector<BatchItem>;

// Seeded Fisher-Yates permutation of [0, n).
inline std::vector<std::size_t> seeded_permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[detail::bounded(rng, i)]);
  return p;
}

// Permutation and caption choice depend only on (seed, epoch); the trailing
// partial batch is dropped.
inline std::vector<Batch> make_batches(std::size_t n_records, std::size_t batch_size, std::uint64_t seed,
                                       std::uint64_t epoch) {
  if (batch_size == 0) throw std::invalid_argument("make_batches: batch_size must be >= 1");
  const auto perm = seeded_permutation(n_records, derive_seed(seed, {0xBA7C4ULL, epoch}));
  Rng cap_rng(derive_seed(seed, {0xCA9710ULL, epoch}));
  std::vector<Batch> out(n_records / batch_size);
  for (std::size_t b = 0; b < out.size(); ++b)
    for (std::size_t k = 0; k < batch_size; ++k)
      out[b].push_back({perm[b * batch_size + k], detail::bounded(cap_rng, kCaptionsPerImage)});
  return out;
}

// A permutation of [0, n) with no fixed points (n >= 2), seed-chosen.
inline std::vector<std::size_t> seeded_derangement(std::size_t n, std::uint64_t seed) {
  if (n < 2) return std::vector<std::size_t>(n, 0);
  // Random cyclic shift of a random permutation has no fixed points.
  const auto p = seeded_permutation(n, seed);
  Rng rng(splitmix64(seed));
  const std::size_t shift = 1 + detail::bounded(rng, n - 1);
  std::vector<std::size_t> d(n);
  for (std::size_t i = 0; i < n; ++i) d[p[i]] = p[(i + shift) % n];
  return d;
}

}  // namespace t2i2t
