#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>

namespace t2i2t {

using Rgb = std::array<std::uint8_t, 3>;

// Named colour prototypes plus the thresholds used to decide presence.
struct ColorLexicon {
  std::map<std::string, Rgb> prototypes;
  double match_distance = 60.0;   // Euclidean, RGB units
  double presence_fraction = 0.01;

  const Rgb& at(const std::string& name) const {
    auto it = prototypes.find(name);
    if (it == prototypes.end()) throw std::out_of_range("color not in lexicon: " + name);
    return it->second;
  }
  bool contains(const std::string& name) const { return prototypes.count(name) != 0; }
};

inline ColorLexicon basic_color_lexicon() {
  ColorLexicon lex;
  lex.prototypes = {
      {"red", {255, 0, 0}},      {"orange", {255, 165, 0}},   {"yellow", {255, 255, 0}},
      {"green", {0, 128, 0}},    {"blue", {0, 0, 255}},       {"purple", {128, 0, 128}},
      {"pink", {255, 192, 203}}, {"white", {255, 255, 255}},  {"black", {0, 0, 0}},
      {"brown", {139, 69, 19}},  {"gray", {128, 128, 128}},
  };
  return lex;
}

}  // namespace t2i2t
