#include "refuseg/modality.hpp"

#include <algorithm>
#include <cctype>

namespace refuseg {

std::string_view name_of(Modality m) {
  switch (m) {
    case Modality::t1: return "t1";
    case Modality::t1c: return "t1c";
    case Modality::t2: return "t2";
    case Modality::flair: return "flair";
  }
  return "?";
}

std::optional<Modality> parse_modality(std::string_view text) {
  std::string lower(text);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  for (auto m : kModalities)
    if (lower == name_of(m)) return m;
  return std::nullopt;
}

std::string PresenceMask::to_string() const {
  std::string out;
  for (auto m : kModalities) {
    if (!(*this)[m]) continue;
    if (!out.empty()) out += ",";
    out += name_of(m);
  }
  return out;
}

}  // namespace refuseg
