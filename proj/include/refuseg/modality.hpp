#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

namespace refuseg {

enum class Modality : uint8_t { t1 = 0, t1c = 1, t2 = 2, flair = 3 };

inline constexpr std::array<Modality, 4> kModalities{Modality::t1, Modality::t1c, Modality::t2,
                                                      Modality::flair};

constexpr size_t index_of(Modality m) { return static_cast<size_t>(m); }

// Lowercase file/CLI name: t1, t1c, t2, flair.
std::string_view name_of(Modality m);

// Case-insensitive inverse of name_of.
std::optional<Modality> parse_modality(std::string_view text);

template <class V>
using PerModality = std::array<V, 4>;

struct PresenceMask {
  PerModality<bool> present{true, true, true, true};

  static PresenceMask all() { return {}; }
  static PresenceMask only(Modality m) {
    PresenceMask mask{{false, false, false, false}};
    mask.present[index_of(m)] = true;
    return mask;
  }

  bool operator[](Modality m) const { return present[index_of(m)]; }
  bool operator==(const PresenceMask&) const = default;

  PresenceMask without(Modality m) const {
    PresenceMask copy = *this;
    copy.present[index_of(m)] = false;
    return copy;
  }
  int count() const {
    int n = 0;
    for (bool p : present) n += p ? 1 : 0;
    return n;
  }
  bool any() const { return count() > 0; }
  // e.g. "t1,t2"; empty when nothing is present.
  std::string to_string() const;
};

}  // namespace refuseg
