#pragma once

#include <array>
#include <stdexcept>
#include <vector>

namespace stratfit {

// Potential institutionalization levels of one principal stratum.
struct Stratum {
  int z0 = 0;  // level under control
  int z1 = 0;  // level under treatment

  friend bool operator==(const Stratum&, const Stratum&) = default;
};

// Enumeration of the k_levels^2 principal strata. Strata are ordered
// row-major with z1 as the row and z0 as the column, so
// index(z0, z1) = z1 * k_levels + z0 and the last stratum is
// (z_max, z_max).
class StrataGrid {
 public:
  explicit StrataGrid(int k_levels = 2) : k_(k_levels) {
    if (k_levels < 1) throw std::invalid_argument("k_levels must be >= 1");
    strata_.reserve(static_cast<std::size_t>(k_ * k_));
    for (int z1 = 0; z1 < k_; ++z1)
      for (int z0 = 0; z0 < k_; ++z0) strata_.push_back({z0, z1});
    for (int arm = 0; arm < 2; ++arm) {
      compatible_[arm].resize(static_cast<std::size_t>(k_));
      for (int s = 0; s < size(); ++s)
        compatible_[arm][static_cast<std::size_t>(observed_level(s, arm))].push_back(s);
    }
  }

  int k_levels() const { return k_; }
  int z_max() const { return k_ - 1; }
  int size() const { return k_ * k_; }

  int index(int z0, int z1) const { return z1 * k_ + z0; }
  const Stratum& stratum(int s) const { return strata_[static_cast<std::size_t>(s)]; }
  const std::vector<Stratum>& strata() const { return strata_; }

  // Institutionalization level a member of stratum s shows under `arm`.
  int observed_level(int s, int arm) const {
    const Stratum& st = stratum(s);
    return arm == 1 ? st.z1 : st.z0;
  }

  // Strata a case in `arm` observed at `level` can belong to, ascending.
  const std::vector<int>& compatible(int arm, int level) const {
    return compatible_[arm != 0][static_cast<std::size_t>(level)];
  }

  bool diagonal(int s) const { return stratum(s).z0 == stratum(s).z1; }

  friend bool operator==(const StrataGrid& a, const StrataGrid& b) { return a.k_ == b.k_; }

 private:
  int k_;
  std::vector<Stratum> strata_;
  std::array<std::vector<std::vector<int>>, 2> compatible_;
};

}  // namespace stratfit
