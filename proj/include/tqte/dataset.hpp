#pragma once

#include <algorithm>
#include <array>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "tqte/common.hpp"

namespace tqte {

/// One observation O = (R, X, R*(A, S, M, M*Y)).  Fields that are not part of
/// the observed sigma-field are absent rather than sentinel-valued, so reading
/// them by mistake is impossible.
struct Observation {
  int r = 0;                    // 0 = target, 1 = source
  std::vector<double> x;        // covariates, length p
  std::optional<int> a;         // treatment, source only
  std::optional<std::vector<double>> s;  // surrogate, source only
  std::optional<int> m;         // validation indicator, source only
  std::optional<double> y;      // primary outcome, present iff r=1 and m=1

  void check(std::size_t row = 0) const {
    auto fail = [row](const std::string& what) {
      throw invalid_input("observation " + (row ? "at row " + std::to_string(row) + " " : "") +
                          "violates invariant: " + what);
    };
    if (r != 0 && r != 1) fail("r must be 0 or 1");
    if (r == 0) {
      if (a || s || m || y) fail("r=0 row must have a, s, m, y all absent");
    } else {
      if (!a || !s || !m) fail("r=1 row must have a, s, m present");
      if (*a != 0 && *a != 1) fail("a must be 0 or 1");
      if (*m != 0 && *m != 1) fail("m must be 0 or 1");
      if (y.has_value() != (*m == 1)) fail("y present iff m=1");
    }
  }
};

struct TwoSampleDataset {
  std::vector<Observation> observations;
  std::size_t p = 0;  // covariate dimension
  std::size_t q = 0;  // surrogate dimension

  std::size_t n() const { return observations.size(); }
  std::size_t n_r(int r) const {
    std::size_t c = 0;
    for (const auto& o : observations) c += (o.r == r);
    return c;
  }
  double pi_hat(int r) const {
    return static_cast<double>(n_r(r)) / static_cast<double>(n());
  }

  void check() const {
    if (n_r(0) == 0 || n_r(1) == 0)
      throw invalid_input("dataset needs at least one target and one source unit");
    for (std::size_t i = 0; i < observations.size(); ++i) {
      const auto& o = observations[i];
      o.check(i + 1);
      if (o.x.size() != p)
        throw invalid_input("observation " + std::to_string(i + 1) + ": x has length " +
                            std::to_string(o.x.size()) + ", expected p=" + std::to_string(p));
      if (o.s && o.s->size() != q)
        throw invalid_input("observation " + std::to_string(i + 1) + ": s has length " +
                            std::to_string(o.s->size()) + ", expected q=" + std::to_string(q));
    }
  }
};

/// Partition of observation indices into folds 1..K.
struct FoldAssignment {
  std::vector<int> fold_of;  // fold id per observation, values in 1..K
  int K = 1;

  std::vector<std::size_t> members(int k) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < fold_of.size(); ++i)
      if (fold_of[i] == k) out.push_back(i);
    return out;
  }
};

struct ThresholdGrid {
  std::vector<double> points;  // strictly increasing, J >= 2

  std::size_t size() const { return points.size(); }
  void check() const {
    if (points.size() < 2) throw invalid_input("threshold grid needs J >= 2 points");
    for (std::size_t j = 1; j < points.size(); ++j)
      if (!(points[j] > points[j - 1]))
        throw invalid_input("threshold grid must be strictly increasing");
  }
  /// Mesh h = half of the largest gap (interior covering radius).
  double mesh() const {
    double h = 0.0;
    for (std::size_t j = 1; j < points.size(); ++j)
      h = std::max(h, 0.5 * (points[j] - points[j - 1]));
    return h;
  }
  std::size_t nearest_index(double y) const {
    const auto it = std::lower_bound(points.begin(), points.end(), y);
    if (it == points.begin()) return 0;
    if (it == points.end()) return points.size() - 1;
    const std::size_t hi = static_cast<std::size_t>(it - points.begin());
    return (y - points[hi - 1] <= points[hi] - y) ? hi - 1 : hi;
  }
};

struct TauGrid {
  std::vector<double> levels;  // strictly increasing in (0,1)

  void check() const {
    if (levels.empty()) throw invalid_input("tau grid is empty");
    double prev = 0.0;
    for (double t : levels) {
      if (!(t > prev && t < 1.0))
        throw invalid_input("tau levels must be strictly increasing in (0,1)");
      prev = t;
    }
  }
};

/// Stratum label used for fold dealing: (r, a, m) with -1 for absent.
struct StratumLabel {
  int r = 0, a = -1, m = -1;
  auto operator<=>(const StratumLabel&) const = default;
};

inline std::vector<StratumLabel> strata_of(const TwoSampleDataset& data) {
  std::vector<StratumLabel> out;
  out.reserve(data.n());
  for (const auto& o : data.observations)
    out.push_back({o.r, o.a ? *o.a : -1, o.m ? *o.m : -1});
  return out;
}

/// Stratified fold assignment: shuffle within each (r,a,m) stratum with the
/// seeded engine and deal round-robin, so small samples never produce folds
/// with empty estimation strata when the strata themselves are large enough.
inline FoldAssignment make_folds(std::size_t n, int K, std::uint64_t seed,
                                 const std::vector<StratumLabel>& strata) {
  if (K < 1) throw invalid_input("make_folds: K must be >= 1");
  if (n < static_cast<std::size_t>(K))
    throw invalid_input("make_folds: n=" + std::to_string(n) + " < K=" + std::to_string(K));
  if (strata.size() != n) throw invalid_input("make_folds: strata length != n");

  std::map<StratumLabel, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < n; ++i) groups[strata[i]].push_back(i);

  FoldAssignment fa;
  fa.K = K;
  fa.fold_of.assign(n, 0);
  Rng rng(seed);
  int next = 0;  // continue dealing across strata so folds stay balanced
  for (auto& [label, idx] : groups) {
    rng.shuffle(idx);
    for (std::size_t i : idx) {
      fa.fold_of[i] = 1 + (next % K);
      ++next;
    }
  }

  if (K > 1) {
    // Every fold must keep at least one target unit and, per arm, at least
    // one validated source unit outside of it (and inside, for evaluation).
    for (int k = 1; k <= K; ++k) {
      bool has_target = false;
      std::array<bool, 2> has_validated = {false, false};
      for (std::size_t i = 0; i < n; ++i) {
        if (fa.fold_of[i] != k) continue;
        if (strata[i].r == 0) has_target = true;
        if (strata[i].r == 1 && strata[i].m == 1 && strata[i].a >= 0)
          has_validated[strata[i].a] = true;
      }
      if (!has_target)
        throw estimation_error("make_folds: fold " + std::to_string(k) +
                               " has no target unit (stratum r=0 too small for K=" +
                               std::to_string(K) + ")");
      for (int a = 0; a < 2; ++a) {
        if (groups.count({1, a, 1}) && !has_validated[a])
          throw estimation_error("make_folds: fold " + std::to_string(k) +
                                 " has no validated source unit in arm a=" +
                                 std::to_string(a));
      }
    }
  }
  return fa;
}

inline FoldAssignment make_folds(const TwoSampleDataset& data, int K, std::uint64_t seed) {
  return make_folds(data.n(), K, seed, strata_of(data));
}

// ---------------------------------------------------------------------------
// CSV schema: header `r,a,m,y,x1..xp,s1..sq`, empty cells for absent fields,
// `.` decimal separator, LF line endings, reals at 17 significant digits.
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      cells.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  cells.push_back(cur);
  return cells;
}

inline double parse_num(const std::string& cell, std::size_t row, const std::string& col) {
  std::size_t pos = 0;
  double v;
  try {
    v = std::stod(cell, &pos);
  } catch (const std::exception&) {
    throw invalid_input("row " + std::to_string(row) + ": non-numeric cell in column " + col);
  }
  if (pos != cell.size())
    throw invalid_input("row " + std::to_string(row) + ": non-numeric cell in column " + col);
  return v;
}

}  // namespace detail

inline TwoSampleDataset read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw invalid_input("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw invalid_input(path + ": empty file");

  const auto header = detail::split_csv_line(line);
  if (header.size() < 5 || header[0] != "r" || header[1] != "a" || header[2] != "m" ||
      header[3] != "y")
    throw invalid_input(path + ": header must start with r,a,m,y");
  std::size_t p = 0, q = 0;
  std::size_t col = 4;
  while (col < header.size() && header[col] == "x" + std::to_string(p + 1)) {
    ++p;
    ++col;
  }
  while (col < header.size() && header[col] == "s" + std::to_string(q + 1)) {
    ++q;
    ++col;
  }
  if (col != header.size() || p == 0)
    throw invalid_input(path + ": header columns after y must be x1..xp,s1..sq");

  TwoSampleDataset data;
  data.p = p;
  data.q = q;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size())
      throw invalid_input("row " + std::to_string(row) + ": expected " +
                          std::to_string(header.size()) + " cells, got " +
                          std::to_string(cells.size()));
    Observation o;
    o.r = static_cast<int>(detail::parse_num(cells[0], row, "r"));
    if (!cells[1].empty()) o.a = static_cast<int>(detail::parse_num(cells[1], row, "a"));
    if (!cells[2].empty()) o.m = static_cast<int>(detail::parse_num(cells[2], row, "m"));
    if (!cells[3].empty()) o.y = detail::parse_num(cells[3], row, "y");
    o.x.resize(p);
    for (std::size_t j = 0; j < p; ++j)
      o.x[j] = detail::parse_num(cells[4 + j], row, "x" + std::to_string(j + 1));
    bool any_s = false;
    for (std::size_t j = 0; j < q; ++j) any_s |= !cells[4 + p + j].empty();
    if (any_s) {
      std::vector<double> s(q);
      for (std::size_t j = 0; j < q; ++j)
        s[j] = detail::parse_num(cells[4 + p + j], row, "s" + std::to_string(j + 1));
      o.s = std::move(s);
    }
    o.check(row);
    data.observations.push_back(std::move(o));
  }
  data.check();
  return data;
}

inline void write_csv(const TwoSampleDataset& data, const std::string& path) {
  data.check();
  std::ofstream out(path, std::ios::binary);  // binary keeps LF endings everywhere
  if (!out) throw invalid_input("cannot open " + path + " for writing");
  out << "r,a,m,y";
  for (std::size_t j = 1; j <= data.p; ++j) out << ",x" << j;
  for (std::size_t j = 1; j <= data.q; ++j) out << ",s" << j;
  out << "\n";
  for (const auto& o : data.observations) {
    out << o.r << ',';
    if (o.a) out << *o.a;
    out << ',';
    if (o.m) out << *o.m;
    out << ',';
    if (o.y) out << fmt17(*o.y);
    for (std::size_t j = 0; j < data.p; ++j) out << ',' << fmt17(o.x[j]);
    for (std::size_t j = 0; j < data.q; ++j) {
      out << ',';
      if (o.s) out << fmt17((*o.s)[j]);
    }
    out << "\n";
  }
  if (!out) throw invalid_input("write failure on " + path);
}

}  // namespace tqte
