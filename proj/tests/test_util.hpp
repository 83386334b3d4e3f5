#pragma once

#include "mbp/autodiff.hpp"
#include "mbp/data.hpp"
#include "mbp/rng.hpp"

#include <boost/math/distributions/chi_squared.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <unistd.h>

namespace mbp::test {

struct TempDir {
  std::filesystem::path path;

  TempDir() {
    static int counter = 0;
    path = std::filesystem::temp_directory_path() /
           ("mbp-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::filesystem::path write(const std::string& name, const std::string& text) const {
    const auto p = path / name;
    std::ofstream(p, std::ios::binary) << text;
    return p;
  }
};

inline Mat random_mat(Index rows, Index cols, Rng& rng, double scale = 1.0) {
  Mat m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

inline double max_abs_diff(const Mat& a, const Mat& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return INFINITY;
  return a.size() == 0 ? 0.0 : (a - b).cwiseAbs().maxCoeff();
}

// Upper-tail p-value of Pearson's statistic against equal expected counts.
inline double chi_square_uniform_p(std::span<const double> counts) {
  double total = 0.0;
  for (double c : counts) total += c;
  const double expected = total / static_cast<double>(counts.size());
  double stat = 0.0;
  for (double c : counts) stat += (c - expected) * (c - expected) / expected;
  boost::math::chi_squared dist(static_cast<double>(counts.size() - 1));
  return boost::math::cdf(boost::math::complement(dist, stat));
}

// Sorts by (user, time) and assigns identity id maps.
inline data::InteractionLog make_log(std::vector<data::InteractionRecord> recs, int n_items, int n_behaviors) {
  data::InteractionLog log;
  int max_user = -1;
  for (const auto& r : recs) max_user = std::max(max_user, r.user);
  log.n_users = max_user + 1;
  log.n_items = n_items;
  log.n_behaviors = n_behaviors;
  log.target_behavior = n_behaviors - 1;
  std::stable_sort(recs.begin(), recs.end(), [](const auto& a, const auto& b) {
    return a.user != b.user ? a.user < b.user : a.timestamp < b.timestamp;
  });
  log.records = std::move(recs);
  for (int u = 0; u < log.n_users; ++u) log.user_ids.push_back(u);
  for (int i = 0; i < n_items; ++i) log.item_ids.push_back(i);
  log.index();
  return log;
}

}  // namespace mbp::test
