#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>

#include "json.hpp"

#include "attune/error.hpp"
#include "attune/hash.hpp"
#include "attune/matrix_io.hpp"
#include "attune/model.hpp"
#include "attune/rng.hpp"

namespace attune {

/// Gaussian class clusters: x = m_y + noise·N(0, I) with ‖m_k‖ = separation/2.
/// Two classes sit antipodally; more classes get independent random directions.
struct SyntheticSpec {
  Eigen::Index n = 1000;
  Eigen::Index d = 50;
  Eigen::Index classes = 2;
  double separation = 2.0;
  double noise = 1.0;

  friend bool operator==(const SyntheticSpec&, const SyntheticSpec&) = default;
};

inline constexpr std::uint64_t kDataStream = 0x3001;

/// Draws n + test_size points from one stream; the last test_size form the test set.
inline std::pair<Dataset, Dataset> synthetic_blobs(const SyntheticSpec& s, Eigen::Index test_size, std::uint64_t seed) {
  require(s.n >= 2 && s.d >= 1 && s.classes >= 2, ErrorKind::Domain, "synthetic data: need n >= 2, d >= 1, classes >= 2");
  require(test_size >= 1, ErrorKind::Domain, "synthetic data: test size must be positive");
  require(s.separation >= 0.0 && s.noise > 0.0, ErrorKind::Domain, "synthetic data: bad separation or noise");

  SeededRng mean_rng = SeededRng(seed, kDataStream).split(0);
  Matrix means(s.classes, s.d);
  for (Eigen::Index k = 0; k < s.classes; ++k) {
    if (s.classes == 2 && k == 1) {
      means.row(1) = -means.row(0);
      break;
    }
    for (Eigen::Index c = 0; c < s.d; ++c) means(k, c) = mean_rng.normal();
    const double norm = means.row(k).norm();
    means.row(k) *= norm > 0.0 ? 0.5 * s.separation / norm : 0.0;
  }

  const Eigen::Index total = s.n + test_size;
  SeededRng point_rng = SeededRng(seed, kDataStream).split(1);
  Dataset all;
  all.features.resize(total, s.d);
  all.labels.resize(static_cast<std::size_t>(total));
  all.classes = s.classes;
  for (Eigen::Index i = 0; i < total; ++i) {
    const auto y = static_cast<int>(point_rng.uniform_index(static_cast<std::uint64_t>(s.classes)));
    all.labels[static_cast<std::size_t>(i)] = y;
    for (Eigen::Index c = 0; c < s.d; ++c) all.features(i, c) = means(y, c) + s.noise * point_rng.normal();
  }

  Dataset train, test;
  train.features = all.features.topRows(s.n);
  train.labels.assign(all.labels.begin(), all.labels.begin() + s.n);
  train.classes = s.classes;
  train.name = "synthetic-train";
  test.features = all.features.bottomRows(test_size);
  test.labels.assign(all.labels.begin() + s.n, all.labels.end());
  test.classes = s.classes;
  test.name = "synthetic-test";
  return {std::move(train), std::move(test)};
}

/// Content hash over features, labels and class count (the name is ignored).
inline std::string dataset_hash(const Dataset& d) {
  Sha256 h;
  const std::uint64_t shape[3] = {static_cast<std::uint64_t>(d.size()), static_cast<std::uint64_t>(d.dim()),
                                  static_cast<std::uint64_t>(d.classes)};
  h.update(shape, sizeof shape);
  const RowMajorMatrix rm = d.features;
  h.update(rm.data(), static_cast<std::size_t>(rm.size()) * sizeof(double));
  h.update(d.labels.data(), d.labels.size() * sizeof(int));
  return h.hex();
}

/// `<path>` holds the ATRM features; `<path>.json` holds {name, n, d, classes, labels}.
inline void save_dataset(const std::filesystem::path& path, const Dataset& d) {
  d.validate();
  save_matrix(path, d.features);
  const nlohmann::json side = {{"name", d.name}, {"n", d.size()}, {"d", d.dim()}, {"classes", d.classes}, {"labels", d.labels}};
  std::ofstream os(path.string() + ".json");
  require(os.good(), ErrorKind::Format, "cannot write " + path.string() + ".json");
  os << side.dump() << '\n';
}

inline Dataset load_dataset(const std::filesystem::path& path) {
  Dataset d;
  d.features = load_matrix(path);
  std::ifstream is(path.string() + ".json");
  require(is.good(), ErrorKind::Format, "missing dataset sidecar " + path.string() + ".json");
  try {
    const auto j = nlohmann::json::parse(is);
    d.name = j.at("name").get<std::string>();
    d.classes = j.at("classes").get<Eigen::Index>();
    d.labels = j.at("labels").get<std::vector<int>>();
    if (j.at("n").get<Eigen::Index>() != d.size() || j.at("d").get<Eigen::Index>() != d.dim())
      throw FormatError(FormatCode::LengthMismatch, "dataset sidecar shape does not match " + path.string());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatCode::Malformed, "bad dataset sidecar " + path.string() + ".json: " + e.what());
  }
  d.validate();
  return d;
}

}  // namespace attune
