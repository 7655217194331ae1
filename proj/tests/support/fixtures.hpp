#pragma once

// Frozen oracle values (tests/fixtures/loss_oracles.json) and the
// closed-form inputs they were computed from.

#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "argd/tensor.hpp"

namespace argd::fixtures {

inline const nlohmann::json& oracles() {
  static const nlohmann::json j = [] {
    std::ifstream in(std::string(ARGD_FIXTURE_DIR) + "/loss_oracles.json");
    return nlohmann::json::parse(in);
  }();
  return j;
}

inline Tensor<double> formula_map(int h, int w, int seed) {
  Tensor<double> t({1, h, w});
  for (int i = 0; i < h * w; ++i) t[static_cast<std::size_t>(i)] = ((i * 7 + seed * 5 + 3) % 11) / 10.0 + 0.05 * seed;
  return t;
}

inline std::vector<Tensor<double>> maps_from(const char* key, int seed_offset) {
  std::vector<Tensor<double>> out;
  const auto shapes = oracles().at(key).get<std::vector<std::vector<int>>>();
  for (std::size_t p = 0; p < shapes.size(); ++p) {
    out.push_back(formula_map(shapes[p][0], shapes[p][1], static_cast<int>(p) + seed_offset));
  }
  return out;
}

inline std::vector<Tensor<double>> student_maps() { return maps_from("student_shapes", 1); }
inline std::vector<Tensor<double>> teacher_maps() { return maps_from("teacher_shapes", 4); }

}  // namespace argd::fixtures
