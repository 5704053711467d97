/*
 * Copyright (c) 2026, the usfan authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Internal helpers for the JSON containers (checkpoints, posteriors).
// Matrices are stored as flat row-major arrays next to their dimensions.

#pragma once

#include <fstream>
#include <string>

#include <json.hpp>

#include "usfan/errors.hpp"
#include "usfan/net.hpp"

namespace usfan::detail {

inline nlohmann::json matrix_to_json(const Matrix& m) {
  nlohmann::json arr = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      arr.push_back(m(r, c));
    }
  }
  return arr;
}

inline Matrix matrix_from_json(const nlohmann::json& arr, Eigen::Index rows,
                               Eigen::Index cols) {
  if (!arr.is_array() || arr.size() != static_cast<std::size_t>(rows * cols)) {
    throw DataError("matrix payload does not match declared shape");
  }
  Matrix m(rows, cols);
  std::size_t i = 0;
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) {
      m(r, c) = arr[i++].get<double>();
    }
  }
  return m;
}

inline nlohmann::json vector_to_json(const Vector& v) {
  nlohmann::json arr = nlohmann::json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v(i));
  return arr;
}

inline Vector vector_from_json(const nlohmann::json& arr, Eigen::Index n) {
  if (!arr.is_array() || arr.size() != static_cast<std::size_t>(n)) {
    throw DataError("vector payload does not match declared length");
  }
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = arr[i].get<double>();
  return v;
}

inline nlohmann::json load_json_file(const std::string& path,
                                     const std::string& expected_format) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed JSON in " + path + ": " + e.what());
  }
  if (j.value("format", "") != expected_format) {
    throw DataError(path + " is not a " + expected_format + " file");
  }
  return j;
}

inline void save_json_file(const nlohmann::json& j, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write file: " + path);
  out << j.dump(1) << '\n';
}

}  // namespace usfan::detail
