#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>

#include "emotts/autograd.hpp"

namespace emotts::testing {

using ag::Matrix;
using ag::Var;

// Relative error between analytic and central-difference gradients of a
// scalar function with respect to one leaf.
inline double gradient_error(const std::function<Var()>& f, Var leaf, double eps = 1e-6) {
  leaf.zero_grad();
  f().backward();
  const Matrix analytic = leaf.has_grad() ? leaf.grad() : Matrix::Zero(leaf.rows(), leaf.cols());
  Matrix numeric(leaf.rows(), leaf.cols());
  for (ag::Index i = 0; i < leaf.value().size(); ++i) {
    double& x = leaf.mutable_value().data()[i];
    const double keep = x;
    x = keep + eps;
    const double up = f().item();
    x = keep - eps;
    const double down = f().item();
    x = keep;
    numeric.data()[i] = (up - down) / (2.0 * eps);
  }
  const double scale = std::max(analytic.norm() + numeric.norm(), 1e-12);
  return (analytic - numeric).norm() / scale;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("emotts_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline Matrix seeded_matrix(ag::Index rows, ag::Index cols, unsigned seed, double scale = 1.0) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(rows, cols);
  for (ag::Index i = 0; i < m.size(); ++i) m.data()[i] = n(gen);
  return m;
}

}  // namespace emotts::testing
