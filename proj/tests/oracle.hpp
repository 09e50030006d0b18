// Straight-line reference arithmetic for the test suite. Nothing here uses
// the library's kernels or tape; matrices are plain nested vectors.

#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "vidprompt/nn.hpp"

namespace oracle {

using Mat = std::vector<std::vector<double>>;

template <class T>
Mat from(const vidprompt::Tensor<T>& t) {
  Mat m(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) m[r][c] = static_cast<double>(t(r, c));
  return m;
}

inline Mat matmul(const Mat& a, const Mat& b) {
  Mat out(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < b.size(); ++k)
      for (std::size_t j = 0; j < b[0].size(); ++j) out[i][j] += a[i][k] * b[k][j];
  return out;
}

inline Mat transpose(const Mat& a) {
  Mat out(a[0].size(), std::vector<double>(a.size()));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[0].size(); ++j) out[j][i] = a[i][j];
  return out;
}

inline Mat add(const Mat& a, const Mat& b) {
  Mat out = a;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[0].size(); ++j) out[i][j] += b[i][j];
  return out;
}

// b is a single row broadcast over a
inline Mat add_row(const Mat& a, const Mat& b) {
  Mat out = a;
  for (auto& row : out)
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += b[0][j];
  return out;
}

inline Mat layer_norm(const Mat& x, const Mat& gamma, const Mat& beta, double eps = 1e-5) {
  Mat out = x;
  for (auto& row : out) {
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= double(row.size());
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= double(row.size());
    for (std::size_t j = 0; j < row.size(); ++j) row[j] = (row[j] - mean) / std::sqrt(var + eps) * gamma[0][j] + beta[0][j];
  }
  return out;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

inline Mat softmax_rows(Mat s) {
  for (auto& row : s) {
    const double m = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double& v : row) z += (v = std::exp(v - m));
    for (double& v : row) v /= z;
  }
  return s;
}

inline Mat cols(const Mat& a, std::size_t b, std::size_t e) {
  Mat out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i].assign(a[i].begin() + b, a[i].begin() + e);
  return out;
}

inline double max_abs_diff(const Mat& a, const Mat& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) d = std::max(d, std::abs(a[i][j] - b[i][j]));
  return d;
}

// Reference attention over one sequence from the stored weights.
inline Mat attention(const Mat& x, const vidprompt::ParameterSet<double>& ps, const std::string& prefix,
                             std::size_t heads) {
  auto W = [&](const std::string& n) { return from(ps.at(prefix + "." + n).value); };
  const Mat q = add_row(matmul(x, W("wq")), W("bq"));
  const Mat k = add_row(matmul(x, W("wk")), W("bk"));
  const Mat v = add_row(matmul(x, W("wv")), W("bv"));
  const std::size_t d = x[0].size(), hd = d / heads;
  Mat merged(x.size(), std::vector<double>(d));
  for (std::size_t h = 0; h < heads; ++h) {
    const auto qh = cols(q, h * hd, (h + 1) * hd), kh = cols(k, h * hd, (h + 1) * hd);
    const auto vh = cols(v, h * hd, (h + 1) * hd);
    auto s = matmul(qh, transpose(kh));
    for (auto& row : s)
      for (double& e : row) e /= std::sqrt(double(hd));
    const auto o = matmul(softmax_rows(s), vh);
    for (std::size_t i = 0; i < x.size(); ++i)
      for (std::size_t j = 0; j < hd; ++j) merged[i][h * hd + j] = o[i][j];
  }
  return add_row(matmul(merged, W("wo")), W("bo"));
}

inline Mat encoder(Mat x, const vidprompt::ParameterSet<double>& ps, const vidprompt::TransformerEncoder<double>& enc) {
  for (std::size_t l = 0; l < enc.config().depth; ++l) {
    const std::string lp = enc.layer_prefix(l);
    auto W = [&](const std::string& n) { return from(ps.at(lp + "." + n).value); };
    x = add(x, attention(layer_norm(x, W("ln1.gamma"), W("ln1.beta")), ps, lp + ".attn",
                                        enc.config().heads));
    auto h = add_row(matmul(layer_norm(x, W("ln2.gamma"), W("ln2.beta")), W("mlp.w1")),
                             W("mlp.b1"));
    for (auto& row : h)
      for (double& e : row) e = gelu(e);
    x = add(x, add_row(matmul(h, W("mlp.w2")), W("mlp.b2")));
  }
  return x;
}

}  // namespace oracle
