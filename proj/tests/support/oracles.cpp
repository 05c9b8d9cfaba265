#include "oracles.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include <unistd.h>

namespace oracle {

namespace {
using wide = __float128;

wide wide_mean(const std::vector<double>& x) {
  wide s = 0;
  for (double v : x) s += v;
  return s / static_cast<wide>(x.size());
}

wide wide_pow(wide b, int k) {
  wide r = 1;
  for (int i = 0; i < k; ++i) r *= b;
  return r;
}
}  // namespace

long double mean(const std::vector<double>& x) { return static_cast<long double>(wide_mean(x)); }

long double central_moment(const std::vector<double>& x, int k) {
  const wide mu = wide_mean(x);
  wide s = 0;
  for (double v : x) s += wide_pow(static_cast<wide>(v) - mu, k);
  return static_cast<long double>(s / static_cast<wide>(x.size()));
}

long double absolute_moment(const std::vector<double>& x, int k) {
  const wide mu = wide_mean(x);
  wide s = 0;
  for (double v : x) {
    const wide d = static_cast<wide>(v) - mu;
    s += wide_pow(d < 0 ? -d : d, k);
  }
  return static_cast<long double>(s / static_cast<wide>(x.size()));
}

std::vector<double> numeric_gradient(const std::function<double(const std::vector<double>&)>& f,
                                     std::vector<double> x, double h) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double x0 = x[i];
    x[i] = x0 + h;
    const double up = f(x);
    x[i] = x0 - h;
    const double down = f(x);
    x[i] = x0;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

std::vector<double> conv2d(const std::vector<double>& x, std::size_t n, std::size_t cin, std::size_t h, std::size_t w,
                           const std::vector<double>& k, std::size_t cout, std::size_t kh, std::size_t kw,
                           std::size_t stride, std::size_t pad) {
  const std::size_t oh = (h + 2 * pad - kh) / stride + 1, ow = (w + 2 * pad - kw) / stride + 1;
  std::vector<double> y(n * cout * oh * ow, 0.0);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t o = 0; o < cout; ++o)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          double s = 0;
          for (std::size_t c = 0; c < cin; ++c)
            for (std::size_t u = 0; u < kh; ++u)
              for (std::size_t v = 0; v < kw; ++v) {
                const long r = static_cast<long>(i * stride + u) - static_cast<long>(pad);
                const long q = static_cast<long>(j * stride + v) - static_cast<long>(pad);
                if (r < 0 || q < 0 || r >= static_cast<long>(h) || q >= static_cast<long>(w)) continue;
                s += x[((b * cin + c) * h + static_cast<std::size_t>(r)) * w + static_cast<std::size_t>(q)] *
                     k[((o * cin + c) * kh + u) * kw + v];
              }
          y[((b * cout + o) * oh + i) * ow + j] = s;
        }
  return y;
}

std::vector<double> channel_conv(const std::vector<double>& m, std::size_t n, std::size_t rows, std::size_t c,
                                 const std::vector<double>& w, std::size_t k) {
  std::vector<double> y(n * c, 0.0);
  const long half = static_cast<long>(k / 2);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t t = 0; t < k; ++t) {
          const long src = static_cast<long>(ch) + static_cast<long>(t) - half;
          if (src < 0 || src >= static_cast<long>(c)) continue;
          y[b * c + ch] += w[r * k + t] * m[(b * rows + r) * c + static_cast<std::size_t>(src)];
        }
  return y;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double norm_bound(int k, double dims) {
  const double kk = k;
  return std::sqrt(dims) * (1.0 / (kk + 1.0) * std::pow(kk / (kk + 1.0), kk) + std::pow(2.0, -(1.0 + kk)));
}

namespace {
void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}
}  // namespace

std::vector<std::uint8_t> idx_images(std::uint32_t magic, std::uint32_t n, std::uint32_t rows, std::uint32_t cols,
                                     const std::vector<std::uint8_t>& pixels) {
  std::vector<std::uint8_t> out;
  put_be32(out, magic);
  put_be32(out, n);
  put_be32(out, rows);
  put_be32(out, cols);
  out.insert(out.end(), pixels.begin(), pixels.end());
  return out;
}

std::vector<std::uint8_t> idx_labels(std::uint32_t magic, std::uint32_t n, const std::vector<std::uint8_t>& labels) {
  std::vector<std::uint8_t> out;
  put_be32(out, magic);
  put_be32(out, n);
  out.insert(out.end(), labels.begin(), labels.end());
  return out;
}

void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("cannot write fixture " + path.string());
}

std::filesystem::path temp_dir(const std::string& tag) {
  static int counter = 0;
  auto dir = std::filesystem::temp_directory_path() /
             ("mca_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace oracle
