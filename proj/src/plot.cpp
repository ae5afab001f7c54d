#include "cafe/plot.hpp"

#include <png.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <memory>
#include <sstream>
#include <stdexcept>

namespace cafe::plot {

namespace {

constexpr double kW = 640, kH = 400, kLeft = 70, kRight = 150, kTop = 40, kBottom = 60;
const char* const kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};

std::string esc(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else if (c == '&') out += "&amp;";
    else out += c;
  }
  return out;
}

std::string num(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

struct Range {
  double lo, hi;
  double map(double v, double a, double b) const { return hi > lo ? a + (v - lo) / (hi - lo) * (b - a) : (a + b) / 2; }
};

Range padded(double lo, double hi) {
  if (!std::isfinite(lo) || !std::isfinite(hi)) return {0, 1};
  if (hi - lo < 1e-12) return {lo - 0.5, hi + 0.5};
  const double pad = (hi - lo) * 0.05;
  return {lo - pad, hi + pad};
}

struct Canvas {
  std::ostringstream os;
  Canvas(const Axes& axes) {
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH
       << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
       << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
       << "<text x=\"" << kW / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << esc(axes.title)
       << "</text>\n"
       << "<text x=\"" << (kLeft + kW - kRight) / 2 << "\" y=\"" << kH - 12 << "\" text-anchor=\"middle\">"
       << esc(axes.x_label) << "</text>\n"
       << "<text transform=\"translate(16," << (kTop + kH - kBottom) / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
       << esc(axes.y_label) << "</text>\n"
       << "<rect x=\"" << kLeft << "\" y=\"" << kTop << "\" width=\"" << kW - kLeft - kRight << "\" height=\""
       << kH - kTop - kBottom << "\" fill=\"none\" stroke=\"black\"/>\n";
  }
  void y_ticks(const Range& r) {
    for (int i = 0; i <= 4; ++i) {
      const double v = r.lo + (r.hi - r.lo) * i / 4.0;
      const double y = r.map(v, kH - kBottom, kTop);
      os << "<line x1=\"" << kLeft - 4 << "\" x2=\"" << kLeft << "\" y1=\"" << y << "\" y2=\"" << y
         << "\" stroke=\"black\"/><text x=\"" << kLeft - 6 << "\" y=\"" << y + 4 << "\" text-anchor=\"end\">"
         << num(v) << "</text>\n";
    }
  }
  void x_label(double x, const std::string& text) {
    os << "<line x1=\"" << x << "\" x2=\"" << x << "\" y1=\"" << kH - kBottom << "\" y2=\"" << kH - kBottom + 4
       << "\" stroke=\"black\"/><text x=\"" << x << "\" y=\"" << kH - kBottom + 18 << "\" text-anchor=\"middle\">"
       << esc(text) << "</text>\n";
  }
  std::string finish() {
    os << "</svg>\n";
    return os.str();
  }
};

double quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto i = static_cast<std::size_t>(pos);
  const double f = pos - static_cast<double>(i);
  return i + 1 < v.size() ? v[i] * (1 - f) + v[i + 1] * f : v[i];
}

}  // namespace

std::string line_chart(const std::vector<Series>& series, const Axes& axes) {
  double xlo = std::numeric_limits<double>::infinity(), xhi = -xlo, ylo = xlo, yhi = -xlo;
  for (const auto& s : series) {
    if (s.x.size() != s.y.size()) throw std::invalid_argument("series " + s.name + " has mismatched x/y lengths");
    for (double v : s.x) xlo = std::min(xlo, v), xhi = std::max(xhi, v);
    for (double v : s.y)
      if (std::isfinite(v)) ylo = std::min(ylo, v), yhi = std::max(yhi, v);
  }
  const Range xr = padded(xlo, xhi), yr = padded(ylo, yhi);
  Canvas c(axes);
  c.y_ticks(yr);
  for (int i = 0; i <= 4; ++i) {
    const double v = xr.lo + (xr.hi - xr.lo) * i / 4.0;
    c.x_label(xr.map(v, kLeft, kW - kRight), num(v));
  }
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto* color = kColors[k % 8];
    const auto& s = series[k];
    c.os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i)
      if (std::isfinite(s.y[i]))
        c.os << xr.map(s.x[i], kLeft, kW - kRight) << ',' << yr.map(s.y[i], kH - kBottom, kTop) << ' ';
    c.os << "\"/>\n";
    for (std::size_t i = 0; i < s.x.size(); ++i)
      if (std::isfinite(s.y[i]))
        c.os << "<circle cx=\"" << xr.map(s.x[i], kLeft, kW - kRight) << "\" cy=\""
             << yr.map(s.y[i], kH - kBottom, kTop) << "\" r=\"3\" fill=\"" << color << "\"/>\n";
    const double ly = kTop + 16 + 18.0 * static_cast<double>(k);
    c.os << "<rect x=\"" << kW - kRight + 12 << "\" y=\"" << ly - 9 << "\" width=\"12\" height=\"12\" fill=\"" << color
         << "\"/><text x=\"" << kW - kRight + 30 << "\" y=\"" << ly + 1 << "\">" << esc(s.name) << "</text>\n";
  }
  return c.finish();
}

std::string box_plot(const std::vector<Group>& groups, const Axes& axes) {
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& g : groups)
    for (double v : g.values) lo = std::min(lo, v), hi = std::max(hi, v);
  const Range yr = padded(lo, hi);
  Canvas c(axes);
  c.y_ticks(yr);
  const double slot = (kW - kLeft - kRight) / std::max<double>(1.0, static_cast<double>(groups.size()));
  for (std::size_t k = 0; k < groups.size(); ++k) {
    const auto& g = groups[k];
    const double cx = kLeft + slot * (static_cast<double>(k) + 0.5);
    c.x_label(cx, g.label);
    if (g.values.empty()) continue;
    const double q1 = quantile(g.values, 0.25), med = quantile(g.values, 0.5), q3 = quantile(g.values, 0.75);
    const double iqr = q3 - q1;
    double wlo = q1, whi = q3;
    for (double v : g.values) {
      if (v >= q1 - 1.5 * iqr) wlo = std::min(wlo, v);
      if (v <= q3 + 1.5 * iqr) whi = std::max(whi, v);
    }
    auto y = [&](double v) { return yr.map(v, kH - kBottom, kTop); };
    const double half = std::min(30.0, slot * 0.3);
    const auto* color = kColors[k % 8];
    c.os << "<line x1=\"" << cx << "\" x2=\"" << cx << "\" y1=\"" << y(wlo) << "\" y2=\"" << y(whi)
         << "\" stroke=\"black\"/>\n"
         << "<rect x=\"" << cx - half << "\" y=\"" << y(q3) << "\" width=\"" << 2 * half << "\" height=\""
         << std::max(0.5, y(q1) - y(q3)) << "\" fill=\"" << color << "\" fill-opacity=\"0.5\" stroke=\"black\"/>\n"
         << "<line x1=\"" << cx - half << "\" x2=\"" << cx + half << "\" y1=\"" << y(med) << "\" y2=\"" << y(med)
         << "\" stroke=\"black\" stroke-width=\"2\"/>\n";
    for (double v : g.values)
      if (v < wlo || v > whi)
        c.os << "<circle cx=\"" << cx << "\" cy=\"" << y(v) << "\" r=\"2.5\" fill=\"none\" stroke=\"black\"/>\n";
  }
  return c.finish();
}

std::string bar_chart(const std::vector<std::string>& labels, const std::vector<double>& values, const Axes& axes) {
  if (labels.size() != values.size()) throw std::invalid_argument("bar chart labels and values differ in length");
  double hi = 0;
  for (double v : values)
    if (std::isfinite(v)) hi = std::max(hi, v);
  const Range yr{0.0, hi > 0 ? hi * 1.1 : 1.0};
  Canvas c(axes);
  c.y_ticks(yr);
  const double slot = (kW - kLeft - kRight) / std::max<double>(1.0, static_cast<double>(values.size()));
  for (std::size_t k = 0; k < values.size(); ++k) {
    const double cx = kLeft + slot * (static_cast<double>(k) + 0.5);
    c.x_label(cx, labels[k]);
    if (!std::isfinite(values[k])) continue;
    const double top = yr.map(values[k], kH - kBottom, kTop);
    c.os << "<rect x=\"" << cx - slot * 0.35 << "\" y=\"" << top << "\" width=\"" << slot * 0.7 << "\" height=\""
         << kH - kBottom - top << "\" fill=\"" << kColors[k % 8] << "\"/>\n"
         << "<text x=\"" << cx << "\" y=\"" << top - 4 << "\" text-anchor=\"middle\">" << num(values[k]) << "</text>\n";
  }
  return c.finish();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};

}  // namespace

void write_png(const std::filesystem::path& path, int width, int height, const std::vector<std::uint8_t>& rgb) {
  if (rgb.size() != static_cast<std::size_t>(width) * height * 3) throw std::invalid_argument("PNG buffer size mismatch");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::unique_ptr<std::FILE, FileCloser> f(std::fopen(path.string().c_str(), "wb"));
  if (!f) throw std::runtime_error("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("PNG encoding failed for " + path.string());
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < height; ++y)
    png_write_row(png, const_cast<png_bytep>(rgb.data() + static_cast<std::size_t>(y) * width * 3));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

std::vector<std::uint8_t> read_png(const std::filesystem::path& path, int& width, int& height) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.string().c_str()))
    throw std::runtime_error("cannot read PNG " + path.string());
  image.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&image);
    throw std::runtime_error("cannot decode PNG " + path.string());
  }
  width = static_cast<int>(image.width);
  height = static_cast<int>(image.height);
  return buf;
}

std::vector<std::uint8_t> pca_rgb(const std::vector<float>& features, int channels, int height, int width) {
  const auto n = static_cast<Eigen::Index>(height) * width;
  if (features.size() != static_cast<std::size_t>(channels * n)) throw std::invalid_argument("feature size mismatch");
  Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> f(features.data(), channels, n);
  Eigen::MatrixXd x = f.cast<double>().transpose();  // [pixels, channels]
  x.rowwise() -= x.colwise().mean();
  const Eigen::MatrixXd cov = x.transpose() * x / std::max<double>(1.0, static_cast<double>(n));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  const int k = std::min(3, channels);
  Eigen::MatrixXd basis(channels, 3);
  basis.setZero();
  for (int i = 0; i < k; ++i) {
    Eigen::VectorXd v = eig.eigenvectors().col(channels - 1 - i);
    Eigen::Index arg;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    basis.col(i) = v;
  }
  const Eigen::MatrixXd proj = x * basis;
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(n) * 3, 128);
  for (int c = 0; c < 3; ++c) {
    const double lo = proj.col(c).minCoeff(), hi = proj.col(c).maxCoeff();
    if (!(hi - lo > 1e-9 * std::max(1.0, std::abs(hi)))) continue;
    for (Eigen::Index p = 0; p < n; ++p)
      rgb[static_cast<std::size_t>(p) * 3 + c] =
          static_cast<std::uint8_t>(std::lround(255.0 * (proj(p, c) - lo) / (hi - lo)));
  }
  return rgb;
}

}  // namespace cafe::plot
