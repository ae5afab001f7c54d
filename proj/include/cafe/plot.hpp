#pragma once

// Static report figures: SVG charts and PNG images.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace cafe::plot {

struct Series {
  std::string name;
  std::vector<double> x, y;
};

struct Axes {
  std::string title, x_label, y_label;
};

std::string line_chart(const std::vector<Series>& series, const Axes& axes);

struct Group {
  std::string label;
  std::vector<double> values;
};

/// Quartile box with 1.5 IQR whiskers per group.
std::string box_plot(const std::vector<Group>& groups, const Axes& axes);

std::string bar_chart(const std::vector<std::string>& labels, const std::vector<double>& values, const Axes& axes);

void write_text(const std::filesystem::path& path, const std::string& text);

/// 8-bit RGB, row-major interleaved.
void write_png(const std::filesystem::path& path, int width, int height, const std::vector<std::uint8_t>& rgb);
std::vector<std::uint8_t> read_png(const std::filesystem::path& path, int& width, int& height);

/// Projects a [C, H, W] feature map onto its first three principal
/// components and scales each to 0..255. Components with no variance render
/// as mid-gray.
std::vector<std::uint8_t> pca_rgb(const std::vector<float>& features, int channels, int height, int width);

}  // namespace cafe::plot
