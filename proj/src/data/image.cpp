#include "g2aps/data/image.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace g2aps::data {

namespace {

Image from_mat_bgr(const cv::Mat& bgr) {
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  Image out(rgb.cols, rgb.rows);
  for (int y = 0; y < rgb.rows; ++y) {
    std::copy_n(rgb.ptr<std::uint8_t>(y), static_cast<std::size_t>(rgb.cols) * 3, out.pixel(0, y));
  }
  return out;
}

cv::Mat to_mat_rgb(const Image& image) {
  // cv::Mat wants a non-const pointer; the data is only read.
  return cv::Mat(image.height, image.width, CV_8UC3,
                 const_cast<std::uint8_t*>(image.rgb.data()));
}

}  // namespace

Image read_image(const std::filesystem::path& path) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw std::runtime_error("cannot read image: " + path.string());
  return from_mat_bgr(bgr);
}

void write_image(const Image& image, const std::filesystem::path& path) {
  cv::Mat bgr;
  cv::cvtColor(to_mat_rgb(image), bgr, cv::COLOR_RGB2BGR);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), bgr)) throw std::runtime_error("cannot write image: " + path.string());
}

Image resize_image(const Image& image, double scale) {
  if (scale == 1.0) return image;
  const int w = std::max(1, static_cast<int>(std::lround(image.width * scale)));
  const int h = std::max(1, static_cast<int>(std::lround(image.height * scale)));
  cv::Mat dst;
  cv::resize(to_mat_rgb(image), dst, cv::Size(w, h), 0, 0, cv::INTER_LINEAR);
  Image out(w, h);
  for (int y = 0; y < h; ++y) {
    std::copy_n(dst.ptr<std::uint8_t>(y), static_cast<std::size_t>(w) * 3, out.pixel(0, y));
  }
  return out;
}

}  // namespace g2aps::data
