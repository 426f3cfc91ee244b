#pragma once

// Image decoding/encoding (OpenCV imgcodecs) and the "load, then align or
// centre-crop" step shared by dataset embedding and session scoring.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "facetune/preprocess.hpp"

namespace facetune {

/// Decodes to 8-bit RGB (grayscale inputs are expanded to three channels).
inline FaceImage load_image(const std::filesystem::path& path) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw FormatError("cannot decode image " + path.string());
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  FaceImage img;
  img.width = rgb.cols;
  img.height = rgb.rows;
  img.channels = 3;
  img.pixels.resize(static_cast<std::size_t>(rgb.cols) * rgb.rows * 3);
  for (int y = 0; y < rgb.rows; ++y) {
    const auto* row = rgb.ptr<std::uint8_t>(y);
    std::copy(row, row + rgb.cols * 3, img.pixels.begin() + static_cast<std::ptrdiff_t>(y) * rgb.cols * 3);
  }
  img.source = path.generic_string();
  img.subject = path.parent_path().filename().string();
  return img;
}

inline void save_png(const std::filesystem::path& path, const FaceImage& img) {
  if (img.channels != 3 && img.channels != 1) throw ShapeError("save_png expects 1 or 3 channels");
  cv::Mat m(img.height, img.width, img.channels == 3 ? CV_8UC3 : CV_8UC1,
            const_cast<std::uint8_t*>(img.pixels.data()));
  cv::Mat out;
  if (img.channels == 3) {
    cv::cvtColor(m, out, cv::COLOR_RGB2BGR);
  } else {
    out = m;
  }
  if (!cv::imwrite(path.string(), out)) throw FormatError("cannot write image " + path.string());
}

/// Loads `path` and brings it to 224x224x3: aligned through its `.lm5`
/// sidecar when one exists, otherwise centre-cropped with a warning.
inline FaceImage load_face(const std::filesystem::path& path, std::vector<Warning>* warnings = nullptr,
                           const Landmarks5& tmpl = canonical_template()) {
  FaceImage img = load_image(path);
  const auto lm_path = landmarks_path_for(path);
  if (std::filesystem::exists(lm_path)) return align_face(img, read_landmarks(lm_path), tmpl);
  if (warnings) warnings->push_back({path.generic_string(), "no-landmarks-sidecar-center-cropped"});
  return center_crop_resize(img);
}

}  // namespace facetune
