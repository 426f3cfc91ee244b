#pragma once

// Encoder backed by an exported ONNX model, run through OpenCV's dnn
// module. Any model taking 1x3x224x224 and returning 1xD works.

#include <filesystem>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/dnn.hpp>

#include "facetune/encoder.hpp"

namespace facetune {

class OnnxBackend final : public EncoderBackend {
 public:
  explicit OnnxBackend(BackendManifest manifest) : manifest_(std::move(manifest)) {
    // Load once eagerly so a bad model file fails at construction.
    nets_.push_back(load_net());
    check_output_width(*nets_.back());
  }

  static std::unique_ptr<OnnxBackend> from_manifest(const std::filesystem::path& manifest_path) {
    return std::make_unique<OnnxBackend>(BackendManifest::load(manifest_path));
  }

  std::string name() const override {
    return "onnx(" + manifest_.model_path.filename().string() +
           (manifest_.source.empty() ? "" : "," + manifest_.source) + ")";
  }
  std::size_t dim() const override { return manifest_.dim; }

  std::vector<double> encode(const FaceImage& img) const override {
    auto tensor = to_input_tensor(img, manifest_);
    auto net = acquire();
    std::vector<double> out;
    try {
      out = run(*net, tensor);
    } catch (...) {
      release(std::move(net));
      throw;
    }
    release(std::move(net));
    return out;
  }

  const BackendManifest& manifest() const noexcept { return manifest_; }

 private:
  // cv::dnn::Net::forward mutates internal buffers, so each concurrent
  // caller borrows its own network from the pool.
  std::unique_ptr<cv::dnn::Net> load_net() const {
    if (!std::filesystem::is_regular_file(manifest_.model_path)) {
      throw BackendLoadError("model file " + manifest_.model_path.string() + " not found");
    }
    try {
      auto net = std::make_unique<cv::dnn::Net>(cv::dnn::readNetFromONNX(manifest_.model_path.string()));
      if (net->empty()) throw BackendLoadError("model file " + manifest_.model_path.string() + " is empty");
      return net;
    } catch (const cv::Exception& e) {
      throw BackendLoadError("cannot load " + manifest_.model_path.string() + ": " + e.what());
    }
  }

  void check_output_width(cv::dnn::Net& net) const {
    std::vector<float> probe(3 * static_cast<std::size_t>(kAlignedSize) * kAlignedSize, 0.0f);
    std::vector<double> out;
    try {
      out = run(net, probe);
    } catch (const cv::Exception& e) {
      throw BackendLoadError("model rejected a 1x3x224x224 input: " + std::string(e.what()));
    }
    if (out.size() != manifest_.dim) {
      throw BackendLoadError("model output width " + std::to_string(out.size()) + " does not match manifest dim " +
                             std::to_string(manifest_.dim));
    }
  }

  static std::vector<double> run(cv::dnn::Net& net, std::vector<float>& tensor) {
    const int shape[] = {1, 3, kAlignedSize, kAlignedSize};
    cv::Mat blob(4, shape, CV_32F, tensor.data());
    net.setInput(blob);
    cv::Mat result = net.forward();
    cv::Mat flat = result.reshape(1, 1);
    std::vector<double> out(static_cast<std::size_t>(flat.total()));
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = flat.at<float>(0, static_cast<int>(i));
    return out;
  }

  std::unique_ptr<cv::dnn::Net> acquire() const {
    {
      std::lock_guard lock(mutex_);
      if (!nets_.empty()) {
        auto net = std::move(nets_.back());
        nets_.pop_back();
        return net;
      }
    }
    return load_net();
  }

  void release(std::unique_ptr<cv::dnn::Net> net) const {
    std::lock_guard lock(mutex_);
    nets_.push_back(std::move(net));
  }

  BackendManifest manifest_;
  mutable std::mutex mutex_;
  mutable std::vector<std::unique_ptr<cv::dnn::Net>> nets_;
};

}  // namespace facetune
