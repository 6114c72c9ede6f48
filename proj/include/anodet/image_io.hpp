#pragma once

#include <filesystem>

#include <opencv2/core.hpp>
#include <torch/torch.h>

namespace anodet {

/// Reads an image file as 8-bit RGB. Throws FormatError when unreadable.
cv::Mat read_rgb(const std::filesystem::path& path);
/// Reads an 8-bit single-channel image. Throws FormatError when unreadable.
cv::Mat read_gray(const std::filesystem::path& path);
/// Writes 8-bit RGB or grayscale, creating parent directories.
void write_image(const std::filesystem::path& path, const cv::Mat& image);

/// CV_8UC3 RGB -> float (3,H,W) with v / 127.5 - 1.
torch::Tensor to_tensor(const cv::Mat& rgb);
/// (3,H,W) in [-1,1] -> CV_8UC3 RGB with round((v + 1) * 127.5), clamped.
cv::Mat to_mat(const torch::Tensor& image);

torch::Tensor load_image_tensor(const std::filesystem::path& path);
void save_image_tensor(const std::filesystem::path& path, const torch::Tensor& image);

}  // namespace anodet
