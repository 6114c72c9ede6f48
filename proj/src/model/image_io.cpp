#include "anodet/image_io.hpp"

#include <cstring>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "anodet/error.hpp"

namespace anodet {

cv::Mat read_rgb(const std::filesystem::path& path) {
    cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (bgr.empty()) throw FormatError("cannot read image " + path.string());
    cv::Mat rgb;
    cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
    return rgb;
}

cv::Mat read_gray(const std::filesystem::path& path) {
    cv::Mat gray = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
    if (gray.empty()) throw FormatError("cannot read image " + path.string());
    return gray;
}

void write_image(const std::filesystem::path& path, const cv::Mat& image) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    cv::Mat out = image;
    if (image.channels() == 3) cv::cvtColor(image, out, cv::COLOR_RGB2BGR);
    if (!cv::imwrite(path.string(), out)) throw Error("cannot write image " + path.string());
}

torch::Tensor to_tensor(const cv::Mat& rgb) {
    if (rgb.empty() || rgb.type() != CV_8UC3) throw InvalidInputError("to_tensor: expected a non-empty 8-bit RGB image");
    const cv::Mat contiguous = rgb.isContinuous() ? rgb : rgb.clone();
    auto hwc = torch::from_blob(contiguous.data, {contiguous.rows, contiguous.cols, 3}, torch::kUInt8);
    return hwc.permute({2, 0, 1}).to(torch::kFloat32).div(127.5).sub(1.0).contiguous();
}

cv::Mat to_mat(const torch::Tensor& image) {
    if (image.dim() != 3 || image.size(0) != 3) throw ShapeError("to_mat: expected a (3,H,W) tensor");
    auto hwc = image.detach()
                   .to(torch::kFloat32)
                   .add(1.0)
                   .mul(127.5)
                   .round()
                   .clamp(0, 255)
                   .to(torch::kUInt8)
                   .permute({1, 2, 0})
                   .contiguous();
    cv::Mat out(static_cast<int>(hwc.size(0)), static_cast<int>(hwc.size(1)), CV_8UC3);
    std::memcpy(out.data, hwc.data_ptr<std::uint8_t>(), static_cast<std::size_t>(hwc.numel()));
    return out;
}

torch::Tensor load_image_tensor(const std::filesystem::path& path) { return to_tensor(read_rgb(path)); }

void save_image_tensor(const std::filesystem::path& path, const torch::Tensor& image) {
    write_image(path, to_mat(image));
}

}  // namespace anodet
