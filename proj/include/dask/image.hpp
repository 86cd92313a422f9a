#pragma once

#include <Eigen/Core>

#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dask/rng.hpp"
#include "dask/tensor.hpp"

namespace dask {

/// RGB raster. Pixels are stored channel-planar (R plane, G plane, B plane),
/// each plane row-major, so an image is directly a 1 x 3 x H x W tensor.
struct Image {
  static constexpr Index channels = 3;

  Index height = 0;
  Index width = 0;
  Eigen::ArrayXd pixels;

  Image() = default;
  Image(Index h, Index w, double fill = 0.0);

  Index plane() const { return height * width; }
  bool empty() const { return pixels.size() == 0; }

  double& at(Index c, Index m, Index n) { return pixels(c * plane() + m * width + n); }
  double at(Index c, Index m, Index n) const { return pixels(c * plane() + m * width + n); }

  auto channel(Index c) { return pixels.segment(c * plane(), plane()); }
  auto channel(Index c) const { return pixels.segment(c * plane(), plane()); }

  bool same_shape(const Image& o) const { return height == o.height && width == o.width; }
};

struct ChannelStats {
  Eigen::Array3d mu = Eigen::Array3d::Zero();
  Eigen::Array3d sigma = Eigen::Array3d::Zero();
};

struct DomainStats {
  Eigen::Array3d sigma_of_mu = Eigen::Array3d::Zero();
  Eigen::Array3d sigma_of_sigma = Eigen::Array3d::Zero();
};

/// Per-image convolution restyling: C x C x k x k weights (row-major,
/// output channel outermost) plus C biases.
struct TransferKernel {
  Index k = 3;
  Eigen::ArrayXd weights;
  Eigen::Array3d bias = Eigen::Array3d::Zero();

  static Index weight_count(Index k) { return Image::channels * Image::channels * k * k; }
  static Index encoded_size(Index k) { return weight_count(k) + Image::channels; }

  static TransferKernel identity(Index k = 3);
  /// Only the centre taps of matching channels are non-zero.
  static TransferKernel center_diagonal(const Eigen::Array3d& scale, const Eigen::Array3d& shift,
                                        Index k = 3);
  /// Inverse of encode(): `values` holds weights then biases.
  static TransferKernel decode(std::span<const double> values, Index k);

  Eigen::ArrayXd encode() const;
  double& weight(Index out, Index in, Index p, Index q) {
    return weights(((out * Image::channels + in) * k + p) * k + q);
  }
};

enum class AugmentForm {
  shift_scale,  ///< ((x - mu + mu') / sigma) * sigma'
  adain,        ///< ((x - mu) / sigma) * sigma' + mu'
};

std::string to_string(AugmentForm form);
AugmentForm augment_form_from_string(const std::string& s);

/// Lower bound applied to source and sampled channel deviations.
inline constexpr double kSigmaFloor = 1e-4;

ChannelStats channel_stats(const Image& img);
DomainStats domain_stats(std::span<const Image> images);

struct AugmentedImage {
  Image image;
  Eigen::Array3d mu_sampled;
  Eigen::Array3d sigma_sampled;
};

/// Channel restyling with explicitly given target statistics. No clipping.
Image restyle_channels(const Image& img, const ChannelStats& source, const Eigen::Array3d& mu_target,
                       const Eigen::Array3d& sigma_target, AugmentForm form);

/// Samples mu' ~ N(mu, sigma_of_mu^2), sigma' ~ N(sigma, sigma_of_sigma^2)
/// per channel and restyles the image. No clipping.
AugmentedImage augment_distribution(const Image& img, const DomainStats& ds, Rng& rng,
                                    AugmentForm form = AugmentForm::shift_scale);

std::vector<double> gaussian_taps(double sigma);
Image gaussian_blur(const Image& img, double sigma);
Image hflip(const Image& img);
Image clip01(Image img);

/// Same-size convolution with replicate padding. Output is not clipped.
Image apply_transfer_kernel(const Image& img, const TransferKernel& tk);
/// Per-channel affine out = scale * x + shift.
Image cop_transfer(const Image& img, const Eigen::Array3d& scale, const Eigen::Array3d& shift);

/// Stacks equally sized images into a B x 3 x H x W tensor.
Tensor to_tensor(std::span<const Image> images);
Tensor to_tensor(const Image& img);
/// Extracts sample b of a B x 3 x H x W tensor.
Image image_from_tensor(const Tensor& t, Index b = 0);

/// Binary PPM (P6, maxval 255). Values are clipped to [0,1] and rounded.
void write_ppm(const std::filesystem::path& path, const Image& img);
Image read_ppm(const std::filesystem::path& path);

}  // namespace dask
