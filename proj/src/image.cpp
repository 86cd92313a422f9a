#include "dask/image.hpp"

#include <algorithm>
#include <cmath>
#include <cctype>
#include <fstream>
#include <sstream>

namespace dask {

Image::Image(Index h, Index w, double fill) : height(h), width(w) {
  if (h <= 0 || w <= 0) throw ShapeError("image dimensions must be positive");
  pixels = Eigen::ArrayXd::Constant(channels * h * w, fill);
}

TransferKernel TransferKernel::identity(Index k) {
  return center_diagonal(Eigen::Array3d::Ones(), Eigen::Array3d::Zero(), k);
}

TransferKernel TransferKernel::center_diagonal(const Eigen::Array3d& scale, const Eigen::Array3d& shift,
                                               Index k) {
  if (k <= 0 || k % 2 == 0) throw ShapeError("transfer kernel size must be odd");
  TransferKernel tk;
  tk.k = k;
  tk.weights = Eigen::ArrayXd::Zero(weight_count(k));
  const Index r = (k - 1) / 2;
  for (Index c = 0; c < Image::channels; ++c) tk.weight(c, c, r, r) = scale(c);
  tk.bias = shift;
  return tk;
}

TransferKernel TransferKernel::decode(std::span<const double> values, Index k) {
  if (k <= 0 || k % 2 == 0) throw ShapeError("transfer kernel size must be odd");
  if (static_cast<Index>(values.size()) != encoded_size(k)) {
    throw ShapeError("transfer kernel encoding has wrong length");
  }
  TransferKernel tk;
  tk.k = k;
  const Index nw = weight_count(k);
  tk.weights = Eigen::Map<const Eigen::ArrayXd>(values.data(), nw);
  tk.bias = Eigen::Map<const Eigen::Array3d>(values.data() + nw);
  return tk;
}

Eigen::ArrayXd TransferKernel::encode() const {
  Eigen::ArrayXd out(encoded_size(k));
  out << weights, bias;
  return out;
}

std::string to_string(AugmentForm form) { return form == AugmentForm::shift_scale ? "shift_scale" : "adain"; }

AugmentForm augment_form_from_string(const std::string& s) {
  if (s == "shift_scale") return AugmentForm::shift_scale;
  if (s == "adain") return AugmentForm::adain;
  throw ConfigError("unknown augmentation form '" + s + "' (expected shift_scale or adain)");
}

ChannelStats channel_stats(const Image& img) {
  if (img.empty()) throw ShapeError("channel_stats: empty image");
  ChannelStats s;
  for (Index c = 0; c < Image::channels; ++c) {
    const auto ch = img.channel(c);
    s.mu(c) = ch.mean();
    s.sigma(c) = std::sqrt((ch - s.mu(c)).square().mean());
  }
  return s;
}

DomainStats domain_stats(std::span<const Image> images) {
  if (images.size() < 2) throw ValueError("domain_stats: at least two images are required");
  const Index n = static_cast<Index>(images.size());
  Eigen::Array3Xd mus(3, n), sigmas(3, n);
  for (Index i = 0; i < n; ++i) {
    const ChannelStats s = channel_stats(images[static_cast<std::size_t>(i)]);
    mus.col(i) = s.mu;
    sigmas.col(i) = s.sigma;
  }
  // Shifted by the first column so identical inputs give exactly zero.
  auto pop_std = [](const Eigen::Array3Xd& v) {
    const Eigen::Array3Xd d = v.colwise() - Eigen::Array3d(v.col(0));
    const Eigen::Array3d m = d.rowwise().mean();
    return Eigen::Array3d(((d.colwise() - m).square().rowwise().mean()).sqrt());
  };
  return {pop_std(mus), pop_std(sigmas)};
}

Image restyle_channels(const Image& img, const ChannelStats& source, const Eigen::Array3d& mu_target,
                       const Eigen::Array3d& sigma_target, AugmentForm form) {
  Image out = img;
  for (Index c = 0; c < Image::channels; ++c) {
    const double ratio = sigma_target(c) / std::max(source.sigma(c), kSigmaFloor);
    auto ch = out.channel(c);
    if (form == AugmentForm::shift_scale) {
      ch = (img.channel(c) + (mu_target(c) - source.mu(c))) * ratio;
    } else {
      ch = img.channel(c) * ratio + (mu_target(c) - source.mu(c) * ratio);
    }
  }
  return out;
}

AugmentedImage augment_distribution(const Image& img, const DomainStats& ds, Rng& rng,
                                    AugmentForm form) {
  const ChannelStats src = channel_stats(img);
  std::normal_distribution<double> unit(0.0, 1.0);
  AugmentedImage out;
  for (Index c = 0; c < Image::channels; ++c) {
    out.mu_sampled(c) = src.mu(c) + ds.sigma_of_mu(c) * unit(rng);
    out.sigma_sampled(c) = std::max(src.sigma(c) + ds.sigma_of_sigma(c) * unit(rng), kSigmaFloor);
  }
  out.image = restyle_channels(img, src, out.mu_sampled, out.sigma_sampled, form);
  return out;
}

std::vector<double> gaussian_taps(double sigma) {
  if (!(sigma >= 0.0)) throw ValueError("gaussian blur sigma must be non-negative");
  if (sigma == 0.0) return {1.0};
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> taps(static_cast<std::size_t>(2 * radius + 1));
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double w = std::exp(-(i * i) / (2.0 * sigma * sigma));
    taps[static_cast<std::size_t>(i + radius)] = w;
    total += w;
  }
  for (double& w : taps) w /= total;
  return taps;
}

Image gaussian_blur(const Image& img, double sigma) {
  const std::vector<double> taps = gaussian_taps(sigma);
  if (taps.size() == 1) return img;
  const Index r = static_cast<Index>(taps.size() / 2);
  const Index h = img.height, w = img.width;
  Image tmp(h, w), out(h, w);
  for (Index c = 0; c < Image::channels; ++c) {
    for (Index m = 0; m < h; ++m) {
      for (Index n = 0; n < w; ++n) {
        double acc = 0.0;
        for (Index t = -r; t <= r; ++t) {
          acc += taps[static_cast<std::size_t>(t + r)] * img.at(c, m, std::clamp(n + t, Index{0}, w - 1));
        }
        tmp.at(c, m, n) = acc;
      }
    }
    for (Index m = 0; m < h; ++m) {
      for (Index n = 0; n < w; ++n) {
        double acc = 0.0;
        for (Index t = -r; t <= r; ++t) {
          acc += taps[static_cast<std::size_t>(t + r)] * tmp.at(c, std::clamp(m + t, Index{0}, h - 1), n);
        }
        out.at(c, m, n) = acc;
      }
    }
  }
  return out;
}

Image hflip(const Image& img) {
  Image out = img;
  for (Index c = 0; c < Image::channels; ++c) {
    for (Index m = 0; m < img.height; ++m) {
      for (Index n = 0; n < img.width; ++n) out.at(c, m, n) = img.at(c, m, img.width - 1 - n);
    }
  }
  return out;
}

Image clip01(Image img) {
  img.pixels = img.pixels.max(0.0).min(1.0);
  return img;
}

Image apply_transfer_kernel(const Image& img, const TransferKernel& tk) {
  if (tk.weights.size() != TransferKernel::weight_count(tk.k)) {
    throw ShapeError("apply_transfer_kernel: weight count does not match kernel size");
  }
  Tape tape(Tape::Mode::inference);
  Var x = constant(to_tensor(img));
  Var w = constant(Tensor({Image::channels, Image::channels, tk.k, tk.k}, tk.weights));
  Var b = constant(Tensor({Image::channels}, tk.bias));
  return image_from_tensor(conv2d_same(tape, x, w, b).value());
}

Image cop_transfer(const Image& img, const Eigen::Array3d& scale, const Eigen::Array3d& shift) {
  Image out = img;
  for (Index c = 0; c < Image::channels; ++c) out.channel(c) = scale(c) * img.channel(c) + shift(c);
  return out;
}

Tensor to_tensor(std::span<const Image> images) {
  if (images.empty()) throw ShapeError("to_tensor: empty image list");
  const Image& first = images.front();
  const Index n = static_cast<Index>(images.size());
  const Index per = first.pixels.size();
  Tensor t({n, Image::channels, first.height, first.width});
  for (Index i = 0; i < n; ++i) {
    const Image& img = images[static_cast<std::size_t>(i)];
    if (!img.same_shape(first)) throw ShapeError("to_tensor: images differ in size");
    t.data.segment(i * per, per) = img.pixels;
  }
  return t;
}

Tensor to_tensor(const Image& img) { return to_tensor(std::span<const Image>(&img, 1)); }

Image image_from_tensor(const Tensor& t, Index b) {
  if (t.rank() != 4 || t.dim(1) != Image::channels) {
    throw ShapeError("image_from_tensor: expected B x 3 x H x W, got " + shape_string(t.shape));
  }
  if (b < 0 || b >= t.dim(0)) throw ShapeError("image_from_tensor: sample index out of range");
  Image img(t.dim(2), t.dim(3));
  img.pixels = t.data.segment(b * img.pixels.size(), img.pixels.size());
  return img;
}

void write_ppm(const std::filesystem::path& path, const Image& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open " + path.string() + " for writing");
  os << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  std::vector<unsigned char> buf(static_cast<std::size_t>(img.plane() * Image::channels));
  std::size_t i = 0;
  for (Index m = 0; m < img.height; ++m) {
    for (Index n = 0; n < img.width; ++n) {
      for (Index c = 0; c < Image::channels; ++c) {
        const double v = std::clamp(img.at(c, m, n), 0.0, 1.0);
        buf[i++] = static_cast<unsigned char>(std::lround(v * 255.0));
      }
    }
  }
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!os) throw DataError("failed writing " + path.string());
}

namespace {

std::string next_token(std::istream& is) {
  std::string tok;
  char ch;
  while (is.get(ch)) {
    if (ch == '#') {
      std::string line;
      std::getline(is, line);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(ch);
  }
  return tok;
}

}  // namespace

Image read_ppm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  if (next_token(is) != "P6") throw DataError(path.string() + ": not a binary PPM (P6)");
  Index w = 0, h = 0;
  int maxval = 0;
  try {
    w = std::stol(next_token(is));
    h = std::stol(next_token(is));
    maxval = std::stoi(next_token(is));
  } catch (const std::exception&) {
    throw DataError(path.string() + ": malformed PPM header");
  }
  if (w <= 0 || h <= 0 || maxval != 255) {
    throw DataError(path.string() + ": unsupported PPM geometry or maxval");
  }
  std::vector<unsigned char> buf(static_cast<std::size_t>(w * h * Image::channels));
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (is.gcount() != static_cast<std::streamsize>(buf.size())) {
    throw DataError(path.string() + ": truncated pixel data");
  }
  Image img(h, w);
  std::size_t i = 0;
  for (Index m = 0; m < h; ++m) {
    for (Index n = 0; n < w; ++n) {
      for (Index c = 0; c < Image::channels; ++c) img.at(c, m, n) = buf[i++] / 255.0;
    }
  }
  return img;
}

}  // namespace dask
