#pragma once

#include <cstdint>
#include <vector>

#include "ipsfuse/common.hpp"
#include "ipsfuse/tensor.hpp"

namespace ipsfuse {

// H x W x J raster with intensities in [0,1], interleaved row-major:
// index = (h*W + w)*J + j. J is 1 (gray) or 3 (rgb).
struct Image {
  std::size_t height = 0, width = 0, channels = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, std::size_t j, double fill = 0.0)
      : height(h), width(w), channels(j), pixels(h * w * j, fill) {}

  std::size_t size() const { return pixels.size(); }
  double& at(std::size_t h, std::size_t w, std::size_t j) {
    return pixels[(h * width + w) * channels + j];
  }
  double at(std::size_t h, std::size_t w, std::size_t j) const {
    return pixels[(h * width + w) * channels + j];
  }
  bool same_dims(const Image& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }
};

// Binary mask with the same dimensions as its paired image; entries in {0,1}.
struct BinaryMask {
  std::size_t height = 0, width = 0, channels = 0;
  std::vector<std::uint8_t> bits;

  BinaryMask() = default;
  BinaryMask(std::size_t h, std::size_t w, std::size_t j, std::uint8_t fill = 1)
      : height(h), width(w), channels(j), bits(h * w * j, fill) {}

  std::size_t size() const { return bits.size(); }
  bool same_dims(const Image& img) const {
    return height == img.height && width == img.width && channels == img.channels;
  }
};

inline void require_same_dims(const Image& a, const Image& b, const char* op) {
  if (!a.same_dims(b))
    throw data_error(strcat_all(op, ": image dimensions differ, ", a.height, "x", a.width, "x",
                                a.channels, " vs ", b.height, "x", b.width, "x", b.channels));
}

inline Image crop(const Image& img, std::size_t r0, std::size_t c0, std::size_t size) {
  if (r0 + size > img.height || c0 + size > img.width)
    throw data_error(strcat_all("crop: ", size, "px window at (", r0, ",", c0,
                                ") exceeds image ", img.height, "x", img.width));
  Image out(size, size, img.channels);
  for (std::size_t r = 0; r < size; ++r)
    for (std::size_t c = 0; c < size; ++c)
      for (std::size_t j = 0; j < img.channels; ++j)
        out.at(r, c, j) = img.at(r0 + r, c0 + c, j);
  return out;
}

// luminance as plain channel mean
inline std::vector<double> gray_mean(const Image& img) {
  std::vector<double> g(img.height * img.width);
  for (std::size_t i = 0; i < g.size(); ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < img.channels; ++j) acc += img.pixels[i * img.channels + j];
    g[i] = acc / static_cast<double>(img.channels);
  }
  return g;
}

// ITU-R 601 luma; identity for single-channel images
inline std::vector<double> gray_luma601(const Image& img) {
  std::vector<double> g(img.height * img.width);
  if (img.channels == 1) {
    g = img.pixels;
  } else {
    for (std::size_t i = 0; i < g.size(); ++i)
      g[i] = 0.299 * img.pixels[i * 3] + 0.587 * img.pixels[i * 3 + 1] +
             0.114 * img.pixels[i * 3 + 2];
  }
  return g;
}

// planar [J x H x W] tensor from an interleaved image
template <typename T>
Tensor<T> image_to_tensor(const Image& img) {
  std::vector<T> data(img.size());
  std::size_t hw = img.height * img.width;
  for (std::size_t i = 0; i < hw; ++i)
    for (std::size_t j = 0; j < img.channels; ++j)
      data[j * hw + i] = static_cast<T>(img.pixels[i * img.channels + j]);
  return Tensor<T>::from_data({img.channels, img.height, img.width}, std::move(data));
}

template <typename T>
Image tensor_to_image(const Tensor<T>& t) {
  if (t.shape().size() != 3)
    throw data_error(strcat_all("tensor_to_image: expected [J,H,W], got ", shape_str(t.shape())));
  Image img(t.shape()[1], t.shape()[2], t.shape()[0]);
  std::size_t hw = img.height * img.width;
  for (std::size_t i = 0; i < hw; ++i)
    for (std::size_t j = 0; j < img.channels; ++j)
      img.pixels[i * img.channels + j] = static_cast<double>(t.data()[j * hw + i]);
  return img;
}

inline Image mask_to_image(const BinaryMask& m) {
  Image img(m.height, m.width, m.channels);
  for (std::size_t i = 0; i < m.size(); ++i) img.pixels[i] = m.bits[i] ? 1.0 : 0.0;
  return img;
}

inline BinaryMask mask_from_image(const Image& img) {
  BinaryMask m(img.height, img.width, img.channels);
  for (std::size_t i = 0; i < img.size(); ++i) m.bits[i] = img.pixels[i] >= 0.5 ? 1 : 0;
  return m;
}

}  // namespace ipsfuse
