#pragma once

#include <cstdio>
#include <fstream>
#include <string>

#include "ipsfuse/image.hpp"

namespace ipsfuse {

// Binary PGM (P5) / PPM (P6) reader and writer, 8- or 16-bit. 16-bit samples
// are big-endian per the netpbm format. Values scale to [0,1] by maxval.

namespace detail {

inline int pnm_next_token(std::istream& in, std::string& tok) {
  tok.clear();
  int c = in.get();
  while (c != EOF) {
    if (c == '#') {  // comment to end of line
      while (c != EOF && c != '\n') c = in.get();
    } else if (std::isspace(c)) {
      c = in.get();
    } else {
      break;
    }
  }
  while (c != EOF && !std::isspace(c)) {
    tok.push_back(static_cast<char>(c));
    c = in.get();
  }
  return tok.empty() ? EOF : 0;
}

inline std::size_t pnm_parse_uint(const std::string& tok, const std::string& path,
                                  const char* what) {
  std::size_t v = 0;
  for (char ch : tok) {
    if (ch < '0' || ch > '9')
      throw data_error(strcat_all(path, ": malformed header: bad ", what, " '", tok, "'"));
    v = v * 10 + static_cast<std::size_t>(ch - '0');
  }
  return v;
}

}  // namespace detail

inline Image read_image(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error(strcat_all(path, ": cannot open file"));
  std::string tok;
  if (detail::pnm_next_token(in, tok) == EOF || (tok != "P5" && tok != "P6"))
    throw data_error(strcat_all(path, ": malformed header: expected P5 or P6 magic, got '", tok,
                                "'"));
  std::size_t channels = tok == "P5" ? 1 : 3;
  std::size_t dims[3];
  const char* names[3] = {"width", "height", "maxval"};
  for (int i = 0; i < 3; ++i) {
    if (detail::pnm_next_token(in, tok) == EOF)
      throw data_error(strcat_all(path, ": malformed header: missing ", names[i]));
    dims[i] = detail::pnm_parse_uint(tok, path, names[i]);
  }
  std::size_t width = dims[0], height = dims[1], maxval = dims[2];
  if (width == 0 || height == 0 || maxval == 0 || maxval > 65535)
    throw data_error(strcat_all(path, ": malformed header: invalid dimensions ", width, "x",
                                height, " maxval ", maxval));
  // single whitespace byte after maxval was already consumed by the tokenizer
  std::size_t nsamp = width * height * channels;
  std::size_t bytes_per = maxval > 255 ? 2 : 1;
  std::vector<unsigned char> raw(nsamp * bytes_per);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(in.gcount()) != raw.size())
    throw data_error(strcat_all(path, ": truncated payload: expected ", raw.size(),
                                " bytes, got ", in.gcount()));
  Image img(height, width, channels);
  double denom = static_cast<double>(maxval);
  if (bytes_per == 1) {
    for (std::size_t i = 0; i < nsamp; ++i) img.pixels[i] = raw[i] / denom;
  } else {
    for (std::size_t i = 0; i < nsamp; ++i) {
      std::size_t v = (static_cast<std::size_t>(raw[2 * i]) << 8) | raw[2 * i + 1];
      img.pixels[i] = static_cast<double>(v) / denom;
    }
  }
  return img;
}

inline void write_image(const std::string& path, const Image& img, std::size_t maxval = 255) {
  if (img.channels != 1 && img.channels != 3)
    throw data_error(strcat_all(path, ": cannot write image with ", img.channels, " channels"));
  if (maxval == 0 || maxval > 65535)
    throw data_error(strcat_all(path, ": invalid maxval ", maxval));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error(strcat_all(path, ": cannot open file for writing"));
  out << (img.channels == 1 ? "P5" : "P6") << "\n"
      << img.width << " " << img.height << "\n"
      << maxval << "\n";
  std::size_t bytes_per = maxval > 255 ? 2 : 1;
  std::vector<unsigned char> raw(img.size() * bytes_per);
  for (std::size_t i = 0; i < img.size(); ++i) {
    double v = img.pixels[i];
    if (v < 0.0) v = 0.0;
    if (v > 1.0) v = 1.0;
    auto q = static_cast<std::size_t>(v * static_cast<double>(maxval) + 0.5);
    if (q > maxval) q = maxval;
    if (bytes_per == 1) {
      raw[i] = static_cast<unsigned char>(q);
    } else {
      raw[2 * i] = static_cast<unsigned char>(q >> 8);
      raw[2 * i + 1] = static_cast<unsigned char>(q & 0xff);
    }
  }
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!out) throw data_error(strcat_all(path, ": write failed"));
}

}  // namespace ipsfuse
