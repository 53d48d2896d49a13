#include "mcm/image_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <string>

#include "mcm/errors.hpp"

MCM_BEGIN_NAMESPACE

namespace {

// Reads one whitespace-delimited header integer, skipping '#' comments.
std::size_t header_int(const std::string& buf, std::size_t& pos, const std::string& name) {
  for (;;) {
    while (pos < buf.size() && std::isspace(static_cast<unsigned char>(buf[pos]))) ++pos;
    if (pos < buf.size() && buf[pos] == '#') {
      while (pos < buf.size() && buf[pos] != '\n') ++pos;
      continue;
    }
    break;
  }
  std::size_t start = pos;
  std::size_t v = 0;
  while (pos < buf.size() && std::isdigit(static_cast<unsigned char>(buf[pos]))) {
    v = v * 10 + static_cast<std::size_t>(buf[pos] - '0');
    if (v > 1u << 20) throw IngestionError(name + ": header value too large");
    ++pos;
  }
  if (pos == start) throw IngestionError(name + ": malformed PNM header");
  return v;
}

}  // namespace

Image read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image " + path.string());
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string name = path.string();
  if (buf.size() < 2 || buf[0] != 'P' || (buf[1] != '6' && buf[1] != '5')) {
    throw IngestionError(name + ": not a binary PPM/PGM file");
  }
  Image img;
  img.channels = buf[1] == '6' ? 3 : 1;
  std::size_t pos = 2;
  img.width = header_int(buf, pos, name);
  img.height = header_int(buf, pos, name);
  const std::size_t maxval = header_int(buf, pos, name);
  if (img.width == 0 || img.height == 0) throw IngestionError(name + ": zero image extent");
  if (maxval == 0 || maxval > 255) throw IngestionError(name + ": only 8-bit PNM is supported");
  if (pos >= buf.size() || !std::isspace(static_cast<unsigned char>(buf[pos]))) {
    throw IngestionError(name + ": malformed PNM header");
  }
  ++pos;
  const std::size_t count = img.width * img.height * img.channels;
  if (buf.size() - pos < count) throw IngestionError(name + ": truncated pixel data");
  img.pixels.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    img.pixels[i] = static_cast<float>(static_cast<unsigned char>(buf[pos + i])) / static_cast<float>(maxval);
  }
  return img;
}

void write_pnm(const std::filesystem::path& path, const Image& image) {
  if (image.channels != 1 && image.channels != 3) {
    throw ConfigError("PNM output needs 1 or 3 channels, got " + std::to_string(image.channels));
  }
  if (image.pixels.size() != image.height * image.width * image.channels) {
    throw DimensionError("image buffer does not match its geometry");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write image " + path.string());
  out << (image.channels == 3 ? "P6" : "P5") << '\n' << image.width << ' ' << image.height << "\n255\n";
  std::string bytes(image.pixels.size(), '\0');
  for (std::size_t i = 0; i < image.pixels.size(); ++i) {
    const float v = std::clamp(std::isfinite(image.pixels[i]) ? image.pixels[i] : 0.0f, 0.0f, 1.0f);
    bytes[i] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f)));
  }
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing image " + path.string());
}

Image resize_bilinear(const Image& image, std::size_t height, std::size_t width) {
  if (height == 0 || width == 0) throw ConfigError("resize target must be non-empty");
  if (image.height == height && image.width == width) return image;
  Image out;
  out.height = height;
  out.width = width;
  out.channels = image.channels;
  out.pixels.resize(height * width * image.channels);
  const double sy = static_cast<double>(image.height) / static_cast<double>(height);
  const double sx = static_cast<double>(image.width) / static_cast<double>(width);
  for (std::size_t y = 0; y < height; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(image.height - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, image.height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < width; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(image.width - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, image.width - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < image.channels; ++c) {
        const double top = image.at(y0, x0, c) * (1.0 - wx) + image.at(y0, x1, c) * wx;
        const double bot = image.at(y1, x0, c) * (1.0 - wx) + image.at(y1, x1, c) * wx;
        out.at(y, x, c) = static_cast<float>(top * (1.0 - wy) + bot * wy);
      }
    }
  }
  return out;
}

Image center_crop_resize(const Image& image, std::size_t height, std::size_t width) {
  if (height == 0 || width == 0) throw ConfigError("resize target must be non-empty");
  // Crop to the target aspect ratio: keep full height or full width.
  std::size_t ch = image.height;
  std::size_t cw = image.width;
  if (image.width * height > image.height * width) {
    cw = std::max<std::size_t>(1, image.height * width / height);
  } else {
    ch = std::max<std::size_t>(1, image.width * height / width);
  }
  Image crop;
  crop.height = ch;
  crop.width = cw;
  crop.channels = image.channels;
  crop.pixels.resize(ch * cw * image.channels);
  const std::size_t top = (image.height - ch) / 2;
  const std::size_t left = (image.width - cw) / 2;
  for (std::size_t y = 0; y < ch; ++y) {
    for (std::size_t x = 0; x < cw; ++x) {
      for (std::size_t c = 0; c < image.channels; ++c) crop.at(y, x, c) = image.at(top + y, left + x, c);
    }
  }
  return resize_bilinear(crop, height, width);
}

Image convert_channels(const Image& image, std::size_t channels) {
  if (image.channels == channels) return image;
  Image out;
  out.height = image.height;
  out.width = image.width;
  out.channels = channels;
  out.pixels.resize(image.height * image.width * channels);
  const std::size_t n = image.height * image.width;
  if (image.channels == 1 && channels == 3) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t c = 0; c < 3; ++c) out.pixels[i * 3 + c] = image.pixels[i];
    }
  } else if (image.channels == 3 && channels == 1) {
    for (std::size_t i = 0; i < n; ++i) {
      out.pixels[i] = 0.299f * image.pixels[i * 3] + 0.587f * image.pixels[i * 3 + 1] + 0.114f * image.pixels[i * 3 + 2];
    }
  } else {
    throw ConfigError("cannot convert " + std::to_string(image.channels) + " channels to " + std::to_string(channels));
  }
  return out;
}

MCM_END_NAMESPACE
