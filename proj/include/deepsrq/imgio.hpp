#ifndef DEEPSRQ_IMGIO_HPP
#define DEEPSRQ_IMGIO_HPP

// Raster image container and PNG/BMP codecs. This is the only place in the
// library that knows about on-disk pixel encodings.

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace deepsrq {

enum class ImageErrc {
  MissingFile,
  UnsupportedFormat,
  CorruptStream,
  IoFailure,
  AlreadyGrayscale,
  BadDimensions,
};

inline const char* to_string(ImageErrc c) {
  switch (c) {
    case ImageErrc::MissingFile: return "MissingFile";
    case ImageErrc::UnsupportedFormat: return "UnsupportedFormat";
    case ImageErrc::CorruptStream: return "CorruptStream";
    case ImageErrc::IoFailure: return "IoFailure";
    case ImageErrc::AlreadyGrayscale: return "AlreadyGrayscale";
    case ImageErrc::BadDimensions: return "BadDimensions";
  }
  return "Unknown";
}

class ImageError : public std::runtime_error {
 public:
  ImageError(ImageErrc code, std::string path, const std::string& detail = {})
      : std::runtime_error(std::string(to_string(code)) + ": " + path +
                           (detail.empty() ? "" : " (" + detail + ")")),
        code_(code),
        path_(std::move(path)) {}

  ImageErrc code() const noexcept { return code_; }
  const std::string& path() const noexcept { return path_; }

 private:
  ImageErrc code_;
  std::string path_;
};

/// Row-major, channel-interleaved 8-bit image with 1 or 3 channels.
class RasterImage {
 public:
  RasterImage() = default;

  RasterImage(int width, int height, int channels, std::uint8_t fill = 0)
      : RasterImage(width, height, channels,
                    std::vector<std::uint8_t>(checked_size(width, height, channels), fill)) {}

  RasterImage(int width, int height, int channels, std::vector<std::uint8_t> data)
      : width_(width), height_(height), channels_(channels), data_(std::move(data)) {
    if (data_.size() != checked_size(width, height, channels))
      throw ImageError(ImageErrc::BadDimensions, "<memory>",
                       "data length does not match width*height*channels");
  }

  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }
  int channels() const noexcept { return channels_; }
  bool empty() const noexcept { return data_.empty(); }

  std::span<const std::uint8_t> data() const noexcept { return data_; }
  std::span<std::uint8_t> data() noexcept { return data_; }

  std::uint8_t at(int x, int y, int c = 0) const {
    return data_[index(x, y, c)];
  }
  std::uint8_t& at(int x, int y, int c = 0) { return data_[index(x, y, c)]; }

  std::size_t index(int x, int y, int c = 0) const noexcept {
    return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
  }

  friend bool operator==(const RasterImage&, const RasterImage&) = default;

 private:
  static std::size_t checked_size(int w, int h, int c) {
    if (w < 1 || h < 1 || (c != 1 && c != 3))
      throw ImageError(ImageErrc::BadDimensions, "<memory>",
                       "need width,height >= 1 and 1 or 3 channels");
    return static_cast<std::size_t>(w) * h * c;
  }

  int width_ = 0;
  int height_ = 0;
  int channels_ = 0;
  std::vector<std::uint8_t> data_;
};

namespace detail {

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::error_code ec;
  if (!std::filesystem::is_regular_file(path, ec))
    throw ImageError(ImageErrc::MissingFile, path.string());
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageError(ImageErrc::MissingFile, path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline bool has_png_signature(std::span<const std::uint8_t> bytes) {
  static constexpr std::array<std::uint8_t, 8> sig{0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  return bytes.size() >= sig.size() && std::equal(sig.begin(), sig.end(), bytes.begin());
}

inline bool has_bmp_signature(std::span<const std::uint8_t> bytes) {
  return bytes.size() >= 2 && bytes[0] == 'B' && bytes[1] == 'M';
}

inline RasterImage decode_png(std::span<const std::uint8_t> bytes, const std::string& path) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size()))
    throw ImageError(ImageErrc::CorruptStream, path, image.message);

  const bool color = (image.format & PNG_FORMAT_FLAG_COLOR) != 0;
  const bool wide = (image.format & PNG_FORMAT_FLAG_LINEAR) != 0;
  const int channels = color ? 3 : 1;
  if (image.width > (1u << 15) || image.height > (1u << 15)) {
    png_image_free(&image);
    throw ImageError(ImageErrc::UnsupportedFormat, path, "image too large");
  }
  const int w = static_cast<int>(image.width);
  const int h = static_cast<int>(image.height);

  if (wide) {
    // 16-bit source: read linear samples untouched, then divide by 257.
    image.format = color ? PNG_FORMAT_LINEAR_RGB : PNG_FORMAT_LINEAR_Y;
    std::vector<png_uint_16> buf(PNG_IMAGE_SIZE(image) / sizeof(png_uint_16));
    if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
      std::string msg = image.message;
      png_image_free(&image);
      throw ImageError(ImageErrc::CorruptStream, path, msg);
    }
    std::vector<std::uint8_t> out(buf.size());
    std::transform(buf.begin(), buf.end(), out.begin(),
                   [](png_uint_16 v) { return static_cast<std::uint8_t>(v / 257); });
    return {w, h, channels, std::move(out)};
  }

  image.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> out(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, out.data(), 0, nullptr)) {
    std::string msg = image.message;
    png_image_free(&image);
    throw ImageError(ImageErrc::CorruptStream, path, msg);
  }
  return {w, h, channels, std::move(out)};
}

inline std::uint32_t le32(std::span<const std::uint8_t> b, std::size_t off) {
  return static_cast<std::uint32_t>(b[off]) | (static_cast<std::uint32_t>(b[off + 1]) << 8) |
         (static_cast<std::uint32_t>(b[off + 2]) << 16) |
         (static_cast<std::uint32_t>(b[off + 3]) << 24);
}

inline std::uint16_t le16(std::span<const std::uint8_t> b, std::size_t off) {
  return static_cast<std::uint16_t>(b[off] | (b[off + 1] << 8));
}

inline RasterImage decode_bmp(std::span<const std::uint8_t> b, const std::string& path) {
  if (b.size() < 54) throw ImageError(ImageErrc::CorruptStream, path, "short BMP header");
  const std::uint32_t pixel_offset = le32(b, 10);
  const std::uint32_t info_size = le32(b, 14);
  if (info_size < 40) throw ImageError(ImageErrc::UnsupportedFormat, path, "OS/2 BMP header");
  const auto width = static_cast<std::int32_t>(le32(b, 18));
  const auto raw_height = static_cast<std::int32_t>(le32(b, 22));
  const std::uint16_t bpp = le16(b, 28);
  const std::uint32_t compression = le32(b, 30);
  std::uint32_t palette_size = le32(b, 46);

  if (compression != 0) throw ImageError(ImageErrc::UnsupportedFormat, path, "compressed BMP");
  if (bpp != 24 && bpp != 8)
    throw ImageError(ImageErrc::UnsupportedFormat, path, "only 8- and 24-bit BMP");
  if (width < 1 || raw_height == 0 || width > (1 << 15) || std::abs(raw_height) > (1 << 15))
    throw ImageError(ImageErrc::CorruptStream, path, "bad BMP dimensions");

  const bool bottom_up = raw_height > 0;
  const int height = std::abs(raw_height);
  const std::size_t stride = ((static_cast<std::size_t>(width) * bpp + 31) / 32) * 4;
  if (pixel_offset + stride * height > b.size())
    throw ImageError(ImageErrc::CorruptStream, path, "truncated BMP pixel array");

  if (bpp == 24) {
    RasterImage img(width, height, 3);
    for (int y = 0; y < height; ++y) {
      const std::size_t row = pixel_offset + stride * (bottom_up ? height - 1 - y : y);
      for (int x = 0; x < width; ++x) {
        const std::size_t p = row + 3 * static_cast<std::size_t>(x);
        img.at(x, y, 0) = b[p + 2];
        img.at(x, y, 1) = b[p + 1];
        img.at(x, y, 2) = b[p + 0];
      }
    }
    return img;
  }

  if (palette_size == 0) palette_size = 256;
  const std::size_t palette_off = 14 + info_size;
  if (palette_size > 256 || palette_off + 4 * palette_size > pixel_offset)
    throw ImageError(ImageErrc::CorruptStream, path, "bad BMP palette");
  std::vector<std::array<std::uint8_t, 3>> palette(palette_size);
  bool gray = true;
  for (std::uint32_t i = 0; i < palette_size; ++i) {
    const std::size_t p = palette_off + 4 * i;
    palette[i] = {b[p + 2], b[p + 1], b[p]};
    gray = gray && palette[i][0] == palette[i][1] && palette[i][1] == palette[i][2];
  }
  RasterImage img(width, height, gray ? 1 : 3);
  for (int y = 0; y < height; ++y) {
    const std::size_t row = pixel_offset + stride * (bottom_up ? height - 1 - y : y);
    for (int x = 0; x < width; ++x) {
      const std::uint8_t idx = b[row + x];
      if (idx >= palette_size) throw ImageError(ImageErrc::CorruptStream, path, "palette index");
      for (int c = 0; c < img.channels(); ++c) img.at(x, y, c) = palette[idx][c];
    }
  }
  return img;
}

inline void put_le32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline void put_le16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

inline std::vector<std::uint8_t> encode_bmp(const RasterImage& img) {
  const int bpp = img.channels() == 3 ? 24 : 8;
  const std::uint32_t palette_bytes = bpp == 8 ? 256 * 4 : 0;
  const std::size_t stride = ((static_cast<std::size_t>(img.width()) * bpp + 31) / 32) * 4;
  const std::uint32_t offset = 54 + palette_bytes;
  const auto image_bytes = static_cast<std::uint32_t>(stride * img.height());

  std::vector<std::uint8_t> out;
  out.reserve(offset + image_bytes);
  out.push_back('B');
  out.push_back('M');
  put_le32(out, offset + image_bytes);
  put_le32(out, 0);
  put_le32(out, offset);
  put_le32(out, 40);
  put_le32(out, static_cast<std::uint32_t>(img.width()));
  put_le32(out, static_cast<std::uint32_t>(img.height()));
  put_le16(out, 1);
  put_le16(out, static_cast<std::uint16_t>(bpp));
  put_le32(out, 0);
  put_le32(out, image_bytes);
  put_le32(out, 2835);
  put_le32(out, 2835);
  put_le32(out, bpp == 8 ? 256 : 0);
  put_le32(out, 0);
  if (bpp == 8) {
    for (int i = 0; i < 256; ++i) {
      const auto v = static_cast<std::uint8_t>(i);
      out.insert(out.end(), {v, v, v, 0});
    }
  }
  for (int y = img.height() - 1; y >= 0; --y) {
    const std::size_t start = out.size();
    for (int x = 0; x < img.width(); ++x) {
      if (bpp == 24) {
        out.push_back(img.at(x, y, 2));
        out.push_back(img.at(x, y, 1));
        out.push_back(img.at(x, y, 0));
      } else {
        out.push_back(img.at(x, y, 0));
      }
    }
    out.resize(start + stride, 0);
  }
  return out;
}

inline std::vector<std::uint8_t> encode_png(const RasterImage& img, const std::string& path) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width());
  image.height = static_cast<png_uint_32>(img.height());
  image.format = img.channels() == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;

  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, img.data().data(), 0, nullptr))
    throw ImageError(ImageErrc::IoFailure, path, image.message);
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, img.data().data(), 0, nullptr))
    throw ImageError(ImageErrc::IoFailure, path, image.message);
  out.resize(size);
  return out;
}

inline bool has_extension(const std::filesystem::path& path, std::string_view ext) {
  std::string e = path.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char ch) { return std::tolower(ch); });
  return e == ext;
}

// Writes to a sibling temp file and renames, so a failure never leaves a
// partial file at `path`.
inline void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ImageError(ImageErrc::IoFailure, path.string(), "cannot open for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.close();
    if (!out) {
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      throw ImageError(ImageErrc::IoFailure, path.string(), "write failed");
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw ImageError(ImageErrc::IoFailure, path.string(), "rename failed");
  }
}

}  // namespace detail

/// Decodes a PNG or BMP file. The format is sniffed from the signature, not
/// the extension.
inline RasterImage load_image(const std::filesystem::path& path) {
  const auto bytes = detail::read_file_bytes(path);
  if (detail::has_png_signature(bytes)) return detail::decode_png(bytes, path.string());
  if (detail::has_bmp_signature(bytes)) return detail::decode_bmp(bytes, path.string());
  throw ImageError(ImageErrc::UnsupportedFormat, path.string(), "not PNG or BMP");
}

/// Writes PNG, or BMP when the path ends in ".bmp".
inline void save_image(const RasterImage& img, const std::filesystem::path& path) {
  if (img.empty()) throw ImageError(ImageErrc::BadDimensions, path.string(), "empty image");
  const auto bytes = detail::has_extension(path, ".bmp") ? detail::encode_bmp(img)
                                                         : detail::encode_png(img, path.string());
  detail::write_file_atomic(path, bytes);
}

/// BT.601 luma, rounded half away from zero.
inline RasterImage to_grayscale(const RasterImage& img) {
  if (img.channels() != 3) throw ImageError(ImageErrc::AlreadyGrayscale, "<memory>");
  RasterImage out(img.width(), img.height(), 1);
  const auto src = img.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    const double y = 0.299 * src[3 * i] + 0.587 * src[3 * i + 1] + 0.114 * src[3 * i + 2];
    dst[i] = static_cast<std::uint8_t>(std::clamp(std::lround(y), 0L, 255L));
  }
  return out;
}

}  // namespace deepsrq

#endif  // DEEPSRQ_IMGIO_HPP
