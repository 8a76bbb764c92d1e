#pragma once
// Artifact I/O: content hashes, 8-bit PNG, .npy arrays and small text tables.
// Needs libpng and OpenSSL's libcrypto at link time.

#include "invert3d/errors.hpp"
#include "invert3d/renderer.hpp"

#include <openssl/evp.h>
#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

namespace invert3d {

inline std::string to_hex(const unsigned char* data, std::size_t n) {
  std::ostringstream os;
  os << std::hex << std::setfill('0');
  for (std::size_t i = 0; i < n; ++i) os << std::setw(2) << static_cast<int>(data[i]);
  return os.str();
}

inline std::string sha256_hex(const void* data, std::size_t n) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data, n, md, &len, EVP_sha256(), nullptr) != 1) fail(ErrorKind::usage, "SHA-256 failed");
  return to_hex(md, len);
}

inline std::string sha256_hex(const std::string& s) { return sha256_hex(s.data(), s.size()); }

inline std::vector<char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorKind::missing_artifact, "cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::string sha256_file(const std::string& path) {
  const auto bytes = read_file(path);
  return sha256_hex(bytes.data(), bytes.size());
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorKind::missing_artifact, "cannot write " + path);
  out << text;
}

// PNG

namespace png_detail {
[[noreturn]] inline void on_error(png_structp png, png_const_charp) { longjmp(png_jmpbuf(png), 1); }
inline void on_warning(png_structp, png_const_charp) {}
}  // namespace png_detail

inline void write_png(const std::string& path, const Image& img) {
  require(img.height > 0 && img.width > 0, ErrorKind::configuration, "cannot write an empty image");
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
  require(fp != nullptr, ErrorKind::missing_artifact, "cannot write " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_detail::on_error, png_detail::on_warning);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    fail(ErrorKind::missing_artifact, "libpng failed writing " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_byte> row(static_cast<std::size_t>(img.width) * 3);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c)
        row[static_cast<std::size_t>(x) * 3 + c] =
            static_cast<png_byte>(std::lround(std::clamp(img.at(y, x, c), 0.0, 1.0) * 255.0));
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

/// 8-bit RGB PNG back to [0, 1] doubles.
inline Image read_png(const std::string& path) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "rb"), &std::fclose);
  require(fp != nullptr, ErrorKind::missing_artifact, "cannot open " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_detail::on_error, png_detail::on_warning);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail(ErrorKind::schema, "not a readable PNG: " + path);
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_expand(png);
  if (png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY || png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY_ALPHA)
    png_set_gray_to_rgb(png);
  png_read_update_info(png, info);
  const int w = static_cast<int>(png_get_image_width(png, info)), h = static_cast<int>(png_get_image_height(png, info));
  Image img(h, w);
  std::vector<png_byte> row(png_get_rowbytes(png, info));
  for (int y = 0; y < h; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = row[static_cast<std::size_t>(x) * 3 + c] / 255.0;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

/// Images tiled left to right, wrapping after `columns`; empty cells are black.
inline Image image_grid(const std::vector<Image>& images, int columns) {
  require(!images.empty() && columns >= 1, ErrorKind::configuration, "grid needs images and at least one column");
  const int h = images[0].height, w = images[0].width;
  const int cols = std::min<int>(columns, static_cast<int>(images.size()));
  const int rows = (static_cast<int>(images.size()) + cols - 1) / cols;
  Image out(rows * h, cols * w);
  for (std::size_t i = 0; i < images.size(); ++i) {
    require(images[i].height == h && images[i].width == w, ErrorKind::configuration, "grid images differ in size");
    const int oy = static_cast<int>(i) / cols * h, ox = static_cast<int>(i) % cols * w;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int c = 0; c < 3; ++c) out.at(oy + y, ox + x, c) = images[i].at(y, x, c);
  }
  return out;
}

// NPY (format 1.0, little-endian float64, C order)

inline void write_npy(const std::string& path, const std::vector<double>& data, const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  std::string dims;
  for (std::size_t d : shape) {
    n *= d;
    dims += std::to_string(d) + ", ";
  }
  require(n == data.size(), ErrorKind::configuration, "npy shape does not match the data");
  std::string header = "{'descr': '<f8', 'fortran_order': False, 'shape': (" + dims + "), }";
  const std::size_t unpadded = 10 + header.size() + 1;
  header.append((64 - unpadded % 64) % 64, ' ');
  header.push_back('\n');
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorKind::missing_artifact, "cannot write " + path);
  out.write("\x93NUMPY\x01\x00", 8);
  const auto hl = static_cast<std::uint16_t>(header.size());
  const char len[2] = {static_cast<char>(hl & 0xff), static_cast<char>(hl >> 8)};
  out.write(len, 2);
  out << header;
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
}

/// Reads back what write_npy wrote.
inline std::pair<std::vector<double>, std::vector<std::size_t>> read_npy(const std::string& path) {
  const auto bytes = read_file(path);
  require(bytes.size() >= 10 && std::string(bytes.data() + 1, 5) == "NUMPY", ErrorKind::schema, "not an npy file: " + path);
  const std::size_t hl = static_cast<unsigned char>(bytes[8]) | (static_cast<std::size_t>(static_cast<unsigned char>(bytes[9])) << 8);
  require(bytes.size() >= 10 + hl, ErrorKind::schema, "truncated npy header: " + path);
  const std::string header(bytes.data() + 10, hl);
  require(header.find("'<f8'") != std::string::npos, ErrorKind::schema, "npy dtype must be <f8: " + path);
  const auto open = header.find('('), close = header.find(')');
  std::vector<std::size_t> shape;
  std::stringstream dims(header.substr(open + 1, close - open - 1));
  std::string tok;
  while (std::getline(dims, tok, ','))
    if (tok.find_first_not_of(' ') != std::string::npos) shape.push_back(std::stoul(tok));
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  require(bytes.size() == 10 + hl + n * sizeof(double), ErrorKind::schema, "npy payload size mismatch: " + path);
  std::vector<double> data(n);
  std::memcpy(data.data(), bytes.data() + 10 + hl, n * sizeof(double));
  return {data, shape};
}

// CSV

inline std::string csv_number(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  void add(std::vector<std::string> row) {
    require(row.size() == header.size(), ErrorKind::configuration, "CSV row width does not match the header");
    rows.push_back(std::move(row));
  }
  [[nodiscard]] std::string str() const {
    std::string s;
    auto line = [&s](const std::vector<std::string>& cells) {
      for (std::size_t i = 0; i < cells.size(); ++i) s += (i ? "," : "") + cells[i];
      s += '\n';
    };
    line(header);
    for (const auto& r : rows) line(r);
    return s;
  }
};

inline CsvTable parse_csv(const std::string& text) {
  CsvTable t;
  std::stringstream in(text);
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (first) {
      t.header = cells;
      first = false;
    } else {
      require(cells.size() == t.header.size(), ErrorKind::schema, "ragged CSV row");
      t.rows.push_back(cells);
    }
  }
  return t;
}

}  // namespace invert3d
