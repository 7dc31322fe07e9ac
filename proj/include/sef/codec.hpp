#pragma once

// PNG persistence (8-bit, lossless) and in-memory JPEG round trips.

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <jpeglib.h>
#include <png.h>

#include "sef/errors.hpp"
#include "sef/image.hpp"

namespace sef {

inline std::uint8_t to_byte(float s) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(s, 0.0f, 1.0f) * 255.0f));
}

inline std::vector<std::uint8_t> to_bytes(const Image& img) {
  std::vector<std::uint8_t> out(img.size());
  std::transform(img.data.begin(), img.data.end(), out.begin(), to_byte);
  return out;
}

inline Image from_bytes(const std::uint8_t* bytes, int h, int w, int c) {
  Image img(h, w, c);
  for (std::size_t i = 0; i < img.size(); ++i) img.data[i] = bytes[i] / 255.0f;
  return img;
}

// Quantize through the 8-bit storage domain, i.e. what a PNG save+load yields.
inline Image quantize8(const Image& img) {
  auto bytes = to_bytes(img);
  return from_bytes(bytes.data(), img.height, img.width, img.channels);
}

inline void save_png(const Image& img, const std::filesystem::path& path) {
  png_image pi{};
  pi.version = PNG_IMAGE_VERSION;
  pi.width = static_cast<png_uint_32>(img.width);
  pi.height = static_cast<png_uint_32>(img.height);
  pi.format = img.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  const auto bytes = to_bytes(img);
  if (!png_image_write_to_file(&pi, path.c_str(), 0, bytes.data(), 0, nullptr)) {
    std::string msg = pi.message;
    png_image_free(&pi);
    throw IoError("save_png: " + path.string() + ": " + msg);
  }
}

// Loads as RGB unless the file is grayscale without color.
inline Image load_png(const std::filesystem::path& path) {
  png_image pi{};
  pi.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&pi, path.c_str()))
    throw IoError("load_png: " + path.string() + ": " + pi.message);
  const bool gray = (pi.format & PNG_FORMAT_FLAG_COLOR) == 0;
  pi.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  const int c = gray ? 1 : 3;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(pi));
  if (!png_image_finish_read(&pi, nullptr, buf.data(), 0, nullptr)) {
    std::string msg = pi.message;
    png_image_free(&pi);
    throw IoError("load_png: " + path.string() + ": " + msg);
  }
  return from_bytes(buf.data(), static_cast<int>(pi.height), static_cast<int>(pi.width), c);
}

namespace detail {

struct JpegErrorMgr {
  jpeg_error_mgr pub;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

inline void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorMgr*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

// Encode baseline JPEG. Chroma 4:2:0 below quality 90, 4:4:4 otherwise.
inline bool jpeg_encode(const std::vector<std::uint8_t>& rgb, int h, int w, int quality,
                        std::vector<std::uint8_t>& out, std::string& error) {
  jpeg_compress_struct cinfo{};
  JpegErrorMgr jerr{};
  cinfo.err = jpeg_std_error(&jerr.pub);
  jerr.pub.error_exit = jpeg_error_exit;
  unsigned char* mem = nullptr;
  unsigned long mem_size = 0;
  if (setjmp(jerr.jump)) {
    error = jerr.message;
    jpeg_destroy_compress(&cinfo);
    std::free(mem);
    return false;
  }
  jpeg_create_compress(&cinfo);
  jpeg_mem_dest(&cinfo, &mem, &mem_size);
  cinfo.image_width = static_cast<JDIMENSION>(w);
  cinfo.image_height = static_cast<JDIMENSION>(h);
  cinfo.input_components = 3;
  cinfo.in_color_space = JCS_RGB;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, quality, TRUE);
  const int luma_sampling = quality < 90 ? 2 : 1;
  cinfo.comp_info[0].h_samp_factor = luma_sampling;
  cinfo.comp_info[0].v_samp_factor = luma_sampling;
  for (int i = 1; i < 3; ++i) {
    cinfo.comp_info[i].h_samp_factor = 1;
    cinfo.comp_info[i].v_samp_factor = 1;
  }
  cinfo.dct_method = JDCT_ISLOW;
  jpeg_start_compress(&cinfo, TRUE);
  while (cinfo.next_scanline < cinfo.image_height) {
    auto* row = const_cast<JSAMPLE*>(&rgb[static_cast<std::size_t>(cinfo.next_scanline) * w * 3]);
    jpeg_write_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_compress(&cinfo);
  jpeg_destroy_compress(&cinfo);
  out.assign(mem, mem + mem_size);
  std::free(mem);
  return true;
}

inline bool jpeg_decode(const std::vector<std::uint8_t>& data, int& h, int& w,
                        std::vector<std::uint8_t>& rgb, std::string& error) {
  jpeg_decompress_struct cinfo{};
  JpegErrorMgr jerr{};
  cinfo.err = jpeg_std_error(&jerr.pub);
  jerr.pub.error_exit = jpeg_error_exit;
  if (setjmp(jerr.jump)) {
    error = jerr.message;
    jpeg_destroy_decompress(&cinfo);
    return false;
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, data.data(), static_cast<unsigned long>(data.size()));
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  cinfo.dct_method = JDCT_ISLOW;
  jpeg_start_decompress(&cinfo);
  h = static_cast<int>(cinfo.output_height);
  w = static_cast<int>(cinfo.output_width);
  rgb.assign(static_cast<std::size_t>(h) * w * 3, 0);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPLE* row = &rgb[static_cast<std::size_t>(cinfo.output_scanline) * w * 3];
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return true;
}

}  // namespace detail

inline Image jpeg_roundtrip(const Image& img, int quality) {
  if (quality < 1 || quality > 100) throw InvalidInput("jpeg_roundtrip: quality must be in [1, 100]");
  if (img.channels != 3) throw InvalidInput("jpeg_roundtrip: expected 3 channels");
  std::vector<std::uint8_t> encoded, decoded;
  std::string error;
  if (!detail::jpeg_encode(to_bytes(img), img.height, img.width, quality, encoded, error))
    throw IoError("jpeg_roundtrip: encode failed: " + error);
  int h = 0, w = 0;
  if (!detail::jpeg_decode(encoded, h, w, decoded, error))
    throw IoError("jpeg_roundtrip: decode failed: " + error);
  if (h != img.height || w != img.width) throw IoError("jpeg_roundtrip: decoded size mismatch");
  return from_bytes(decoded.data(), h, w, 3);
}

}  // namespace sef
