// Copyright Contributors to the nsmae Project
// SPDX-License-Identifier: Apache-2.0

#include "nsmae/image_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace nsmae {

namespace {

std::ifstream open_in(const std::string& path, const char* what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(std::string(what) + ": cannot open " + path);
  return in;
}

std::ofstream open_out(const std::string& path, const char* what) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(std::string(what) + ": cannot open " + path);
  return out;
}

// PNM headers: tokens separated by whitespace, '#' starts a comment running to
// end of line. Comments are collected so the PGM reader can find the scale.
std::string next_token(std::istream& in, std::vector<std::string>* comments, const char* what) {
  std::string tok;
  int c = in.get();
  while (c != EOF) {
    if (c == '#') {
      std::string line;
      std::getline(in, line);
      if (comments) comments->push_back(line);
      c = in.get();
      continue;
    }
    if (!std::isspace(c)) break;
    c = in.get();
  }
  while (c != EOF && !std::isspace(c)) {
    tok.push_back(static_cast<char>(c));
    c = in.get();
  }
  if (tok.empty()) throw std::runtime_error(std::string(what) + ": truncated header");
  return tok;
}

int64_t header_int(std::istream& in, std::vector<std::string>* comments, const char* what) {
  const std::string tok = next_token(in, comments, what);
  try {
    return std::stoll(tok);
  } catch (const std::exception&) {
    throw std::runtime_error(std::string(what) + ": bad header field '" + tok + "'");
  }
}

}  // namespace

void write_ppm(const std::string& path, const Tensor& image) {
  if (image.rank() != 3 || image.shape[2] != 3)
    throw std::invalid_argument("write_ppm: want [H,W,3], got " + shape_str(image.shape));
  std::ofstream out = open_out(path, "write_ppm");
  out << "P6\n" << image.shape[1] << ' ' << image.shape[0] << "\n255\n";
  std::vector<unsigned char> bytes(image.data.size());
  for (size_t i = 0; i < image.data.size(); ++i) {
    const double v = std::clamp(image.data[i], 0.0, 1.0);
    bytes[i] = static_cast<unsigned char>(std::lround(v * 255.0));
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write_ppm: write failed for " + path);
}

Tensor read_ppm(const std::string& path) {
  std::ifstream in = open_in(path, "read_ppm");
  if (next_token(in, nullptr, "read_ppm") != "P6")
    throw std::runtime_error("read_ppm: not a P6 file: " + path);
  const int64_t w = header_int(in, nullptr, "read_ppm");
  const int64_t h = header_int(in, nullptr, "read_ppm");
  const int64_t maxval = header_int(in, nullptr, "read_ppm");
  if (w < 1 || h < 1 || maxval != 255)
    throw std::runtime_error("read_ppm: unsupported dimensions or maxval in " + path);
  // exactly one whitespace byte separates the header from the payload
  std::vector<unsigned char> bytes(static_cast<size_t>(h * w * 3));
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size()))
    throw std::runtime_error("read_ppm: truncated pixel data in " + path);
  Tensor t = Tensor::zeros({h, w, 3});
  for (size_t i = 0; i < bytes.size(); ++i) t.data[i] = bytes[i] / 255.0;
  return t;
}

void write_pgm16(const std::string& path, const Tensor& depth, double meters_per_unit) {
  if (depth.rank() != 2)
    throw std::invalid_argument("write_pgm16: want [H,W], got " + shape_str(depth.shape));
  if (!(meters_per_unit > 0.0))
    throw std::invalid_argument("write_pgm16: meters_per_unit must be > 0");
  std::ofstream out = open_out(path, "write_pgm16");
  char scale[64];
  std::snprintf(scale, sizeof scale, "%.17g", meters_per_unit);
  out << "P5\n# meters_per_unit: " << scale << "\n"
      << depth.shape[1] << ' ' << depth.shape[0] << "\n65535\n";
  std::vector<unsigned char> bytes(depth.data.size() * 2);
  for (size_t i = 0; i < depth.data.size(); ++i) {
    const double units = std::clamp(depth.data[i] / meters_per_unit, 0.0, 65535.0);
    const long q = std::lround(units);
    bytes[2 * i] = static_cast<unsigned char>((q >> 8) & 0xff);  // big-endian
    bytes[2 * i + 1] = static_cast<unsigned char>(q & 0xff);
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write_pgm16: write failed for " + path);
}

std::pair<Tensor, double> read_pgm16(const std::string& path) {
  std::ifstream in = open_in(path, "read_pgm16");
  std::vector<std::string> comments;
  if (next_token(in, &comments, "read_pgm16") != "P5")
    throw std::runtime_error("read_pgm16: not a P5 file: " + path);
  const int64_t w = header_int(in, &comments, "read_pgm16");
  const int64_t h = header_int(in, &comments, "read_pgm16");
  const int64_t maxval = header_int(in, &comments, "read_pgm16");
  if (w < 1 || h < 1 || maxval != 65535)
    throw std::runtime_error("read_pgm16: unsupported dimensions or maxval in " + path);
  double mpu = 0.0;
  bool have_scale = false;
  for (const std::string& c : comments) {
    const size_t at = c.find("meters_per_unit:");
    if (at == std::string::npos) continue;
    mpu = std::strtod(c.c_str() + at + 16, nullptr);
    have_scale = true;
  }
  if (!have_scale || !(mpu > 0.0))
    throw std::runtime_error("read_pgm16: missing meters_per_unit comment in " + path);
  std::vector<unsigned char> bytes(static_cast<size_t>(h * w * 2));
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size()))
    throw std::runtime_error("read_pgm16: truncated pixel data in " + path);
  Tensor t = Tensor::zeros({h, w});
  for (size_t i = 0; i < t.data.size(); ++i) {
    const int units = (bytes[2 * i] << 8) | bytes[2 * i + 1];
    t.data[i] = units * mpu;
  }
  return {std::move(t), mpu};
}

}  // namespace nsmae
