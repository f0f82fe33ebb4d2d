#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include "smvit/dataset.hpp"
#include "smvit/error.hpp"

#ifdef SMVIT_HAVE_PNG
#include <png.h>
#endif

namespace smvit::data {

namespace {

// Next whitespace-delimited header token, skipping '#' comments.
std::string pnm_token(std::istream& in) {
  std::string tok;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  return tok;
}

std::size_t pnm_number(std::istream& in, const std::string& path) {
  const auto tok = pnm_token(in);
  if (tok.empty() || !std::all_of(tok.begin(), tok.end(), [](char ch) { return std::isdigit(ch); }))
    fail(ErrorKind::Load, "malformed graymap header in " + path);
  return std::stoul(tok);
}

}  // namespace

Image read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot read " + path);
  const auto magic = pnm_token(in);
  if (magic != "P5" && magic != "P2") fail(ErrorKind::Load, path + " is not a graymap (magic '" + magic + "')");
  const std::size_t w = pnm_number(in, path), h = pnm_number(in, path), maxval = pnm_number(in, path);
  if (w == 0 || h == 0 || maxval == 0 || maxval > 65535) fail(ErrorKind::Load, "bad graymap geometry in " + path);
  Image img(h, w);
  const float scale = 1.0f / static_cast<float>(maxval);
  if (magic == "P2") {
    for (auto& p : img.pixels) p = std::min(1.0f, static_cast<float>(pnm_number(in, path)) * scale);
    return img;
  }
  const std::size_t bytes = maxval > 255 ? 2 : 1;
  std::vector<unsigned char> raw(w * h * bytes);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size())) fail(ErrorKind::Load, "truncated graymap " + path);
  for (std::size_t i = 0; i < w * h; ++i) {
    const unsigned v = bytes == 2 ? (unsigned(raw[2 * i]) << 8 | raw[2 * i + 1]) : raw[i];
    img.pixels[i] = std::min(1.0f, static_cast<float>(v) * scale);
  }
  return img;
}

void write_pgm(const std::string& path, const Image& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::Io, "cannot write " + path);
  out << "P5\n" << image.width << ' ' << image.height << "\n255\n";
  std::vector<unsigned char> raw(image.pixels.size());
  for (std::size_t i = 0; i < raw.size(); ++i)
    raw[i] = static_cast<unsigned char>(std::clamp(image.pixels[i], 0.0f, 1.0f) * 255.0f + 0.5f);
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!out) fail(ErrorKind::Io, "write failed: " + path);
}

bool png_supported() {
#ifdef SMVIT_HAVE_PNG
  return true;
#else
  return false;
#endif
}

namespace {

Image read_png(const std::string& path) {
#ifdef SMVIT_HAVE_PNG
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str()))
    fail(png.message[0] ? ErrorKind::Load : ErrorKind::Io, "cannot decode " + path + ": " + png.message);
  png.format = PNG_FORMAT_GRAY;
  std::vector<unsigned char> raw(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, raw.data(), 0, nullptr)) {
    const std::string msg = png.message;
    png_image_free(&png);
    fail(ErrorKind::Load, "cannot decode " + path + ": " + msg);
  }
  Image img(png.height, png.width);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<float>(raw[i]) / 255.0f;
  return img;
#else
  fail(ErrorKind::Load, "PNG support not compiled in: " + path);
#endif
}

std::string lower_extension(const std::string& path) {
  const auto dot = path.find_last_of('.');
  if (dot == std::string::npos) return {};
  std::string ext = path.substr(dot + 1);
  for (auto& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return ext;
}

}  // namespace

Image read_image(const std::string& path) {
  const auto ext = lower_extension(path);
  if (ext == "pgm" || ext == "pnm") return read_pgm(path);
  if (ext == "png") return read_png(path);
  fail(ErrorKind::Load, "unsupported image format: " + path);
}

}  // namespace smvit::data
