#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "smvit/types.hpp"

namespace smvit::data {

/// Grayscale raster, row-major, values in [0,1].
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, float fill = 0.0f) : height(h), width(w), pixels(h * w, fill) {}
  float at(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }
  float& at(std::size_t y, std::size_t x) { return pixels[y * width + x]; }
  bool operator==(const Image&) const = default;
};

struct Frame {
  SampleKey key;
  int view = kDefaultStandardView;
  Image image;
  std::size_t label = 0;  // dense subject index
};

/// Sort key used for every frame list the library returns.
bool frame_order(const Frame& a, const Frame& b);

// ------------------------------------------------------------------ image io

/// Binary (P5) or ASCII (P2) graymap, 8 or 16 bit.
Image read_pgm(const std::string& path);
/// Binary 8-bit graymap.
void write_pgm(const std::string& path, const Image& image);
/// Dispatches on the file extension (.pgm, .png).
Image read_image(const std::string& path);
bool png_supported();

// ------------------------------------------------------------- preprocessing

struct PreprocessOptions {
  std::size_t height = 64;
  std::size_t width = 64;
  float threshold = 0.5f;
};

/// Binarize, crop to the foreground bounding box, rescale to the target
/// height (aspect preserved, each output cell is foreground when any source
/// pixel under it is), then place the horizontal centre of mass at the
/// middle of the target width, padding with background or cropping.
/// BlankFrameError when nothing reaches the threshold.
Image preprocess_frame(const Image& raw, const PreprocessOptions& options = {});

// --------------------------------------------------------------- CASIA-B io

/// <root>/<subject>/<cond>-<seq>/<view>/<frames>. Blank frames are skipped
/// and reported through `warnings`.
std::vector<Frame> load_casia_b(const std::string& root, const PreprocessOptions& options = {},
                                std::vector<std::string>* warnings = nullptr);

/// Writes frames in the load_casia_b layout plus manifest.json.
void export_dataset(const std::vector<Frame>& frames, const std::string& root);

/// Subject, view and condition counts in structured text form.
std::string manifest_json(const std::vector<Frame>& frames);

/// Dense labels by sorted subject id; returns the subject list.
std::vector<std::string> assign_labels(std::vector<Frame>& frames);

// -------------------------------------------------------------------- split

struct DatasetSplit {
  std::vector<Frame> train;
  std::vector<Frame> val;
  std::uint64_t split_seed = 0;
};

/// Per (subject, view, condition) stratum: shuffle with the seed, train gets
/// round(0.7 n), the rest is validation. Each side is then shuffled globally.
DatasetSplit split_7_3(std::vector<Frame> frames, std::uint64_t seed);

// ---------------------------------------------------------------- synthesis

struct SynthSpec {
  std::size_t n_subjects = 4;
  std::vector<int> views = {0, 54, 90};
  std::size_t frames_per_sequence = 40;
  std::size_t sequences_per_condition = 1;
  std::vector<Condition> conditions = {Condition::NM};
  std::size_t height = 64;
  std::size_t width = 64;
  std::uint64_t seed = 1;
  /// Limb overlap at views away from 90 degrees, in [0,1].
  double occlusion_strength = 0.6;

  /// ConfigError on non-positive counts, bad views, or a resolution not
  /// divisible by `multiple`.
  void validate(std::size_t multiple = 1) const;
};

/// Procedural walker silhouettes, sorted by frame_order and labelled.
std::vector<Frame> synth_generate(const SynthSpec& spec);

/// Horizontal spread of the foreground: variance of foreground column
/// coordinates divided by width^2.
double shape_variance(const Image& image);
std::map<int, double> mean_shape_variance_by_view(const std::vector<Frame>& frames);

}  // namespace smvit::data
