#include "smvit/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <tuple>

#include <nlohmann/json.hpp>

#include "smvit/error.hpp"
#include "smvit/rng.hpp"

namespace fs = std::filesystem;

namespace smvit::data {

bool frame_order(const Frame& a, const Frame& b) {
  return std::tie(a.key.subject, a.key.condition, a.key.sequence, a.view, a.key.frame) <
         std::tie(b.key.subject, b.key.condition, b.key.sequence, b.view, b.key.frame);
}

// ------------------------------------------------------------- preprocessing

Image preprocess_frame(const Image& raw, const PreprocessOptions& opt) {
  if (raw.height == 0 || raw.width == 0 || raw.pixels.size() != raw.height * raw.width)
    fail(ErrorKind::Shape, "preprocess_frame: empty or inconsistent image");
  if (opt.height == 0 || opt.width == 0) fail(ErrorKind::Config, "preprocess_frame: target resolution must be positive");
  std::size_t y0 = raw.height, y1 = 0, x0 = raw.width, x1 = 0;
  for (std::size_t y = 0; y < raw.height; ++y)
    for (std::size_t x = 0; x < raw.width; ++x)
      if (raw.at(y, x) >= opt.threshold) {
        y0 = std::min(y0, y);
        y1 = std::max(y1, y);
        x0 = std::min(x0, x);
        x1 = std::max(x1, x);
      }
  if (y0 > y1) fail(ErrorKind::BlankFrame, "frame has no foreground pixels");
  const std::size_t bh = y1 - y0 + 1, bw = x1 - x0 + 1, H = opt.height, W = opt.width;

  // Integral image of the binarized crop for "any foreground in this cell".
  std::vector<std::size_t> integral((bh + 1) * (bw + 1), 0);
  for (std::size_t y = 0; y < bh; ++y)
    for (std::size_t x = 0; x < bw; ++x)
      integral[(y + 1) * (bw + 1) + x + 1] = (raw.at(y0 + y, x0 + x) >= opt.threshold ? 1 : 0) +
                                             integral[y * (bw + 1) + x + 1] + integral[(y + 1) * (bw + 1) + x] -
                                             integral[y * (bw + 1) + x];
  auto any = [&](std::size_t ya, std::size_t yb, std::size_t xa, std::size_t xb) {
    const auto I = [&](std::size_t y, std::size_t x) { return integral[y * (bw + 1) + x]; };
    return I(yb, xb) + I(ya, xa) > I(ya, xb) + I(yb, xa);
  };

  const std::size_t ws = std::max<std::size_t>(1, (2 * bw * H + bh) / (2 * bh));  // round(bw * H / bh)
  std::vector<unsigned char> scaled(H * ws, 0);
  double mass = 0, moment = 0;
  for (std::size_t r = 0; r < H; ++r) {
    const std::size_t ya = r * bh / H, yb = ((r + 1) * bh + H - 1) / H;
    for (std::size_t c = 0; c < ws; ++c) {
      const std::size_t xa = c * bw / ws, xb = ((c + 1) * bw + ws - 1) / ws;
      if (!any(ya, yb, xa, xb)) continue;
      scaled[r * ws + c] = 1;
      mass += 1;
      moment += double(c) + 0.5;
    }
  }
  // The horizontal centre of mass lands on the middle column boundary.
  const long shift = long(std::floor(double(W) / 2 - moment / mass + 0.5));
  Image out(H, W, 0.0f);
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < ws; ++c) {
      const long x = long(c) + shift;
      if (scaled[r * ws + c] && x >= 0 && x < long(W)) out.at(r, std::size_t(x)) = 1.0f;
    }
  return out;
}

// ---------------------------------------------------------------- CASIA-B io

namespace {

bool parse_cond_seq(const std::string& name, Condition& cond, std::uint32_t& seq) {
  const auto dash = name.find('-');
  if (dash == std::string::npos || dash + 1 >= name.size()) return false;
  if (!parse_condition(name.substr(0, dash), cond)) return false;
  const std::string digits = name.substr(dash + 1);
  if (digits.size() > 6 || !std::all_of(digits.begin(), digits.end(), [](char c) { return std::isdigit(c); }))
    return false;
  seq = static_cast<std::uint32_t>(std::stoul(digits));
  return true;
}

bool parse_view_dir(const std::string& name, int& view) {
  if (name.size() != 3 || !std::all_of(name.begin(), name.end(), [](char c) { return std::isdigit(c); })) return false;
  view = std::stoi(name);
  return is_view_angle(view);
}

bool is_image_file(const fs::path& p) {
  if (!fs::is_regular_file(p)) return false;
  std::string ext = p.extension().string();
  for (auto& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return ext == ".pgm" || ext == ".pnm" || ext == ".png";
}

// Trailing run of digits in the file stem, e.g. 001-nm-01-090-017 -> 17.
bool trailing_number(const std::string& stem, std::uint32_t& out) {
  std::size_t end = stem.size();
  while (end > 0 && !std::isdigit(static_cast<unsigned char>(stem[end - 1]))) --end;
  std::size_t begin = end;
  while (begin > 0 && std::isdigit(static_cast<unsigned char>(stem[begin - 1]))) --begin;
  if (begin == end || end - begin > 9) return false;
  out = static_cast<std::uint32_t>(std::stoul(stem.substr(begin, end - begin)));
  return true;
}

std::vector<fs::path> sorted_entries(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

std::vector<Frame> load_casia_b(const std::string& root, const PreprocessOptions& options,
                                std::vector<std::string>* warnings) {
  std::error_code ec;
  if (!fs::is_directory(root, ec)) fail(ErrorKind::Io, "dataset root is not a directory: " + root);
  std::vector<Frame> frames;
  for (const auto& subject_dir : sorted_entries(root)) {
    if (!fs::is_directory(subject_dir)) continue;
    const std::string subject = subject_dir.filename().string();
    for (const auto& seq_dir : sorted_entries(subject_dir)) {
      if (!fs::is_directory(seq_dir)) continue;
      Condition cond;
      std::uint32_t seq = 0;
      if (!parse_cond_seq(seq_dir.filename().string(), cond, seq))
        fail(ErrorKind::Layout, "cannot parse condition-sequence directory " + seq_dir.string());
      for (const auto& view_dir : sorted_entries(seq_dir)) {
        if (!fs::is_directory(view_dir)) continue;
        int view = 0;
        if (!parse_view_dir(view_dir.filename().string(), view))
          fail(ErrorKind::Layout, "cannot parse view directory " + view_dir.string());
        std::uint32_t ordinal = 0;
        for (const auto& file : sorted_entries(view_dir)) {
          if (!is_image_file(file)) continue;
          ++ordinal;
          Frame f;
          f.key.subject = subject;
          f.key.condition = cond;
          f.key.sequence = seq;
          f.view = view;
          if (!trailing_number(file.stem().string(), f.key.frame)) f.key.frame = ordinal;
          try {
            f.image = preprocess_frame(read_image(file.string()), options);
          } catch (const Error& e) {
            if (e.kind() != ErrorKind::BlankFrame) throw;
            if (warnings) warnings->push_back("skipping blank frame " + file.string());
            continue;
          }
          frames.push_back(std::move(f));
        }
      }
    }
  }
  if (frames.empty()) fail(ErrorKind::EmptyDataset, "no frames found under " + root);
  std::sort(frames.begin(), frames.end(), frame_order);
  assign_labels(frames);
  return frames;
}

std::vector<std::string> assign_labels(std::vector<Frame>& frames) {
  std::set<std::string> ids;
  for (const auto& f : frames) ids.insert(f.key.subject);
  std::vector<std::string> subjects(ids.begin(), ids.end());
  for (auto& f : frames)
    f.label = static_cast<std::size_t>(std::lower_bound(subjects.begin(), subjects.end(), f.key.subject) -
                                       subjects.begin());
  return subjects;
}

std::string manifest_json(const std::vector<Frame>& frames) {
  using Key = std::tuple<std::string, Condition, int>;
  std::map<Key, std::size_t> counts;
  std::set<std::string> subjects;
  std::set<int> views;
  std::set<Condition> conditions;
  for (const auto& f : frames) {
    ++counts[{f.key.subject, f.key.condition, f.view}];
    subjects.insert(f.key.subject);
    views.insert(f.view);
    conditions.insert(f.key.condition);
  }
  nlohmann::ordered_json doc;
  doc["total_frames"] = frames.size();
  doc["subjects"] = subjects;
  doc["views"] = views;
  doc["conditions"] = nlohmann::ordered_json::array();
  for (auto c : conditions) doc["conditions"].push_back(condition_name(c));
  doc["counts"] = nlohmann::ordered_json::array();
  for (const auto& [k, n] : counts)
    doc["counts"].push_back({{"subject", std::get<0>(k)},
                             {"condition", condition_name(std::get<1>(k))},
                             {"view", std::get<2>(k)},
                             {"frames", n}});
  return doc.dump(1);
}

void export_dataset(const std::vector<Frame>& frames, const std::string& root) {
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec || !fs::is_directory(root)) fail(ErrorKind::Io, "cannot create output directory " + root);
  for (const auto& f : frames) {
    char seq[16], frame[16];
    std::snprintf(seq, sizeof seq, "%02u", f.key.sequence);
    std::snprintf(frame, sizeof frame, "%03u", f.key.frame);
    const std::string cond(condition_name(f.key.condition)), view = view_dir_name(f.view);
    const fs::path dir = fs::path(root) / f.key.subject / (cond + "-" + seq) / view;
    fs::create_directories(dir, ec);
    if (ec) fail(ErrorKind::Io, "cannot create " + dir.string());
    write_pgm((dir / (f.key.subject + "-" + cond + "-" + seq + "-" + view + "-" + frame + ".pgm")).string(), f.image);
  }
  std::ofstream out(fs::path(root) / "manifest.json");
  if (!out) fail(ErrorKind::Io, "cannot write manifest under " + root);
  out << manifest_json(frames) << '\n';
  if (!out) fail(ErrorKind::Io, "cannot write manifest under " + root);
}

// -------------------------------------------------------------------- split

DatasetSplit split_7_3(std::vector<Frame> frames, std::uint64_t seed) {
  using Stratum = std::tuple<std::string, int, Condition>;
  std::map<Stratum, std::vector<std::size_t>> strata;
  for (std::size_t i = 0; i < frames.size(); ++i)
    strata[{frames[i].key.subject, frames[i].view, frames[i].key.condition}].push_back(i);

  DatasetSplit split;
  split.split_seed = seed;
  Rng rng(seed);
  for (auto& [key, idx] : strata) {
    if (idx.size() < 2)
      fail(ErrorKind::DegenerateStratum, "stratum (subject " + std::get<0>(key) + ", view " +
                                             std::to_string(std::get<1>(key)) + ", " +
                                             std::string(condition_name(std::get<2>(key))) + ") has " +
                                             std::to_string(idx.size()) + " frame");
    rng.shuffle(std::span<std::size_t>(idx));
    const std::size_t n_train = (7 * idx.size() + 5) / 10;  // round(0.7 n), halves up
    for (std::size_t j = 0; j < idx.size(); ++j)
      (j < n_train ? split.train : split.val).push_back(std::move(frames[idx[j]]));
  }
  rng.shuffle(std::span<Frame>(split.train));
  rng.shuffle(std::span<Frame>(split.val));
  return split;
}

// ------------------------------------------------------------ shape variance

double shape_variance(const Image& image) {
  double n = 0, s = 0, s2 = 0;
  for (std::size_t y = 0; y < image.height; ++y)
    for (std::size_t x = 0; x < image.width; ++x)
      if (image.at(y, x) >= 0.5f) {
        n += 1;
        s += double(x);
        s2 += double(x) * double(x);
      }
  if (n == 0) return 0.0;
  const double m = s / n;
  return (s2 / n - m * m) / (double(image.width) * double(image.width));
}

std::map<int, double> mean_shape_variance_by_view(const std::vector<Frame>& frames) {
  std::map<int, std::pair<double, std::size_t>> acc;
  for (const auto& f : frames) {
    auto& [s, n] = acc[f.view];
    s += shape_variance(f.image);
    ++n;
  }
  std::map<int, double> out;
  for (const auto& [v, sn] : acc) out[v] = sn.first / double(sn.second);
  return out;
}

}  // namespace smvit::data
