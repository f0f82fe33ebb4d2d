#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "smvit/dataset.hpp"
#include "smvit/error.hpp"
#include "smvit/rng.hpp"

namespace smvit::data {

void SynthSpec::validate(std::size_t multiple) const {
  if (n_subjects == 0 || frames_per_sequence == 0 || sequences_per_condition == 0)
    fail(ErrorKind::Config, "synth: subject, frame and sequence counts must be positive");
  if (views.empty()) fail(ErrorKind::Config, "synth: no views requested");
  if (conditions.empty()) fail(ErrorKind::Config, "synth: no conditions requested");
  for (int v : views) check_view_angle(v);
  if (height == 0 || width == 0) fail(ErrorKind::Config, "synth: resolution must be positive");
  if (multiple > 1 && (height % multiple != 0 || width % multiple != 0))
    fail(ErrorKind::Config, "synth: resolution " + std::to_string(height) + "x" + std::to_string(width) +
                                " is not divisible by " + std::to_string(multiple));
  if (!(occlusion_strength >= 0.0 && occlusion_strength <= 1.0))
    fail(ErrorKind::Config, "synth: occlusion_strength must lie in [0,1]");
}

namespace {

constexpr double kPi = std::numbers::pi;

// Body proportions in units of standing height; one set per subject.
struct Walker {
  double head_r, leg_len, torso_r, hip_half, limb_r, stride, arm_swing, arm_len, lean, knee_flex, period, phase;
};

Walker make_walker(Rng& rng) {
  Walker w;
  w.head_r = rng.uniform(0.055, 0.095);
  w.leg_len = rng.uniform(0.40, 0.56);
  w.torso_r = rng.uniform(0.070, 0.140);
  w.hip_half = rng.uniform(0.040, 0.090);
  w.limb_r = rng.uniform(0.030, 0.060);
  w.stride = rng.uniform(0.20, 0.45);
  w.arm_swing = rng.uniform(0.05, 0.50);
  w.arm_len = rng.uniform(0.28, 0.42);
  w.lean = rng.uniform(-0.20, 0.25);
  w.knee_flex = rng.uniform(0.10, 0.60);
  w.period = rng.uniform(12.0, 20.0);
  w.phase = rng.uniform(0.0, 2 * kPi);
  return w;
}

struct P3 {
  double x, y, z;  // x: walking direction, y: up, z: lateral
};

struct Capsule {
  P3 a, b;
  double r;
  bool limb;  // limbs are pulled toward the body axis by occlusion
};

struct Canvas {
  std::size_t size;
  std::vector<float> px;
  explicit Canvas(std::size_t n) : size(n), px(n * n, 0.0f) {}
};

void draw_capsule(Canvas& c, double ax, double ay, double bx, double by, double r) {
  const double n = double(c.size);
  const long x0 = std::max(0L, long(std::floor(std::min(ax, bx) - r))), x1 = std::min(long(n) - 1, long(std::ceil(std::max(ax, bx) + r)));
  const long y0 = std::max(0L, long(std::floor(std::min(ay, by) - r))), y1 = std::min(long(n) - 1, long(std::ceil(std::max(ay, by) + r)));
  const double dx = bx - ax, dy = by - ay, len2 = dx * dx + dy * dy;
  for (long y = y0; y <= y1; ++y)
    for (long x = x0; x <= x1; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      double t = len2 > 0 ? ((px - ax) * dx + (py - ay) * dy) / len2 : 0.0;
      t = std::clamp(t, 0.0, 1.0);
      const double ex = ax + t * dx - px, ey = ay + t * dy - py;
      if (ex * ex + ey * ey <= r * r) c.px[std::size_t(y) * c.size + std::size_t(x)] = 1.0f;
    }
}

std::vector<Capsule> pose(const Walker& w, double phi, Condition cond, Rng& jitter) {
  std::vector<Capsule> parts;
  const double torso_r = cond == Condition::CL ? w.torso_r * 1.55 : w.torso_r;
  const double thigh_r = cond == Condition::CL ? w.limb_r * 1.45 : w.limb_r;
  const double hip_y = w.leg_len, neck_y = hip_y + 0.36;
  const double neck_x = std::sin(w.lean) * (neck_y - hip_y);
  const double bob = 0.01 * std::cos(2 * phi);

  parts.push_back({{0, hip_y + bob, 0}, {neck_x, neck_y + bob, 0}, torso_r, false});
  const double head_y = neck_y + bob + w.head_r * 1.1;
  parts.push_back({{neck_x * 1.1, head_y, 0}, {neck_x * 1.1, head_y, 0}, w.head_r, false});

  for (int s : {1, -1}) {
    const double side = s > 0 ? 0.0 : kPi;
    const double a = s * w.stride * std::sin(phi) + 0.02 * jitter.normal();
    const double shin = a - w.knee_flex * (0.5 + 0.5 * std::cos(phi + side));
    const double l1 = 0.5 * w.leg_len, l2 = 0.5 * w.leg_len;
    const P3 hip{0, hip_y + bob, s * w.hip_half};
    const P3 knee{hip.x + l1 * std::sin(a), hip.y - l1 * std::cos(a), hip.z};
    const P3 foot{knee.x + l2 * std::sin(shin), knee.y - l2 * std::cos(shin), hip.z};
    parts.push_back({hip, knee, thigh_r, true});
    parts.push_back({knee, foot, w.limb_r, true});

    const double b = -s * w.arm_swing * std::sin(phi) + 0.02 * jitter.normal();
    const P3 shoulder{neck_x * 0.9, neck_y - 0.03 + bob, s * (torso_r + w.limb_r)};
    const P3 hand{shoulder.x + w.arm_len * std::sin(b), shoulder.y - w.arm_len * std::cos(b), shoulder.z};
    parts.push_back({shoulder, hand, w.limb_r * 0.85, true});
  }
  if (cond == Condition::BG) {
    const double r = 0.075;
    const P3 bag{-(torso_r + r * 0.8), hip_y + 0.06 + bob, torso_r * 0.5};
    parts.push_back({bag, {bag.x, bag.y + 0.05, bag.z}, r, false});
  }
  return parts;
}

Image render(const std::vector<Capsule>& parts, int view, double occlusion, std::size_t canvas) {
  const double th = view * kPi / 180.0, sn = std::sin(th), cs = std::cos(th);
  const double squeeze = 1.0 - occlusion * std::abs(cs);
  const double unit = 0.8 * double(canvas), ground = 0.92 * double(canvas), cx = 0.5 * double(canvas);
  auto project = [&](const P3& p, bool limb) {
    double x = p.x * sn + p.z * cs;
    if (limb) x *= squeeze;  // toward the body axis
    return std::pair{cx + x * unit, ground - p.y * unit};
  };
  Canvas c(canvas);
  for (const auto& part : parts) {
    const auto [ax, ay] = project(part.a, part.limb);
    const auto [bx, by] = project(part.b, part.limb);
    draw_capsule(c, ax, ay, bx, by, part.r * unit);
  }
  Image img(canvas, canvas);
  img.pixels = std::move(c.px);
  return img;
}

}  // namespace

std::vector<Frame> synth_generate(const SynthSpec& spec) {
  spec.validate();
  const std::size_t canvas = std::max<std::size_t>(128, 2 * std::max(spec.height, spec.width));
  const PreprocessOptions pre{spec.height, spec.width, 0.5f};
  std::vector<Frame> frames;
  frames.reserve(spec.n_subjects * spec.views.size() * spec.frames_per_sequence * spec.conditions.size() *
                 spec.sequences_per_condition);
  for (std::size_t s = 0; s < spec.n_subjects; ++s) {
    Rng body_rng(Rng::mix(spec.seed, s));
    const Walker walker = make_walker(body_rng);
    char id[16];
    std::snprintf(id, sizeof id, "%03zu", s + 1);
    for (Condition cond : spec.conditions)
      for (std::size_t q = 1; q <= spec.sequences_per_condition; ++q) {
        const std::uint64_t seq_salt = (s * 8 + std::size_t(cond)) * 1024 + q;
        Rng seq_rng(Rng::mix(spec.seed ^ 0x5EC0ULL, seq_salt));
        const double phase = walker.phase + seq_rng.uniform(0.0, 2 * kPi);
        for (std::size_t f = 1; f <= spec.frames_per_sequence; ++f) {
          // One pose per time step, seen by every camera (as in a multi-camera capture).
          Rng jitter(Rng::mix(spec.seed ^ 0xF4A3EULL, seq_salt * 4096 + f));
          const double phi = phase + 2 * kPi * double(f) / walker.period;
          const auto parts = pose(walker, phi, cond, jitter);
          for (int view : spec.views) {
            Frame fr;
            fr.key.subject = id;
            fr.key.condition = cond;
            fr.key.sequence = std::uint32_t(q);
            fr.key.frame = std::uint32_t(f);
            fr.view = view;
            fr.image = preprocess_frame(render(parts, view, spec.occlusion_strength, canvas), pre);
            frames.push_back(std::move(fr));
          }
        }
      }
  }
  std::sort(frames.begin(), frames.end(), frame_order);
  assign_labels(frames);

  // Generator contract: views far from the side view carry less shape spread.
  const auto var = mean_shape_variance_by_view(frames);
  const auto side = var.find(90);
  if (side != var.end())
    for (const auto& [v, value] : var)
      if (std::abs(v - 90) >= 72 && !(value < side->second))
        fail(ErrorKind::Numeric, "synth: shape variance at view " + std::to_string(v) + " (" + std::to_string(value) +
                                     ") is not below the side view's (" + std::to_string(side->second) + ")");
  return frames;
}

}  // namespace smvit::data
