#include "densemae/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>

#include "densemae/errors.hpp"
#include "densemae/phantom.hpp"

namespace densemae {

namespace {

void check_same(const Dims& a, const Dims& b, const char* what) {
  if (a != b) throw shape_error(std::string(what) + ": dims " + to_string(a) + " and " + to_string(b) + " differ");
}

}  // namespace

Psnr psnr(const Volume& pred, const Volume& target, double peak) {
  check_same(pred.dims(), target.dims(), "psnr");
  if (!(peak > 0.0)) throw invalid_argument("psnr peak must be > 0");
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred[i]) - target[i];
    sum += d * d;
  }
  const double mse = sum / static_cast<double>(pred.size());
  if (mse == 0.0) return {std::numeric_limits<double>::infinity(), true};
  return {10.0 * std::log10(peak * peak / mse), false};
}

double ssim(const Volume& pred, const Volume& target, int window_edge, double peak) {
  check_same(pred.dims(), target.dims(), "ssim");
  const Dims d = pred.dims();
  if (window_edge < 1 || window_edge % 2 == 0) throw invalid_argument("ssim window edge must be odd");
  if (window_edge > d.d || window_edge > d.h || window_edge > d.w) {
    throw invalid_argument("ssim window edge " + std::to_string(window_edge) + " exceeds volume dims " +
                           to_string(d));
  }
  if (!(peak > 0.0)) throw invalid_argument("ssim peak must be > 0");
  const double c1 = (0.01 * peak) * (0.01 * peak), c2 = (0.03 * peak) * (0.03 * peak);

  // Summed-volume tables of x, y, x^2, y^2, xy with a zero guard plane per axis.
  const int D = d.d + 1, H = d.h + 1, W = d.w + 1;
  const std::size_t n = static_cast<std::size_t>(D) * H * W;
  std::array<std::vector<double>, 5> sat;
  for (auto& t : sat) t.assign(n, 0.0);
  auto at = [&](int z, int y, int x) { return (static_cast<std::size_t>(z) * H + y) * W + x; };
  for (int z = 1; z < D; ++z)
    for (int y = 1; y < H; ++y)
      for (int x = 1; x < W; ++x) {
        const double a = pred.at(z - 1, y - 1, x - 1), b = target.at(z - 1, y - 1, x - 1);
        const double v[5] = {a, b, a * a, b * b, a * b};
        for (int k = 0; k < 5; ++k) {
          auto& t = sat[k];
          t[at(z, y, x)] = v[k] + t[at(z - 1, y, x)] + t[at(z, y - 1, x)] + t[at(z, y, x - 1)] -
                           t[at(z - 1, y - 1, x)] - t[at(z - 1, y, x - 1)] - t[at(z, y - 1, x - 1)] +
                           t[at(z - 1, y - 1, x - 1)];
        }
      }
  const int r = window_edge / 2;
  double total = 0.0;
  for (int z = 0; z < d.d; ++z) {
    const int z0 = std::max(0, z - r), z1 = std::min(d.d, z + r + 1);
    for (int y = 0; y < d.h; ++y) {
      const int y0 = std::max(0, y - r), y1 = std::min(d.h, y + r + 1);
      for (int x = 0; x < d.w; ++x) {
        const int x0 = std::max(0, x - r), x1 = std::min(d.w, x + r + 1);
        const double count = static_cast<double>(z1 - z0) * (y1 - y0) * (x1 - x0);
        double s[5];
        for (int k = 0; k < 5; ++k) {
          const auto& t = sat[k];
          s[k] = t[at(z1, y1, x1)] - t[at(z0, y1, x1)] - t[at(z1, y0, x1)] - t[at(z1, y1, x0)] +
                 t[at(z0, y0, x1)] + t[at(z0, y1, x0)] + t[at(z1, y0, x0)] - t[at(z0, y0, x0)];
        }
        const double mx = s[0] / count, my = s[1] / count;
        const double vx = s[2] / count - mx * mx, vy = s[3] / count - my * my;
        const double cxy = s[4] / count - mx * my;
        total += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      }
    }
  }
  return total / static_cast<double>(d.voxels());
}

VoxelMask segment_lumen(const Volume& vol, float threshold) {
  VoxelMask m(vol.dims());
  for (std::size_t i = 0; i < vol.size(); ++i) m.bits[i] = vol[i] >= threshold ? 1 : 0;
  return m;
}

double dice(const VoxelMask& a, const VoxelMask& b) {
  check_same(a.dims, b.dims, "dice");
  std::size_t inter = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.bits.size(); ++i) {
    na += a.bits[i] != 0;
    nb += b.bits[i] != 0;
    inter += a.bits[i] && b.bits[i];
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

std::vector<Index3> surface_voxels(const VoxelMask& mask) {
  const Dims d = mask.dims;
  auto set = [&](int z, int y, int x) {
    return d.contains(z, y, x) && mask.bits[(static_cast<std::size_t>(z) * d.h + y) * d.w + x];
  };
  std::vector<Index3> out;
  for (int z = 0; z < d.d; ++z)
    for (int y = 0; y < d.h; ++y)
      for (int x = 0; x < d.w; ++x) {
        if (!set(z, y, x)) continue;
        if (!set(z - 1, y, x) || !set(z + 1, y, x) || !set(z, y - 1, x) || !set(z, y + 1, x) ||
            !set(z, y, x - 1) || !set(z, y, x + 1)) {
          out.push_back({z, y, x});
        }
      }
  return out;
}

double percentile(std::vector<double> v, double q) {
  if (v.empty()) throw invalid_argument("percentile of an empty set");
  if (!(q >= 0.0 && q <= 100.0)) throw invalid_argument("percentile rank must lie in [0, 100]");
  std::sort(v.begin(), v.end());
  const double pos = q / 100.0 * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return v[lo] + (v[hi] - v[lo]) * frac;
}

namespace {

std::vector<double> directed_distances(const std::vector<Index3>& from, const std::vector<Index3>& to,
                                       const Spacing& s) {
  const double sz = s.z, sy = s.y, sx = s.x;
  std::vector<double> out;
  out.reserve(from.size());
  for (const Index3& p : from) {
    double best = std::numeric_limits<double>::infinity();
    for (const Index3& q : to) {
      const double dz = (p.z - q.z) * sz, dy = (p.y - q.y) * sy, dx = (p.x - q.x) * sx;
      best = std::min(best, dz * dz + dy * dy + dx * dx);
    }
    out.push_back(std::sqrt(best));
  }
  return out;
}

}  // namespace

double hd95(const VoxelMask& a, const VoxelMask& b, const Spacing& spacing) {
  check_same(a.dims, b.dims, "hd95");
  if (a.empty()) throw invalid_argument("hd95: first mask is empty");
  if (b.empty()) throw invalid_argument("hd95: second mask is empty");
  const auto sa = surface_voxels(a), sb = surface_voxels(b);
  return std::max(percentile(directed_distances(sa, sb, spacing), 95.0),
                  percentile(directed_distances(sb, sa, spacing), 95.0));
}

// ---------------------------------------------------------------------------

nlohmann::json EvalConfig::to_json() const {
  return {{"window", {{"hu_min", window.hu_min}, {"hu_max", window.hu_max}}},
          {"calcium_threshold_hu", calcium_threshold_hu},
          {"lumen_threshold", lumen_threshold},
          {"ssim_window", ssim_window},
          {"peak", peak},
          {"token_edge", token_edge},
          {"split", split_name(split)},
          {"feed_clean", feed_clean},
          {"dice_empty_convention", 1.0},
          {"percentile", "linear"}};
}

EvalConfig eval_config_from_json(const nlohmann::json& j, const EvalConfig& defaults) {
  EvalConfig c = defaults;
  try {
    if (j.contains("window")) {
      c.window.hu_min = j.at("window").value("hu_min", c.window.hu_min);
      c.window.hu_max = j.at("window").value("hu_max", c.window.hu_max);
    }
    c.calcium_threshold_hu = j.value("calcium_threshold_hu", c.calcium_threshold_hu);
    c.lumen_threshold = j.value("lumen_threshold", c.lumen_threshold);
    c.ssim_window = j.value("ssim_window", c.ssim_window);
    c.peak = j.value("peak", c.peak);
    c.token_edge = j.value("token_edge", c.token_edge);
    if (j.contains("split")) c.split = parse_split(j.at("split").get<std::string>());
    c.feed_clean = j.value("feed_clean", c.feed_clean);
  } catch (const nlohmann::json::exception& e) {
    throw config_error(std::string("invalid eval config: ") + e.what());
  }
  if (!(c.window.hu_min < c.window.hu_max)) throw config_error("eval window needs hu_min < hu_max");
  if (c.ssim_window < 1 || c.ssim_window % 2 == 0) throw config_error("ssim_window must be odd and >= 1");
  if (!(c.peak > 0.0)) throw config_error("eval peak must be > 0");
  if (c.token_edge < 1) throw config_error("eval token_edge must be >= 1");
  return c;
}

SampleMetrics compare(const std::string& id, const Volume& repaired, const Volume& clean, const EvalConfig& cfg) {
  SampleMetrics m;
  m.id = id;
  m.psnr = psnr(repaired, clean, cfg.peak);
  m.ssim = ssim(repaired, clean, cfg.ssim_window, cfg.peak);
  const VoxelMask a = segment_lumen(repaired, cfg.lumen_threshold);
  const VoxelMask b = segment_lumen(clean, cfg.lumen_threshold);
  m.dsc = dice(a, b);
  if (!a.empty() && !b.empty()) m.hd95 = hd95(a, b, clean.spacing());
  return m;
}

MetricSummary summarize(std::vector<double> v) {
  MetricSummary s;
  s.count = v.size();
  if (v.empty()) {
    s.mean = s.stddev = s.median = std::nan("");
    return s;
  }
  s.mean = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
  double ss = 0.0;
  for (double x : v) ss += (x - s.mean) * (x - s.mean);
  s.stddev = std::sqrt(ss / v.size());
  s.median = percentile(std::move(v), 50.0);
  return s;
}

void summarize(MetricsReport& r) {
  std::vector<double> p, s, d, h;
  r.identical_psnr = r.missing_hd95 = 0;
  for (const auto& m : r.samples) {
    if (m.psnr.identical) {
      ++r.identical_psnr;
    } else {
      p.push_back(m.psnr.db);
    }
    s.push_back(m.ssim);
    d.push_back(m.dsc);
    if (m.hd95) {
      h.push_back(*m.hd95);
    } else {
      ++r.missing_hd95;
    }
  }
  r.psnr = summarize(p);
  r.ssim = summarize(s);
  r.dsc = summarize(d);
  r.hd95 = summarize(h);
}

MetricsReport evaluate_pairs(const Manifest& manifest, const RepairFn& repair, const EvalConfig& cfg,
                             const std::string& method) {
  MetricsReport r;
  r.method = method;
  r.config = cfg.to_json();
  for (const ManifestEntry* e : manifest.select(SampleRole::kCalcified, cfg.split)) {
    const Volume clean_hu = load_volume(manifest.resolve(e->clean));
    const Volume input = cfg.feed_clean ? clean_hu : load_volume(manifest.resolve(e->corrupted));
    const Volume repaired = repair(input);
    r.samples.push_back(compare(e->id, repaired, window_normalize(clean_hu, cfg.window), cfg));
  }
  summarize(r);
  return r;
}

namespace {

nlohmann::json number_or_null(double v) {
  return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
}

nlohmann::json summary(const MetricSummary& s) {
  return {{"mean", number_or_null(s.mean)},
          {"std", number_or_null(s.stddev)},
          {"median", number_or_null(s.median)},
          {"n", s.count}};
}

std::string fixed(double v, int digits) {
  if (!std::isfinite(v)) return "nan";
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

}  // namespace

nlohmann::json to_json(const SampleMetrics& m) {
  return {{"id", m.id},
          {"psnr_db", m.psnr.identical ? nlohmann::json(nullptr) : nlohmann::json(m.psnr.db)},
          {"psnr_identical", m.psnr.identical},
          {"ssim", m.ssim},
          {"dsc", m.dsc},
          {"hd95_mm", m.hd95 ? nlohmann::json(*m.hd95) : nlohmann::json(nullptr)}};
}

nlohmann::json summary_json(const MetricsReport& r) {
  return {{"method", r.method},
          {"psnr_db", summary(r.psnr)},
          {"ssim", summary(r.ssim)},
          {"dsc", summary(r.dsc)},
          {"hd95_mm", summary(r.hd95)},
          {"samples", r.samples.size()},
          {"psnr_identical", r.identical_psnr},
          {"hd95_missing", r.missing_hd95},
          {"config", r.config}};
}

void write_samples_jsonl(const MetricsReport& r, std::ostream& out) {
  for (const auto& m : r.samples) {
    nlohmann::json j = to_json(m);
    j["method"] = r.method;
    out << j.dump() << '\n';
  }
}

void write_table_csv(const std::vector<MetricsReport>& reports, std::ostream& out) {
  out << "method,psnr_mean,psnr_std,ssim_mean,ssim_std,dsc_mean,dsc_std,hd95_mean,hd95_std,n\n";
  for (const auto& r : reports) {
    out << r.method << ',' << fixed(r.psnr.mean, 3) << ',' << fixed(r.psnr.stddev, 3) << ','
        << fixed(r.ssim.mean, 4) << ',' << fixed(r.ssim.stddev, 4) << ',' << fixed(r.dsc.mean, 4) << ','
        << fixed(r.dsc.stddev, 4) << ',' << fixed(r.hd95.mean, 3) << ',' << fixed(r.hd95.stddev, 3) << ','
        << r.samples.size() << '\n';
  }
}

}  // namespace densemae
