#include "emoanti/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include "emoanti/errors.hpp"

namespace emoanti {

std::string to_string(TrialLabel label) { return label == TrialLabel::bonafide ? "bonafide" : "spoof"; }

TrialLabel parse_label(const std::string& s) {
  if (s == "bonafide") return TrialLabel::bonafide;
  if (s == "spoof") return TrialLabel::spoof;
  throw InvalidArgument("unknown label '" + s + "' (expected bonafide or spoof)");
}

std::string to_string(TdcfMode mode) { return mode == TdcfMode::legacy ? "legacy" : "revised"; }

TdcfMode parse_tdcf_mode(const std::string& s) {
  if (s == "legacy") return TdcfMode::legacy;
  if (s == "revised") return TdcfMode::revised;
  throw InvalidArgument("unknown t-DCF mode '" + s + "' (expected legacy or revised)");
}

namespace {

struct SplitScores {
  std::vector<double> bonafide;
  std::vector<double> spoof;
};

SplitScores split_sorted(std::span<const ScoreRecord> scores) {
  SplitScores out;
  for (const ScoreRecord& r : scores) {
    if (!std::isfinite(r.score)) throw NonFiniteError("score of '" + r.utt_id + "' is not finite");
    (r.label == TrialLabel::bonafide ? out.bonafide : out.spoof).push_back(r.score);
  }
  if (out.bonafide.empty() || out.spoof.empty()) {
    throw InvalidArgument("score set needs at least one bonafide and one spoof trial");
  }
  std::sort(out.bonafide.begin(), out.bonafide.end());
  std::sort(out.spoof.begin(), out.spoof.end());
  return out;
}

}  // namespace

std::vector<DetPoint> det_curve(std::span<const ScoreRecord> scores) {
  const SplitScores s = split_sorted(scores);
  std::vector<double> thresholds;
  thresholds.reserve(s.bonafide.size() + s.spoof.size());
  std::merge(s.bonafide.begin(), s.bonafide.end(), s.spoof.begin(), s.spoof.end(), std::back_inserter(thresholds));
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

  const double nb = static_cast<double>(s.bonafide.size());
  const double ns = static_cast<double>(s.spoof.size());
  const double inf = std::numeric_limits<double>::infinity();

  std::vector<DetPoint> curve;
  curve.reserve(thresholds.size() + 2);
  curve.push_back({-inf, 0.0, 1.0});
  std::size_t below_bona = 0;   // bonafide with score < threshold
  std::size_t below_spoof = 0;  // spoof with score < threshold
  for (double t : thresholds) {
    while (below_bona < s.bonafide.size() && s.bonafide[below_bona] < t) ++below_bona;
    while (below_spoof < s.spoof.size() && s.spoof[below_spoof] < t) ++below_spoof;
    curve.push_back({t, static_cast<double>(below_bona) / nb,
                     static_cast<double>(s.spoof.size() - below_spoof) / ns});
  }
  curve.push_back({inf, 1.0, 0.0});
  return curve;
}

EerResult compute_eer(std::span<const ScoreRecord> scores) {
  const std::vector<DetPoint> curve = det_curve(scores);
  for (std::size_t k = 1; k < curve.size(); ++k) {
    const double d = curve[k].p_miss - curve[k].p_fa;
    if (d < 0.0) continue;
    if (d == 0.0) return {curve[k].p_miss, curve[k].threshold};
    const DetPoint& a = curve[k - 1];
    const DetPoint& b = curve[k];
    const double da = a.p_miss - a.p_fa;
    const double lambda = -da / (d - da);
    const double eer = a.p_miss + lambda * (b.p_miss - a.p_miss);
    double threshold;
    if (!std::isfinite(a.threshold)) {
      threshold = b.threshold;
    } else if (!std::isfinite(b.threshold)) {
      threshold = a.threshold;
    } else {
      threshold = a.threshold + lambda * (b.threshold - a.threshold);
    }
    return {eer, threshold};
  }
  // Unreachable: the +inf sentinel has P_miss - P_fa = 1.
  throw StateError("DET curve never crosses the diagonal");
}

void TdcfCoefficients::validate() const {
  if (!std::isfinite(c0) || !std::isfinite(c1) || !std::isfinite(c2)) {
    throw InvalidArgument("t-DCF coefficients must be finite");
  }
  if (c0 < 0.0) throw InvalidArgument("t-DCF coefficient C0 must be nonnegative");
  if (c1 <= 0.0 && c2 <= 0.0) throw InvalidArgument("degenerate t-DCF cost: C1 and C2 are both zero");
  if (c1 <= 0.0 || c2 <= 0.0) throw InvalidArgument("t-DCF coefficients C1 and C2 must be positive");
}

TdcfParams TdcfParams::asvspoof2019_la() { return TdcfParams{}; }

TdcfParams TdcfParams::parse(const std::string& text) {
  std::map<std::string, double> kv;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("t-DCF params line " + std::to_string(lineno) + ": expected key=value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
    if (ec != std::errc() || ptr != value.data() + value.size()) {
      throw FormatError("t-DCF params line " + std::to_string(lineno) + ": bad number '" + value + "'");
    }
    kv[key] = v;
  }

  TdcfParams p;
  std::map<std::string, double*> fields{{"Ptar", &p.p_tar},         {"Pnon", &p.p_non},
                                        {"Pspoof", &p.p_spoof},     {"Cmiss", &p.c_miss},
                                        {"Cfa", &p.c_fa},           {"Cmiss_cm", &p.c_miss_cm},
                                        {"Cfa_cm", &p.c_fa_cm},     {"Pmiss_asv", &p.p_miss_asv},
                                        {"Pfa_asv", &p.p_fa_asv},   {"Pmiss_spoof_asv", &p.p_miss_spoof_asv}};
  const bool has_direct = kv.count("C0") || kv.count("C1") || kv.count("C2");
  if (has_direct) {
    if (!kv.count("C1") || !kv.count("C2")) throw FormatError("t-DCF params: explicit coefficients need C1 and C2");
    p.explicit_coefficients = TdcfCoefficients{kv.count("C0") ? kv["C0"] : 0.0, kv["C1"], kv["C2"]};
  }
  for (const auto& [key, value] : kv) {
    if (key == "C0" || key == "C1" || key == "C2") continue;
    auto it = fields.find(key);
    if (it == fields.end()) throw FormatError("t-DCF params: unknown key '" + key + "'");
    if (has_direct) throw FormatError("t-DCF params: '" + key + "' cannot be combined with explicit C0/C1/C2");
    *it->second = value;
  }
  p.validate();
  return p;
}

TdcfParams TdcfParams::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open t-DCF params file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string TdcfParams::to_text() const {
  std::ostringstream os;
  os.precision(17);
  if (explicit_coefficients) {
    os << "C0=" << explicit_coefficients->c0 << "\nC1=" << explicit_coefficients->c1
       << "\nC2=" << explicit_coefficients->c2 << '\n';
    return os.str();
  }
  os << "Ptar=" << p_tar << "\nPnon=" << p_non << "\nPspoof=" << p_spoof << "\nCmiss=" << c_miss << "\nCfa=" << c_fa
     << "\nCmiss_cm=" << c_miss_cm << "\nCfa_cm=" << c_fa_cm << "\nPmiss_asv=" << p_miss_asv
     << "\nPfa_asv=" << p_fa_asv << "\nPmiss_spoof_asv=" << p_miss_spoof_asv << '\n';
  return os.str();
}

void TdcfParams::validate() const {
  if (explicit_coefficients) {
    explicit_coefficients->validate();
    return;
  }
  for (double v : {p_tar, p_non, p_spoof, c_miss, c_fa, c_miss_cm, c_fa_cm}) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw InvalidArgument("t-DCF priors and costs must be finite and nonnegative");
  }
  for (double v : {p_miss_asv, p_fa_asv, p_miss_spoof_asv}) {
    if (!(v >= 0.0 && v <= 1.0)) throw InvalidArgument("ASV error rates must lie in [0, 1]");
  }
  if (std::abs(p_tar + p_non + p_spoof - 1.0) > 1e-9) throw InvalidArgument("t-DCF priors must sum to 1");
}

TdcfCoefficients TdcfParams::coefficients(TdcfMode mode) const {
  validate();
  TdcfCoefficients c;
  if (explicit_coefficients) {
    c = *explicit_coefficients;
    if (mode == TdcfMode::legacy) c.c0 = 0.0;
  } else if (mode == TdcfMode::legacy) {
    c.c0 = 0.0;
    c.c1 = p_tar * (c_miss_cm - c_miss * p_miss_asv) - p_non * c_fa * p_fa_asv;
    c.c2 = c_fa_cm * p_spoof * (1.0 - p_miss_spoof_asv);
  } else {
    c.c0 = p_tar * c_miss * p_miss_asv + p_non * c_fa * p_fa_asv;
    c.c1 = p_tar * c_miss - c.c0;
    c.c2 = p_spoof * c_fa_cm * (1.0 - p_miss_spoof_asv);
  }
  c.validate();
  return c;
}

MinTdcfResult compute_min_tdcf(std::span<const ScoreRecord> scores, const TdcfCoefficients& coefficients) {
  coefficients.validate();
  const std::vector<DetPoint> curve = det_curve(scores);
  const TdcfCoefficients& c = coefficients;
  double best = std::numeric_limits<double>::infinity();
  double best_threshold = 0.0;
  for (const DetPoint& p : curve) {
    const double v = c.c0 + c.c1 * p.p_miss + c.c2 * p.p_fa;
    if (v < best) {
      best = v;
      best_threshold = p.threshold;
    }
  }
  return {best / (c.c0 + std::min(c.c1, c.c2)), best_threshold, c};
}

MinTdcfResult compute_min_tdcf(std::span<const ScoreRecord> scores, const TdcfParams& params, TdcfMode mode) {
  return compute_min_tdcf(scores, params.coefficients(mode));
}

}  // namespace emoanti
