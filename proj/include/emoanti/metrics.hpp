#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace emoanti {

enum class TrialLabel { bonafide, spoof };

std::string to_string(TrialLabel label);
TrialLabel parse_label(const std::string& s);

/// One countermeasure decision; higher scores mean more bonafide.
struct ScoreRecord {
  std::string utt_id;
  double score = 0.0;
  TrialLabel label = TrialLabel::bonafide;
};

/// One vertex of the DET polyline. A trial is accepted when its score is
/// >= threshold, so P_miss counts bonafide below it and P_fa spoof at or above.
struct DetPoint {
  double threshold;
  double p_miss;
  double p_fa;
};

/// Sweeps -inf, every distinct score in increasing order, and +inf.
std::vector<DetPoint> det_curve(std::span<const ScoreRecord> scores);

struct EerResult {
  double eer;
  double threshold;
};

/// Crossing of P_miss and P_fa on the linearly interpolated DET polyline.
EerResult compute_eer(std::span<const ScoreRecord> scores);

/// Coefficients of t-DCF(s) = C0 + C1 * P_miss_cm(s) + C2 * P_fa_cm(s).
struct TdcfCoefficients {
  double c0 = 0.0;
  double c1 = 0.0;
  double c2 = 0.0;

  void validate() const;
};

enum class TdcfMode { legacy, revised };

std::string to_string(TdcfMode mode);
TdcfMode parse_tdcf_mode(const std::string& s);

/// Cost model either as explicit coefficients or as priors, costs and fixed
/// ASV operating rates from which the coefficients are derived.
struct TdcfParams {
  std::optional<TdcfCoefficients> explicit_coefficients;

  double p_tar = 0.9405;
  double p_non = 0.0095;
  double p_spoof = 0.05;
  double c_miss = 1.0;     // ASV miss cost
  double c_fa = 10.0;      // ASV false-alarm cost
  double c_miss_cm = 1.0;
  double c_fa_cm = 10.0;
  /// ASV operating point; zero rates describe an error-free ASV.
  double p_miss_asv = 0.0;
  double p_fa_asv = 0.0;
  double p_miss_spoof_asv = 0.0;

  /// ASVspoof 2019 LA priors and costs (external-standard preset) with an
  /// error-free ASV operating point.
  static TdcfParams asvspoof2019_la();

  /// `key=value` lines; `#` starts a comment. Keys: C0 C1 C2, or Ptar Pnon
  /// Pspoof Cmiss Cfa Cmiss_cm Cfa_cm Pmiss_asv Pfa_asv Pmiss_spoof_asv.
  static TdcfParams parse(const std::string& text);
  static TdcfParams load(const std::string& path);
  std::string to_text() const;

  void validate() const;
  /// Legacy mode forces C0 = 0.
  TdcfCoefficients coefficients(TdcfMode mode) const;
};

struct MinTdcfResult {
  double min_tdcf;   // normalized by C0 + min(C1, C2)
  double threshold;  // DET threshold attaining the minimum (first one on ties)
  TdcfCoefficients coefficients;
};

MinTdcfResult compute_min_tdcf(std::span<const ScoreRecord> scores, const TdcfCoefficients& coefficients);
MinTdcfResult compute_min_tdcf(std::span<const ScoreRecord> scores, const TdcfParams& params, TdcfMode mode);

}  // namespace emoanti
