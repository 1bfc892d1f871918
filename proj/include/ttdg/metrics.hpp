#pragma once

// Liveness scoring metrics. Scores are probabilities of "live"; label 1 is
// live (bona fide), label 0 is spoof (attack). A sample is accepted as live
// when score > threshold.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "ttdg/errors.hpp"

namespace ttdg {

struct ScoreSet {
  std::vector<double> scores;
  std::vector<int> labels;

  std::size_t count(int label) const {
    return std::size_t(std::count(labels.begin(), labels.end(), label));
  }

  void validate(const char* op) const {
    if (scores.size() != labels.size()) {
      throw DataError(std::string(op) + ": score/label length mismatch");
    }
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (labels[i] != 0 && labels[i] != 1) {
        throw DataError(std::string(op) + ": label must be 0 or 1");
      }
      if (!std::isfinite(scores[i])) throw DataError(std::string(op) + ": non-finite score");
    }
    if (count(0) == 0 || count(1) == 0) {
      throw DataError(std::string(op) + ": both classes must be present");
    }
  }
};

struct ErrorRates {
  double far = 0.0;  // spoof accepted as live
  double frr = 0.0;  // live rejected
};

inline ErrorRates error_rates(const ScoreSet& s, double threshold) {
  s.validate("error_rates");
  std::size_t fa = 0, fr = 0;
  for (std::size_t i = 0; i < s.scores.size(); ++i) {
    const bool accept = s.scores[i] > threshold;
    if (s.labels[i] == 0 && accept) ++fa;
    if (s.labels[i] == 1 && !accept) ++fr;
  }
  return {double(fa) / double(s.count(0)), double(fr) / double(s.count(1))};
}

/// Rank-based AUC: P(live score > spoof score) with ties counted half.
inline double auc(const ScoreSet& s) {
  s.validate("auc");
  const std::size_t n = s.scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return s.scores[a] < s.scores[b]; });
  // Midranks over tie groups.
  double live_rank_sum = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && s.scores[order[j]] == s.scores[order[i]]) ++j;
    const double midrank = 0.5 * double(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) {
      if (s.labels[order[k]] == 1) live_rank_sum += midrank;
    }
    i = j;
  }
  const double n_live = double(s.count(1));
  const double n_spoof = double(s.count(0));
  return (live_rank_sum - n_live * (n_live + 1.0) / 2.0) / (n_live * n_spoof);
}

struct EerPoint {
  double threshold = 0.0;
  double far = 0.0;
  double frr = 0.0;
};

/// Threshold among midpoints of consecutive distinct scores minimising
/// |FAR - FRR|; ties go to the lower threshold. When every score is equal
/// the common value is the only candidate.
inline EerPoint eer_threshold(const ScoreSet& s) {
  s.validate("eer_threshold");
  std::vector<double> sorted = s.scores;
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  std::vector<double> candidates;
  for (std::size_t i = 0; i + 1 < sorted.size(); ++i) {
    candidates.push_back(0.5 * (sorted[i] + sorted[i + 1]));
  }
  if (candidates.empty()) candidates.push_back(sorted.front());

  // Sweep: walk candidates upward while tracking counts above threshold.
  std::vector<double> live, spoof;
  for (std::size_t i = 0; i < s.scores.size(); ++i) {
    (s.labels[i] == 1 ? live : spoof).push_back(s.scores[i]);
  }
  std::sort(live.begin(), live.end());
  std::sort(spoof.begin(), spoof.end());
  EerPoint best;
  double best_gap = INFINITY;
  std::size_t li = 0, si = 0;
  for (double t : candidates) {
    while (li < live.size() && live[li] <= t) ++li;
    while (si < spoof.size() && spoof[si] <= t) ++si;
    const double frr = double(li) / double(live.size());
    const double far = double(spoof.size() - si) / double(spoof.size());
    const double gap = std::abs(far - frr);
    if (gap < best_gap) {
      best_gap = gap;
      best = {t, far, frr};
    }
  }
  return best;
}

/// Half total error rate at a fixed threshold.
inline double hter(const ScoreSet& s, double threshold) {
  const auto r = error_rates(s, threshold);
  return 0.5 * (r.far + r.frr);
}

struct MetricsReport {
  double hter = 0.0;
  double auc = 0.0;
  EerPoint eer;
  std::size_t n_live = 0;
  std::size_t n_spoof = 0;
};

inline constexpr const char* kThresholdCaveat =
    "threshold selected at the EER point of the evaluation scores";

inline MetricsReport evaluate_scores(const ScoreSet& s) {
  MetricsReport r;
  r.eer = eer_threshold(s);
  r.hter = hter(s, r.eer.threshold);
  r.auc = auc(s);
  r.n_live = s.count(1);
  r.n_spoof = s.count(0);
  return r;
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string metrics_csv_header() {
  return "hter,auc,eer_threshold,far,frr,n_live,n_spoof";
}

inline std::string metrics_csv_row(const MetricsReport& r) {
  std::ostringstream os;
  os << format_double(r.hter) << ',' << format_double(r.auc) << ','
     << format_double(r.eer.threshold) << ',' << format_double(r.eer.far) << ','
     << format_double(r.eer.frr) << ',' << r.n_live << ',' << r.n_spoof;
  return os.str();
}

inline std::string metrics_table(const MetricsReport& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "HTER           %8.4f %%\n"
                "AUC            %8.4f %%\n"
                "EER threshold  %.6f (FAR %.4f, FRR %.4f)\n"
                "samples        %zu live, %zu spoof\n"
                "note           %s\n",
                100.0 * r.hter, 100.0 * r.auc, r.eer.threshold, r.eer.far, r.eer.frr,
                r.n_live, r.n_spoof, kThresholdCaveat);
  return buf;
}

}  // namespace ttdg
