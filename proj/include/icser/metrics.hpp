#pragma once

#include <string>
#include <vector>

namespace icser {

/// Per-speaker outcomes; accuracy is the mean of the match flags.
struct SpeakerResult {
  int speaker_id = -1;
  std::vector<bool> matches;

  double accuracy() const;
};

/// One row of the results table, mirroring the experiment CSV columns.
struct MetricsRow {
  std::string model;
  int k = 0;
  std::string setting;
  double ua_spk = 0.0;
  double sigma = 0.0;   // population standard deviation over speakers
  double median = 0.0;
  double max = 0.0;
  double min = 0.0;
  bool infeasible = false;

  std::string csv_line() const;
};

extern const char* kMetricsCsvHeader;  // model,k,setting,ua_spk,sigma,median,max,min

/// Unweighted accuracy over speakers: every speaker counts equally no matter
/// how many utterances it contributed.
MetricsRow ua_spk(const std::vector<SpeakerResult>& results);

}  // namespace icser
