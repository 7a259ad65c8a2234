#include "icser/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace icser {

const char* kMetricsCsvHeader = "model,k,setting,ua_spk,sigma,median,max,min";

double SpeakerResult::accuracy() const {
  if (matches.empty())
    throw std::invalid_argument("speaker " + std::to_string(speaker_id) +
                                " has no utterance outcomes");
  double hits = 0.0;
  for (bool m : matches) hits += m ? 1.0 : 0.0;
  return hits / static_cast<double>(matches.size());
}

MetricsRow ua_spk(const std::vector<SpeakerResult>& results) {
  if (results.empty()) throw std::invalid_argument("ua_spk: no speakers");
  std::vector<double> acc;
  acc.reserve(results.size());
  for (const SpeakerResult& r : results) acc.push_back(r.accuracy());

  MetricsRow row;
  double sum = 0.0;
  for (double a : acc) sum += a;
  row.ua_spk = sum / static_cast<double>(acc.size());

  double var = 0.0;
  for (double a : acc) var += (a - row.ua_spk) * (a - row.ua_spk);
  row.sigma = std::sqrt(var / static_cast<double>(acc.size()));

  std::sort(acc.begin(), acc.end());
  const size_t n = acc.size();
  row.median = (n % 2 == 1) ? acc[n / 2] : 0.5 * (acc[n / 2 - 1] + acc[n / 2]);
  row.min = acc.front();
  row.max = acc.back();
  return row;
}

std::string MetricsRow::csv_line() const {
  std::ostringstream os;
  os << model << ',' << k << ',' << setting << ',';
  if (infeasible) {
    os << "infeasible,,,,";
    return os.str();
  }
  os.precision(6);
  os << std::fixed << ua_spk << ',' << sigma << ',' << median << ',' << max << ','
     << min;
  return os.str();
}

}  // namespace icser
