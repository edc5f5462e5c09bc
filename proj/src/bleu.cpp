#include "rtal/bleu.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <sstream>
#include <stdexcept>

namespace rtal {
namespace {

using NGramCounts = std::map<std::vector<std::string>, std::size_t>;

NGramCounts count_ngrams(const Sentence& s, std::size_t n) {
  NGramCounts counts;
  for (std::size_t i = 0; i + n <= s.size(); ++i) ++counts[Sentence(s.begin() + static_cast<std::ptrdiff_t>(i), s.begin() + static_cast<std::ptrdiff_t>(i + n))];
  return counts;
}

}  // namespace

BleuReport bleu_report(const std::vector<Sentence>& candidates, const std::vector<Sentence>& references,
                       std::size_t max_n) {
  if (candidates.empty()) throw std::invalid_argument("bleu: empty corpus");
  if (candidates.size() != references.size()) throw std::invalid_argument("bleu: candidate and reference counts differ");
  if (max_n == 0) throw std::invalid_argument("bleu: max_n must be >= 1");
  BleuReport r;
  r.matches.assign(max_n, 0);
  r.totals.assign(max_n, 0);
  for (std::size_t s = 0; s < candidates.size(); ++s) {
    r.candidate_length += candidates[s].size();
    r.reference_length += references[s].size();
    for (std::size_t n = 1; n <= max_n; ++n) {
      const NGramCounts cand = count_ngrams(candidates[s], n);
      const NGramCounts ref = count_ngrams(references[s], n);
      for (const auto& [gram, count] : cand) {
        r.totals[n - 1] += count;
        const auto it = ref.find(gram);
        if (it != ref.end()) r.matches[n - 1] += std::min(count, it->second);
      }
    }
  }
  double log_sum = 0;
  bool zero = false;
  for (std::size_t n = 0; n < max_n; ++n) {
    const double p = r.totals[n] == 0 ? 0.0 : static_cast<double>(r.matches[n]) / static_cast<double>(r.totals[n]);
    r.precisions.push_back(p);
    if (p == 0) zero = true;
    else log_sum += std::log(p);
  }
  const double c = static_cast<double>(r.candidate_length);
  const double ref_len = static_cast<double>(r.reference_length);
  r.brevity_penalty = c == 0 ? 0.0 : (c < ref_len ? std::exp(1.0 - ref_len / c) : 1.0);
  r.bleu = zero ? 0.0 : r.brevity_penalty * std::exp(log_sum / static_cast<double>(max_n));
  return r;
}

double bleu(const std::vector<Sentence>& candidates, const std::vector<Sentence>& references, std::size_t max_n) {
  return bleu_report(candidates, references, max_n).bleu;
}

std::vector<Sentence> to_sentences(const std::vector<std::vector<int>>& token_ids) {
  std::vector<Sentence> out;
  out.reserve(token_ids.size());
  for (const auto& ids : token_ids) {
    Sentence s;
    for (int id : ids) s.push_back(std::to_string(id));
    out.push_back(std::move(s));
  }
  return out;
}

std::string BleuReport::table() const {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << "BLEU      " << bleu << "\n";
  for (std::size_t n = 0; n < precisions.size(); ++n) {
    os << "p" << n + 1 << "        " << precisions[n] << "  (" << matches[n] << "/" << totals[n] << ")\n";
  }
  os << "BP        " << brevity_penalty << "\n";
  os << "hyp_len   " << candidate_length << "\n";
  os << "ref_len   " << reference_length << "\n";
  return os.str();
}

nlohmann::json BleuReport::to_json() const {
  return nlohmann::json{{"bleu", bleu},
                        {"brevity_penalty", brevity_penalty},
                        {"candidate_length", candidate_length},
                        {"reference_length", reference_length},
                        {"matches", matches},
                        {"totals", totals},
                        {"precisions", precisions}};
}

}  // namespace rtal
