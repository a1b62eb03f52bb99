#pragma once

// Attention diagnostics over captured records: sparsity, null attention,
// layer and shifted attention, alignment error rate, generalized
// Jensen-Shannon head diversity, the hallucination probe, and the analytic
// FLOPs model.
//
// Every statistic only looks at valid cells: padded queries, padded keys and
// causally hidden keys never count.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "rela/attention.hpp"
#include "rela/rng.hpp"
#include "rela/toydata.hpp"
#include "rela/transformer.hpp"

namespace rela {

using LayerSeries = std::map<std::size_t, double>;

inline std::vector<AttentionRecord> select(std::span<const AttentionRecord> records, AttentionType type) {
  std::vector<AttentionRecord> out;
  for (const auto& r : records)
    if (r.type == type) out.push_back(r);
  return out;
}

/// Unweighted mean over layers.
inline double mean_over_layers(const LayerSeries& s) {
  if (s.empty()) return std::numeric_limits<double>::quiet_NaN();
  double total = 0.0;
  for (const auto& [layer, v] : s) total += v;
  return total / static_cast<double>(s.size());
}

namespace detail {

inline std::size_t head_count(std::span<const AttentionRecord> records) {
  std::size_t h = 0;
  for (const auto& r : records) {
    if (h != 0 && r.heads != h) throw std::invalid_argument("records disagree on head count");
    h = r.heads;
  }
  return h;
}

inline bool row_is_null(const AttentionRecord& r, std::size_t h, std::size_t i) {
  for (std::size_t j = 0; j < r.cols; ++j)
    if (r.valid_cell(i, j) && r.weight(h, i, j) != 0.0) return false;
  return true;
}

inline void require_records(std::span<const AttentionRecord> records, const char* what) {
  if (records.empty()) throw std::invalid_argument(std::string(what) + " needs at least one attention record");
}

}  // namespace detail

/// Fraction of exactly-zero weights per head, pooled over records, averaged
/// over heads, per layer.
inline LayerSeries sparsity_rate(std::span<const AttentionRecord> records, bool exclude_masked = true) {
  detail::require_records(records, "sparsity_rate");
  const std::size_t H = detail::head_count(records);
  std::map<std::size_t, std::vector<std::pair<double, double>>> counts;  // layer -> per head (zeros, cells)
  for (const auto& r : records) {
    auto& c = counts[r.layer];
    c.resize(H);
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t i = 0; i < r.rows; ++i)
        for (std::size_t j = 0; j < r.cols; ++j) {
          const bool valid = r.valid_cell(i, j);
          if (exclude_masked && !valid) continue;
          c[h].second += 1;
          if (r.weight(h, i, j) == 0.0) c[h].first += 1;
        }
  }
  LayerSeries out;
  for (const auto& [layer, heads] : counts) {
    double total = 0.0;
    for (const auto& [zeros, cells] : heads) total += cells > 0 ? zeros / cells : 0.0;
    out[layer] = total / static_cast<double>(H);
  }
  return out;
}

struct NullRate {
  double mean = 0.0;  // over heads
  std::vector<double> per_head;
  double variance = 0.0;  // population variance over heads
};

/// Fraction of valid query rows whose weights are all zero.
inline std::map<std::size_t, NullRate> null_rate(std::span<const AttentionRecord> records) {
  detail::require_records(records, "null_rate");
  const std::size_t H = detail::head_count(records);
  std::map<std::size_t, std::vector<std::pair<double, double>>> counts;  // layer -> per head (null, rows)
  for (const auto& r : records) {
    auto& c = counts[r.layer];
    c.resize(H);
    for (std::size_t i = 0; i < r.rows; ++i) {
      if (!r.valid_row(i)) continue;
      for (std::size_t h = 0; h < H; ++h) {
        c[h].second += 1;
        if (detail::row_is_null(r, h, i)) c[h].first += 1;
      }
    }
  }
  std::map<std::size_t, NullRate> out;
  for (const auto& [layer, heads] : counts) {
    NullRate n;
    for (const auto& [nulls, rows] : heads) n.per_head.push_back(rows > 0 ? nulls / rows : 0.0);
    for (double v : n.per_head) n.mean += v;
    n.mean /= static_cast<double>(H);
    for (double v : n.per_head) n.variance += (v - n.mean) * (v - n.mean);
    n.variance /= static_cast<double>(H);
    out[layer] = std::move(n);
  }
  return out;
}

inline LayerSeries null_rate_means(std::span<const AttentionRecord> records) {
  LayerSeries s;
  for (const auto& [layer, n] : null_rate(records)) s[layer] = n.mean;
  return s;
}

// ---------------------------------------------------------------------------
// Attention matrices and alignment

struct AttentionMatrix {
  std::size_t rows = 0, cols = 0;
  std::vector<double> values;
  std::vector<std::uint8_t> key_valid;  // empty: all valid

  double at(std::size_t i, std::size_t j) const { return values[i * cols + j]; }
};

inline AttentionMatrix head_matrix(const AttentionRecord& r, std::size_t h) {
  auto begin = r.alpha.begin() + static_cast<long>(h * r.rows * r.cols);
  return {r.rows, r.cols, std::vector<double>(begin, begin + static_cast<long>(r.rows * r.cols)), r.key_valid};
}

/// Mean of the head matrices.
inline AttentionMatrix layer_attention(const AttentionRecord& r) {
  if (r.heads == 0) throw std::invalid_argument("layer_attention needs at least one head");
  AttentionMatrix m{r.rows, r.cols, std::vector<double>(r.rows * r.cols, 0.0), r.key_valid};
  for (std::size_t h = 0; h < r.heads; ++h)
    for (std::size_t c = 0; c < r.rows * r.cols; ++c) m.values[c] += r.alpha[h * r.rows * r.cols + c];
  for (auto& v : m.values) v /= static_cast<double>(r.heads);
  return m;
}

/// Drops the first query row: row i of the result is the row whose decoder
/// input is target token i.
inline AttentionMatrix shifted(const AttentionMatrix& a) {
  if (a.rows == 0) throw std::invalid_argument("shifted attention of an empty matrix");
  return {a.rows - 1, a.cols, std::vector<double>(a.values.begin() + static_cast<long>(a.cols), a.values.end()),
          a.key_valid};
}

/// Hard links {(argmax_j alpha[i][j], i)} for target rows i < target_length,
/// with j restricted to source words j < source_length. Rows that are zero on
/// every source word produce no link.
inline std::set<Link> extract_alignment(const AttentionMatrix& a, std::size_t source_length,
                                        std::size_t target_length) {
  std::set<Link> links;
  const std::size_t rows = std::min(a.rows, target_length), cols = std::min(a.cols, source_length);
  for (std::size_t i = 0; i < rows; ++i) {
    std::optional<std::size_t> best;
    bool any = false;
    for (std::size_t j = 0; j < cols; ++j) {
      if (!a.key_valid.empty() && !a.key_valid[j]) continue;
      const double v = a.at(i, j);
      if (v != 0.0) any = true;
      if (!best || v > a.at(i, *best)) best = j;
    }
    if (any && best) links.emplace(*best, i);
  }
  return links;
}

struct AerCounts {
  std::size_t predicted = 0, sure = 0, hit_sure = 0, hit_possible = 0;

  AerCounts& operator+=(const AerCounts& o) {
    predicted += o.predicted;
    sure += o.sure;
    hit_sure += o.hit_sure;
    hit_possible += o.hit_possible;
    return *this;
  }
  /// 1 - (|A & S| + |A & P|) / (|A| + |S|)
  double aer() const {
    if (predicted + sure == 0) throw std::invalid_argument("AER of empty alignments");
    return 1.0 - static_cast<double>(hit_sure + hit_possible) / static_cast<double>(predicted + sure);
  }
};

inline AerCounts aer_counts(const std::set<Link>& predicted, const GoldAlignment& gold) {
  if (gold.sure.empty() && gold.possible.empty()) throw std::invalid_argument("AER needs a non-empty gold alignment");
  AerCounts c;
  c.predicted = predicted.size();
  c.sure = gold.sure.size();
  for (const auto& l : predicted) {
    if (gold.sure.contains(l)) ++c.hit_sure;
    if (gold.possible.contains(l)) ++c.hit_possible;
  }
  return c;
}

inline double aer(const std::set<Link>& predicted, const GoldAlignment& gold) {
  return aer_counts(predicted, gold).aer();
}

inline double aer(const AttentionMatrix& alpha, const GoldAlignment& gold) {
  return aer(extract_alignment(alpha, gold.source_length, gold.target_length), gold);
}

struct AerSummary {
  double layer_attention = 0.0;
  double best_head = 0.0;
  std::size_t best_head_index = 0;
  std::vector<double> per_head;
};

/// Corpus-level AER per layer for cross-attention records, matched to
/// examples by record.sentence. Examples without gold are skipped.
inline std::map<std::size_t, AerSummary> aer_by_layer(std::span<const AttentionRecord> cross_records,
                                                      std::span<const Example> data, bool use_shifted) {
  std::map<std::size_t, std::vector<AerCounts>> per_head;
  std::map<std::size_t, AerCounts> layer;
  for (const auto& r : cross_records) {
    if (r.type != AttentionType::cross) continue;
    if (r.sentence >= data.size()) throw std::out_of_range("record refers to a sentence outside the dataset");
    const auto& gold = data[r.sentence].gold;
    if (!gold || gold->sure.empty()) continue;
    auto view = [&](AttentionMatrix m) { return use_shifted ? shifted(m) : m; };
    auto& heads = per_head[r.layer];
    heads.resize(r.heads);
    for (std::size_t h = 0; h < r.heads; ++h)
      heads[h] += aer_counts(extract_alignment(view(head_matrix(r, h)), gold->source_length, gold->target_length),
                             *gold);
    layer[r.layer] += aer_counts(
        extract_alignment(view(layer_attention(r)), gold->source_length, gold->target_length), *gold);
  }
  std::map<std::size_t, AerSummary> out;
  for (const auto& [l, heads] : per_head) {
    AerSummary s;
    s.layer_attention = layer[l].aer();
    s.best_head = std::numeric_limits<double>::infinity();
    for (std::size_t h = 0; h < heads.size(); ++h) {
      s.per_head.push_back(heads[h].aer());
      if (s.per_head.back() < s.best_head) s.best_head = s.per_head.back(), s.best_head_index = h;
    }
    out[l] = std::move(s);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Head diversity

namespace detail {

inline double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log(v);
  return h;
}

// Distribution of head h at query i over the valid keys plus a trailing dummy
// outcome that takes the mass of a null row.
inline std::vector<double> head_distribution(const AttentionRecord& r, std::size_t h, std::size_t i,
                                             double temperature) {
  std::vector<double> p;
  std::vector<double> raw;
  for (std::size_t j = 0; j < r.cols; ++j)
    if (r.valid_cell(i, j)) raw.push_back(r.weight(h, i, j));
  if (r.activation.is_distribution()) {
    p = raw;
    p.push_back(0.0);
    return p;
  }
  if (std::all_of(raw.begin(), raw.end(), [](double v) { return v == 0.0; })) {
    p.assign(raw.size() + 1, 0.0);
    p.back() = 1.0;
    return p;
  }
  // Tempered weights sign(a) |a|^tau, then softmax over the real keys.
  for (auto& v : raw) v = std::copysign(std::pow(std::abs(v), temperature), v);
  p.resize(raw.size());
  rows::softmax(raw, p);
  p.push_back(0.0);
  return p;
}

}  // namespace detail

/// Generalized Jensen-Shannon divergence between heads: entropy of the mean
/// head distribution minus the mean head entropy, averaged over valid query
/// rows of each layer.
inline LayerSeries js_diversity(std::span<const AttentionRecord> records, double temperature = 1.0) {
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be positive");
  detail::require_records(records, "js_diversity");
  const std::size_t H = detail::head_count(records);
  if (H < 2) throw std::invalid_argument("head diversity needs at least two heads");
  std::map<std::size_t, std::pair<double, double>> acc;  // layer -> (sum, rows)
  for (const auto& r : records) {
    auto& [total, rows] = acc[r.layer];
    for (std::size_t i = 0; i < r.rows; ++i) {
      if (!r.valid_row(i)) continue;
      std::vector<double> avg;
      double mean_entropy = 0.0;
      for (std::size_t h = 0; h < H; ++h) {
        auto p = detail::head_distribution(r, h, i, temperature);
        if (avg.empty()) avg.assign(p.size(), 0.0);
        for (std::size_t k = 0; k < p.size(); ++k) avg[k] += p[k] / static_cast<double>(H);
        mean_entropy += detail::entropy(p) / static_cast<double>(H);
      }
      total += detail::entropy(avg) - mean_entropy;
      rows += 1;
    }
  }
  LayerSeries out;
  for (const auto& [layer, a] : acc) out[layer] = a.second > 0 ? a.first / a.second : 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// Null attention at inserted versus aligned target tokens

struct PositionNullRates {
  double aligned = 0.0, unaligned = 0.0;
  std::size_t aligned_rows = 0, unaligned_rows = 0;
};

/// Pools cross-attention null rates over layers and heads, split by whether
/// the target token has a gold link. With `use_shifted`, the row for target
/// token t is the one whose decoder input is t (row t + 1); otherwise it is
/// the row predicting t (row t).
inline PositionNullRates null_rate_by_alignment(std::span<const AttentionRecord> records,
                                                std::span<const Example> data, bool use_shifted) {
  double null_aligned = 0, null_unaligned = 0;
  PositionNullRates out;
  for (const auto& r : records) {
    if (r.type != AttentionType::cross) continue;
    const auto& gold = data[r.sentence].gold;
    if (!gold) continue;
    std::vector<bool> linked(gold->target_length, false);
    for (const auto& [s, t] : gold->sure) linked[t] = true;
    for (std::size_t t = 0; t < gold->target_length; ++t) {
      const std::size_t row = use_shifted ? t + 1 : t;
      if (row >= r.rows || !r.valid_row(row)) continue;
      for (std::size_t h = 0; h < r.heads; ++h) {
        const bool is_null = detail::row_is_null(r, h, row);
        if (linked[t]) {
          ++out.aligned_rows;
          null_aligned += is_null;
        } else {
          ++out.unaligned_rows;
          null_unaligned += is_null;
        }
      }
    }
  }
  out.aligned = out.aligned_rows ? null_aligned / static_cast<double>(out.aligned_rows) : 0.0;
  out.unaligned = out.unaligned_rows ? null_unaligned / static_cast<double>(out.unaligned_rows) : 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// Hallucination probe

struct HallucinationReport {
  LayerSeries aligned, shuffled;

  LayerSeries difference() const {
    LayerSeries d;
    for (const auto& [l, v] : shuffled) d[l] = v - aligned.at(l);
    return d;
  }
};

/// Cross-attention null rate per layer on `aligned` versus `shuffled`, both
/// teacher-forced in evaluation mode.
inline HallucinationReport hallucination_probe(const Model& model, std::span<const Example> aligned,
                                               std::span<const Example> shuffled) {
  auto cross_null = [&model](std::span<const Example> data) {
    auto records = select(capture_attention(model, data), AttentionType::cross);
    return null_rate_means(records);
  };
  return {cross_null(aligned), cross_null(shuffled)};
}

inline HallucinationReport hallucination_probe(const Model& model, std::span<const Example> data, Rng& rng) {
  Dataset mixed = shuffle_targets(Dataset(data.begin(), data.end()), rng);
  return hallucination_probe(model, data, mixed);
}

// ---------------------------------------------------------------------------
// FLOPs of the attention activation stage

enum class FlopsModel { softmax_att, rela_g };

/// softmax: 3HT^2 - HT; ReLA-g: HT^2 + 10Td + T.
inline std::uint64_t flops(FlopsModel model, std::uint64_t heads, std::uint64_t length, std::uint64_t dim) {
  if (heads == 0 || length == 0 || dim == 0) throw std::invalid_argument("flops needs positive H, T and d");
  if (model == FlopsModel::softmax_att) return 3 * heads * length * length - heads * length;
  return heads * length * length + 10 * length * dim + length;
}

/// Sequence length in [1, max_length] where the two counts are closest.
inline std::uint64_t closest_length(std::uint64_t heads, std::uint64_t dim, std::uint64_t max_length) {
  std::uint64_t best = 1;
  std::uint64_t best_gap = std::numeric_limits<std::uint64_t>::max();
  for (std::uint64_t t = 1; t <= max_length; ++t) {
    const auto a = flops(FlopsModel::softmax_att, heads, t, dim), b = flops(FlopsModel::rela_g, heads, t, dim);
    const auto gap = a > b ? a - b : b - a;
    if (gap < best_gap) best_gap = gap, best = t;
  }
  return best;
}

// ---------------------------------------------------------------------------
// Report

struct MetricEntry {
  std::size_t layer = 0;
  AttentionType type = AttentionType::cross;
  std::string metric;
  std::optional<double> value;  // absent when the metric does not apply
};

struct MetricsReport {
  std::string config_hash;
  std::uint64_t seed = 0;
  std::string dataset_id;
  std::vector<MetricEntry> entries;

  std::optional<double> get(std::size_t layer, AttentionType type, const std::string& metric) const {
    for (const auto& e : entries)
      if (e.layer == layer && e.type == type && e.metric == metric) return e.value;
    return std::nullopt;
  }
};

inline const std::vector<std::string>& report_metrics() {
  static const std::vector<std::string> names{"sparsity_rate",  "null_rate",          "null_rate_variance",
                                              "js_diversity",   "aer_layer",          "aer_best_head",
                                              "aer_layer_shifted", "aer_best_head_shifted"};
  return names;
}

struct ReportOptions {
  double temperature = 1.0;
  std::optional<std::vector<AttentionRecord>> shuffled_records;  // adds null_rate_shuffled
};

/// One entry per layer x attention type x metric. AER applies to cross
/// attention with gold alignments; head diversity needs two or more heads.
inline MetricsReport build_report(std::span<const AttentionRecord> records, std::span<const Example> data,
                                  const ReportOptions& options = {}) {
  detail::require_records(records, "build_report");
  MetricsReport report;
  std::set<std::size_t> layers;
  for (const auto& r : records) layers.insert(r.layer);
  const bool has_gold = std::any_of(data.begin(), data.end(), [](const Example& e) { return e.gold.has_value(); });
  for (auto type : kAttentionTypes) {
    auto recs = select(records, type);
    LayerSeries sparsity, diversity;
    std::map<std::size_t, NullRate> nulls;
    std::map<std::size_t, AerSummary> normal, shift;
    LayerSeries shuffled_null;
    if (!recs.empty()) {
      sparsity = sparsity_rate(recs);
      nulls = null_rate(recs);
      if (detail::head_count(recs) >= 2) diversity = js_diversity(recs, options.temperature);
      if (type == AttentionType::cross && has_gold) {
        normal = aer_by_layer(recs, data, false);
        shift = aer_by_layer(recs, data, true);
      }
      if (options.shuffled_records) {
        auto srecs = select(*options.shuffled_records, type);
        if (!srecs.empty()) shuffled_null = null_rate_means(srecs);
      }
    }
    auto lookup = [](const auto& m, std::size_t l) -> std::optional<double> {
      auto it = m.find(l);
      if (it == m.end()) return std::nullopt;
      return it->second;
    };
    for (std::size_t l : layers) {
      auto push = [&](const std::string& metric, std::optional<double> v) {
        report.entries.push_back({l, type, metric, v});
      };
      push("sparsity_rate", lookup(sparsity, l));
      auto n = nulls.find(l);
      push("null_rate", n != nulls.end() ? std::optional<double>(n->second.mean) : std::nullopt);
      push("null_rate_variance", n != nulls.end() ? std::optional<double>(n->second.variance) : std::nullopt);
      push("js_diversity", lookup(diversity, l));
      auto a = normal.find(l), s = shift.find(l);
      push("aer_layer", a != normal.end() ? std::optional<double>(a->second.layer_attention) : std::nullopt);
      push("aer_best_head", a != normal.end() ? std::optional<double>(a->second.best_head) : std::nullopt);
      push("aer_layer_shifted", s != shift.end() ? std::optional<double>(s->second.layer_attention) : std::nullopt);
      push("aer_best_head_shifted", s != shift.end() ? std::optional<double>(s->second.best_head) : std::nullopt);
      if (options.shuffled_records) push("null_rate_shuffled", lookup(shuffled_null, l));
    }
  }
  return report;
}

inline nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json metrics = nlohmann::json::array();
  for (const auto& e : r.entries)
    metrics.push_back({{"layer", e.layer},
                       {"attention_type", to_string(e.type)},
                       {"metric", e.metric},
                       {"value", e.value ? nlohmann::json(*e.value) : nlohmann::json(nullptr)}});
  return {{"metadata", {{"config_hash", r.config_hash}, {"seed", r.seed}, {"dataset_id", r.dataset_id}}},
          {"metrics", metrics}};
}

/// Tidy CSV: layer,attention_type,metric,value with NA for absent values.
inline void write_csv(std::ostream& os, const MetricsReport& r) {
  os << "layer,attention_type,metric,value\n";
  for (const auto& e : r.entries) {
    os << e.layer << ',' << to_string(e.type) << ',' << e.metric << ',';
    if (e.value) {
      std::ostringstream v;
      v.precision(17);
      v << *e.value;
      os << v.str();
    } else {
      os << "NA";
    }
    os << '\n';
  }
}

/// FNV-1a, used to fingerprint configurations in reports.
inline std::string fingerprint(std::string_view text) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

}  // namespace rela
