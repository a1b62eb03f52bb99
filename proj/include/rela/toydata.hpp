#pragma once

// Synthetic sequence-to-sequence tasks with exact word alignments.
//
// Tokens are integers in [0, vocab). Alignment links are (source index,
// target index) pairs. Sure and possible links coincide for every task here.

#include <algorithm>
#include <cstdint>
#include <istream>
#include <numeric>
#include <optional>
#include <ostream>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"
#include "rela/rng.hpp"

namespace rela {

enum class TaskKind { copy, reverse, lexical_translate, lexical_translate_with_insertions };

inline std::string_view to_string(TaskKind k) {
  switch (k) {
    case TaskKind::copy: return "copy";
    case TaskKind::reverse: return "reverse";
    case TaskKind::lexical_translate: return "lexical_translate";
    case TaskKind::lexical_translate_with_insertions: return "lexical_translate_with_insertions";
  }
  return "?";
}
inline TaskKind parse_task_kind(std::string_view s) {
  for (auto k : {TaskKind::copy, TaskKind::reverse, TaskKind::lexical_translate,
                 TaskKind::lexical_translate_with_insertions})
    if (to_string(k) == s) return k;
  throw std::invalid_argument("unknown task kind '" + std::string(s) + "'");
}

using Link = std::pair<std::size_t, std::size_t>;  // (source index, target index)

struct GoldAlignment {
  std::set<Link> sure;
  std::set<Link> possible;  // superset of sure
  std::size_t source_length = 0;
  std::size_t target_length = 0;

  void validate() const {
    for (const auto& l : sure)
      if (!possible.contains(l)) throw std::invalid_argument("sure link missing from possible links");
    for (const auto& [s, t] : possible)
      if (s >= source_length || t >= target_length) throw std::invalid_argument("alignment link out of bounds");
  }
};

struct Example {
  std::vector<int> source;
  std::vector<int> target;
  std::optional<GoldAlignment> gold;  // absent for shuffled (hallucinated) pairs
};

using Dataset = std::vector<Example>;

/// Task definition. The lexical kinds use a token bijection and a position
/// permutation applied window by window: the target block at window w lists
/// the source tokens at positions w*window + pattern[k]. A trailing partial
/// window keeps the pattern's relative order restricted to the positions that
/// exist.
struct ToyTask {
  TaskKind kind = TaskKind::copy;
  std::size_t vocab = 50;
  std::size_t min_length = 5;
  std::size_t max_length = 20;
  std::uint64_t permutation_seed = 7;
  std::size_t window = 3;
  double insertion_rate = 0.0;

  std::vector<int> bijection;        // token -> translated token
  std::vector<std::size_t> pattern;  // permutation of [0, window)

  static ToyTask make(TaskKind kind, std::size_t vocab = 50, std::size_t min_length = 5, std::size_t max_length = 20,
                      std::uint64_t permutation_seed = 7, std::size_t window = 3, double insertion_rate = 0.0) {
    ToyTask t{kind, vocab, min_length, max_length, permutation_seed, window, insertion_rate, {}, {}};
    t.rebuild_tables();
    return t;
  }

  void rebuild_tables() {
    validate_parameters();
    Rng rng = make_rng(permutation_seed, 0x7a5c);
    bijection.resize(vocab);
    std::iota(bijection.begin(), bijection.end(), 0);
    for (std::size_t i = vocab; i-- > 1;) std::swap(bijection[i], bijection[uniform_index(rng, i + 1)]);
    pattern.resize(window);
    std::iota(pattern.begin(), pattern.end(), 0);
    // A non-identity pattern whenever one exists, so the task really reorders.
    do {
      for (std::size_t i = window; i-- > 1;) std::swap(pattern[i], pattern[uniform_index(rng, i + 1)]);
    } while (window > 1 && std::is_sorted(pattern.begin(), pattern.end()));
  }

  void validate_parameters() const {
    if (vocab < 2) throw std::invalid_argument("vocab must hold at least two tokens");
    if (min_length > max_length) throw std::invalid_argument("min_length exceeds max_length");
    if (window == 0) throw std::invalid_argument("window must be positive");
    if (!(insertion_rate >= 0.0 && insertion_rate <= 0.5))
      throw std::invalid_argument("insertion rate must be in [0, 0.5]");
  }

  bool is_lexical() const {
    return kind == TaskKind::lexical_translate || kind == TaskKind::lexical_translate_with_insertions;
  }

  /// Source position feeding target position i of a length-n lexical sentence.
  std::size_t source_position(std::size_t i, std::size_t n) const {
    const std::size_t block = i / window, start = block * window;
    const std::size_t len = std::min(window, n - start);
    std::size_t k = i - start;
    for (std::size_t p : pattern) {
      if (p >= len) continue;
      if (k-- == 0) return start + p;
    }
    throw std::logic_error("position outside sentence");
  }
};

/// One example for a given source sentence.
inline Example make_example(const ToyTask& task, std::vector<int> source, Rng& rng) {
  Example ex;
  const std::size_t n = source.size();
  GoldAlignment gold;
  gold.source_length = n;
  auto link = [&gold](std::size_t s, std::size_t t) {
    gold.sure.emplace(s, t);
    gold.possible.emplace(s, t);
  };
  switch (task.kind) {
    case TaskKind::copy:
      ex.target = source;
      for (std::size_t i = 0; i < n; ++i) link(i, i);
      break;
    case TaskKind::reverse:
      ex.target.assign(source.rbegin(), source.rend());
      for (std::size_t i = 0; i < n; ++i) link(n - 1 - i, i);
      break;
    case TaskKind::lexical_translate:
    case TaskKind::lexical_translate_with_insertions: {
      const bool inserting = task.kind == TaskKind::lexical_translate_with_insertions && task.insertion_rate > 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (inserting && uniform01(rng) < task.insertion_rate)
          ex.target.push_back(static_cast<int>(uniform_index(rng, task.vocab)));  // unaligned
        const std::size_t s = task.source_position(i, n);
        link(s, ex.target.size());
        ex.target.push_back(task.bijection[static_cast<std::size_t>(source[s])]);
      }
      break;
    }
  }
  gold.target_length = ex.target.size();
  ex.source = std::move(source);
  ex.gold = std::move(gold);
  return ex;
}

/// `count` examples with lengths uniform in [min_length, max_length].
inline Dataset generate(const ToyTask& task, Rng& rng, std::size_t count) {
  task.validate_parameters();
  if (task.is_lexical() && (task.bijection.size() != task.vocab || task.pattern.size() != task.window))
    throw std::invalid_argument("lexical task tables not built; use ToyTask::make");
  Dataset out;
  out.reserve(count);
  for (std::size_t c = 0; c < count; ++c) {
    const std::size_t n = task.min_length + uniform_index(rng, task.max_length - task.min_length + 1);
    std::vector<int> source(n);
    for (auto& t : source) t = static_cast<int>(uniform_index(rng, task.vocab));
    out.push_back(make_example(task, std::move(source), rng));
  }
  return out;
}

/// Pairs every source with another example's target (a derangement drawn
/// with Sattolo's algorithm). Gold alignments are dropped.
inline Dataset shuffle_targets(const Dataset& data, Rng& rng) {
  if (data.size() < 2) throw std::invalid_argument("shuffle_targets needs at least two pairs");
  std::vector<std::size_t> perm(data.size());
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t i = perm.size(); i-- > 1;) std::swap(perm[i], perm[uniform_index(rng, i)]);
  Dataset out;
  out.reserve(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) out.push_back({data[i].source, data[perm[i]].target, std::nullopt});
  return out;
}

// ---------------------------------------------------------------------------
// JSON lines: {"source": [...], "target": [...], "sure": [[s, t], ...] | null,
// "possible": [[s, t], ...] | null}

inline nlohmann::json to_json(const Example& ex) {
  nlohmann::json j{{"source", ex.source}, {"target", ex.target}};
  if (ex.gold) {
    auto links = [](const std::set<Link>& s) {
      nlohmann::json a = nlohmann::json::array();
      for (const auto& [src, tgt] : s) a.push_back({src, tgt});
      return a;
    };
    j["sure"] = links(ex.gold->sure);
    j["possible"] = links(ex.gold->possible);
  } else {
    j["sure"] = nullptr;
    j["possible"] = nullptr;
  }
  return j;
}

inline Example example_from_json(const nlohmann::json& j) {
  Example ex;
  ex.source = j.at("source").get<std::vector<int>>();
  ex.target = j.at("target").get<std::vector<int>>();
  if (j.contains("sure") && !j.at("sure").is_null()) {
    GoldAlignment g;
    g.source_length = ex.source.size();
    g.target_length = ex.target.size();
    for (const auto& l : j.at("sure")) g.sure.emplace(l.at(0).get<std::size_t>(), l.at(1).get<std::size_t>());
    if (j.contains("possible") && !j.at("possible").is_null())
      for (const auto& l : j.at("possible")) g.possible.emplace(l.at(0).get<std::size_t>(), l.at(1).get<std::size_t>());
    g.possible.insert(g.sure.begin(), g.sure.end());
    g.validate();
    ex.gold = std::move(g);
  }
  return ex;
}

inline void write_jsonl(std::ostream& os, const Dataset& data) {
  for (const auto& ex : data) os << to_json(ex).dump() << '\n';
}

inline Dataset read_jsonl(std::istream& is) {
  Dataset out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(example_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw std::invalid_argument("dataset line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace rela
