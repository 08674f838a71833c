#pragma once

// Shared helpers for the unit and acceptance binaries: fixture paths, scratch
// directories, a seeded generator for property tests, and oracle
// implementations written independently of src/.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "crc/corpus.hpp"

namespace crc::testing {

inline std::string fixture(const std::string& name) {
  return std::string(CRC_FIXTURE_DIR) + "/" + name;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& p, const std::string& content) {
  std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << content;
}

// Fresh directory under the system temp dir, removed on destruction.
class ScratchDir {
 public:
  explicit ScratchDir(const std::string& tag) {
    static std::uint64_t counter = 0;
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("crc-test-" + tag + "-" + std::to_string(rd()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~ScratchDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  ScratchDir(const ScratchDir&) = delete;
  ScratchDir& operator=(const ScratchDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::string str(const std::string& rel = "") const { return (path_ / rel).string(); }

 private:
  std::filesystem::path path_;
};

// Hand-rolled generator for property tests.
class Gen {
 public:
  explicit Gen(std::uint64_t seed) : rng_(seed) {}

  std::size_t below(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng_); }
  bool coin() { return below(2) == 1; }

  std::string pick(const std::vector<std::string>& options) { return options[below(options.size())]; }

  // Text from an alphabet that deliberately includes envelope-like pieces.
  std::string text(std::size_t max_len, bool allow_hashes = true) {
    static const std::vector<std::string> pieces = {
        "a", "b", "z", " ", "Sure", ".", ",", ":", "#", "##", "###", "###DK:", "NONE",
        "stage2_R", "é", "中文", "\n", "[SEP", "SEP]", "<", ">", "'", "UP", ";"};
    std::string out;
    const auto len = 1 + below(max_len);
    for (std::size_t i = 0; i < len; ++i) {
      auto p = pick(pieces);
      if (!allow_hashes && p.find('#') != std::string::npos) p = "x";
      out += p;
    }
    return out;
  }

  std::string word() {
    static const std::vector<std::string> words = {"movie", "star", "love", "great", "jimmy",
                                                   "lin",   "the",  "is",   "a",     "song",
                                                   "zhu",   "grandpa", "weather", "duck"};
    return pick(words);
  }

  std::string sentence(std::size_t min_words, std::size_t max_words) {
    std::string out;
    const auto n = min_words + below(max_words - min_words + 1);
    for (std::size_t i = 0; i < n; ++i) out += (i ? " " : "") + word();
    return out;
  }

  std::mt19937_64& engine() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

// Minimal valid dialogue with `system_turns` System turns (User/System
// alternating) and goals aligned per system turn.
inline DialogueExample make_dialogue(const std::string& id, std::size_t system_turns = 2) {
  DialogueExample ex;
  ex.id = id;
  ex.profile = {{"Name", "User " + id}};
  ex.knowledge = {{"Movie " + id, "director", "Director " + id}};
  for (std::size_t i = 0; i < system_turns; ++i) {
    ex.turns.push_back({Speaker::User, "question " + std::to_string(i) + " from " + id});
    ex.turns.push_back({Speaker::System, "answer " + std::to_string(i) + " about Movie " + id});
    ex.goals.push_back({"Movie recommendation", "Movie " + id});
  }
  ex.alignment = detect_alignment(ex);
  return ex;
}

namespace oracle {

inline std::vector<std::string> split_ws(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

// Brute-force corpus BLEU over whitespace tokens: every n-gram is compared
// against every reference n-gram position, no hashing or shared code.
inline double bleu(const std::vector<std::string>& hyps, const std::vector<std::string>& refs,
                   int max_n, double epsilon = 1e-9) {
  std::vector<double> match(max_n, 0.0), total(max_n, 0.0);
  double c = 0.0, r = 0.0;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    const auto h = split_ws(hyps[i]);
    const auto g = split_ws(refs[i]);
    c += static_cast<double>(h.size());
    r += static_cast<double>(g.size());
    for (int n = 1; n <= max_n; ++n) {
      if (h.size() < static_cast<std::size_t>(n)) continue;
      const std::size_t hn = h.size() - n + 1;
      total[n - 1] += static_cast<double>(hn);
      std::vector<bool> counted(hn, false);
      for (std::size_t a = 0; a < hn; ++a) {
        if (counted[a]) continue;
        // occurrences of this n-gram in hyp and in ref
        std::size_t in_h = 0;
        for (std::size_t b = a; b < hn; ++b) {
          if (std::equal(h.begin() + a, h.begin() + a + n, h.begin() + b)) {
            ++in_h;
            counted[b] = true;
          }
        }
        std::size_t in_r = 0;
        for (std::size_t b = 0; b + n <= g.size(); ++b) {
          if (std::equal(h.begin() + a, h.begin() + a + n, g.begin() + b)) ++in_r;
        }
        match[n - 1] += static_cast<double>(std::min(in_h, in_r));
      }
    }
  }
  if (c == 0.0) return 0.0;
  double product = 1.0;
  for (int n = 0; n < max_n; ++n) {
    const double p = match[n] > 0 ? match[n] / total[n] : epsilon / std::max(total[n], 1.0);
    product *= p;
  }
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return bp * std::pow(product, 1.0 / max_n);
}

inline double word_f1(const std::string& hyp, const std::string& ref) {
  auto h = split_ws(hyp);
  auto g = split_ws(ref);
  std::size_t overlap = 0;
  std::vector<bool> used(g.size(), false);
  for (const auto& w : h) {
    for (std::size_t j = 0; j < g.size(); ++j) {
      if (!used[j] && g[j] == w) {
        used[j] = true;
        ++overlap;
        break;
      }
    }
  }
  if (overlap == 0) return 0.0;
  const double p = static_cast<double>(overlap) / h.size();
  const double rc = static_cast<double>(overlap) / g.size();
  return 2 * p * rc / (p + rc);
}

inline double distinct(const std::vector<std::string>& hyps, int n) {
  std::vector<std::vector<std::string>> grams;
  for (const auto& s : hyps) {
    const auto t = split_ws(s);
    for (std::size_t i = 0; i + n <= t.size(); ++i) grams.emplace_back(t.begin() + i, t.begin() + i + n);
  }
  if (grams.empty()) return 0.0;
  std::size_t unique = 0;
  for (std::size_t i = 0; i < grams.size(); ++i) {
    bool seen = false;
    for (std::size_t j = 0; j < i && !seen; ++j) seen = grams[j] == grams[i];
    if (!seen) ++unique;
  }
  return static_cast<double>(unique) / grams.size();
}

}  // namespace oracle

}  // namespace crc::testing
