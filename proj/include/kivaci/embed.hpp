#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "error.hpp"
#include "util.hpp"

namespace kivaci::embed {

inline constexpr int kDefaultDim = 100;
inline constexpr int kDefaultMaxLen = 200;

/// Frozen token -> vector map. Vectors are stored column-wise (dim x size).
class EmbeddingTable {
 public:
  EmbeddingTable() = default;
  explicit EmbeddingTable(int dim) : dim_(dim) {}

  int dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return tokens_.size(); }

  /// Returns false (and keeps the existing vector) when the token is already present.
  bool insert(std::string token, const Eigen::Ref<const Eigen::VectorXd>& vec) {
    if (vec.size() != dim_) throw Error("embed", "dimension_mismatch", token);
    if (index_.count(token)) return false;
    index_.emplace(token, static_cast<int>(tokens_.size()));
    tokens_.push_back(std::move(token));
    staged_.insert(staged_.end(), vec.data(), vec.data() + vec.size());
    vectors_.resize(0, 0);
    return true;
  }

  /// Row index of `token`, or -1 when out of vocabulary.
  int find(std::string_view token) const {
    auto it = index_.find(std::string(token));
    return it == index_.end() ? -1 : it->second;
  }

  const std::string& token(int idx) const { return tokens_.at(static_cast<std::size_t>(idx)); }

  /// dim x size matrix of all vectors.
  const Eigen::MatrixXd& matrix() const {
    if (vectors_.cols() != static_cast<Eigen::Index>(tokens_.size())) {
      vectors_ = Eigen::Map<const Eigen::MatrixXd>(staged_.data(), dim_,
                                                   static_cast<Eigen::Index>(tokens_.size()));
    }
    return vectors_;
  }

  Eigen::VectorXd vector(int idx) const {
    return Eigen::Map<const Eigen::VectorXd>(staged_.data() + static_cast<std::size_t>(idx) * dim_, dim_);
  }

  /// Serializes in the pretrained-vector text layout.
  std::string to_text() const {
    std::string out;
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      out += tokens_[i];
      for (int k = 0; k < dim_; ++k) {
        out += ' ';
        out += format_double(staged_[i * dim_ + k]);
      }
      out += '\n';
    }
    return out;
  }

 private:
  int dim_ = 0;
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
  std::vector<double> staged_;
  mutable Eigen::MatrixXd vectors_;
};

struct LoanVector {
  Eigen::VectorXd values;
  int n_matched = 0;
};

/// Parses pretrained vectors: "token v1 ... vd" per line, single-space separated.
/// Duplicate tokens keep their first occurrence; blank lines are skipped.
inline EmbeddingTable parse_embeddings(std::string_view text, int expected_dim) {
  if (expected_dim < 1) throw Error("embed", "invalid_dimension", std::to_string(expected_dim));
  EmbeddingTable table(expected_dim);
  Eigen::VectorXd vec(expected_dim);
  std::size_t line_no = 0;
  for (auto line : split_view(text, '\n')) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;
    auto fields = split_view(line, ' ');
    while (!fields.empty() && fields.back().empty()) fields.pop_back();
    if (static_cast<int>(fields.size()) - 1 != expected_dim)
      throw Error("embed", "dimension_mismatch", "line " + std::to_string(line_no));
    for (int k = 0; k < expected_dim; ++k) vec[k] = parse_double(fields[k + 1], "embed");
    table.insert(std::string(fields[0]), vec);
  }
  return table;
}

inline EmbeddingTable load_embeddings(const std::string& path, int expected_dim) {
  return parse_embeddings(read_file(path, "embed"), expected_dim);
}

/// Lowercases ASCII, turns every byte that is not a letter, digit, apostrophe
/// or part of a multi-byte UTF-8 sequence into a separator, then splits.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string current;
  for (char ch : text) {
    auto c = static_cast<unsigned char>(ch);
    bool keep = (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '\'' || c >= 0x80;
    if (c >= 'A' && c <= 'Z') {
      c = static_cast<unsigned char>(c - 'A' + 'a');
      keep = true;
    }
    if (keep) {
      current.push_back(static_cast<char>(c));
    } else if (!current.empty()) {
      tokens.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) tokens.push_back(std::move(current));
  return tokens;
}

/// Mean of the matched token vectors; zero vector when nothing matches.
inline LoanVector loan_vector(const std::vector<std::string>& tokens, const EmbeddingTable& table) {
  LoanVector out{Eigen::VectorXd::Zero(table.dim()), 0};
  const auto& m = table.matrix();
  for (const auto& tok : tokens) {
    int idx = table.find(tok);
    if (idx < 0) continue;
    out.values += m.col(idx);
    ++out.n_matched;
  }
  if (out.n_matched > 0) out.values /= static_cast<double>(out.n_matched);
  return out;
}

/// Table rows of the matched tokens, in order, truncated to max_len.
inline std::vector<int> matched_rows(const std::vector<std::string>& tokens, const EmbeddingTable& table,
                                     int max_len) {
  if (max_len < 1) throw Error("embed", "invalid_max_len", std::to_string(max_len));
  std::vector<int> rows;
  for (const auto& tok : tokens) {
    if (static_cast<int>(rows.size()) >= max_len) break;
    int idx = table.find(tok);
    if (idx >= 0) rows.push_back(idx);
  }
  return rows;
}

/// Embedding vectors of matched tokens in order, truncated to max_len.
inline std::vector<Eigen::VectorXd> loan_sequence(const std::vector<std::string>& tokens,
                                                  const EmbeddingTable& table, int max_len) {
  std::vector<Eigen::VectorXd> seq;
  const auto& m = table.matrix();
  for (int idx : matched_rows(tokens, table, max_len)) seq.emplace_back(m.col(idx));
  return seq;
}

// Toy vocabulary used by the synthetic text benchmark. Tokens "pos000".."pos249"
// carry +1 in the first coordinate and "neg000".."neg249" carry -1; the remaining
// coordinates are fixed pseudo-random values. The average of any token list
// therefore has first coordinate 2 * (#pos / #tokens) - 1.
inline constexpr int kToyVocabSize = 500;
inline constexpr int kToyDim = 8;

inline EmbeddingTable toy_embedding_table() {
  EmbeddingTable table(kToyDim);
  std::mt19937_64 rng(20161010ULL);
  std::normal_distribution<double> noise(0.0, 0.5);
  Eigen::VectorXd vec(kToyDim);
  for (int i = 0; i < kToyVocabSize; ++i) {
    bool pos = i < kToyVocabSize / 2;
    int local = pos ? i : i - kToyVocabSize / 2;
    char name[16];
    std::snprintf(name, sizeof(name), "%s%03d", pos ? "pos" : "neg", local);
    vec[0] = pos ? 1.0 : -1.0;
    for (int k = 1; k < kToyDim; ++k) vec[k] = noise(rng);
    table.insert(name, vec);
  }
  return table;
}

}  // namespace kivaci::embed
