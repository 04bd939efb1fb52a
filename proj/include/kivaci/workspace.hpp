#pragma once

#include <Eigen/Dense>
#include <json.hpp>

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "embed.hpp"
#include "error.hpp"
#include "ingest.hpp"
#include "nuisance.hpp"
#include "util.hpp"

// On-disk layout of a pipeline workspace:
//   dataset/covariates.csv    one row per unit: ids, split, w, y, raw amount, covariates
//   dataset/tokens.txt        one tokenized description per line
//   dataset/metadata.json     normalization, split seed, filter-reason counts
//   embeddings/loan_vectors.csv, embeddings/vocab.txt, embeddings/sequences.txt
//   models/, predictions/, reports/
namespace kivaci::workspace {

namespace fs = std::filesystem;
using Json = nlohmann::json;

inline constexpr const char* kDirs[] = {"dataset", "embeddings", "models", "predictions", "reports"};

inline void ensure_layout(const fs::path& root) {
  std::error_code ec;
  for (const char* d : kDirs) {
    fs::create_directories(root / d, ec);
    if (ec) throw Error("cli", "io_failure", "cannot create " + (root / d).string());
  }
}

inline void write_json(const fs::path& path, const Json& j) { write_file(path.string(), j.dump(2) + "\n", "cli"); }

inline Json read_json(const fs::path& path) {
  auto text = read_file(path.string(), "cli");
  Json j = Json::parse(text, nullptr, false);
  if (j.is_discarded()) throw Error("cli", "malformed_json", path.string());
  return j;
}

inline std::string join_tokens(const std::vector<std::string>& toks) {
  std::string s;
  for (std::size_t k = 0; k < toks.size(); ++k) {
    if (k) s += ' ';
    s += toks[k];
  }
  return s;
}

inline std::vector<std::string> split_tokens(std::string_view line) {
  std::vector<std::string> out;
  for (auto t : split_view(line, ' '))
    if (!t.empty()) out.emplace_back(t);
  return out;
}

inline std::string hash_line(const std::string& config_hash) { return "# config_hash=" + config_hash + "\n"; }

/// Drops a leading hash_line, if present.
inline std::string_view skip_hash_line(std::string_view text) {
  if (text.rfind("# config_hash=", 0) != 0) return text;
  auto nl = text.find('\n');
  return nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
}

inline void write_dataset(const fs::path& root, const ingest::Dataset& ds, const Json& metadata,
                          const std::string& config_hash) {
  std::vector<std::string> header{"unit_id", "loan_id", "split", "w", "y", "loan_amount_raw"};
  for (const auto& n : ds.covariate_names) header.push_back(n);
  CsvWriter csv(header);
  csv.comment("config_hash=" + config_hash);
  std::string tokens = hash_line(config_hash);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto k = static_cast<Eigen::Index>(i);
    std::vector<std::string> row{std::to_string(i), std::to_string(ds.ids[i]), std::string(ingest::to_string(ds.split[i])),
                                 std::to_string(ds.w[i]), format_double(ds.y[k]),
                                 format_double(ds.records.empty() ? NAN : ds.records[i].loan_amount)};
    for (Eigen::Index j = 0; j < ds.x.cols(); ++j) row.push_back(format_double(ds.x(k, j)));
    csv.row(row);
    tokens += join_tokens(ds.tokens[i]) + "\n";
  }
  write_file((root / "dataset" / "covariates.csv").string(), csv.str(), "cli");
  write_file((root / "dataset" / "tokens.txt").string(), tokens, "cli");
  write_json(root / "dataset" / "metadata.json", metadata);
}

/// Reads a dataset written by write_dataset. Loan records are rebuilt from the
/// stored columns so descriptive statistics can be recomputed.
inline ingest::Dataset read_dataset(const fs::path& root) {
  const auto dir = root / "dataset";
  if (!fs::exists(dir / "covariates.csv")) throw Error("cli", "missing_artifact", (dir / "covariates.csv").string());
  auto table = parse_csv(read_file((dir / "covariates.csv").string(), "cli"), "cli");
  auto meta = read_json(dir / "metadata.json");
  ingest::Dataset ds;
  const std::size_t fixed = 6;
  if (table.header.size() < fixed) throw Error("cli", "malformed_csv", "covariates.csv header");
  ds.covariate_names.assign(table.header.begin() + fixed, table.header.end());
  const auto n = static_cast<Eigen::Index>(table.rows.size());
  const auto p = static_cast<Eigen::Index>(ds.covariate_names.size());
  ds.x.resize(n, p);
  ds.y.resize(n);
  const std::string tok_text = read_file((dir / "tokens.txt").string(), "cli");
  auto tok_lines = split_view(skip_hash_line(tok_text), '\n');
  const bool loan_layout = ds.covariate_names == ingest::loan_covariate_names();
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& r = table.rows[static_cast<std::size_t>(i)];
    if (r.size() != table.header.size()) throw Error("cli", "malformed_csv", "row " + std::to_string(i));
    ds.ids.push_back(std::stoll(r[1]));
    ds.split.push_back(ingest::parse_split(r[2]));
    ds.w.push_back(static_cast<int>(parse_double(r[3], "cli")));
    ds.y[i] = parse_double(r[4], "cli");
    for (Eigen::Index j = 0; j < p; ++j) ds.x(i, j) = parse_double(r[fixed + static_cast<std::size_t>(j)], "cli");
    ds.tokens.push_back(static_cast<std::size_t>(i) < tok_lines.size() ? split_tokens(tok_lines[static_cast<std::size_t>(i)])
                                                                      : std::vector<std::string>{});
    if (loan_layout) {
      ingest::LoanRecord rec;
      rec.id = ds.ids.back();
      rec.y = ds.y[i];
      rec.w = ds.w.back();
      rec.loan_amount = parse_double(r[5], "cli");
      rec.gender = static_cast<int>(ds.x(i, 1));
      rec.risker = static_cast<int>(ds.x(i, 2));
      rec.sector = ingest::kSectorDummies;
      for (int k = 0; k < ingest::kSectorDummies; ++k) {
        rec.sector_dummies[static_cast<std::size_t>(k)] = static_cast<std::uint8_t>(ds.x(i, 3 + k));
        if (ds.x(i, 3 + k) == 1.0) rec.sector = k;
      }
      rec.tokens = ds.tokens.back();
      ds.records.push_back(std::move(rec));
    }
  }
  if (meta.contains("normalization"))
    ds.normalization = {meta["normalization"].value("mean", 0.0), meta["normalization"].value("std", 1.0)};
  ds.split_seed = meta.value("split_seed", std::uint64_t{0});
  return ds;
}

/// Text features derived from a dataset and an embedding table. The stored
/// vocabulary holds only tokens that occur in some description, in order of
/// first appearance.
struct EmbeddedText {
  Eigen::MatrixXd loan_vectors;  // n x d
  std::vector<int> n_matched;
  embed::EmbeddingTable vocab{1};
  std::vector<std::vector<int>> sequences;  // rows into vocab

  nuisance::TextFeatures features() const {
    nuisance::TextFeatures tf;
    tf.loan_vectors = loan_vectors;
    tf.sequences = sequences;
    tf.vocabulary = std::make_shared<const Eigen::MatrixXd>(vocab.matrix());
    return tf;
  }
};

inline EmbeddedText embed_dataset(const ingest::Dataset& ds, const embed::EmbeddingTable& table, int max_len) {
  EmbeddedText out;
  out.vocab = embed::EmbeddingTable(table.dim());
  out.loan_vectors.resize(static_cast<Eigen::Index>(ds.size()), table.dim());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    auto lv = embed::loan_vector(ds.tokens[i], table);
    out.loan_vectors.row(static_cast<Eigen::Index>(i)) = lv.values.transpose();
    out.n_matched.push_back(lv.n_matched);
    std::vector<int> seq;
    for (int row : embed::matched_rows(ds.tokens[i], table, max_len)) {
      const auto& tok = table.token(row);
      int local = out.vocab.find(tok);
      if (local < 0) {
        out.vocab.insert(tok, table.vector(row));
        local = static_cast<int>(out.vocab.size()) - 1;
      }
      seq.push_back(local);
    }
    out.sequences.push_back(std::move(seq));
  }
  return out;
}

inline void write_embedded(const fs::path& root, const EmbeddedText& et, const std::string& config_hash) {
  std::vector<std::string> header{"unit_id", "n_matched"};
  for (Eigen::Index j = 0; j < et.loan_vectors.cols(); ++j) header.push_back("v" + std::to_string(j + 1));
  CsvWriter csv(header);
  csv.comment("config_hash=" + config_hash);
  for (Eigen::Index i = 0; i < et.loan_vectors.rows(); ++i) {
    std::vector<std::string> row{std::to_string(i), std::to_string(et.n_matched[static_cast<std::size_t>(i)])};
    for (Eigen::Index j = 0; j < et.loan_vectors.cols(); ++j) row.push_back(format_double(et.loan_vectors(i, j)));
    csv.row(row);
  }
  std::string seq = hash_line(config_hash);
  for (const auto& s : et.sequences) {
    for (std::size_t k = 0; k < s.size(); ++k) {
      if (k) seq += ' ';
      seq += std::to_string(s[k]);
    }
    seq += '\n';
  }
  const auto dir = root / "embeddings";
  write_file((dir / "loan_vectors.csv").string(), csv.str(), "cli");
  write_file((dir / "sequences.txt").string(), seq, "cli");
  write_file((dir / "vocab.txt").string(), hash_line(config_hash) + et.vocab.to_text(), "cli");
}

inline EmbeddedText read_embedded(const fs::path& root) {
  const auto dir = root / "embeddings";
  if (!fs::exists(dir / "loan_vectors.csv")) throw Error("cli", "missing_artifact", (dir / "loan_vectors.csv").string());
  auto table = parse_csv(read_file((dir / "loan_vectors.csv").string(), "cli"), "cli");
  EmbeddedText et;
  const auto n = static_cast<Eigen::Index>(table.rows.size());
  const auto d = static_cast<Eigen::Index>(table.header.size()) - 2;
  if (d < 1) throw Error("cli", "malformed_csv", "loan_vectors.csv header");
  et.loan_vectors.resize(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& r = table.rows[static_cast<std::size_t>(i)];
    et.n_matched.push_back(std::stoi(r[1]));
    for (Eigen::Index j = 0; j < d; ++j) et.loan_vectors(i, j) = parse_double(r[2 + static_cast<std::size_t>(j)], "cli");
  }
  const std::string vocab_text = read_file((dir / "vocab.txt").string(), "cli");
  et.vocab = embed::parse_embeddings(skip_hash_line(vocab_text), static_cast<int>(d));
  const std::string seq_text = read_file((dir / "sequences.txt").string(), "cli");
  for (auto line : split_view(seq_text, '\n')) {
    if (!line.empty() && line.front() == '#') continue;
    std::vector<int> seq;
    for (const auto& t : split_tokens(line)) seq.push_back(std::stoi(t));
    et.sequences.push_back(std::move(seq));
  }
  et.sequences.resize(static_cast<std::size_t>(n));
  return et;
}

}  // namespace kivaci::workspace
