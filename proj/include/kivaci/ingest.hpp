#pragma once

#include <Eigen/Dense>
#include <json.hpp>

#include <algorithm>
#include <array>
#include <cctype>
#include <chrono>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "embed.hpp"
#include "error.hpp"
#include "util.hpp"

namespace kivaci::ingest {

using Json = nlohmann::json;

/// Seconds since the Unix epoch, UTC.
using Timestamp = std::int64_t;

inline constexpr double kSecondsPerDay = 86400.0;

/// The fifteen sector categories, alphabetical. The last one (Wholesale) is the
/// reference level and gets no dummy column.
inline const std::array<std::string_view, 15> kSectors = {
    "Agriculture", "Arts",    "Clothing", "Construction", "Education",      "Entertainment", "Food",      "Health",
    "Housing",     "Manufacturing", "Personal Use", "Retail", "Services", "Transportation", "Wholesale"};
inline constexpr int kSectorDummies = 14;
inline constexpr int kCovariates = 17;

/// Parses "YYYY-MM-DDTHH:MM:SSZ".
inline Timestamp parse_timestamp(std::string_view s) {
  auto bad = [&] { return Error("ingest", "invalid_timestamp", std::string(s)); };
  if (s.size() != 20 || s[4] != '-' || s[7] != '-' || s[10] != 'T' || s[13] != ':' || s[16] != ':' || s[19] != 'Z')
    throw bad();
  auto num = [&](std::size_t pos, std::size_t len) {
    int v = 0;
    auto r = std::from_chars(s.data() + pos, s.data() + pos + len, v);
    if (r.ec != std::errc{} || r.ptr != s.data() + pos + len) throw bad();
    return v;
  };
  using namespace std::chrono;
  year_month_day ymd{year{num(0, 4)}, month{static_cast<unsigned>(num(5, 2))},
                     day{static_cast<unsigned>(num(8, 2))}};
  int hh = num(11, 2), mm = num(14, 2), ss = num(17, 2);
  if (!ymd.ok() || hh > 23 || mm > 59 || ss > 60) throw bad();
  auto days_since_epoch = sys_days{ymd}.time_since_epoch().count();
  return static_cast<Timestamp>(days_since_epoch) * 86400 + hh * 3600 + mm * 60 + ss;
}

struct Borrower {
  std::string gender;  // "M" / "F" as published
  std::string name;
};

struct RawLoan {
  std::int64_t id = 0;
  Timestamp posted_date = 0;
  std::optional<Timestamp> funded_date;
  double loan_amount = 0.0;
  std::vector<Borrower> borrowers;
  std::optional<std::map<std::string, std::string>> description_texts;
  std::string sector;
  std::string nonpayment;
};

namespace detail {

inline const Json* member(const Json& obj, const char* key) {
  if (!obj.is_object()) return nullptr;
  auto it = obj.find(key);
  if (it == obj.end() || it->is_null()) return nullptr;
  return &*it;
}

[[noreturn]] inline void missing(const char* field) { throw Error("ingest", "missing_required_field", field); }

}  // namespace detail

/// Extracts the fields the pipeline uses from one parsed loan object.
inline RawLoan parse_loan(const Json& obj) {
  using detail::member;
  if (!obj.is_object()) throw Error("ingest", "malformed_json", "expected object");
  RawLoan raw;

  const Json* posted = member(obj, "posted_date");
  if (!posted || !posted->is_string()) detail::missing("posted_date");
  raw.posted_date = parse_timestamp(posted->get<std::string>());

  const Json* id = member(obj, "id");
  if (!id || !id->is_number_integer()) detail::missing("id");
  raw.id = id->get<std::int64_t>();

  const Json* amount = member(obj, "loan_amount");
  if (!amount || !amount->is_number()) detail::missing("loan_amount");
  raw.loan_amount = amount->get<double>();
  if (!(raw.loan_amount >= 0.0)) throw Error("ingest", "invalid_field", "loan_amount");

  if (const Json* funded = member(obj, "funded_date")) {
    if (!funded->is_string()) throw Error("ingest", "invalid_field", "funded_date");
    raw.funded_date = parse_timestamp(funded->get<std::string>());
  }

  if (const Json* borrowers = member(obj, "borrowers")) {
    if (!borrowers->is_array()) throw Error("ingest", "invalid_field", "borrowers");
    for (const auto& b : *borrowers) {
      Borrower out;
      if (const Json* g = member(b, "gender"); g && g->is_string()) out.gender = g->get<std::string>();
      if (const Json* n = member(b, "first_name"); n && n->is_string()) out.name = n->get<std::string>();
      else if (const Json* n2 = member(b, "name"); n2 && n2->is_string()) out.name = n2->get<std::string>();
      raw.borrowers.push_back(std::move(out));
    }
  }

  if (const Json* desc = member(obj, "description")) {
    if (const Json* texts = member(*desc, "texts"); texts && texts->is_object()) {
      std::map<std::string, std::string> m;
      for (auto it = texts->begin(); it != texts->end(); ++it)
        if (it->is_string()) m.emplace(it.key(), it->get<std::string>());
      raw.description_texts = std::move(m);
    }
  }

  if (const Json* sector = member(obj, "sector"); sector && sector->is_string()) raw.sector = sector->get<std::string>();

  if (const Json* terms = member(obj, "terms"))
    if (const Json* ll = member(*terms, "loss_liability"))
      if (const Json* np = member(*ll, "nonpayment"); np && np->is_string()) raw.nonpayment = np->get<std::string>();

  return raw;
}

inline RawLoan parse_loan(std::string_view json_text) {
  Json obj = Json::parse(json_text.begin(), json_text.end(), nullptr, false);
  if (obj.is_discarded()) throw Error("ingest", "malformed_json");
  return parse_loan(obj);
}

enum class FilterReason {
  funded_before_posted,
  no_english_description,
  empty_description,
  no_borrowers,
  never_funded,
  unknown_sector,
};

inline constexpr std::array<FilterReason, 6> kFilterReasons = {
    FilterReason::funded_before_posted, FilterReason::no_english_description, FilterReason::empty_description,
    FilterReason::no_borrowers,         FilterReason::never_funded,           FilterReason::unknown_sector};

inline std::string_view to_string(FilterReason r) {
  switch (r) {
    case FilterReason::funded_before_posted: return "funded_before_posted";
    case FilterReason::no_english_description: return "no_english_description";
    case FilterReason::empty_description: return "empty_description";
    case FilterReason::no_borrowers: return "no_borrowers";
    case FilterReason::never_funded: return "never_funded";
    case FilterReason::unknown_sector: return "unknown_sector";
  }
  return "unknown";
}

struct LoanRecord {
  std::int64_t id = 0;
  double y = 0.0;  // funding time, days
  int w = 0;       // 1 = group loan
  double loan_amount = 0.0;
  int gender = 0;  // 1 = female majority
  int risker = 0;  // 1 = lender bears default risk
  int sector = 0;  // index into kSectors
  std::array<std::uint8_t, kSectorDummies> sector_dummies{};
  std::vector<std::string> tokens;
};

inline int sector_index(std::string_view name) {
  for (std::size_t i = 0; i < kSectors.size(); ++i)
    if (kSectors[i] == name) return static_cast<int>(i);
  return -1;
}

using TransformResult = std::variant<LoanRecord, FilterReason>;

/// Applies the record-level cleaning rules in order; the first failing rule
/// decides the filter reason.
inline TransformResult transform(const RawLoan& raw) {
  // A funding time of exactly zero is treated like funding before posting.
  if (raw.funded_date && *raw.funded_date <= raw.posted_date) return FilterReason::funded_before_posted;

  if (!raw.description_texts) return FilterReason::no_english_description;
  auto en = raw.description_texts->find("en");
  if (en == raw.description_texts->end()) return FilterReason::no_english_description;
  auto tokens = embed::tokenize(en->second);
  if (tokens.empty()) return FilterReason::empty_description;

  if (raw.borrowers.empty()) return FilterReason::no_borrowers;
  if (!raw.funded_date) return FilterReason::never_funded;

  int sector = sector_index(raw.sector);
  if (sector < 0) return FilterReason::unknown_sector;

  LoanRecord rec;
  rec.id = raw.id;
  rec.w = raw.borrowers.size() > 1 ? 1 : 0;
  rec.y = static_cast<double>(*raw.funded_date - raw.posted_date) / kSecondsPerDay;
  rec.loan_amount = raw.loan_amount;
  int female = 0, male = 0;
  for (const auto& b : raw.borrowers) {
    if (b.gender == "F") ++female;
    else if (b.gender == "M") ++male;
  }
  rec.gender = female >= male ? 1 : 0;  // ties go to female
  rec.risker = raw.nonpayment == "lender" ? 1 : 0;
  rec.sector = sector;
  if (sector < kSectorDummies) rec.sector_dummies[static_cast<std::size_t>(sector)] = 1;
  rec.tokens = std::move(tokens);
  return rec;
}

enum class Split : std::uint8_t { train, validation, test };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::validation: return "validation";
    case Split::test: return "test";
  }
  return "train";
}

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "validation") return Split::validation;
  if (s == "test") return Split::test;
  throw Error("ingest", "invalid_split", std::string(s));
}

struct SplitFractions {
  double train = 0.7;
  double validation = 0.15;
  double test = 0.15;
};

struct Normalization {
  double mean = 0.0;
  double std = 1.0;
};

/// Design matrix plus outcome/treatment vectors and split labels. Loan data keeps
/// its LoanRecords; synthetic data leaves `records` empty.
struct Dataset {
  std::vector<LoanRecord> records;
  std::vector<std::string> covariate_names;
  Eigen::MatrixXd x;
  Eigen::VectorXd y;
  std::vector<int> w;
  std::vector<Split> split;
  std::vector<std::int64_t> ids;
  std::vector<std::vector<std::string>> tokens;
  Normalization normalization;
  std::uint64_t split_seed = 0;

  std::size_t size() const noexcept { return w.size(); }

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < split.size(); ++i)
      if (split[i] == s) out.push_back(i);
    return out;
  }
};

inline std::vector<std::string> loan_covariate_names() {
  std::vector<std::string> names = {"loan_amount", "gender", "risker"};
  for (int k = 0; k < kSectorDummies; ++k) {
    std::string s = "sector_";
    for (char c : kSectors[static_cast<std::size_t>(k)]) s.push_back(c == ' ' ? '_' : static_cast<char>(std::tolower(c)));
    names.push_back(s);
  }
  return names;
}

/// Random partition with exact per-split counts; deterministic given the seed.
inline std::vector<Split> assign_splits(std::size_t n, const SplitFractions& f, std::uint64_t seed) {
  if (!(f.train > 0 && f.validation > 0 && f.test > 0) ||
      std::abs(f.train + f.validation + f.test - 1.0) > 1e-9)
    throw Error("ingest", "invalid_split_fractions");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  auto n_train = static_cast<std::size_t>(std::llround(f.train * static_cast<double>(n)));
  auto n_val = static_cast<std::size_t>(std::llround(f.validation * static_cast<double>(n)));
  n_train = std::min(n_train, n);
  n_val = std::min(n_val, n - n_train);
  std::vector<Split> split(n, Split::test);
  for (std::size_t k = 0; k < n; ++k) {
    if (k < n_train) split[order[k]] = Split::train;
    else if (k < n_train + n_val) split[order[k]] = Split::validation;
  }
  return split;
}

/// Assembles the 17-column covariate matrix (standardized loan amount, gender,
/// risker, 14 sector dummies). Normalization uses the population standard
/// deviation over all records.
inline Dataset build_dataset(std::vector<LoanRecord> records, const SplitFractions& fractions, std::uint64_t seed) {
  if (records.empty()) throw Error("ingest", "empty_input");
  const auto n = static_cast<Eigen::Index>(records.size());
  double mean = 0.0;
  for (const auto& r : records) mean += r.loan_amount;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (const auto& r : records) var += (r.loan_amount - mean) * (r.loan_amount - mean);
  var /= static_cast<double>(n);
  if (!(var > 0.0)) throw Error("ingest", "degenerate_column", "loan_amount");

  Dataset ds;
  ds.normalization = {mean, std::sqrt(var)};
  ds.covariate_names = loan_covariate_names();
  ds.x.resize(n, kCovariates);
  ds.y.resize(n);
  ds.w.resize(records.size());
  ds.ids.resize(records.size());
  ds.tokens.resize(records.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& r = records[static_cast<std::size_t>(i)];
    ds.x(i, 0) = (r.loan_amount - mean) / ds.normalization.std;
    ds.x(i, 1) = r.gender;
    ds.x(i, 2) = r.risker;
    for (int k = 0; k < kSectorDummies; ++k) ds.x(i, 3 + k) = r.sector_dummies[static_cast<std::size_t>(k)];
    ds.y[i] = r.y;
    ds.w[static_cast<std::size_t>(i)] = r.w;
    ds.ids[static_cast<std::size_t>(i)] = r.id;
    ds.tokens[static_cast<std::size_t>(i)] = r.tokens;
  }
  ds.split = assign_splits(records.size(), fractions, seed);
  ds.split_seed = seed;
  ds.records = std::move(records);
  return ds;
}

/// Outcome of running parse + transform over a newline-delimited stream.
struct IngestResult {
  std::vector<LoanRecord> records;
  std::map<std::string, std::size_t> filtered;      // reason -> count
  std::map<std::string, std::size_t> parse_errors;  // code -> count
  std::size_t input_count = 0;
};

inline void ingest_one(const Json& obj, IngestResult& out) {
  ++out.input_count;
  try {
    auto result = transform(parse_loan(obj));
    if (auto* rec = std::get_if<LoanRecord>(&result)) out.records.push_back(std::move(*rec));
    else ++out.filtered[std::string(to_string(std::get<FilterReason>(result)))];
  } catch (const Error& e) {
    ++out.parse_errors[e.code() + (e.detail().empty() ? "" : ":" + e.detail())];
  }
}

/// Accepts newline-delimited loan objects, a JSON array of loans, or an object
/// with a "loans" array (the layout of the raw archive files).
inline void ingest_text(std::string_view text, IngestResult& out) {
  auto first = text.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return;
  Json whole = Json::parse(text.begin(), text.end(), nullptr, false);
  if (!whole.is_discarded() && (whole.is_array() || (whole.is_object() && whole.contains("loans")))) {
    const Json& loans = whole.is_array() ? whole : whole["loans"];
    if (!loans.is_array()) throw Error("ingest", "malformed_json", "loans is not an array");
    for (const auto& obj : loans) ingest_one(obj, out);
    return;
  }
  for (auto line : split_view(text, '\n')) {
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.find_first_not_of(" \t") == std::string_view::npos) continue;
    Json obj = Json::parse(line.begin(), line.end(), nullptr, false);
    if (obj.is_discarded()) {
      ++out.input_count;
      ++out.parse_errors["malformed_json"];
      continue;
    }
    ingest_one(obj, out);
  }
}

struct ArmStats {
  std::size_t n = 0;
  double mean = 0, median = 0, min = 0, max = 0;
  double mean_loan_amount = 0;
  double mean_ratio = 0;  // mean of y / (loan_amount / 25)
};

struct SectorStats {
  std::string sector;
  std::size_t count_treated = 0, count_control = 0;
  double mean_y_treated = 0, mean_y_control = 0, mean_y = 0;
};

struct SummaryReport {
  std::size_t n = 0;
  double treated_share = 0;
  ArmStats overall, treated, control;
  std::vector<SectorStats> sectors;
  /// Sorted y / (loan_amount / 25) per arm; records with zero amount are skipped.
  std::vector<double> ratio_treated, ratio_control;
};

namespace detail {

inline ArmStats arm_stats(std::vector<double> y, const std::vector<double>& amounts, const std::vector<double>& ratios) {
  ArmStats s;
  s.n = y.size();
  if (y.empty()) return s;
  std::sort(y.begin(), y.end());
  s.mean = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(y.size());
  std::size_t m = y.size() / 2;
  s.median = y.size() % 2 ? y[m] : 0.5 * (y[m - 1] + y[m]);
  s.min = y.front();
  s.max = y.back();
  s.mean_loan_amount = std::accumulate(amounts.begin(), amounts.end(), 0.0) / static_cast<double>(amounts.size());
  if (!ratios.empty()) s.mean_ratio = std::accumulate(ratios.begin(), ratios.end(), 0.0) / static_cast<double>(ratios.size());
  return s;
}

}  // namespace detail

inline SummaryReport descriptive_stats(const Dataset& ds) {
  if (ds.records.empty()) throw Error("ingest", "empty_input");
  SummaryReport rep;
  rep.n = ds.records.size();
  std::vector<double> y_all, y_t, y_c, a_all, a_t, a_c, r_all;
  std::vector<SectorStats> sectors(kSectors.size());
  for (std::size_t k = 0; k < kSectors.size(); ++k) sectors[k].sector = std::string(kSectors[k]);
  for (const auto& r : ds.records) {
    double ratio = r.loan_amount > 0 ? r.y / (r.loan_amount / 25.0) : NAN;
    y_all.push_back(r.y);
    a_all.push_back(r.loan_amount);
    if (!std::isnan(ratio)) r_all.push_back(ratio);
    auto& sec = sectors[static_cast<std::size_t>(r.sector)];
    if (r.w) {
      y_t.push_back(r.y);
      a_t.push_back(r.loan_amount);
      if (!std::isnan(ratio)) rep.ratio_treated.push_back(ratio);
      ++sec.count_treated;
      sec.mean_y_treated += r.y;
    } else {
      y_c.push_back(r.y);
      a_c.push_back(r.loan_amount);
      if (!std::isnan(ratio)) rep.ratio_control.push_back(ratio);
      ++sec.count_control;
      sec.mean_y_control += r.y;
    }
  }
  rep.treated_share = static_cast<double>(y_t.size()) / static_cast<double>(rep.n);
  rep.overall = detail::arm_stats(y_all, a_all, r_all);
  rep.treated = detail::arm_stats(y_t, a_t, rep.ratio_treated);
  rep.control = detail::arm_stats(y_c, a_c, rep.ratio_control);
  std::sort(rep.ratio_treated.begin(), rep.ratio_treated.end());
  std::sort(rep.ratio_control.begin(), rep.ratio_control.end());
  for (auto& s : sectors) {
    auto total = s.count_treated + s.count_control;
    if (total == 0) continue;
    s.mean_y = (s.mean_y_treated + s.mean_y_control) / static_cast<double>(total);
    if (s.count_treated) s.mean_y_treated /= static_cast<double>(s.count_treated);
    if (s.count_control) s.mean_y_control /= static_cast<double>(s.count_control);
    rep.sectors.push_back(s);
  }
  return rep;
}

}  // namespace kivaci::ingest
