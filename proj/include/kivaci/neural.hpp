#pragma once

#include <Eigen/Dense>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "error.hpp"

namespace kivaci::neural {

using Json = nlohmann::json;
using Rng = std::mt19937_64;

enum class Head { propensity, outcome };
enum class Encoder { bag, lstm };
enum class Mode { train, eval };

/// Layer sizes of one network. Both encoders share the same tail:
///
///   text -> encoder -> text_layers (ReLU) --+
///                                           +-> concat -> joint_layers (ReLU)
///   covariates -> cov_units (ReLU) ---------+        -> [outcome_layers (ReLU)] -> head
///
/// The bag encoder passes the loan vector through unchanged; the LSTM encoder
/// runs two stacked LSTM layers and emits the last top-layer state, or an
/// attention-weighted average of all top-layer states.
struct Architecture {
  Encoder encoder = Encoder::bag;
  Head head = Head::propensity;
  int text_dim = 100;  // 0 disables the text branch (bag encoder only)
  int cov_dim = 17;
  int lstm_hidden = 32;
  std::vector<int> text_layers{64, 32};
  int cov_units = 8;
  std::vector<int> joint_layers{32};
  std::vector<int> outcome_layers{16, 8};
  bool attention = false;

  int output_dim() const { return head == Head::propensity ? 2 : 1; }
  bool has_text() const { return text_dim > 0; }

  Json to_json() const {
    return {{"encoder", encoder == Encoder::bag ? "bag" : "lstm"},
            {"head", head == Head::propensity ? "propensity" : "outcome"},
            {"text_dim", text_dim},
            {"cov_dim", cov_dim},
            {"lstm_hidden", lstm_hidden},
            {"text_layers", text_layers},
            {"cov_units", cov_units},
            {"joint_layers", joint_layers},
            {"outcome_layers", outcome_layers},
            {"attention", attention}};
  }

  static Architecture from_json(const Json& j) {
    Architecture a;
    a.encoder = j.at("encoder").get<std::string>() == "lstm" ? Encoder::lstm : Encoder::bag;
    a.head = j.at("head").get<std::string>() == "outcome" ? Head::outcome : Head::propensity;
    a.text_dim = j.at("text_dim").get<int>();
    a.cov_dim = j.at("cov_dim").get<int>();
    a.lstm_hidden = j.at("lstm_hidden").get<int>();
    a.text_layers = j.at("text_layers").get<std::vector<int>>();
    a.cov_units = j.at("cov_units").get<int>();
    a.joint_layers = j.at("joint_layers").get<std::vector<int>>();
    a.outcome_layers = j.at("outcome_layers").get<std::vector<int>>();
    a.attention = j.at("attention").get<bool>();
    return a;
  }
};

/// Bag-of-embeddings network: h1, h2 on the loan vector, s_final on the covariates,
/// h3 on their concatenation.
inline Architecture mlp_architecture(Head head, int text_dim, int cov_dim) {
  Architecture a;
  a.encoder = Encoder::bag;
  a.head = head;
  a.text_dim = text_dim;
  a.cov_dim = cov_dim;
  a.text_layers = text_dim > 0 ? std::vector<int>{64, 32} : std::vector<int>{};
  return a;
}

/// Deep LSTM: h3, h4 on the recurrent output, h5 on [h4, s_final]. Outcome
/// variants average all top-layer states with learned attention weights.
inline Architecture lstm_architecture(Head head, int text_dim, int cov_dim) {
  Architecture a;
  a.encoder = Encoder::lstm;
  a.head = head;
  a.text_dim = text_dim;
  a.cov_dim = cov_dim;
  a.lstm_hidden = 32;
  a.text_layers = {32, 32};
  a.joint_layers = {32};
  a.attention = head == Head::outcome;
  return a;
}

struct TrainConfig {
  double learning_rate = 1e-3;
  double l2_strength = 1e-4;
  double dropout_rate = 0.2;
  int batch_size = 64;
  int max_epochs = 100;
  int patience = 5;
  std::uint64_t seed = 1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const {
    if (!(learning_rate > 0)) throw Error("neural", "config_invalid", "learning_rate");
    if (!(l2_strength >= 0)) throw Error("neural", "config_invalid", "l2_strength");
    if (!(dropout_rate >= 0 && dropout_rate < 1)) throw Error("neural", "config_invalid", "dropout_rate");
    if (batch_size < 1) throw Error("neural", "config_invalid", "batch_size");
    if (max_epochs < 1) throw Error("neural", "config_invalid", "max_epochs");
    if (patience < 0) throw Error("neural", "config_invalid", "patience");
  }
};

struct Block {
  std::string name;
  Eigen::Index rows = 0, cols = 0;
  Eigen::Index offset = 0;
  bool weight = false;  // weights get L2; biases do not
  double init_bound = 0.0;
};

namespace detail {

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

inline Eigen::VectorXd relu(const Eigen::VectorXd& v) { return v.cwiseMax(0.0); }

inline Eigen::VectorXd softmax(const Eigen::VectorXd& z) {
  Eigen::VectorXd e = (z.array() - z.maxCoeff()).exp();
  return e / e.sum();
}

/// Two-class softmax kept strictly inside (0, 1).
inline Eigen::VectorXd class_probabilities(const Eigen::VectorXd& z) {
  Eigen::VectorXd p = softmax(z);
  constexpr double lo = 1e-15;
  if (p.size() == 2 && p.minCoeff() < lo) {
    const Eigen::Index small = p[0] < p[1] ? 0 : 1;
    p[small] = lo;
    p[1 - small] = 1.0 - lo;
  }
  return p;
}

/// Zeroes entries of `grad` where the ReLU output was not positive.
inline Eigen::VectorXd relu_back(const Eigen::VectorXd& grad, const Eigen::VectorXd& out) {
  return (out.array() > 0.0).select(grad, 0.0);
}

}  // namespace detail

/// Per-sample intermediate values needed by backpropagation.
struct Cache {
  struct LstmLayer {
    Eigen::MatrixXd input;  // in x L
    Eigen::MatrixXd i, f, o, g, c, h, tanh_c;  // H x L
  };
  std::vector<LstmLayer> lstm;
  Eigen::VectorXd attention;  // L
  Eigen::VectorXd encoded;
  std::vector<Eigen::VectorXd> text_out;
  Eigen::VectorXd s_final;
  Eigen::VectorXd concat, concat_mask;
  std::vector<Eigen::VectorXd> joint_act, joint_mask;  // act = relu(pre) before dropout
  std::vector<Eigen::VectorXd> joint_out;             // after dropout
  std::vector<Eigen::VectorXd> tail_out;
  Eigen::VectorXd logits;
  Eigen::VectorXd output;
};

/// Parameters of one architecture, stored as a flat vector partitioned into
/// named blocks so optimizers and gradient checks can treat them uniformly.
class Network {
 public:
  explicit Network(Architecture arch) : arch_(std::move(arch)) {
    if (arch_.cov_dim < 1 || arch_.cov_units < 1) throw Error("neural", "shape_mismatch", "covariate branch");
    if (arch_.encoder == Encoder::lstm && (arch_.text_dim < 1 || arch_.lstm_hidden < 1))
      throw Error("neural", "shape_mismatch", "lstm encoder needs text_dim and lstm_hidden");
    Eigen::Index prev = 0;
    if (arch_.encoder == Encoder::lstm) {
      const int hid = arch_.lstm_hidden;
      int in = arch_.text_dim;
      for (int l = 0; l < 2; ++l) {
        const double bound = std::sqrt(6.0 / (in + hid));
        lstm_wx_[l] = add("lstm" + std::to_string(l + 1) + ".Wx", 4 * hid, in, true, bound);
        lstm_wh_[l] = add("lstm" + std::to_string(l + 1) + ".Wh", 4 * hid, hid, true, std::sqrt(6.0 / (2.0 * hid)));
        lstm_b_[l] = add("lstm" + std::to_string(l + 1) + ".b", 4 * hid, 1, false, 0.0);
        in = hid;
      }
      if (arch_.attention) attn_ = add("attention.v", 1, hid, true, std::sqrt(6.0 / (hid + 1)));
      prev = hid;
    } else {
      prev = arch_.text_dim;
    }
    if (arch_.has_text()) {
      for (std::size_t k = 0; k < arch_.text_layers.size(); ++k) {
        const int units = arch_.text_layers[k];
        text_a_.push_back(add("text" + std::to_string(k + 1) + ".A", units, prev, true, glorot(prev, units)));
        text_b_.push_back(add("text" + std::to_string(k + 1) + ".b", units, 1, false, 0.0));
        prev = units;
      }
    } else {
      prev = 0;
    }
    text_width_ = prev;
    cov_a_ = add("cov.A", arch_.cov_units, arch_.cov_dim, true, glorot(arch_.cov_dim, arch_.cov_units));
    cov_b_ = add("cov.b", arch_.cov_units, 1, false, 0.0);
    prev += arch_.cov_units;
    for (std::size_t k = 0; k < arch_.joint_layers.size(); ++k) {
      const int units = arch_.joint_layers[k];
      joint_a_.push_back(add("joint" + std::to_string(k + 1) + ".A", units, prev, true, glorot(prev, units)));
      joint_b_.push_back(add("joint" + std::to_string(k + 1) + ".b", units, 1, false, 0.0));
      prev = units;
    }
    if (arch_.head == Head::outcome) {
      for (std::size_t k = 0; k < arch_.outcome_layers.size(); ++k) {
        const int units = arch_.outcome_layers[k];
        tail_a_.push_back(add("tail" + std::to_string(k + 1) + ".A", units, prev, true, glorot(prev, units)));
        tail_b_.push_back(add("tail" + std::to_string(k + 1) + ".b", units, 1, false, 0.0));
        prev = units;
      }
    }
    const int out = arch_.output_dim();
    out_a_ = add("out.A", out, prev, true, glorot(prev, out));
    out_b_ = add("out.b", out, 1, false, 0.0);
    params_ = Eigen::VectorXd::Zero(size_);
  }

  const Architecture& architecture() const noexcept { return arch_; }
  const std::vector<Block>& blocks() const noexcept { return blocks_; }
  Eigen::Index num_params() const noexcept { return size_; }
  Eigen::VectorXd& params() noexcept { return params_; }
  const Eigen::VectorXd& params() const noexcept { return params_; }

  /// Uniform(+-sqrt(6 / (fan_in + fan_out))) weights, zero biases.
  void initialize(std::uint64_t seed) {
    Rng rng(seed);
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    for (const auto& b : blocks_)
      for (Eigen::Index k = 0; k < b.rows * b.cols; ++k) params_[b.offset + k] = b.weight ? b.init_bound * unit(rng) : 0.0;
  }

  Eigen::Map<const Eigen::MatrixXd> block(int id) const {
    const auto& b = blocks_[static_cast<std::size_t>(id)];
    return {params_.data() + b.offset, b.rows, b.cols};
  }
  Eigen::Map<Eigen::MatrixXd> mutable_block(int id) {
    const auto& b = blocks_[static_cast<std::size_t>(id)];
    return {params_.data() + b.offset, b.rows, b.cols};
  }
  int output_bias_block() const noexcept { return out_b_; }

  /// Forward pass. `sequence` (text_dim x L) is read by the LSTM encoder, `text`
  /// by the bag encoder. Dropout masks are drawn from `rng` in train mode only.
  Eigen::VectorXd forward(const Eigen::VectorXd& text, const Eigen::MatrixXd& sequence, const Eigen::VectorXd& cov,
                          Mode mode, double dropout, Rng* rng, Cache* cache = nullptr) const {
    Cache local;
    Cache& c = cache ? *cache : local;
    if (cov.size() != arch_.cov_dim) throw Error("neural", "shape_mismatch", "covariates");
    const bool drop = mode == Mode::train && dropout > 0.0;
    if (drop && !rng) throw Error("neural", "missing_rng");

    Eigen::VectorXd h;
    if (arch_.encoder == Encoder::lstm) {
      h = encode_lstm(sequence, c);
    } else if (arch_.has_text()) {
      if (text.size() != arch_.text_dim) throw Error("neural", "shape_mismatch", "loan vector");
      h = text;
    }
    c.encoded = h;
    c.text_out.clear();
    if (arch_.has_text()) {
      for (std::size_t k = 0; k < text_a_.size(); ++k) {
        h = detail::relu(block(text_a_[k]) * h + block(text_b_[k]).col(0));
        c.text_out.push_back(h);
      }
    }
    c.s_final = detail::relu(block(cov_a_) * cov + block(cov_b_).col(0));
    Eigen::VectorXd concat(text_width_ + arch_.cov_units);
    if (text_width_ > 0) concat.head(text_width_) = h;
    concat.tail(arch_.cov_units) = c.s_final;
    c.concat_mask = drop ? dropout_mask(concat.size(), dropout, *rng) : Eigen::VectorXd();
    if (drop) concat.array() *= c.concat_mask.array();
    c.concat = concat;

    h = concat;
    c.joint_act.clear();
    c.joint_mask.clear();
    c.joint_out.clear();
    for (std::size_t k = 0; k < joint_a_.size(); ++k) {
      Eigen::VectorXd act = detail::relu(block(joint_a_[k]) * h + block(joint_b_[k]).col(0));
      c.joint_act.push_back(act);
      Eigen::VectorXd mask = drop ? dropout_mask(act.size(), dropout, *rng) : Eigen::VectorXd();
      if (drop) act.array() *= mask.array();
      c.joint_mask.push_back(mask);
      c.joint_out.push_back(act);
      h = act;
    }
    c.tail_out.clear();
    for (std::size_t k = 0; k < tail_a_.size(); ++k) {
      h = detail::relu(block(tail_a_[k]) * h + block(tail_b_[k]).col(0));
      c.tail_out.push_back(h);
    }
    c.logits = block(out_a_) * h + block(out_b_).col(0);
    c.output = arch_.head == Head::propensity ? detail::class_probabilities(c.logits) : detail::relu(c.logits);
    return c.output;
  }

  /// Accumulates into `grad` the parameter gradient of a per-sample loss whose
  /// derivative with respect to the output logits is `d_logits`.
  void backward(const Eigen::VectorXd& text, const Eigen::VectorXd& cov, const Cache& c,
                const Eigen::VectorXd& d_logits, Eigen::VectorXd& grad) const {
    (void)text;
    if (grad.size() != size_) grad = Eigen::VectorXd::Zero(size_);
    auto g = [&](int id) {
      const auto& b = blocks_[static_cast<std::size_t>(id)];
      return Eigen::Map<Eigen::MatrixXd>(grad.data() + b.offset, b.rows, b.cols);
    };

    const Eigen::VectorXd& last = !c.tail_out.empty()   ? c.tail_out.back()
                                  : !c.joint_out.empty() ? c.joint_out.back()
                                                         : c.concat;
    g(out_a_).noalias() += d_logits * last.transpose();
    g(out_b_).col(0) += d_logits;
    Eigen::VectorXd d = block(out_a_).transpose() * d_logits;

    for (std::size_t k = tail_a_.size(); k-- > 0;) {
      Eigen::VectorXd dpre = detail::relu_back(d, c.tail_out[k]);
      const Eigen::VectorXd& prev = k > 0 ? c.tail_out[k - 1] : (!c.joint_out.empty() ? c.joint_out.back() : c.concat);
      g(tail_a_[k]).noalias() += dpre * prev.transpose();
      g(tail_b_[k]).col(0) += dpre;
      d = block(tail_a_[k]).transpose() * dpre;
    }
    for (std::size_t k = joint_a_.size(); k-- > 0;) {
      Eigen::VectorXd dact = d;
      if (c.joint_mask[k].size()) dact.array() *= c.joint_mask[k].array();
      Eigen::VectorXd dpre = detail::relu_back(dact, c.joint_act[k]);
      const Eigen::VectorXd& prev = k > 0 ? c.joint_out[k - 1] : c.concat;
      g(joint_a_[k]).noalias() += dpre * prev.transpose();
      g(joint_b_[k]).col(0) += dpre;
      d = block(joint_a_[k]).transpose() * dpre;
    }
    if (c.concat_mask.size()) d.array() *= c.concat_mask.array();

    Eigen::VectorXd ds = detail::relu_back(d.tail(arch_.cov_units), c.s_final);
    g(cov_a_).noalias() += ds * cov.transpose();
    g(cov_b_).col(0) += ds;

    if (!arch_.has_text()) return;
    Eigen::VectorXd dh = d.head(text_width_);
    for (std::size_t k = text_a_.size(); k-- > 0;) {
      Eigen::VectorXd dpre = detail::relu_back(dh, c.text_out[k]);
      const Eigen::VectorXd& prev = k > 0 ? c.text_out[k - 1] : c.encoded;
      g(text_a_[k]).noalias() += dpre * prev.transpose();
      g(text_b_[k]).col(0) += dpre;
      dh = block(text_a_[k]).transpose() * dpre;
    }
    if (arch_.encoder == Encoder::lstm) backward_lstm(c, dh, grad);
  }

  /// l2 * sum of squared weights (biases excluded).
  double l2_penalty(double l2) const {
    if (l2 == 0.0) return 0.0;
    double s = 0.0;
    for (const auto& b : blocks_)
      if (b.weight) s += params_.segment(b.offset, b.rows * b.cols).squaredNorm();
    return l2 * s;
  }

  void add_l2_gradient(double l2, Eigen::VectorXd& grad) const {
    if (l2 == 0.0) return;
    for (const auto& b : blocks_)
      if (b.weight) grad.segment(b.offset, b.rows * b.cols) += 2.0 * l2 * params_.segment(b.offset, b.rows * b.cols);
  }

  Json to_json() const {
    return {{"format", "kivaci-network"},
            {"version", 1},
            {"architecture", arch_.to_json()},
            {"parameters", std::vector<double>(params_.data(), params_.data() + params_.size())}};
  }

  static Network from_json(const Json& j) {
    if (j.at("format").get<std::string>() != "kivaci-network" || j.at("version").get<int>() != 1)
      throw Error("neural", "unsupported_model_format");
    Network net(Architecture::from_json(j.at("architecture")));
    auto p = j.at("parameters").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(p.size()) != net.size_) throw Error("neural", "shape_mismatch", "parameters");
    net.params_ = Eigen::Map<Eigen::VectorXd>(p.data(), net.size_);
    return net;
  }

 private:
  static double glorot(Eigen::Index fan_in, Eigen::Index fan_out) {
    return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  }

  int add(std::string name, Eigen::Index rows, Eigen::Index cols, bool weight, double bound) {
    blocks_.push_back({std::move(name), rows, cols, size_, weight, bound});
    size_ += rows * cols;
    return static_cast<int>(blocks_.size()) - 1;
  }

  static Eigen::VectorXd dropout_mask(Eigen::Index n, double rate, Rng& rng) {
    std::bernoulli_distribution keep(1.0 - rate);
    Eigen::VectorXd m(n);
    const double scale = 1.0 / (1.0 - rate);
    for (Eigen::Index k = 0; k < n; ++k) m[k] = keep(rng) ? scale : 0.0;
    return m;
  }

  Eigen::VectorXd encode_lstm(const Eigen::MatrixXd& sequence, Cache& c) const {
    const int hid = arch_.lstm_hidden;
    if (sequence.cols() > 0 && sequence.rows() != arch_.text_dim) throw Error("neural", "shape_mismatch", "sequence");
    // An empty sequence is fed as a single zero vector.
    Eigen::MatrixXd input = sequence.cols() > 0 ? sequence : Eigen::MatrixXd::Zero(arch_.text_dim, 1);
    const Eigen::Index steps = input.cols();
    c.lstm.assign(2, {});
    for (int l = 0; l < 2; ++l) {
      auto& L = c.lstm[static_cast<std::size_t>(l)];
      L.input = input;
      for (auto* m : {&L.i, &L.f, &L.o, &L.g, &L.c, &L.h, &L.tanh_c}) m->resize(hid, steps);
      const auto wx = block(lstm_wx_[l]);
      const auto wh = block(lstm_wh_[l]);
      const auto b = block(lstm_b_[l]).col(0);
      Eigen::MatrixXd zx = wx * input;
      Eigen::VectorXd h_prev = Eigen::VectorXd::Zero(hid), c_prev = Eigen::VectorXd::Zero(hid);
      for (Eigen::Index t = 0; t < steps; ++t) {
        Eigen::VectorXd z = zx.col(t) + wh * h_prev + b;
        for (int k = 0; k < hid; ++k) {
          L.i(k, t) = detail::sigmoid(z[k]);
          L.f(k, t) = detail::sigmoid(z[hid + k]);
          L.o(k, t) = detail::sigmoid(z[2 * hid + k]);
          L.g(k, t) = std::tanh(z[3 * hid + k]);
        }
        L.c.col(t) = L.f.col(t).cwiseProduct(c_prev) + L.i.col(t).cwiseProduct(L.g.col(t));
        L.tanh_c.col(t) = L.c.col(t).array().tanh();
        L.h.col(t) = L.o.col(t).cwiseProduct(L.tanh_c.col(t));
        h_prev = L.h.col(t);
        c_prev = L.c.col(t);
      }
      input = L.h;
    }
    const auto& top = c.lstm[1].h;
    if (arch_.attention) {
      Eigen::VectorXd scores = (block(attn_) * top).transpose();
      c.attention = detail::softmax(scores);
      return top * c.attention;
    }
    c.attention.resize(0);
    return top.col(steps - 1);
  }

  void backward_lstm(const Cache& c, const Eigen::VectorXd& d_encoded, Eigen::VectorXd& grad) const {
    auto g = [&](int id) {
      const auto& b = blocks_[static_cast<std::size_t>(id)];
      return Eigen::Map<Eigen::MatrixXd>(grad.data() + b.offset, b.rows, b.cols);
    };
    const int hid = arch_.lstm_hidden;
    const auto& top = c.lstm[1].h;
    const Eigen::Index steps = top.cols();
    Eigen::MatrixXd d_h = Eigen::MatrixXd::Zero(hid, steps);
    if (arch_.attention) {
      const Eigen::VectorXd& a = c.attention;
      Eigen::VectorXd d_alpha = top.transpose() * d_encoded;
      const double mean = a.dot(d_alpha);
      Eigen::VectorXd d_score = a.cwiseProduct((d_alpha.array() - mean).matrix());
      g(attn_).noalias() += (top * d_score).transpose();
      d_h = d_encoded * a.transpose();
      d_h.noalias() += block(attn_).transpose() * d_score.transpose();
    } else {
      d_h.col(steps - 1) = d_encoded;
    }
    for (int l = 1; l >= 0; --l) {
      const auto& L = c.lstm[static_cast<std::size_t>(l)];
      const auto wx = block(lstm_wx_[l]);
      const auto wh = block(lstm_wh_[l]);
      Eigen::MatrixXd d_z(4 * hid, steps);
      Eigen::VectorXd dh_next = Eigen::VectorXd::Zero(hid), dc_next = Eigen::VectorXd::Zero(hid);
      for (Eigen::Index t = steps - 1; t >= 0; --t) {
        Eigen::VectorXd dh = d_h.col(t) + dh_next;
        Eigen::ArrayXd o = L.o.col(t).array(), i = L.i.col(t).array(), f = L.f.col(t).array(),
                       gg = L.g.col(t).array(), tc = L.tanh_c.col(t).array();
        Eigen::ArrayXd c_prev = Eigen::ArrayXd::Zero(hid);
        if (t > 0) c_prev = L.c.col(t - 1).array();
        Eigen::ArrayXd d_o = dh.array() * tc;
        Eigen::ArrayXd d_c = dc_next.array() + dh.array() * o * (1.0 - tc.square());
        d_z.col(t).segment(0, hid) = (d_c * gg * i * (1.0 - i)).matrix();
        d_z.col(t).segment(hid, hid) = (d_c * c_prev * f * (1.0 - f)).matrix();
        d_z.col(t).segment(2 * hid, hid) = (d_o * o * (1.0 - o)).matrix();
        d_z.col(t).segment(3 * hid, hid) = (d_c * i * (1.0 - gg.square())).matrix();
        dc_next = (d_c * f).matrix();
        dh_next = wh.transpose() * d_z.col(t);
      }
      g(lstm_wx_[l]).noalias() += d_z * L.input.transpose();
      if (steps > 1) g(lstm_wh_[l]).noalias() += d_z.rightCols(steps - 1) * L.h.leftCols(steps - 1).transpose();
      g(lstm_b_[l]).col(0) += d_z.rowwise().sum();
      if (l == 1) d_h = wx.transpose() * d_z;
    }
  }

  Architecture arch_;
  std::vector<Block> blocks_;
  Eigen::Index size_ = 0;
  Eigen::VectorXd params_;
  Eigen::Index text_width_ = 0;
  int lstm_wx_[2] = {-1, -1}, lstm_wh_[2] = {-1, -1}, lstm_b_[2] = {-1, -1};
  int attn_ = -1;
  std::vector<int> text_a_, text_b_, joint_a_, joint_b_, tail_a_, tail_b_;
  int cov_a_ = -1, cov_b_ = -1, out_a_ = -1, out_b_ = -1;
};

inline Eigen::MatrixXd stack_sequence(const std::vector<Eigen::VectorXd>& seq, int dim) {
  Eigen::MatrixXd m(dim, static_cast<Eigen::Index>(seq.size()));
  for (std::size_t t = 0; t < seq.size(); ++t) {
    if (seq[t].size() != dim) throw Error("neural", "shape_mismatch", "sequence element");
    m.col(static_cast<Eigen::Index>(t)) = seq[t];
  }
  return m;
}

/// Bag-of-embeddings forward pass. Propensity heads return the 2-vector of
/// class probabilities, outcome heads a non-negative scalar.
inline Eigen::VectorXd mlp_forward(const Network& net, const Eigen::VectorXd& loan_vec, const Eigen::VectorXd& covariates,
                                   Mode mode = Mode::eval, double dropout = 0.2, Rng* rng = nullptr) {
  if (net.architecture().encoder != Encoder::bag) throw Error("neural", "shape_mismatch", "not a bag network");
  return net.forward(loan_vec, Eigen::MatrixXd(), covariates, mode, dropout, rng);
}

inline Eigen::VectorXd lstm_forward(const Network& net, const std::vector<Eigen::VectorXd>& sequence,
                                    const Eigen::VectorXd& covariates, Mode mode = Mode::eval, double dropout = 0.2,
                                    Rng* rng = nullptr, Cache* cache = nullptr) {
  if (net.architecture().encoder != Encoder::lstm) throw Error("neural", "shape_mismatch", "not an lstm network");
  return net.forward(Eigen::VectorXd(), stack_sequence(sequence, net.architecture().text_dim), covariates, mode,
                     dropout, rng, cache);
}

enum class LossKind { cross_entropy, squared_error };

/// Data loss of one output plus the L2 penalty of `net`.
inline double loss(const Eigen::VectorXd& output, double target, LossKind kind, const Network& net, double l2_strength) {
  double data = 0.0;
  if (kind == LossKind::cross_entropy) {
    if (output.size() != 2 || (target != 0.0 && target != 1.0)) throw Error("neural", "invalid_target");
    data = -std::log(output[static_cast<Eigen::Index>(target)]);
  } else {
    if (output.size() != 1 || !std::isfinite(target)) throw Error("neural", "invalid_target");
    data = (output[0] - target) * (output[0] - target);
  }
  return data + net.l2_penalty(l2_strength);
}

/// Inputs for a set of units. Bag encoders read rows of `text`; LSTM encoders
/// read `tokens`, which index columns of the shared `vocabulary` (dim x V).
struct SampleSet {
  Eigen::MatrixXd text;
  std::vector<std::vector<int>> tokens;
  std::shared_ptr<const Eigen::MatrixXd> vocabulary;
  Eigen::MatrixXd covariates;
  Eigen::VectorXd targets;

  std::size_t size() const noexcept { return static_cast<std::size_t>(covariates.rows()); }

  Eigen::MatrixXd sequence(std::size_t i) const {
    if (tokens.empty() || !vocabulary) return {};
    const auto& row = tokens[i];
    Eigen::MatrixXd m(vocabulary->rows(), static_cast<Eigen::Index>(row.size()));
    for (std::size_t t = 0; t < row.size(); ++t) m.col(static_cast<Eigen::Index>(t)) = vocabulary->col(row[t]);
    return m;
  }

  Eigen::VectorXd text_row(std::size_t i) const {
    if (text.cols() == 0) return {};
    return text.row(static_cast<Eigen::Index>(i)).transpose();
  }

  SampleSet subset(const std::vector<std::size_t>& idx) const {
    SampleSet s;
    s.vocabulary = vocabulary;
    s.text.resize(static_cast<Eigen::Index>(idx.size()), text.cols());
    s.covariates.resize(static_cast<Eigen::Index>(idx.size()), covariates.cols());
    s.targets.resize(static_cast<Eigen::Index>(idx.size()));
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const auto r = static_cast<Eigen::Index>(idx[k]), kk = static_cast<Eigen::Index>(k);
      if (text.cols()) s.text.row(kk) = text.row(r);
      s.covariates.row(kk) = covariates.row(r);
      if (targets.size()) s.targets[kk] = targets[r];
      if (!tokens.empty()) s.tokens.push_back(tokens[idx[k]]);
    }
    return s;
  }
};

namespace detail {

inline LossKind loss_kind(const Network& net) {
  return net.architecture().head == Head::propensity ? LossKind::cross_entropy : LossKind::squared_error;
}

/// Per-sample data loss and its derivative with respect to the logits.
inline double data_loss(const Cache& c, double target, LossKind kind, Eigen::VectorXd* d_logits) {
  if (kind == LossKind::cross_entropy) {
    const auto cls = static_cast<Eigen::Index>(target);
    // log-softmax from logits for stability
    const double mx = c.logits.maxCoeff();
    const double lse = mx + std::log((c.logits.array() - mx).exp().sum());
    if (d_logits) {
      *d_logits = c.output;
      (*d_logits)[cls] -= 1.0;
    }
    return lse - c.logits[cls];
  }
  const double r = c.output[0] - target;
  if (d_logits) *d_logits = Eigen::VectorXd::Constant(1, c.logits[0] > 0.0 ? 2.0 * r : 0.0);
  return r * r;
}

}  // namespace detail

/// Regularized batch-mean objective and its exact gradient over `idx`.
inline double batch_gradient(const Network& net, const SampleSet& data, const std::vector<std::size_t>& idx,
                             double l2_strength, Mode mode, double dropout, Rng* rng, Eigen::VectorXd& grad) {
  grad = Eigen::VectorXd::Zero(net.num_params());
  if (idx.empty()) throw Error("neural", "empty_batch");
  const auto kind = detail::loss_kind(net);
  Cache cache;
  Eigen::VectorXd d_logits;
  double total = 0.0;
  for (std::size_t i : idx) {
    Eigen::VectorXd text = data.text_row(i);
    Eigen::VectorXd cov = data.covariates.row(static_cast<Eigen::Index>(i)).transpose();
    net.forward(text, data.sequence(i), cov, mode, dropout, rng, &cache);
    total += detail::data_loss(cache, data.targets[static_cast<Eigen::Index>(i)], kind, &d_logits);
    net.backward(text, cov, cache, d_logits, grad);
  }
  const double inv = 1.0 / static_cast<double>(idx.size());
  grad *= inv;
  net.add_l2_gradient(l2_strength, grad);
  return total * inv + net.l2_penalty(l2_strength);
}

/// Eval-mode objective, used by finite-difference checks.
inline double batch_objective(const Network& net, const SampleSet& data, const std::vector<std::size_t>& idx,
                              double l2_strength) {
  const auto kind = detail::loss_kind(net);
  Cache cache;
  double total = 0.0;
  for (std::size_t i : idx) {
    net.forward(data.text_row(i), data.sequence(i), data.covariates.row(static_cast<Eigen::Index>(i)).transpose(),
                Mode::eval, 0.0, nullptr, &cache);
    total += detail::data_loss(cache, data.targets[static_cast<Eigen::Index>(i)], kind, nullptr);
  }
  return total / static_cast<double>(idx.size()) + net.l2_penalty(l2_strength);
}

/// Eval-mode outputs, one row per unit.
inline Eigen::MatrixXd predict(const Network& net, const SampleSet& data) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(data.size()), net.architecture().output_dim());
  for (std::size_t i = 0; i < data.size(); ++i)
    out.row(static_cast<Eigen::Index>(i)) =
        net.forward(data.text_row(i), data.sequence(i), data.covariates.row(static_cast<Eigen::Index>(i)).transpose(),
                    Mode::eval, 0.0, nullptr)
            .transpose();
  return out;
}

class Adam {
 public:
  Adam(Eigen::Index n, const TrainConfig& cfg)
      : m_(Eigen::VectorXd::Zero(n)), v_(Eigen::VectorXd::Zero(n)), cfg_(cfg) {}

  void step(Eigen::VectorXd& theta, const Eigen::VectorXd& grad) {
    ++t_;
    m_ = cfg_.beta1 * m_ + (1.0 - cfg_.beta1) * grad;
    v_ = cfg_.beta2 * v_ + (1.0 - cfg_.beta2) * grad.cwiseProduct(grad);
    const double c1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double c2 = 1.0 - std::pow(cfg_.beta2, t_);
    theta.array() -= cfg_.learning_rate * (m_.array() / c1) / ((v_.array() / c2).sqrt() + cfg_.epsilon);
  }

 private:
  Eigen::VectorXd m_, v_;
  TrainConfig cfg_;
  int t_ = 0;
};

struct EpochLog {
  int epoch = 0;
  double train_loss = 0;
  double val_loss = 0;
  double metric = 0;  // validation accuracy (propensity) or RMSE (outcome)
};

struct FittedModel {
  Network network;
  std::vector<EpochLog> log;
  int best_epoch = 0;
};

/// Validation accuracy (propensity, threshold 0.5) or RMSE (outcome).
inline double validation_metric(const Network& net, const SampleSet& data) {
  Eigen::MatrixXd out = predict(net, data);
  if (net.architecture().head == Head::propensity) {
    double correct = 0;
    for (Eigen::Index i = 0; i < out.rows(); ++i) correct += ((out(i, 1) >= 0.5) == (data.targets[i] == 1.0)) ? 1 : 0;
    return correct / static_cast<double>(out.rows());
  }
  return std::sqrt((out.col(0) - data.targets).squaredNorm() / static_cast<double>(out.rows()));
}

/// Mini-batch Adam with early stopping on validation loss. Training stops once
/// `patience` epochs have passed without improvement; the best-validation
/// parameters are returned.
inline FittedModel train(const Architecture& arch, const SampleSet& train_set, const SampleSet& val_set,
                         const TrainConfig& cfg) {
  cfg.validate();
  if (train_set.size() == 0 || val_set.size() == 0) throw Error("neural", "empty_split");
  Network net(arch);
  net.initialize(cfg.seed);
  // Start the ReLU outcome head at the mean target so it is active on the raw day scale.
  if (arch.head == Head::outcome) net.mutable_block(net.output_bias_block())(0, 0) = train_set.targets.mean();

  Rng rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  Adam opt(net.num_params(), cfg);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<std::size_t> val_idx(val_set.size());
  std::iota(val_idx.begin(), val_idx.end(), std::size_t{0});

  FittedModel fitted{net, {}, 0};
  double best = std::numeric_limits<double>::infinity();
  Eigen::VectorXd grad;
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(start),
                                     order.begin() + static_cast<std::ptrdiff_t>(std::min(
                                                         order.size(), start + static_cast<std::size_t>(cfg.batch_size))));
      epoch_loss += batch_gradient(net, train_set, batch, cfg.l2_strength, Mode::train, cfg.dropout_rate, &rng, grad);
      opt.step(net.params(), grad);
      ++batches;
    }
    EpochLog entry;
    entry.epoch = epoch;
    entry.train_loss = epoch_loss / static_cast<double>(batches);
    entry.val_loss = batch_objective(net, val_set, val_idx, 0.0);
    entry.metric = validation_metric(net, val_set);
    fitted.log.push_back(entry);
    if (!std::isfinite(entry.train_loss) || !std::isfinite(entry.val_loss) || !net.params().allFinite())
      throw Error("neural", "non_finite_loss", "epoch " + std::to_string(epoch));
    if (entry.val_loss < best) {
      best = entry.val_loss;
      fitted.best_epoch = epoch;
      fitted.network = net;
    }
    if (epoch - fitted.best_epoch > cfg.patience) break;
  }
  return fitted;
}

}  // namespace kivaci::neural
