#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "deskvqa/features/region_features.hpp"
#include "deskvqa/model/autograd.hpp"
#include "deskvqa/model/config.hpp"
#include "deskvqa/model/tokenizer.hpp"
#include "deskvqa/model/trace.hpp"

namespace deskvqa::model {

struct ForwardResult {
  std::vector<double> logits;
  AttentionTrace trace;
  TokenMap token_map;
};

/// Desk-scale VQA transformer. Single-stream: one encoder over
/// [CLS] question [SEP] padding regions. Dual-stream: language and vision
/// encoders followed by cross-modality layers; the answer head reads the
/// language [CLS] state. Scalar type S lets tests run the same code in
/// double precision.
template <class S>
class VqaModel {
 public:
  using Mat = nn::Matrix<S>;

  explicit VqaModel(ModelConfig config) : config_(std::move(config)) {
    config_.validate();
    declare_parameters();
    initialize(config_.seed);
  }

  /// Adopts externally supplied parameters; every expected tensor must be
  /// present with the expected shape.
  VqaModel(ModelConfig config, nn::ParamStore<S> loaded) : config_(std::move(config)) {
    config_.validate();
    declare_parameters();
    if (loaded.size() != params_.size()) throw Error(ErrorKind::CorruptArtifact, "parameter count mismatch");
    for (auto& [name, p] : params_) {
      if (!loaded.contains(name)) throw Error(ErrorKind::CorruptArtifact, "missing parameter " + name);
      const auto& src = loaded.at(name).value;
      if (src.rows() != p.value.rows() || src.cols() != p.value.cols()) {
        throw Error(ErrorKind::CorruptArtifact, "shape mismatch for " + name);
      }
      p.value = src;
    }
  }

  const ModelConfig& config() const { return config_; }
  nn::ParamStore<S>& params() { return params_; }
  const nn::ParamStore<S>& params() const { return params_; }

  /// Per-pass options. dropout_rng non-null enables dropout; trainable makes
  /// parameters gradient leaves.
  struct PassOptions {
    bool trainable = false;
    std::mt19937_64* dropout_rng = nullptr;
    bool keep_trace = true;
  };

  struct Recorded {
    nn::Var logits;
    TokenMap token_map;
    AttentionTrace trace;
  };

  /// Records one forward pass on the tape. ids are question word ids with
  /// trailing kPad padding, at most max_question_tokens long.
  Recorded record(nn::Tape<S>& tape, std::span<const int> ids, const features::RegionFeatures& regions,
                  const PassOptions& opt) {
    check_inputs(ids, regions);
    Pass pass{*this, tape, opt, {}};
    pass.trace.n_heads = config_.n_heads;
    return config_.architecture == Architecture::single_stream ? pass.single_stream(ids, regions)
                                                               : pass.dual_stream(ids, regions);
  }

  /// Inference forward pass (no dropout, no gradients).
  ForwardResult forward(std::span<const int> ids, const features::RegionFeatures& regions) const {
    nn::Tape<S> tape;
    auto rec = const_cast<VqaModel*>(this)->record(tape, ids, regions, PassOptions{});
    ForwardResult out;
    const auto& l = tape.value(rec.logits);
    out.logits.assign(l.data(), l.data() + l.size());
    out.trace = std::move(rec.trace);
    out.token_map = std::move(rec.token_map);
    return out;
  }

  /// Region token embeddings before any encoder layer:
  /// LN(features W_feat + box W_box + visual segment embedding).
  Mat embed_visual(const features::RegionFeatures& regions) const {
    if (regions.feature_dim != config_.feature_dim) {
      throw Error(ErrorKind::DimensionMismatch, "region feature_dim " + std::to_string(regions.feature_dim) +
                                                    " != model feature_dim " + std::to_string(config_.feature_dim));
    }
    nn::Tape<S> tape;
    Pass pass{*const_cast<VqaModel*>(this), tape, PassOptions{false, nullptr, false}, {}};
    return tape.value(pass.visual_embeddings(regions));
  }

  /// Loss for one example: mean binary cross-entropy of sigmoid(logits)
  /// against soft targets. With backward=true gradients accumulate into
  /// the parameters.
  S loss(std::span<const int> ids, const features::RegionFeatures& regions, const Mat& targets,
         std::mt19937_64* dropout_rng, bool backward) {
    nn::Tape<S> tape;
    auto rec = record(tape, ids, regions, PassOptions{backward, dropout_rng, false});
    auto l = nn::bce_with_logits(tape, rec.logits, targets);
    if (backward) tape.backward(l);
    return tape.value(l)(0, 0);
  }

 private:
  void check_inputs(std::span<const int> ids, const features::RegionFeatures& regions) const {
    if (static_cast<int>(ids.size()) > config_.max_question_tokens) {
      throw Error(ErrorKind::ShapeError, "question has " + std::to_string(ids.size()) + " tokens, limit " +
                                             std::to_string(config_.max_question_tokens));
    }
    bool seen_pad = false;
    for (int id : ids) {
      if (id < 0 || id >= config_.vocab_size) throw Error(ErrorKind::ShapeError, "token id outside vocabulary");
      if (id == Vocab::kPad) {
        seen_pad = true;
      } else if (seen_pad) {
        throw Error(ErrorKind::ShapeError, "padding must trail the question tokens");
      }
    }
    if (regions.n_regions() < 1 || regions.n_regions() > config_.max_regions) {
      throw Error(ErrorKind::ShapeError, "region count " + std::to_string(regions.n_regions()) + " outside [1, " +
                                             std::to_string(config_.max_regions) + "]");
    }
    if (regions.feature_dim != config_.feature_dim) {
      throw Error(ErrorKind::DimensionMismatch, "region feature_dim " + std::to_string(regions.feature_dim) +
                                                    " != model feature_dim " + std::to_string(config_.feature_dim));
    }
    if (regions.features.size() != static_cast<std::size_t>(regions.n_regions()) * regions.feature_dim) {
      throw Error(ErrorKind::ShapeError, "feature array size does not match region count");
    }
  }

  // ---- parameter layout ----------------------------------------------------

  void add_matrix(const std::string& name, int rows, int cols) {
    params_.add(name, rows, cols);
    init_order_.push_back({name, InitKind::normal});
  }
  void add_bias(const std::string& name, int cols) {
    params_.add(name, 1, cols);
    init_order_.push_back({name, InitKind::zero});
  }
  void add_linear(const std::string& prefix, int in, int out) {
    add_matrix(prefix + ".w", in, out);
    add_bias(prefix + ".b", out);
  }
  void add_layer_norm(const std::string& prefix, int dim) {
    params_.add(prefix + ".g", 1, dim);
    init_order_.push_back({prefix + ".g", InitKind::one});
    add_bias(prefix + ".b", dim);
  }
  void add_attention(const std::string& prefix) {
    const int h = config_.hidden_dim;
    for (const char* part : {".q", ".k", ".v", ".o"}) add_linear(prefix + part, h, h);
    add_layer_norm(prefix + "_ln", h);
  }
  void add_ffn(const std::string& prefix) {
    const int h = config_.hidden_dim, f = config_.hidden_dim * config_.ffn_multiplier;
    add_linear(prefix + ".in", h, f);
    add_linear(prefix + ".out", f, h);
    add_layer_norm(prefix + "_ln", h);
  }
  void add_encoder_layer(const std::string& prefix) {
    add_attention(prefix + ".attn");
    add_ffn(prefix + ".ffn");
  }

  void declare_parameters() {
    const int h = config_.hidden_dim;
    add_matrix("emb.word", config_.vocab_size, h);
    add_matrix("emb.text_pos", config_.max_question_tokens + 2, h);
    add_matrix("emb.segment", 2, h);
    add_layer_norm("emb.text_ln", h);
    add_matrix("emb.visual_feat.w", config_.feature_dim, h);
    add_matrix("emb.visual_box.w", 4, h);
    add_layer_norm("emb.visual_ln", h);

    if (config_.architecture == Architecture::single_stream) {
      for (int l = 0; l < config_.layers; ++l) add_encoder_layer("layer." + std::to_string(l));
    } else {
      for (int l = 0; l < config_.lang_layers; ++l) add_encoder_layer("lang." + std::to_string(l));
      for (int l = 0; l < config_.vision_layers; ++l) add_encoder_layer("vision." + std::to_string(l));
      for (int l = 0; l < config_.cross_layers; ++l) {
        auto p = "cross." + std::to_string(l);
        add_attention(p + ".l2v");
        add_attention(p + ".v2l");
        add_attention(p + ".lang_self");
        add_attention(p + ".vis_self");
        add_ffn(p + ".lang_ffn");
        add_ffn(p + ".vis_ffn");
      }
    }
    add_linear("head.fc", h, 2 * h);
    add_layer_norm("head.ln", 2 * h);
    add_linear("head.out", 2 * h, config_.num_answers);
  }

  /// Truncated normal (|z| <= 2) with std 0.02 for weights and embeddings.
  void initialize(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (const auto& [name, kind] : init_order_) {
      auto& v = params_.at(name).value;
      switch (kind) {
        case InitKind::zero: v.setZero(); break;
        case InitKind::one: v.setOnes(); break;
        case InitKind::normal:
          for (Eigen::Index i = 0; i < v.size(); ++i) {
            double z;
            do {
              z = normal(rng);
            } while (std::abs(z) > 2.0);
            v.data()[i] = static_cast<S>(0.02 * z);
          }
          break;
      }
    }
  }

  // ---- one forward pass ----------------------------------------------------

  struct Pass {
    VqaModel& model;
    nn::Tape<S>& tape;
    PassOptions opt;
    AttentionTrace trace;

    const ModelConfig& cfg() const { return model.config_; }

    nn::Var p(const std::string& name) {
      auto& param = model.params_.at(name);
      return opt.trainable ? tape.param(param) : tape.frozen(param);
    }

    nn::Var drop(nn::Var x) { return nn::dropout(tape, x, cfg().dropout, opt.dropout_rng); }

    nn::Var linear(nn::Var x, const std::string& prefix) {
      return nn::linear(tape, x, p(prefix + ".w"), p(prefix + ".b"));
    }

    nn::Var layer_norm(nn::Var x, const std::string& prefix) {
      return nn::layer_norm(tape, x, p(prefix + ".g"), p(prefix + ".b"));
    }

    struct TraceTag {
      SubEncoder encoder;
      int layer;
      bool after_cross;
      int query_offset;
      int key_offset;
    };

    /// Multi-head attention from `queries` to `keys_values`, then residual
    /// and layer norm on the query stream.
    nn::Var attention_block(nn::Var queries, nn::Var keys_values, const std::vector<char>& key_mask,
                            const std::string& prefix, const TraceTag& tag) {
      const int heads = cfg().n_heads, dh = cfg().head_dim();
      const S inv_sqrt = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
      auto q = linear(queries, prefix + ".q");
      auto k = linear(keys_values, prefix + ".k");
      auto v = linear(keys_values, prefix + ".v");
      std::vector<nn::Var> outs;
      outs.reserve(heads);
      for (int h = 0; h < heads; ++h) {
        auto qh = nn::slice_cols(tape, q, h * dh, dh);
        auto kh = nn::slice_cols(tape, k, h * dh, dh);
        auto vh = nn::slice_cols(tape, v, h * dh, dh);
        auto scores = nn::scale(tape, nn::matmul_bt(tape, qh, kh), inv_sqrt);
        auto probs = nn::masked_softmax(tape, scores, key_mask);
        if (opt.keep_trace) {
          AttentionMatrix m;
          m.encoder = tag.encoder;
          m.layer = tag.layer;
          m.head = h;
          m.after_cross = tag.after_cross;
          m.query_offset = tag.query_offset;
          m.key_offset = tag.key_offset;
          m.weights = tape.value(probs).template cast<double>();
          trace.matrices.push_back(std::move(m));
        }
        outs.push_back(nn::matmul(tape, probs, vh));
      }
      auto merged = heads == 1 ? outs.front() : nn::concat_cols(tape, outs);
      auto projected = drop(linear(merged, prefix + ".o"));
      return layer_norm(nn::add(tape, queries, projected), prefix + "_ln");
    }

    nn::Var ffn_block(nn::Var x, const std::string& prefix) {
      auto hidden = nn::gelu(tape, linear(x, prefix + ".in"));
      auto out = drop(linear(hidden, prefix + ".out"));
      return layer_norm(nn::add(tape, x, out), prefix + "_ln");
    }

    nn::Var encoder_layer(nn::Var x, const std::vector<char>& mask, const std::string& prefix, const TraceTag& tag) {
      return ffn_block(attention_block(x, x, mask, prefix + ".attn", tag), prefix + ".ffn");
    }

    /// [CLS] words [SEP] padding with word + position + text segment embeddings.
    nn::Var text_embeddings(std::span<const int> ids, int n_real) {
      std::vector<int> tokens;
      tokens.reserve(ids.size() + 2);
      tokens.push_back(Vocab::kCls);
      tokens.insert(tokens.end(), ids.begin(), ids.begin() + n_real);
      tokens.push_back(Vocab::kSep);
      tokens.insert(tokens.end(), ids.begin() + n_real, ids.end());
      std::vector<int> positions(tokens.size());
      for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i);
      const int text_segment[] = {0};
      auto words = nn::gather_rows(tape, p("emb.word"), std::span<const int>(tokens));
      auto pos = nn::gather_rows(tape, p("emb.text_pos"), std::span<const int>(positions));
      auto seg = nn::gather_rows(tape, p("emb.segment"), std::span<const int>(text_segment));
      auto sum = nn::add_row(tape, nn::add(tape, words, pos), seg);
      return drop(layer_norm(sum, "emb.text_ln"));
    }

    nn::Var visual_embeddings(const features::RegionFeatures& regions) {
      const int n = regions.n_regions();
      Mat feats(n, regions.feature_dim);
      Mat boxes(n, 4);
      for (int r = 0; r < n; ++r) {
        auto f = regions.feature(r);
        for (int d = 0; d < regions.feature_dim; ++d) feats(r, d) = static_cast<S>(f[d]);
        for (int c = 0; c < 4; ++c) boxes(r, c) = static_cast<S>(regions.boxes[r][c]);
      }
      const int visual_segment[] = {1};
      auto f = nn::matmul(tape, tape.constant(std::move(feats)), p("emb.visual_feat.w"));
      auto b = nn::matmul(tape, tape.constant(std::move(boxes)), p("emb.visual_box.w"));
      auto seg = nn::gather_rows(tape, p("emb.segment"), std::span<const int>(visual_segment));
      auto sum = nn::add_row(tape, nn::add(tape, f, b), seg);
      return drop(layer_norm(sum, "emb.visual_ln"));
    }

    nn::Var answer_head(nn::Var cls) {
      auto h = layer_norm(nn::gelu(tape, linear(cls, "head.fc")), "head.ln");
      return linear(h, "head.out");
    }

    static int count_real(std::span<const int> ids) {
      int n = 0;
      while (n < static_cast<int>(ids.size()) && ids[n] != Vocab::kPad) ++n;
      return n;
    }

    /// Text layout shared by both architectures: CLS at 0, words, SEP, padding.
    TokenMap text_token_map(std::span<const int> ids, int n_real, int n_regions) {
      const int text_len = static_cast<int>(ids.size()) + 2;
      TokenMap tm;
      tm.total_len = text_len + n_regions;
      tm.question_positions = {1, 1 + n_real};
      tm.special_positions = {0, n_real + 1};
      tm.region_positions = {text_len, text_len + n_regions};
      return tm;
    }

    std::vector<char> text_mask(std::span<const int> ids, int n_real) {
      std::vector<char> mask(ids.size() + 2, 1);
      for (std::size_t i = static_cast<std::size_t>(n_real) + 2; i < mask.size(); ++i) mask[i] = 0;
      return mask;
    }

    Recorded single_stream(std::span<const int> ids, const features::RegionFeatures& regions) {
      const int n_real = count_real(ids);
      auto tm = text_token_map(ids, n_real, regions.n_regions());
      auto mask = text_mask(ids, n_real);
      mask.resize(tm.total_len, 1);

      auto x = nn::concat_rows(tape, {text_embeddings(ids, n_real), visual_embeddings(regions)});
      for (int l = 0; l < cfg().layers; ++l) {
        x = encoder_layer(x, mask, "layer." + std::to_string(l), {SubEncoder::joint, l, false, 0, 0});
      }
      auto logits = answer_head(nn::slice_rows(tape, x, 0, 1));
      return {logits, std::move(tm), std::move(trace)};
    }

    Recorded dual_stream(std::span<const int> ids, const features::RegionFeatures& regions) {
      const int n_real = count_real(ids);
      auto tm = text_token_map(ids, n_real, regions.n_regions());
      const int text_len = tm.region_positions.begin;
      auto lang_mask = text_mask(ids, n_real);
      std::vector<char> vis_mask(regions.n_regions(), 1);

      auto lang = text_embeddings(ids, n_real);
      auto vis = visual_embeddings(regions);
      for (int l = 0; l < cfg().lang_layers; ++l) {
        lang = encoder_layer(lang, lang_mask, "lang." + std::to_string(l), {SubEncoder::language, l, false, 0, 0});
      }
      for (int l = 0; l < cfg().vision_layers; ++l) {
        vis = encoder_layer(vis, vis_mask, "vision." + std::to_string(l),
                            {SubEncoder::vision, l, false, text_len, text_len});
      }
      for (int l = 0; l < cfg().cross_layers; ++l) {
        auto pre = "cross." + std::to_string(l);
        auto lang_x = attention_block(lang, vis, vis_mask, pre + ".l2v",
                                      {SubEncoder::cross_lang_to_vision, l, true, 0, text_len});
        auto vis_x = attention_block(vis, lang, lang_mask, pre + ".v2l",
                                     {SubEncoder::cross_vision_to_lang, l, true, text_len, 0});
        lang_x = attention_block(lang_x, lang_x, lang_mask, pre + ".lang_self", {SubEncoder::language, l, true, 0, 0});
        vis_x = attention_block(vis_x, vis_x, vis_mask, pre + ".vis_self",
                                {SubEncoder::vision, l, true, text_len, text_len});
        lang = ffn_block(lang_x, pre + ".lang_ffn");
        vis = ffn_block(vis_x, pre + ".vis_ffn");
      }
      auto logits = answer_head(nn::slice_rows(tape, lang, 0, 1));
      return {logits, std::move(tm), std::move(trace)};
    }
  };

  enum class InitKind { zero, one, normal };
  struct InitEntry {
    std::string name;
    InitKind kind;
  };

  ModelConfig config_;
  nn::ParamStore<S> params_;
  std::vector<InitEntry> init_order_;
};

}  // namespace deskvqa::model
