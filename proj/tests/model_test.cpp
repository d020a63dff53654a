#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include "deskvqa/model/artifact.hpp"
#include "deskvqa/model/transformer.hpp"

using namespace deskvqa;
using namespace deskvqa::model;

namespace {

ModelConfig tiny(Architecture arch, double dropout = 0.0) {
  ModelConfig c;
  c.architecture = arch;
  c.hidden_dim = 16;
  c.n_heads = 2;
  c.feature_dim = 8;
  c.max_question_tokens = 6;
  c.max_regions = 4;
  c.vocab_size = 12;
  c.num_answers = 5;
  c.layers = 2;
  c.lang_layers = 1;
  c.vision_layers = 1;
  c.cross_layers = 1;
  c.ffn_multiplier = 2;
  c.dropout = dropout;
  c.seed = 11;
  return c;
}

features::RegionFeatures random_regions(int n, int dim, std::uint32_t seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  features::RegionFeatures rf;
  rf.image_id = "img";
  rf.feature_dim = dim;
  for (int i = 0; i < n; ++i) {
    float x1 = u(rng) * 0.5f, y1 = u(rng) * 0.5f;
    rf.boxes.push_back({x1, y1, x1 + 0.1f + u(rng) * 0.4f, y1 + 0.1f + u(rng) * 0.4f});
    for (int d = 0; d < dim; ++d) rf.features.push_back(u(rng) * 2.0f - 1.0f);
  }
  return rf;
}

const std::vector<int> kQuestion = {4, 7, 9, 0, 0, 0};

std::vector<double> logits_of(const VqaModel<float>& m, std::span<const int> ids, const features::RegionFeatures& rf) {
  return m.forward(ids, rf).logits;
}

class BothArchitectures : public ::testing::TestWithParam<Architecture> {};

}  // namespace

TEST(Tokenize, LooksUpCasefoldedWords) {
  std::vector<std::string> qs = {"What color is the mug?", "Where is the pen"};
  auto vocab = Vocab::build(qs);
  auto ids = tokenize("What color?", vocab, 20);
  ASSERT_EQ(ids.size(), 20u);
  EXPECT_EQ(ids[0], vocab.id("what"));
  EXPECT_EQ(ids[1], vocab.id("color"));
  EXPECT_GE(ids[0], Vocab::kFirstWord);
  EXPECT_TRUE(std::all_of(ids.begin() + 2, ids.end(), [](int i) { return i == Vocab::kPad; }));
}

TEST(Tokenize, UnknownWordMapsToUnk) {
  std::vector<std::string> qs = {"what color"};
  auto vocab = Vocab::build(qs);
  EXPECT_EQ(tokenize("what stapler", vocab, 4)[1], Vocab::kUnk);
}

TEST(Tokenize, TruncatesLongQuestions) {
  std::string q;
  for (int i = 0; i < 40; ++i) q += "w" + std::to_string(i) + " ";
  std::vector<std::string> qs = {q};
  auto vocab = Vocab::build(qs);
  auto ids = tokenize(q, vocab, 20);
  ASSERT_EQ(ids.size(), 20u);
  for (int i = 0; i < 20; ++i) EXPECT_EQ(ids[i], vocab.id("w" + std::to_string(i)));
}

TEST(Tokenize, EmptyQuestionThrows) {
  Vocab v;
  try {
    tokenize(" ?! ", v, 5);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::EmptyQuestion);
  }
}

TEST(Config, RejectsBadShapes) {
  auto c = tiny(Architecture::single_stream);
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), Error);
  c = tiny(Architecture::dual_stream);
  c.cross_layers = 0;
  EXPECT_THROW(c.validate(), Error);
}

TEST(Config, JsonRoundTrip) {
  for (auto arch : {Architecture::single_stream, Architecture::dual_stream}) {
    auto c = tiny(arch);
    EXPECT_EQ(to_json(model_config_from_json(to_json(c))), to_json(c));
  }
}

TEST(EmbedVisual, ZeroInputGivesNormalizedSegment) {
  VqaModel<double> m(tiny(Architecture::single_stream));
  features::RegionFeatures rf;
  rf.feature_dim = 8;
  rf.boxes = {{0, 0, 0, 0}};
  rf.features.assign(8, 0.0f);
  auto emb = m.embed_visual(rf);

  const auto& seg = m.params().at("emb.segment").value;
  const auto& g = m.params().at("emb.visual_ln.g").value;
  const auto& b = m.params().at("emb.visual_ln.b").value;
  Eigen::RowVectorXd s = seg.row(1);
  double mean = s.mean();
  double var = (s.array() - mean).square().mean();
  for (int c = 0; c < s.size(); ++c) {
    double expect = (s(c) - mean) / std::sqrt(var + 1e-5) * g(0, c) + b(0, c);
    EXPECT_NEAR(emb(0, c), expect, 1e-12);
  }
}

TEST(EmbedVisual, IdenticalRegionsIdenticalEmbeddings) {
  VqaModel<float> m(tiny(Architecture::single_stream));
  auto rf = random_regions(1, 8, 3);
  rf.boxes.push_back(rf.boxes[0]);
  rf.features.insert(rf.features.end(), rf.features.begin(), rf.features.end());
  auto emb = m.embed_visual(rf);
  EXPECT_EQ(emb.row(0), emb.row(1));
}

TEST(EmbedVisual, BoxPerturbationActsThroughPositionProjectionOnly) {
  VqaModel<double> m(tiny(Architecture::single_stream));
  auto rf = random_regions(2, 8, 5);
  auto perturbed = rf;
  perturbed.boxes[1][2] += 0.05f;
  auto base = m.embed_visual(rf);
  auto moved = m.embed_visual(perturbed);

  // Recompute the perturbed embedding from the original pre-norm sum plus the
  // isolated position term delta * W_box[row 2].
  const auto& wf = m.params().at("emb.visual_feat.w").value;
  const auto& wb = m.params().at("emb.visual_box.w").value;
  const auto& seg = m.params().at("emb.segment").value;
  const auto& g = m.params().at("emb.visual_ln.g").value;
  const auto& b = m.params().at("emb.visual_ln.b").value;
  auto pre_norm = [&](const features::RegionFeatures& r, int i) {
    Eigen::RowVectorXd x = seg.row(1);
    for (int d = 0; d < 8; ++d) x += static_cast<double>(r.feature(i)[d]) * wf.row(d);
    for (int c = 0; c < 4; ++c) x += static_cast<double>(r.boxes[i][c]) * wb.row(c);
    return x;
  };
  auto norm = [&](Eigen::RowVectorXd x) {
    double mean = x.mean();
    double var = (x.array() - mean).square().mean();
    Eigen::RowVectorXd y = ((x.array() - mean) / std::sqrt(var + 1e-5)).matrix();
    return Eigen::RowVectorXd((y.array() * g.row(0).array() + b.row(0).array()).matrix());
  };
  double delta = static_cast<double>(perturbed.boxes[1][2]) - static_cast<double>(rf.boxes[1][2]);
  Eigen::RowVectorXd expect = norm(pre_norm(rf, 1) + delta * wb.row(2));
  EXPECT_LT((moved.row(1) - expect).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_EQ(moved.row(0), base.row(0));
  EXPECT_GT((moved.row(1) - base.row(1)).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(EmbedVisual, WrongFeatureDimThrows) {
  VqaModel<float> m(tiny(Architecture::single_stream));
  auto rf = random_regions(2, 7, 1);
  try {
    m.embed_visual(rf);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::DimensionMismatch);
  }
}

TEST_P(BothArchitectures, LogitsMatchAnswerSpaceAndAreFinite) {
  VqaModel<float> m(tiny(GetParam()));
  auto out = m.forward(kQuestion, random_regions(4, 8, 1));
  ASSERT_EQ(out.logits.size(), 5u);
  for (double l : out.logits) EXPECT_TRUE(std::isfinite(l));
}

TEST_P(BothArchitectures, AttentionRowsSumToOneOverUnmaskedKeys) {
  VqaModel<float> m(tiny(GetParam()));
  auto out = m.forward(kQuestion, random_regions(3, 8, 2));
  const auto& tm = out.token_map;
  ASSERT_FALSE(out.trace.matrices.empty());
  for (const auto& a : out.trace.matrices) {
    for (Eigen::Index q = 0; q < a.weights.rows(); ++q) {
      double sum = 0;
      for (Eigen::Index k = 0; k < a.weights.cols(); ++k) {
        double w = a.weights(q, k);
        EXPECT_GE(w, 0.0);
        if (tm.is_padding(a.key_offset + static_cast<int>(k))) {
          EXPECT_EQ(w, 0.0);
        }
        sum += w;
      }
      EXPECT_NEAR(sum, 1.0, 1e-5);
    }
  }
}

TEST_P(BothArchitectures, TokenMapDescribesTheSequence) {
  VqaModel<float> m(tiny(GetParam()));
  auto out = m.forward(kQuestion, random_regions(3, 8, 2));
  const auto& tm = out.token_map;
  EXPECT_EQ(tm.total_len, 8 + 3);
  EXPECT_EQ(tm.question_positions, (IndexRange{1, 4}));
  EXPECT_EQ(tm.region_positions, (IndexRange{8, 11}));
  EXPECT_EQ(tm.special_positions, (std::vector<int>{0, 4}));
  EXPECT_EQ(tm.n_non_padding(), 2 + 3 + 3);
  for (const auto& a : out.trace.matrices) {
    EXPECT_LE(a.query_offset + a.weights.rows(), tm.total_len);
    EXPECT_LE(a.key_offset + a.weights.cols(), tm.total_len);
  }
}

TEST(SingleStream, TraceHasFullMatricesPerLayerAndHead) {
  VqaModel<float> m(tiny(Architecture::single_stream));
  auto out = m.forward(kQuestion, random_regions(4, 8, 2));
  ASSERT_EQ(out.trace.matrices.size(), 2u * 2u);
  for (const auto& a : out.trace.matrices) {
    EXPECT_EQ(a.encoder, SubEncoder::joint);
    EXPECT_EQ(a.weights.rows(), out.token_map.total_len);
    EXPECT_EQ(a.weights.cols(), out.token_map.total_len);
  }
}

TEST(DualStream, TraceCountsPerSubEncoder) {
  auto c = tiny(Architecture::dual_stream);
  c.lang_layers = 2;
  c.vision_layers = 3;
  c.cross_layers = 2;
  VqaModel<float> m(c);
  auto out = m.forward(kQuestion, random_regions(4, 8, 2));
  const std::size_t h = 2;
  std::size_t lang_self = 0, vis_self = 0, post_cross_self = 0;
  for (const auto& a : out.trace.matrices) {
    if (a.encoder == SubEncoder::language || a.encoder == SubEncoder::vision) {
      (a.after_cross ? post_cross_self : (a.encoder == SubEncoder::language ? lang_self : vis_self))++;
    }
  }
  EXPECT_EQ(lang_self, 2 * h);
  EXPECT_EQ(vis_self, 3 * h);
  EXPECT_EQ(post_cross_self, 2 * 2 * h);
  EXPECT_EQ(out.trace.count(SubEncoder::cross_lang_to_vision), 2 * h);
  EXPECT_EQ(out.trace.count(SubEncoder::cross_vision_to_lang), 2 * h);
  EXPECT_EQ(out.trace.matrices.size(), (2 + 3 + 2 * 2 + 2 * 2) * h);
  for (const auto& a : out.trace.matrices) {
    if (a.encoder == SubEncoder::cross_lang_to_vision) {
      EXPECT_EQ(a.query_offset, 0);
      EXPECT_EQ(a.key_offset, out.token_map.region_positions.begin);
      EXPECT_EQ(a.weights.cols(), 4);
    }
  }
}

TEST_P(BothArchitectures, RegionPermutationPermutesAttentionColumns) {
  VqaModel<float> m(tiny(GetParam()));
  auto rf = random_regions(4, 8, 9);
  const std::vector<int> perm = {2, 0, 3, 1};
  features::RegionFeatures shuffled = rf;
  shuffled.boxes.clear();
  shuffled.features.clear();
  for (int src : perm) {
    shuffled.boxes.push_back(rf.boxes[src]);
    auto f = rf.feature(src);
    shuffled.features.insert(shuffled.features.end(), f.begin(), f.end());
  }
  auto a = m.forward(kQuestion, rf);
  auto b = m.forward(kQuestion, shuffled);
  for (std::size_t i = 0; i < a.logits.size(); ++i) EXPECT_NEAR(a.logits[i], b.logits[i], 1e-5);

  const int r0 = a.token_map.region_positions.begin;
  ASSERT_EQ(a.trace.matrices.size(), b.trace.matrices.size());
  int checked = 0;
  for (std::size_t t = 0; t < a.trace.matrices.size(); ++t) {
    const auto& ma = a.trace.matrices[t];
    const auto& mb = b.trace.matrices[t];
    // Only rows whose query is a language token keep their identity.
    for (Eigen::Index q = 0; q < ma.weights.rows(); ++q) {
      if (ma.query_offset + q >= r0) continue;
      for (int i = 0; i < 4; ++i) {
        Eigen::Index kb = r0 + i - mb.key_offset, ka = r0 + perm[i] - ma.key_offset;
        if (kb < 0 || kb >= mb.weights.cols()) continue;
        EXPECT_NEAR(mb.weights(q, kb), ma.weights(q, ka), 1e-5);
        ++checked;
      }
    }
  }
  EXPECT_GT(checked, 0);
}

TEST_P(BothArchitectures, TrailingPaddingDoesNotChangeLogits) {
  auto c = tiny(GetParam());
  c.max_question_tokens = 12;
  VqaModel<float> m(c);
  auto rf = random_regions(3, 8, 4);
  std::vector<int> short_ids = {4, 7, 9};
  std::vector<int> padded = {4, 7, 9, 0, 0, 0, 0, 0, 0, 0, 0, 0};
  auto a = logits_of(m, short_ids, rf);
  auto b = logits_of(m, padded, rf);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-6);
}

TEST_P(BothArchitectures, DeterministicForFixedSeed) {
  auto rf = random_regions(4, 8, 6);
  VqaModel<float> m1(tiny(GetParam())), m2(tiny(GetParam()));
  EXPECT_EQ(logits_of(m1, kQuestion, rf), logits_of(m2, kQuestion, rf));
  EXPECT_EQ(logits_of(m1, kQuestion, rf), logits_of(m1, kQuestion, rf));
  auto other = tiny(GetParam());
  other.seed = 12;
  EXPECT_NE(logits_of(VqaModel<float>(other), kQuestion, rf), logits_of(m1, kQuestion, rf));
}

TEST_P(BothArchitectures, ShapeErrors) {
  VqaModel<float> m(tiny(GetParam()));
  auto rf = random_regions(3, 8, 4);
  auto kind_of = [&](std::vector<int> ids, const features::RegionFeatures& r) {
    try {
      m.forward(ids, r);
    } catch (const Error& e) {
      return e.kind();
    }
    return ErrorKind::Io;
  };
  EXPECT_EQ(kind_of({4, 5, 6, 7, 8, 9, 10}, rf), ErrorKind::ShapeError);  // longer than max_question_tokens
  EXPECT_EQ(kind_of({4, 0, 5}, rf), ErrorKind::ShapeError);
  EXPECT_EQ(kind_of({4, 99}, rf), ErrorKind::ShapeError);
  EXPECT_EQ(kind_of({4}, random_regions(5, 8, 1)), ErrorKind::ShapeError);
  EXPECT_EQ(kind_of({4}, random_regions(2, 6, 1)), ErrorKind::DimensionMismatch);
}

TEST_P(BothArchitectures, DropoutOnlyWhenRequested) {
  VqaModel<float> m(tiny(GetParam(), 0.5));
  auto rf = random_regions(3, 8, 4);
  nn::Matrix<float> target = nn::Matrix<float>::Zero(1, 5);
  std::mt19937_64 r1(1), r2(2);
  float a = m.loss(kQuestion, rf, target, &r1, false);
  float b = m.loss(kQuestion, rf, target, &r2, false);
  float c = m.loss(kQuestion, rf, target, nullptr, false);
  float d = m.loss(kQuestion, rf, target, nullptr, false);
  EXPECT_NE(a, b);
  EXPECT_EQ(c, d);
}

// Central finite differences in double precision against the tape.
TEST_P(BothArchitectures, GradientsMatchFiniteDifferences) {
  VqaModel<double> m(tiny(GetParam()));
  auto rf = random_regions(4, 8, 21);
  nn::Matrix<double> target(1, 5);
  target << 1.0, 0.0, 2.0 / 3.0, 1.0 / 3.0, 0.0;

  m.params().zero_grad();
  m.loss(kQuestion, rf, target, nullptr, true);

  std::vector<std::string> names;
  for (const auto& [name, _] : m.params()) names.push_back(name);
  std::mt19937_64 rng(77);
  const double h = 1e-5;
  int nonzero = 0;
  for (int s = 0; s < 20; ++s) {
    auto& p = m.params().at(names[rng() % names.size()]);
    auto i = static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(p.value.size()));
    double analytic = p.grad.data()[i];
    double orig = p.value.data()[i];
    p.value.data()[i] = orig + h;
    double up = m.loss(kQuestion, rf, target, nullptr, false);
    p.value.data()[i] = orig - h;
    double down = m.loss(kQuestion, rf, target, nullptr, false);
    p.value.data()[i] = orig;
    double numeric = (up - down) / (2 * h);
    double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-7});
    EXPECT_LT(std::abs(analytic - numeric) / denom, 1e-3) << "sample " << s << " analytic " << analytic << " numeric "
                                                          << numeric;
    nonzero += std::abs(analytic) > 1e-9;
  }
  EXPECT_GT(nonzero, 5);
}

INSTANTIATE_TEST_SUITE_P(Model, BothArchitectures,
                         ::testing::Values(Architecture::single_stream, Architecture::dual_stream),
                         [](const auto& info) { return std::string(to_string(info.param)); });

// ---- artifact ----------------------------------------------------------------

namespace {

ModelArtifact sample_artifact(Architecture arch) {
  std::vector<std::string> words = {"[PAD]", "[UNK]", "[CLS]", "[SEP]"};
  for (int i = 0; i < 8; ++i) words.push_back("w" + std::to_string(i));
  features::ExtractorSpec spec;
  spec.max_regions = 4;
  spec.feature_dim = 8;
  return ModelArtifact{VqaModel<float>(tiny(arch)), Vocab(words), {"yes", "no", "red", "blue", "two"}, spec};
}

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("deskvqa_model_test_" + std::to_string(std::random_device{}()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

ErrorKind load_error(const std::filesystem::path& p) {
  try {
    load_model(p);
  } catch (const Error& e) {
    return e.kind();
  }
  return ErrorKind::Io;
}

}  // namespace

TEST_P(BothArchitectures, ArtifactRoundTripIsBitwise) {
  TempDir dir;
  auto a = sample_artifact(GetParam());
  save_model(a, dir.path / "m.model");
  auto b = load_model(dir.path / "m.model");
  EXPECT_EQ(to_json(b.model.config()), to_json(a.model.config()));
  EXPECT_EQ(b.vocab, a.vocab);
  EXPECT_EQ(b.answers, a.answers);
  ASSERT_TRUE(b.extractor.has_value());
  EXPECT_EQ(b.extractor->feature_dim, 8);
  auto rf = random_regions(4, 8, 8);
  EXPECT_EQ(logits_of(a.model, kQuestion, rf), logits_of(b.model, kQuestion, rf));
  EXPECT_EQ(serialize_artifact(a), serialize_artifact(b));
}

TEST(Artifact, TruncatedFileIsCorrupt) {
  TempDir dir;
  auto bytes = serialize_artifact(sample_artifact(Architecture::single_stream));
  auto path = dir.path / "t.model";
  for (std::size_t keep : {std::size_t{3}, std::size_t{12}, bytes.size() / 2, bytes.size() - 1}) {
    fsutil::write_atomic(path, std::span(bytes.data(), keep));
    EXPECT_EQ(load_error(path), ErrorKind::CorruptArtifact) << keep;
  }
}

TEST(Artifact, FlippedByteIsCorrupt) {
  TempDir dir;
  auto bytes = serialize_artifact(sample_artifact(Architecture::dual_stream));
  bytes[bytes.size() - 7] ^= 0x40;
  fsutil::write_atomic(dir.path / "f.model", bytes);
  EXPECT_EQ(load_error(dir.path / "f.model"), ErrorKind::CorruptArtifact);
}

TEST(Artifact, FutureVersionIsRejected) {
  TempDir dir;
  auto bytes = serialize_artifact(sample_artifact(Architecture::single_stream));
  bytes[4] = 2;
  fsutil::write_atomic(dir.path / "v.model", bytes);
  EXPECT_EQ(load_error(dir.path / "v.model"), ErrorKind::VersionMismatch);
}

TEST(Artifact, StartsWithMagic) {
  auto bytes = serialize_artifact(sample_artifact(Architecture::single_stream));
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "PGBK");
}
