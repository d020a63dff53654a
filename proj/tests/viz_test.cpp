#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "deskvqa/model/transformer.hpp"
#include "deskvqa/util/zip.hpp"
#include "deskvqa/viz/annotate.hpp"
#include "deskvqa/viz/attention.hpp"
#include "fixtures.hpp"

using namespace deskvqa;
using namespace deskvqa::viz;
using model::AttentionMatrix;
using model::AttentionTrace;
using model::SubEncoder;
using model::TokenMap;

namespace {

/// Joint layout: [CLS] q... [SEP] then regions, nothing padded.
TokenMap joint_map(int n_question, int n_regions) {
  TokenMap m;
  m.question_positions = {1, 1 + n_question};
  m.special_positions = {0, n_question + 1};
  m.region_positions = {n_question + 2, n_question + 2 + n_regions};
  m.total_len = n_question + 2 + n_regions;
  return m;
}

AttentionMatrix square(int layer, int head, Eigen::MatrixXd w, SubEncoder e = SubEncoder::joint) {
  AttentionMatrix m;
  m.encoder = e;
  m.layer = layer;
  m.head = head;
  m.weights = std::move(w);
  return m;
}

Eigen::MatrixXd random_stochastic(int rows, int cols, std::mt19937& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Eigen::MatrixXd w(rows, cols);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) w(r, c) = u(rng);
    w.row(r) /= w.row(r).sum();
  }
  return w;
}

/// Naive quadruple loop over (matrix, head, query, key), written against the
/// raw token map fields rather than TokenMap::is_padding.
std::vector<double> naive_scores(const AttentionTrace& trace, const TokenMap& map, bool dual) {
  std::set<int> live_queries;
  for (int p = map.question_positions.begin; p < map.question_positions.end; ++p) live_queries.insert(p);
  for (int p : map.special_positions) live_queries.insert(p);
  if (!dual) {
    for (int p = map.region_positions.begin; p < map.region_positions.end; ++p) live_queries.insert(p);
  }
  std::vector<double> scores(static_cast<std::size_t>(map.region_positions.size()), 0.0);
  for (const auto& m : trace.matrices) {
    bool wanted = dual ? m.encoder == SubEncoder::cross_lang_to_vision : m.encoder == SubEncoder::joint;
    if (!wanted) continue;
    for (int q = 0; q < m.weights.rows(); ++q) {
      if (!live_queries.count(m.query_offset + q)) continue;
      for (int k = 0; k < m.weights.cols(); ++k) {
        int pos = m.key_offset + k;
        for (int j = 0; j < map.region_positions.size(); ++j) {
          if (pos == map.region_positions.begin + j) scores[static_cast<std::size_t>(j)] += m.weights(q, k);
        }
      }
    }
  }
  return scores;
}

model::ModelConfig tiny(model::Architecture arch) {
  model::ModelConfig c;
  c.architecture = arch;
  c.hidden_dim = 16;
  c.n_heads = 2;
  c.feature_dim = 8;
  c.max_question_tokens = 6;
  c.max_regions = 5;
  c.vocab_size = 12;
  c.num_answers = 4;
  c.layers = 2;
  c.lang_layers = 1;
  c.vision_layers = 1;
  c.cross_layers = 2;
  c.ffn_multiplier = 2;
  c.dropout = 0.0;
  c.seed = 21;
  return c;
}

features::RegionFeatures regions(int n, int dim, std::uint32_t seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  features::RegionFeatures rf;
  rf.image_id = "img";
  rf.feature_dim = dim;
  for (int i = 0; i < n; ++i) {
    float x = u(rng) * 0.5f, y = u(rng) * 0.5f;
    rf.boxes.push_back({x, y, x + 0.2f + u(rng) * 0.3f, y + 0.2f + u(rng) * 0.3f});
    for (int d = 0; d < dim; ++d) rf.features.push_back(u(rng) * 2.0f - 1.0f);
  }
  return rf;
}

double luminance(const std::uint8_t* p) { return 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]; }

AnnotationStyle plain() {
  AnnotationStyle s;
  s.label = false;
  return s;
}

class BothArchitectures : public ::testing::TestWithParam<model::Architecture> {};

}  // namespace

TEST(Aggregate, UniformAttentionSpreadsEvenly) {
  const int L = 3, H = 2, nq = 4, nr = 5;
  auto map = joint_map(nq, nr);
  const int T = map.total_len;
  AttentionTrace trace{H, {}};
  for (int l = 0; l < L; ++l) {
    for (int h = 0; h < H; ++h) trace.matrices.push_back(square(l, h, Eigen::MatrixXd::Constant(T, T, 1.0 / T)));
  }
  auto scores = aggregate_attention(trace, map);
  ASSERT_EQ(scores.size(), static_cast<std::size_t>(nr));
  for (int j = 0; j < nr; ++j) {
    EXPECT_EQ(scores[j].region_index, j);
    EXPECT_NEAR(scores[j].score, static_cast<double>(L * H * T) / T, 1e-12);
  }
}

TEST(Aggregate, OneHotRowsCountQueries) {
  auto map = joint_map(3, 4);
  const int T = map.total_len;
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(T, T);
  w.col(map.region_positions.begin + 2).setOnes();
  AttentionTrace trace{1, {square(0, 0, w)}};
  auto scores = aggregate_attention(trace, map);
  for (int j = 0; j < 4; ++j) EXPECT_DOUBLE_EQ(scores[j].score, j == 2 ? T : 0.0);
}

TEST(Aggregate, RandomTracesMatchNaiveSummation) {
  std::mt19937 rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    const int L = 1 + static_cast<int>(rng() % 4), H = 1 + static_cast<int>(rng() % 4);
    const int nq = 1 + static_cast<int>(rng() % 4), nr = 1 + static_cast<int>(rng() % 4);
    const int pad_q = static_cast<int>(rng() % 2);
    // [CLS] q... [SEP] PAD? regions, T <= 12
    TokenMap map;
    map.question_positions = {1, 1 + nq};
    map.special_positions = {0, nq + 1};
    map.region_positions = {nq + 2 + pad_q, nq + 2 + pad_q + nr};
    map.total_len = map.region_positions.end;
    AttentionTrace trace{H, {}};
    for (int l = 0; l < L; ++l) {
      for (int h = 0; h < H; ++h) {
        trace.matrices.push_back(square(l, h, random_stochastic(map.total_len, map.total_len, rng)));
      }
    }
    auto got = aggregate_attention(trace, map);
    auto want = naive_scores(trace, map, false);
    ASSERT_EQ(got.size(), want.size());
    for (std::size_t j = 0; j < want.size(); ++j) EXPECT_NEAR(got[j].score, want[j], 1e-12) << "trial " << trial;
  }
}

TEST(Aggregate, DualStreamUsesOnlyLanguageToVisionCross) {
  std::mt19937 rng(5);
  const int nq = 2, nr = 3, Lt = nq + 2;
  TokenMap map;
  map.question_positions = {1, 1 + nq};
  map.special_positions = {0, nq + 1};
  map.region_positions = {Lt, Lt + nr};
  map.total_len = Lt + nr;
  AttentionTrace trace{1, {}};
  auto cross = square(0, 0, random_stochastic(Lt, nr, rng), SubEncoder::cross_lang_to_vision);
  cross.key_offset = Lt;
  trace.matrices.push_back(cross);
  auto vis = square(0, 0, Eigen::MatrixXd::Identity(nr, nr), SubEncoder::vision);
  vis.query_offset = vis.key_offset = Lt;
  trace.matrices.push_back(vis);
  auto back = square(0, 0, random_stochastic(nr, Lt, rng), SubEncoder::cross_vision_to_lang);
  back.query_offset = Lt;
  trace.matrices.push_back(back);
  auto scores = aggregate_attention(trace, map);
  auto want = naive_scores(trace, map, true);
  for (int j = 0; j < nr; ++j) {
    EXPECT_NEAR(scores[j].score, want[j], 1e-12);
    EXPECT_NEAR(scores[j].score, cross.weights.col(j).sum(), 1e-12);
  }
}

TEST(Aggregate, RegionsBeyondMatrixWidthRaise) {
  auto map = joint_map(2, 3);
  AttentionTrace trace{1, {square(0, 0, Eigen::MatrixXd::Constant(5, 5, 0.2))}};
  try {
    aggregate_attention(trace, map);
    FAIL() << "expected TokenMapMismatch";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::TokenMapMismatch);
  }
  map.region_positions = {4, 9};
  EXPECT_THROW(aggregate_attention(AttentionTrace{}, map), Error);
}

TEST_P(BothArchitectures, RealTraceConservesAttentionMass) {
  const auto arch = GetParam();
  model::VqaModel<double> net(tiny(arch));
  const std::vector<int> ids = {4, 7, 9, 0, 0, 0};
  auto out = net.forward(ids, regions(3, 8, 9));
  auto totals = key_totals(out.trace, out.token_map);
  const bool dual = arch == model::Architecture::dual_stream;
  std::size_t included = 0;
  for (const auto& m : out.trace.matrices) included += contributes(m);
  EXPECT_EQ(included, 4u);  // two layers (or cross layers) of two heads
  const int live_queries = dual ? 3 + 2 : 3 + 2 + 3;
  const double total = std::accumulate(totals.begin(), totals.end(), 0.0);
  EXPECT_NEAR(total, static_cast<double>(included) * live_queries, 1e-4);
  auto scores = aggregate_attention(out.trace, out.token_map);
  ASSERT_EQ(scores.size(), 3u);
  auto want = naive_scores(out.trace, out.token_map, dual);
  for (int j = 0; j < 3; ++j) {
    EXPECT_TRUE(std::isfinite(scores[j].score));
    EXPECT_GE(scores[j].score, 0.0);
    EXPECT_NEAR(scores[j].score, want[j], 1e-9);
  }
}

INSTANTIATE_TEST_SUITE_P(Viz, BothArchitectures,
                         ::testing::Values(model::Architecture::single_stream, model::Architecture::dual_stream),
                         [](const auto& info) { return std::string(model::to_string(info.param)); });

TEST(SelectTop, FewerRegionsThanK) {
  std::vector<RegionScore> s = {{0, 0.3, 0}, {1, 0.9, 0}, {2, 0.1, 0}};
  auto top = select_top(s, 5);
  ASSERT_EQ(top.size(), 3u);
  EXPECT_EQ(top[0].region_index, 1);
  EXPECT_EQ(top[0].rank, 1);
  EXPECT_EQ(top[2].rank, 3);
}

TEST(SelectTop, TiesGoToLowerIndex) {
  std::vector<RegionScore> s = {{0, 5, 0}, {1, 1, 0}, {2, 5, 0}, {3, 0, 0}};
  auto top = select_top(s, 2);
  ASSERT_EQ(top.size(), 2u);
  EXPECT_EQ(top[0].region_index, 0);
  EXPECT_EQ(top[1].region_index, 2);
}

TEST(SelectTop, PrefixOfStableFullSort) {
  std::mt19937 rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 1 + static_cast<int>(rng() % 12), k = 1 + static_cast<int>(rng() % 8);
    std::vector<RegionScore> s;
    for (int j = 0; j < n; ++j) s.push_back({j, static_cast<double>(rng() % 4), 0});
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    // insertion sort: move an element left only past strictly smaller scores
    for (int i = 1; i < n; ++i) {
      for (int j = i; j > 0 && s[order[j]].score > s[order[j - 1]].score; --j) std::swap(order[j], order[j - 1]);
    }
    auto top = select_top(s, k);
    ASSERT_EQ(top.size(), static_cast<std::size_t>(std::min(n, k)));
    for (std::size_t i = 0; i < top.size(); ++i) {
      EXPECT_EQ(top[i].region_index, order[i]);
      EXPECT_EQ(top[i].rank, static_cast<int>(i) + 1);
    }
  }
}

TEST(SelectTop, RankingIgnoresPositiveRescaling) {
  std::mt19937 rng(3);
  std::uniform_real_distribution<double> u(0.0, 10.0);
  std::vector<RegionScore> s, scaled;
  for (int j = 0; j < 10; ++j) {
    double v = u(rng);
    s.push_back({j, v, 0});
    scaled.push_back({j, v / 24.0, 0});
  }
  auto a = select_top(s, 5), b = select_top(scaled, 5);
  for (int i = 0; i < 5; ++i) EXPECT_EQ(a[i].region_index, b[i].region_index);
}

TEST(SelectTop, RejectsNonPositiveK) { EXPECT_THROW(select_top({{0, 1, 0}}, 0), Error); }

TEST(Annotate, FullImageBoxStrokesTheBorder) {
  auto img = fixtures::solid(20, 16, 255, 255, 255);
  std::vector<features::Box> boxes = {{0.0f, 0.0f, 1.0f, 1.0f}};
  auto out = annotate(img, boxes, {{0, 1.0, 1}}, plain());
  EXPECT_TRUE(out.warnings.empty());
  for (auto [x, y] : {std::pair{0, 0}, {19, 0}, {0, 15}, {19, 15}, {2, 8}, {10, 13}}) {
    const auto* p = out.image.at(x, y);
    EXPECT_EQ(p[0], 200);
    EXPECT_EQ(p[1], 16);
    EXPECT_EQ(p[2], 16);
  }
  const auto* centre = out.image.at(10, 8);
  EXPECT_EQ(centre[0], 255);
  EXPECT_EQ(centre[1], 255);
  EXPECT_EQ(out.image.at(3, 8)[1], 255);
}

TEST(Annotate, DeterministicPngThatDecodesToTheDrawnPixels) {
  auto img = fixtures::noise(40, 30, 2);
  std::vector<features::Box> boxes = {{0.1f, 0.1f, 0.6f, 0.7f}, {0.4f, 0.2f, 0.9f, 0.9f}};
  std::vector<RegionScore> ranked = {{1, 2.0, 1}, {0, 1.0, 2}};
  auto a = annotate(img, boxes, ranked);
  auto b = annotate(img, boxes, ranked);
  EXPECT_EQ(a.png, b.png);
  EXPECT_EQ(image::decode(a.png), a.image);
}

TEST(Annotate, StrokesGetLighterWithRank) {
  auto img = fixtures::solid(100, 20, 255, 255, 255);
  std::vector<features::Box> boxes;
  std::vector<RegionScore> ranked;
  for (int i = 0; i < 5; ++i) {
    boxes.push_back({0.2f * i, 0.0f, 0.2f * i + 0.2f, 1.0f});
    ranked.push_back({i, 5.0 - i, i + 1});
  }
  auto out = annotate(img, boxes, ranked, plain());
  std::set<int> distinct;
  double previous = -1.0;
  for (int i = 0; i < 5; ++i) {
    double lum = luminance(out.image.at(20 * i, 10));
    EXPECT_GT(lum, previous) << "rank " << i + 1;
    previous = lum;
    distinct.insert(static_cast<int>(std::lround(lum)));
  }
  EXPECT_EQ(distinct.size(), 5u);
  EXPECT_LT(previous, 255.0);
}

TEST(Annotate, PixelsOutsideStrokesAreUntouched) {
  auto img = fixtures::noise(64, 48, 4);
  std::vector<features::Box> boxes = {{0.1f, 0.2f, 0.5f, 0.6f}, {0.3f, 0.1f, 0.95f, 0.9f}, {0.6f, 0.5f, 0.8f, 0.7f}};
  std::vector<RegionScore> ranked = {{2, 3, 1}, {0, 2, 2}, {1, 1, 3}};
  auto style = plain();
  auto out = annotate(img, boxes, ranked, style);
  std::vector<PixelBox> px;
  for (const auto& b : boxes) px.push_back(to_pixels(b, 64, 48));
  int changed = 0;
  for (int y = 0; y < 48; ++y) {
    for (int x = 0; x < 64; ++x) {
      bool stroked = std::any_of(px.begin(), px.end(), [&](const PixelBox& b) { return on_stroke(b, x, y, 3); });
      bool same = std::equal(img.at(x, y), img.at(x, y) + 3, out.image.at(x, y));
      if (!stroked) EXPECT_TRUE(same) << x << "," << y;
      changed += !same;
    }
  }
  EXPECT_GT(changed, 0);
}

TEST(Annotate, LabelsStayInsideTheirBoxes) {
  auto img = fixtures::solid(80, 60, 255, 255, 255);
  std::vector<features::Box> boxes = {{0.1f, 0.1f, 0.6f, 0.7f}};
  auto with_label = annotate(img, boxes, {{0, 1.0, 1}});
  auto without = annotate(img, boxes, {{0, 1.0, 1}}, plain());
  auto box = to_pixels(boxes[0], 80, 60);
  int label_pixels = 0;
  for (int y = 0; y < 60; ++y) {
    for (int x = 0; x < 80; ++x) {
      bool differs = !std::equal(with_label.image.at(x, y), with_label.image.at(x, y) + 3, without.image.at(x, y));
      if (differs) {
        EXPECT_TRUE(box.contains(x, y));
        EXPECT_FALSE(on_stroke(box, x, y, 3));
        ++label_pixels;
      }
    }
  }
  EXPECT_GT(label_pixels, 0);
}

TEST(Annotate, OutOfBoundsBoxIsClampedWithWarning) {
  auto img = fixtures::solid(10, 10, 255, 255, 255);
  std::vector<features::Box> boxes = {{-0.2f, 0.5f, 1.3f, 1.0f}};
  auto out = annotate(img, boxes, {{0, 1.0, 1}}, plain());
  ASSERT_EQ(out.warnings.size(), 1u);
  EXPECT_NE(out.warnings[0].find("OutOfBounds"), std::string::npos);
  EXPECT_EQ(out.image.at(0, 9)[1], 16);
  EXPECT_EQ(out.image.at(9, 5)[1], 16);
  std::string w;
  EXPECT_EQ(to_pixels({-0.2f, 0.5f, 1.3f, 1.0f}, 10, 10, &w), (PixelBox{0, 5, 9, 9}));
  EXPECT_FALSE(w.empty());
  EXPECT_EQ(to_pixels({0.0f, 0.0f, 1.0f, 1.0f}, 10, 10, &w), (PixelBox{0, 0, 9, 9}));
  EXPECT_TRUE(w.empty());
}

TEST(Annotate, RejectsMissingBoxesAndBadStyles) {
  auto img = fixtures::solid(10, 10, 0, 0, 0);
  std::vector<features::Box> boxes = {{0.0f, 0.0f, 1.0f, 1.0f}};
  EXPECT_THROW(annotate(img, boxes, {{3, 1.0, 1}}), Error);
  AnnotationStyle bad;
  bad.opacity = {1.0, 0.8, 0.8, 0.4, 0.25};
  EXPECT_THROW(bad.validate(), Error);
  bad = {};
  bad.top_k = 6;
  EXPECT_THROW(bad.validate(), Error);
  bad = {};
  bad.top_k = 0;
  EXPECT_THROW(bad.validate(), Error);
  EXPECT_NO_THROW(AnnotationStyle{}.validate());
}

TEST(Batch, ArchiveNamesFollowTheQuestion) {
  EXPECT_EQ(archive_name("What color is it?", 7), "what_color_is_it__7.png");
  EXPECT_NE(archive_name("Is the lamp on?", 1), archive_name("Is the lamp on?", 2));
  EXPECT_EQ(archive_name("???", 3), "question__3.png");
  auto long_name = archive_name(std::string(300, 'a'), 9);
  EXPECT_EQ(long_name, std::string(100, 'a') + "__9.png");
}

namespace {

BatchItem batch_item(std::int64_t qid, std::string question, std::uint32_t seed) {
  BatchItem item;
  item.question_id = qid;
  item.question = std::move(question);
  item.image = std::make_shared<const Image>(fixtures::noise(24, 18, seed));
  const int nq = 2, nr = 4;
  item.token_map = joint_map(nq, nr);
  for (int j = 0; j < nr; ++j) item.boxes.push_back({0.2f * j, 0.1f, 0.2f * j + 0.3f, 0.8f});
  std::mt19937 rng(seed);
  item.trace.n_heads = 1;
  item.trace.matrices.push_back(square(0, 0, random_stochastic(item.token_map.total_len, item.token_map.total_len, rng)));
  return item;
}

}  // namespace

TEST(Batch, OneImagePerQuestion) {
  std::vector<BatchItem> items;
  for (int i = 0; i < 100; ++i) items.push_back(batch_item(i + 1, i % 2 ? "Is the lamp on?" : "What color?", i));
  auto out = annotate_batch(items);
  EXPECT_TRUE(out.errors.empty());
  zip::Reader reader(out.zip);
  ASSERT_EQ(reader.entries().size(), 100u);
  std::set<std::string> names;
  for (const auto& e : reader.entries()) names.insert(e.name);
  EXPECT_EQ(names.size(), 100u);
  EXPECT_TRUE(names.count("is_the_lamp_on__2.png"));
  auto first = image::decode(reader.read(reader.entries()[0]));
  EXPECT_EQ(first.width, 24);
}

TEST(Batch, FailuresGoToTheErrorManifest) {
  std::vector<BatchItem> items;
  for (int i = 0; i < 10; ++i) items.push_back(batch_item(i + 1, "Where is the pen?", i));
  items[3].image.reset();
  items[3].image_error = "pen_3.png could not be decoded";
  items[6].token_map.region_positions = {4, 40};
  auto out = annotate_batch(items);
  ASSERT_EQ(out.errors.size(), 2u);
  EXPECT_EQ(out.names.size(), 8u);
  zip::Reader reader(out.zip);
  ASSERT_EQ(reader.entries().size(), 9u);
  const auto& manifest = reader.entries().back();
  EXPECT_EQ(manifest.name, kErrorManifest);
  auto bytes = reader.read(manifest);
  std::string text(bytes.begin(), bytes.end());
  EXPECT_NE(text.find("pen_3.png could not be decoded"), std::string::npos);
  EXPECT_NE(text.find("where_is_the_pen__7.png"), std::string::npos);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 2);
}
