// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>

#include "oracles.hpp"
#include "test_util.hpp"
#include "zerase/flow.hpp"
#include "zerase/model.hpp"

using namespace zerase;

namespace {

ModelConfig small_config() {
  ModelConfig c = ConceptDataset::two_gaussians().model_config();
  c.d_model = 8;
  c.n_layers = 2;
  c.ffn_hidden = 12;
  c.time_embed_dim = 6;
  return c;
}

}  // namespace

TEST(ModelConfig, ValidateNamesViolation) {
  ModelConfig c;
  c.n_heads = 3;
  try {
    c.validate();
    FAIL();
  } catch (const DomainError& e) {
    EXPECT_NE(std::string(e.what()).find("n_heads"), std::string::npos);
  }
  ModelConfig s;
  s.concept_slot = s.n_text;
  EXPECT_THROW(s.validate(), DomainError);
}

TEST(Model, ForwardMatchesReferenceOracle) {
  Rng rng(5);
  const SingleStreamModel m(small_config(), 17);
  GatedLoRA lora = GatedLoRA::init(m.config(), 3, 0.7, 4);
  for (auto& layer : lora.layers)
    for (auto& ad : layer)
      for (auto& v : ad.up.mutable_data()) v = rng.normal(0.0, 0.5);
  for (const Concept c : {Concept{0}, Concept{1}, kUnconditional})
    for (const GatedLoRA* l : {static_cast<const GatedLoRA*>(nullptr), static_cast<const GatedLoRA*>(&lora)}) {
      const auto x = zt::randn(rng, m.config().n_image * m.config().d_data);
      const double t = rng.uniform();
      const auto got = m.forward(m.embed(x, c, t), l).velocity;
      const auto want = zt::reference_forward(m, x, c, t, l);
      ASSERT_EQ(got.numel(), want.size());
      for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(got.data()[i], want[i], 1e-12);
    }
}

TEST(Model, BatchedForwardEqualsPerSample) {
  Rng rng(6);
  const SingleStreamModel m(small_config(), 3);
  const std::size_t per = m.config().n_image * m.config().d_data;
  const auto x = zt::randn(rng, 3 * per);
  const std::vector<Concept> cs{0, kUnconditional, 1};
  const std::vector<double> ts{0.1, 0.5, 0.9};
  const auto batched = m.forward(m.embed(x, cs, ts)).velocity;
  for (std::size_t b = 0; b < 3; ++b) {
    const auto one = m.forward(m.embed(std::span<const double>(x).subspan(b * per, per), cs[b], ts[b])).velocity;
    EXPECT_TRUE(zt::bitwise_equal(one.data(), batched.data().subspan(b * per, per)));
  }
}

TEST(Model, GatingInvariant) {
  Rng rng(7);
  for (int i = 0; i < 20; ++i) {
    const auto o = zt::gating_trial(rng);
    EXPECT_TRUE(o.image_rows_bitwise);
    EXPECT_TRUE(o.zero_down_bitwise);
  }
}

TEST(Model, FreshLoraIsIdentity) {
  Rng rng(8);
  const SingleStreamModel m(small_config(), 3);
  const GatedLoRA lora = GatedLoRA::init(m.config(), 4, 1.0, 9);
  const auto x = zt::randn(rng, m.config().n_image * m.config().d_data);
  const auto seq = m.embed(x, Concept{0}, 0.4);
  EXPECT_TRUE(zt::bitwise_equal(m.forward(seq).velocity.data(), m.forward(seq, &lora).velocity.data()));
}

TEST(Model, AttentionRowsAreStochastic) {
  Rng rng(9);
  const SingleStreamModel m(small_config(), 3);
  const auto x = zt::randn(rng, 2 * m.config().n_image * m.config().d_data);
  const std::vector<Concept> cs{0, 1};
  const std::vector<double> ts{0.3, 0.6};
  const auto out = m.forward(m.embed(x, cs, ts));
  ASSERT_EQ(out.attention.size(), m.config().n_layers * m.config().n_heads);
  for (const auto& rec : out.attention) {
    const auto N = rec.seq_len;
    for (std::size_t r = 0; r < rec.weights.rows(); ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < N; ++c) s += rec.weights.at(r, c);
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
    const auto blk = rec.block(1, AttentionBlock::kImageText);
    EXPECT_EQ(blk.shape(), (Shape{rec.n_image, N - rec.n_image}));
    EXPECT_DOUBLE_EQ(blk.at(0, 0), rec.weights.at(N, rec.n_image));
  }
}

TEST(Model, AttentionMassMatchesLoopOracle) {
  Rng rng(10);
  const SingleStreamModel m(small_config(), 3);
  const auto x = zt::randn(rng, 3 * m.config().n_image * m.config().d_data);
  const std::vector<Concept> cs{0, kUnconditional, 1};
  const std::vector<double> ts{0.3, 0.6, 0.2};
  const auto seq = m.embed(x, cs, ts);
  const auto out = m.forward(seq);
  for (bool image_only : {true, false}) {
    const double got = attention_mass(out.attention, seq.concept_spans, {image_only}).item();
    const std::size_t N = seq.seq_len(), rows = image_only ? seq.n_image : N;
    double total = 0.0;
    for (const auto& rec : out.attention)
      for (std::size_t b = 0; b < seq.batch; ++b) {
        const auto& sp = seq.concept_spans[b];
        if (sp.empty) continue;
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = sp.first; j <= sp.last; ++j) total += rec.weights.at(b * N + i, j);
      }
    EXPECT_NEAR(got, total / static_cast<double>(out.attention.size() * seq.batch * rows), 1e-14);
  }
  const std::vector<TokenSpan> none(3);
  EXPECT_EQ(attention_mass(out.attention, none).item(), 0.0);
}

TEST(Model, ShuffleKeepsTokensAndTracksSpan) {
  Rng rng(11);
  ModelConfig c = small_config();
  c.n_text = 5;
  const SingleStreamModel m(c, 3);
  const auto x = zt::randn(rng, 2 * c.n_image * c.d_data);
  const std::vector<Concept> cs{0, 1};
  const std::vector<double> ts{0.3, 0.6};
  const auto seq = m.embed(x, cs, ts);
  std::vector<int> hits(c.n_text, 0);
  for (int trial = 0; trial < 200; ++trial) {
    const auto sh = shuffle_tokens(seq, rng);
    for (std::size_t b = 0; b < 2; ++b) {
      auto a = seq.token_ids[b], s = sh.token_ids[b];
      std::sort(a.begin(), a.end());
      std::sort(s.begin(), s.end());
      EXPECT_EQ(a, s);
      const auto& sp = sh.concept_spans[b];
      ASSERT_FALSE(sp.empty);
      EXPECT_EQ(sh.token_ids[b][sp.first - c.n_image], *cs[b]);
      ++hits[sp.first - c.n_image];
      // Image rows untouched.
      const std::size_t d = c.d_model, N = c.seq_len();
      EXPECT_TRUE(zt::bitwise_equal(sh.h.data().subspan(b * N * d, c.n_image * d),
                                    seq.h.data().subspan(b * N * d, c.n_image * d)));
    }
  }
  for (int h : hits) EXPECT_GT(h, 0);  // every slot reachable
}

TEST(Model, PermuteTextRejectsNonPermutation) {
  Rng rng(12);
  const SingleStreamModel m(small_config(), 3);
  const auto seq = m.embed(zt::randn(rng, m.config().n_image * m.config().d_data), Concept{0}, 0.5);
  const std::vector<std::vector<std::size_t>> bad{{0, 0, 1, 2}};
  EXPECT_THROW(permute_text(seq, bad), ContractError);
}

TEST(Model, EmbedRejectsUnknownConcept) {
  const SingleStreamModel m(small_config(), 3);
  const std::vector<double> x(m.config().n_image * m.config().d_data, 0.0);
  EXPECT_THROW(m.embed(x, Concept{m.config().vocab}, 0.5), DomainError);
  EXPECT_THROW(m.embed(std::span<const double>(x).first(1), Concept{0}, 0.5), DimensionError);
}

TEST(Model, PerturbedTokenShadowsSource) {
  const SingleStreamModel m(small_config(), 3);
  const auto& tok = m.param("embed.tokens");
  const auto& noise = m.param("embed.token_perturbation");
  const auto& pt = m.config().perturbed.at(0);
  const std::size_t d = m.config().d_model;
  for (std::size_t j = 0; j < d; ++j) EXPECT_EQ(tok.at(pt.id, j), tok.at(pt.source, j) + noise.at(0, j));
  const auto names = m.trainable_parameters();
  EXPECT_FALSE(noise.requires_grad());
}

TEST(Model, CloneIsDeepAndChecksumStable) {
  SingleStreamModel m(small_config(), 3);
  auto c = m.clone();
  EXPECT_EQ(m.checksum(), c.checksum());
  c.parameters()[0].value.mutable_data()[0] += 1.0;
  EXPECT_NE(m.checksum(), c.checksum());
  EXPECT_EQ(SingleStreamModel(small_config(), 3).checksum(), m.checksum());
  EXPECT_NE(SingleStreamModel(small_config(), 4).checksum(), m.checksum());
}

TEST(Model, LoraShapeMismatchThrows) {
  const SingleStreamModel m(small_config(), 3);
  ModelConfig other = small_config();
  other.d_model = 16;
  const GatedLoRA lora = GatedLoRA::init(other, 2, 1.0, 0);
  const std::vector<double> x(m.config().n_image * m.config().d_data, 0.0);
  EXPECT_THROW(m.forward(m.embed(x, Concept{0}, 0.5), &lora), DimensionError);
}
