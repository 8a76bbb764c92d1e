#include "invert3d/text_embed.hpp"

#include <catch_amalgamated.hpp>

using namespace invert3d;

TEST_CASE("init_pseudo_token", "[text]") {
  const Vocabulary vocab = default_vocabulary(64, 1);
  SECTION("32 rows, each equal to the init word") {
    const PseudoToken t = init_pseudo_token("object", 32, vocab);
    REQUIRE(t.count() == 32);
    for (int r = 0; r < 32; ++r) CHECK(Eigen::RowVectorXd(t.vectors.row(r)) == vocab.embedding("object"));
    CHECK(t.trainable);
  }
  SECTION("N = 1") {
    const PseudoToken t = init_pseudo_token("object", 1, vocab);
    REQUIRE(t.count() == 1);
    CHECK(Eigen::RowVectorXd(t.vectors.row(0)) == vocab.embedding("object"));
  }
  SECTION("rows are independent parameters") {
    PseudoToken t = init_pseudo_token("object", 4, vocab);
    const PseudoToken before = t;
    t.vectors(2, 5) += 1.0;
    for (int r : {0, 1, 3}) CHECK(t.vectors.row(r) == before.vectors.row(r));
  }
  SECTION("unknown word and bad count") {
    CHECK_THROWS_AS(init_pseudo_token("zebra", 4, vocab), Error);
    CHECK_THROWS_AS(init_pseudo_token("object", 0, vocab), Error);
  }
}

TEST_CASE("assemble_prompt", "[text]") {
  const Vocabulary vocab = default_vocabulary(16, 2);
  SECTION("template with a 32-vector pseudo-token") {
    const PseudoToken t = init_pseudo_token("object", 32, vocab);
    const PromptEmbedding p = assemble_prompt({"a", "photo", "of", "S*"}, &t, vocab);
    CHECK(p.length() == 35);
    CHECK(p.labels.size() == 35);
    CHECK(p.labels[3] == "S*");
    CHECK(p.positions_of({"S*"}).size() == 32);
  }
  SECTION("pseudo-token alone") {
    const PseudoToken t = init_pseudo_token("object", 4, vocab);
    const PromptEmbedding p = assemble_prompt({"S*"}, &t, vocab);
    CHECK(p.length() == 4);
    for (const auto& l : p.labels) CHECK(l == "S*");
  }
  SECTION("plain words are table rows") {
    const PromptEmbedding p = assemble_prompt({"a", "red", "cube"}, nullptr, vocab);
    REQUIRE(p.length() == 3);
    CHECK(Eigen::RowVectorXd(p.vectors.row(1)) == vocab.embedding("red"));
    CHECK(Eigen::RowVectorXd(p.vectors.row(2)) == vocab.embedding("cube"));
  }
  SECTION("errors") {
    const PseudoToken t = init_pseudo_token("object", 2, vocab);
    CHECK_THROWS_AS(assemble_prompt({"a", "zebra"}, nullptr, vocab), Error);
    CHECK_THROWS_AS(assemble_prompt({"S*", "a", "S*"}, &t, vocab), Error);
    CHECK_THROWS_AS(assemble_prompt({"S*"}, nullptr, vocab), Error);
  }
  SECTION("property: length = template words + N") {
    Rng rng(5);
    const auto& words = vocab.words();
    for (int trial = 0; trial < 300; ++trial) {
      const int n = std::uniform_int_distribution<int>(1, 40)(rng);
      const int len = std::uniform_int_distribution<int>(0, 8)(rng);
      const bool with_pseudo = rng() % 2 == 0;
      std::vector<std::string> tmpl;
      for (int i = 0; i < len; ++i) tmpl.push_back(words[rng() % words.size()]);
      if (with_pseudo) tmpl.insert(tmpl.begin() + static_cast<long>(rng() % (tmpl.size() + 1)), "S*");
      const PseudoToken t = init_pseudo_token("object", n, vocab);
      const PromptEmbedding p = assemble_prompt(tmpl, &t, vocab);
      REQUIRE(p.length() == len + (with_pseudo ? n : 0));
      REQUIRE(p.labels.size() == static_cast<std::size_t>(p.length()));
    }
  }
}

TEST_CASE("text_delta", "[text]") {
  const Vocabulary vocab = default_vocabulary(32, 3);
  CHECK(text_delta({"red", "toy"}, {"red", "toy"}, vocab).isZero(0));
  CHECK(text_delta({"blue"}, {"red"}, vocab) == Eigen::RowVectorXd(vocab.embedding("blue") - vocab.embedding("red")));
  CHECK(text_delta({"red", "cube"}, {"blue"}, vocab) == -text_delta({"blue"}, {"red", "cube"}, vocab));
  CHECK_THROWS_AS(text_delta({}, {"red"}, vocab), Error);
  CHECK_THROWS_AS(text_delta({"zebra"}, {"red"}, vocab), Error);
  SECTION("deltas chain: d(A,B) + d(B,C) = d(A,C)") {
    const auto ab = text_delta({"a", "red", "toy"}, {"blue", "vase"}, vocab);
    const auto bc = text_delta({"blue", "vase"}, {"shiny"}, vocab);
    const auto ac = text_delta({"a", "red", "toy"}, {"shiny"}, vocab);
    CHECK((ab + bc - ac).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("edit_embedding", "[text]") {
  const Vocabulary vocab = default_vocabulary(8, 4);
  const PseudoToken z = init_pseudo_token("object", 3, vocab);
  const Eigen::RowVectorXd delta = text_delta({"blue"}, {"red"}, vocab);
  CHECK(edit_embedding(z, delta, 0.0) == z);
  CHECK(edit_embedding(z, Eigen::RowVectorXd::Zero(8), 3.7) == z);
  SECTION("direct evaluation") {
    PseudoToken t;
    t.vectors = Mat{{1.0, 0.0}};
    const PseudoToken e = edit_embedding(t, Eigen::RowVector2d(0.0, 2.0), 0.5);
    CHECK(e.vectors == Mat{{1.0, 1.0}});
    CHECK(t.vectors == Mat{{1.0, 0.0}});
  }
  SECTION("composition in lambda is exact for representable values") {
    PseudoToken t;
    t.vectors = Mat{{0.5, -1.25, 3.0}, {2.0, 0.125, -0.75}};
    const Eigen::RowVector3d d(0.25, -0.5, 1.5);
    CHECK(edit_embedding(t, d, 0.75) == edit_embedding(edit_embedding(t, d, 0.5), d, 0.25));
  }
  SECTION("composition in lambda holds to rounding for arbitrary values") {
    Rng rng(9);
    for (int i = 0; i < 100; ++i) {
      const double a = uniform(rng, -2, 2), b = uniform(rng, -2, 2);
      const PseudoToken lhs = edit_embedding(z, delta, a + b);
      const PseudoToken rhs = edit_embedding(edit_embedding(z, delta, a), delta, b);
      REQUIRE((lhs.vectors - rhs.vectors).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
  CHECK_THROWS_AS(edit_embedding(z, Eigen::RowVectorXd::Zero(3), 1.0), Error);
}

TEST_CASE("embedding file format", "[text][io]") {
  PseudoToken t;
  t.name = "S*";
  t.vectors = Mat{{1.0, -2.0, 0.5}, {0.25, 3.0, -1.0}};
  const EmbeddingMetadata meta{"object", 42, "run-1", "S*"};
  const auto buf = encode_embedding_file(t, meta);
  SECTION("byte layout") {
    REQUIRE(buf.size() >= 4 + 2 + 4 + 4 + 6 * 4 + 4);
    CHECK(std::string(buf.data(), 4) == "IV3D");
    CHECK(static_cast<unsigned char>(buf[4]) == 1);
    CHECK(static_cast<unsigned char>(buf[5]) == 0);
    CHECK(static_cast<unsigned char>(buf[6]) == 2);  // N
    CHECK(static_cast<unsigned char>(buf[10]) == 3);  // d
    float first = 0;
    std::memcpy(&first, buf.data() + 14, 4);
    CHECK(first == 1.0f);
    std::uint32_t meta_len = 0;
    std::memcpy(&meta_len, buf.data() + 14 + 24, 4);
    CHECK(meta_len == buf.size() - (14 + 24 + 4));
  }
  SECTION("decode recovers vectors and metadata") {
    const auto [back, m] = decode_embedding_file(buf);
    CHECK(back.vectors == t.vectors);
    CHECK(m.init_word == "object");
    CHECK(m.training_seed == 42);
    CHECK(m.run_id == "run-1");
  }
  SECTION("corrupt input is a schema error") {
    auto bad = buf;
    bad[0] = 'X';
    CHECK_THROWS_AS(decode_embedding_file(bad), Error);
    auto truncated = buf;
    truncated.resize(20);
    CHECK_THROWS_AS(decode_embedding_file(truncated), Error);
  }
}
