#include <gtest/gtest.h>

#include "rela/config.hpp"

using namespace rela;

TEST(Config, DefaultsMatchDeskScaleRun) {
  RunConfig rc = parse_config("");
  EXPECT_EQ(rc.train.model.layers, 2u);
  EXPECT_EQ(rc.train.model.model_dim, 64u);
  EXPECT_EQ(rc.train.model.heads, 4u);
  EXPECT_EQ(rc.steps, 3000u);
  EXPECT_EQ(rc.train.model.source_vocab, rc.task.vocab + kTokenOffset);
}

TEST(Config, ParsesKeysCommentsAndPerTypeOverrides) {
  RunConfig rc = parse_config(
      "# comment line\n"
      "task = lexical_translate   # trailing comment\n"
      "vocab = 30\n"
      "\n"
      "mechanism = softmax\n"
      "cross.mechanism = rela_g\n"
      "decoder_self.activation = leaky_relu\n"
      "decoder_self.leak = 0.2\n"
      "decoder_self.norm = gated_rmsnorm\n"
      "steps = 12\n"
      "seed = 9\n");
  EXPECT_EQ(rc.task.kind, TaskKind::lexical_translate);
  EXPECT_EQ(rc.task.vocab, 30u);
  EXPECT_EQ(rc.train.model.target_vocab, 32u);
  EXPECT_EQ(rc.task.bijection.size(), 30u);
  EXPECT_EQ(rc.steps, 12u);
  EXPECT_EQ(rc.train.model.seed, 9u);
  const auto& m = rc.train.model;
  EXPECT_EQ(m.mechanism(AttentionType::encoder_self), mechanism_preset("softmax"));
  EXPECT_EQ(m.mechanism(AttentionType::cross), mechanism_preset("rela_g"));
  EXPECT_EQ(m.mechanism(AttentionType::decoder_self).activation.tag, ActivationTag::leaky_relu);
  EXPECT_EQ(m.mechanism(AttentionType::decoder_self).activation.leak, 0.2);
}

TEST(Config, LaterLinesOverrideEarlierOnes) {
  RunConfig rc = parse_config("mechanism = rela_g\nmechanism = softmax\n");
  EXPECT_EQ(rc.train.model.mechanism(AttentionType::cross), mechanism_preset("softmax"));
}

TEST(Config, EchoParsesBackToTheSameRun) {
  RunConfig rc = parse_config(
      "task = lexical_translate_with_insertions\ninsertion_rate = 0.2\nmechanism = rela_i\n"
      "encoder_self.mechanism = softmax\nlr_scale = 0.75\nxavier_fan = width\nlabel_smoothing = 0.05\n");
  const std::string echo = echo_config(rc);
  RunConfig back = parse_config(echo);
  EXPECT_EQ(echo_config(back), echo);
  EXPECT_EQ(nlohmann::json(to_json(back.train.model)), nlohmann::json(to_json(rc.train.model)));
  EXPECT_EQ(back.task.insertion_rate, 0.2);
  EXPECT_EQ(back.train.lr_scale, 0.75);
}

TEST(Config, ErrorsNameTheLine) {
  try {
    parse_config("steps = 3\nno_such_key = 1\n");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("no_such_key"), std::string::npos) << e.what();
  }
}

TEST(Config, RejectsBadValues) {
  EXPECT_THROW(parse_config("steps = many\n"), ConfigError);
  EXPECT_THROW(parse_config("steps = -3\n"), ConfigError);
  EXPECT_THROW(parse_config("steps 3\n"), ConfigError);
  EXPECT_THROW(parse_config("dropout = 1.5\n"), ConfigError);
  EXPECT_THROW(parse_config("task = translate\n"), ConfigError);
  EXPECT_THROW(parse_config("cross.mechanism = linear\n"), ConfigError);
  EXPECT_THROW(parse_config("middle.mechanism = softmax\n"), ConfigError);
  EXPECT_THROW(parse_config("cross.colour = red\n"), ConfigError);
  EXPECT_THROW(parse_config("post_norm = maybe\n"), ConfigError);
  EXPECT_THROW(parse_config("heads = 5\n"), ConfigError);
  // A distribution activation takes no post-attention norm.
  EXPECT_THROW(parse_config("mechanism = rela_g\ncross.activation = softmax\n"), ConfigError);
}

TEST(AblationGrid, ThirteenRowsWithSingleTypeRows) {
  const auto grid = ablation_grid();
  ASSERT_EQ(grid.size(), 13u);
  for (std::size_t i = 0; i < grid.size(); ++i) EXPECT_EQ(grid[i].id, static_cast<int>(i) + 1);
  EXPECT_EQ(grid[3].attention[0], mechanism_preset("relu"));
  for (std::size_t row = 10; row < 13; ++row)
    for (std::size_t t = 0; t < 3; ++t)
      EXPECT_EQ(grid[row].attention[t], mechanism_preset(t == row - 10 ? "rela_g" : "softmax")) << grid[row].label;
  for (const auto& row : grid) {
    ModelConfig m;
    m.attention = row.attention;
    EXPECT_NO_THROW(m.validate()) << row.label;
  }
}

TEST(Telemetry, CsvRoundTripsDoubles) {
  std::vector<TelemetryRow> rows{{10, 1.0 / 3.0, 0.00625, 0.5, false}, {20, 2.5, 1e-4, 0.75, true}};
  EXPECT_EQ(telemetry_csv(rows),
            "step,loss,lr,accuracy,divergence_flag\n"
            "10,0.33333333333333331,0.0062500000000000003,0.5,0\n"
            "20,2.5,0.0001,0.75,1\n");
  EXPECT_EQ(std::stod(format_double(1.0 / 3.0)), 1.0 / 3.0);
}

TEST(HeldOut, UsesItsOwnStream) {
  RunConfig rc = parse_config("task = copy\n");
  Dataset a = held_out(rc, 4), b = held_out(rc, 4);
  Rng train_stream = make_rng(rc.train.model.seed, 2);
  Dataset c = generate(rc.task, train_stream, 4);
  EXPECT_EQ(a[0].source, b[0].source);
  EXPECT_NE(a[0].source, c[0].source);
}
