#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "hgrn/config.hpp"

using namespace hgrn;

namespace {

std::string write_temp(const std::string& name, const std::string& text) {
  const auto path = (std::filesystem::temp_directory_path() / name).string();
  std::ofstream(path) << text;
  return path;
}

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Config, DefaultsMatchDeskSettings) {
  RunConfig cfg;
  EXPECT_EQ(cfg.train.batch_size, 16u);
  EXPECT_EQ(cfg.train.seq_len, 256u);
  EXPECT_EQ(cfg.train.total_steps, 5000u);
  EXPECT_EQ(cfg.train.warmup_steps, 400u);
  EXPECT_EQ(cfg.model.lower_bound_mode, LowerBoundMode::monotone);
  EXPECT_EQ(cfg.model.glu_width(), 64u);
  EXPECT_EQ(cfg.model.mix_width(), 64u);
  EXPECT_NO_THROW(cfg.validate());
}

TEST(Config, PartialFileMergesOverDefaults) {
  auto path = write_temp("hgrn_cfg_partial.json",
                         R"({"model": {"layers": 4, "lower_bound_mode": "none"}, "train": {"peak_lr": 0.001}})");
  auto cfg = load_config(path);
  EXPECT_EQ(cfg.model.layers, 4u);
  EXPECT_EQ(cfg.model.lower_bound_mode, LowerBoundMode::none);
  EXPECT_DOUBLE_EQ(cfg.train.peak_lr, 1e-3);
  EXPECT_EQ(cfg.model.d, 32u);
}

TEST(Config, UnknownKeyIsNamed) {
  auto path = write_temp("hgrn_cfg_unknown.json", R"({"model": {"layerz": 4}})");
  EXPECT_NE(error_of([&] { load_config(path); }).find("model.layerz"), std::string::npos);
  EXPECT_NE(error_of([&] { config_from_json({{"bogus", 1}}); }).find("bogus"), std::string::npos);
}

TEST(Config, UnknownEnumNameIsRejected) {
  const auto msg = error_of([] { config_from_json({{"model", {{"lower_bound_mode", "sideways"}}}}); });
  EXPECT_NE(msg.find("model.lower_bound_mode"), std::string::npos) << msg;
}

TEST(Config, MissingAndMalformedFiles) {
  EXPECT_THROW(load_config("/nonexistent/config.json"), ConfigError);
  auto path = write_temp("hgrn_cfg_bad.json", "{ not json");
  EXPECT_THROW(load_config(path), ConfigError);
  auto wrong_type = write_temp("hgrn_cfg_type.json", R"({"model": {"layers": "four"}})");
  EXPECT_THROW(load_config(wrong_type), ConfigError);
}

TEST(Config, OverridesConvertByFieldType) {
  auto cfg = apply_overrides(RunConfig{}, {"model.layers=3", "train.peak_lr=0.002", "model.use_complex=false",
                                           "model.lower_bound_mode=random", "instrument.eval_lengths=128,512",
                                           "task.corpus=data/x.txt", "model.theta_data_dependent=false"});
  EXPECT_EQ(cfg.model.layers, 3u);
  EXPECT_DOUBLE_EQ(cfg.train.peak_lr, 0.002);
  EXPECT_FALSE(cfg.model.use_complex);
  EXPECT_EQ(cfg.model.lower_bound_mode, LowerBoundMode::random);
  EXPECT_EQ(cfg.instrument.eval_lengths, (std::vector<std::size_t>{128, 512}));
  EXPECT_EQ(cfg.task.corpus, "data/x.txt");
}

TEST(Config, BadOverrides) {
  EXPECT_NE(error_of([] { apply_overrides(RunConfig{}, {"model.depth=3"}); }).find("model.depth"), std::string::npos);
  EXPECT_NE(error_of([] { apply_overrides(RunConfig{}, {"model.layers=three"}); }).find("model.layers"),
            std::string::npos);
  EXPECT_NE(error_of([] { apply_overrides(RunConfig{}, {"model.layers=-1"}); }).find("model.layers"), std::string::npos);
  EXPECT_THROW(apply_overrides(RunConfig{}, {"model.layers"}), ConfigError);
  EXPECT_THROW(apply_overrides(RunConfig{}, {"model=3"}), ConfigError);
  EXPECT_THROW(apply_overrides(RunConfig{}, {"model.use_complex=maybe"}), ConfigError);
}

TEST(Config, ValidationRules) {
  EXPECT_THROW(apply_overrides(RunConfig{}, {"model.d=7"}), ConfigError);
  EXPECT_THROW(apply_overrides(RunConfig{}, {"model.layers=0"}), ConfigError);
  EXPECT_THROW(apply_overrides(RunConfig{}, {"train.warmup_steps=6000"}), ConfigError);
  EXPECT_THROW(apply_overrides(RunConfig{}, {"model.use_complex=false", "model.theta_data_dependent=true"}),
               ConfigError);
  EXPECT_THROW(apply_overrides(RunConfig{}, {"model.vocab_size=100"}), ConfigError);
  EXPECT_THROW(apply_overrides(RunConfig{}, {"train.curriculum_lengths=64,128", "train.curriculum_steps=10"}),
               ConfigError);
  EXPECT_THROW(apply_overrides(RunConfig{}, {"train.curriculum_lengths=256", "train.curriculum_steps=10"}),
               ConfigError);
  EXPECT_NO_THROW(apply_overrides(RunConfig{}, {"train.curriculum_lengths=64,128", "train.curriculum_steps=10,5"}));
  EXPECT_NO_THROW(apply_overrides(RunConfig{}, {"task.kind=selective_copy", "model.vocab_size=10"}));
}

TEST(Config, TextRoundTrip) {
  auto cfg = apply_overrides(RunConfig{}, {"model.layers=5", "train.schedule=cosine", "task.kind=induction",
                                           "model.vocab_size=16", "task.vocab_size=16"});
  auto again = config_from_json(nlohmann::json::parse(config_to_text(cfg)));
  EXPECT_EQ(config_to_text(again), config_to_text(cfg));
  EXPECT_EQ(again.train.schedule, Schedule::cosine);
}

TEST(Config, DataSeedFollowsTrainSeed) {
  RunConfig cfg;
  cfg.train.seed = 17;
  EXPECT_EQ(cfg.data_seed(), 17u);
  cfg.task.seed = 3;
  EXPECT_EQ(cfg.data_seed(), 3u);
}
