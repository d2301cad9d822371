#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "hgrn/tasks.hpp"

using namespace hgrn;

namespace {

TaskSpec spec(TaskKind kind, std::size_t n, std::size_t P, std::size_t V, std::uint64_t seed = 1) {
  return {kind, n, P, V, seed};
}

// The payload a copy-style sample asks for, read off its answer span.
std::vector<std::int32_t> answer(const Sample& s) {
  std::vector<std::int32_t> out;
  for (std::size_t i = 0; i < s.tokens.size(); ++i)
    if (s.mask[i]) out.push_back(s.targets[i]);
  return out;
}

}  // namespace

TEST(SelectiveCopy, HandBuiltExample) {
  auto s = selective_copy_at(spec(TaskKind::selective_copy, 9, 3, 6), {1, 3, 4}, {2, 5, 3});
  EXPECT_EQ(s.tokens, (std::vector<std::int32_t>{0, 2, 0, 5, 3, 0, kDelim, 2, 5}));
  EXPECT_EQ(s.mask, (std::vector<std::uint8_t>{0, 0, 0, 0, 0, 0, 1, 1, 1}));
  EXPECT_EQ(answer(s), (std::vector<std::int32_t>{2, 5, 3}));
}

TEST(SelectiveCopy, PayloadIsNonBlankPrefixInOrder) {
  const auto sp = spec(TaskKind::selective_copy, 64, 8, 10, 3);
  for (std::uint64_t i = 0; i < 200; ++i) {
    auto s = gen_selective_copy(sp, i);
    ASSERT_EQ(s.tokens.size(), 64u);
    std::vector<std::int32_t> seen;
    for (std::size_t t = 0; t < 56; ++t)
      if (s.tokens[t] != kBlank) seen.push_back(s.tokens[t]);
    ASSERT_EQ(seen, answer(s));
    ASSERT_EQ(s.tokens[56], kDelim);
    for (auto v : seen) {
      ASSERT_GE(v, kFirstSymbol);
      ASSERT_LT(v, 10);
    }
    // answer span is teacher-forced: input at n-P+j+1 is the previous answer symbol
    for (std::size_t j = 0; j + 1 < 8; ++j) ASSERT_EQ(s.tokens[57 + j], seen[j]);
  }
}

TEST(SelectiveCopy, DeterministicPerIndexAndSeed) {
  const auto a = spec(TaskKind::selective_copy, 40, 4, 8, 1), b = spec(TaskKind::selective_copy, 40, 4, 8, 2);
  EXPECT_EQ(gen_selective_copy(a, 5).tokens, gen_selective_copy(a, 5).tokens);
  EXPECT_NE(gen_selective_copy(a, 5).tokens, gen_selective_copy(a, 6).tokens);
  EXPECT_NE(gen_selective_copy(a, 5).tokens, gen_selective_copy(b, 5).tokens);
}

TEST(SelectiveCopy, RejectsBadSpecs) {
  EXPECT_THROW(gen_selective_copy(spec(TaskKind::selective_copy, 8, 4, 10), 0), TaskError);
  EXPECT_THROW(gen_selective_copy(spec(TaskKind::selective_copy, 20, 4, 3), 0), TaskError);
  EXPECT_THROW(gen_selective_copy(spec(TaskKind::selective_copy, 20, 0, 10), 0), TaskError);
  EXPECT_THROW(selective_copy_at(spec(TaskKind::selective_copy, 9, 3, 6), {3, 1, 4}, {2, 2, 2}), TaskError);
}

TEST(Copy, PayloadAtStart) {
  const auto sp = spec(TaskKind::copy, 20, 5, 9);
  for (std::uint64_t i = 0; i < 50; ++i) {
    auto s = gen_copy(sp, i);
    std::vector<std::int32_t> head(s.tokens.begin(), s.tokens.begin() + 5);
    EXPECT_EQ(head, answer(s));
    for (std::size_t t = 5; t < 15; ++t) EXPECT_EQ(s.tokens[t], kBlank);
  }
}

TEST(Induction, QueryTargetsPairedValue) {
  const auto sp = spec(TaskKind::induction, 33, 4, 12, 7);
  const auto [keys, values] = induction_alphabets(sp);
  EXPECT_EQ(keys, 5u);
  EXPECT_EQ(values, 5u);
  for (std::uint64_t i = 0; i < 200; ++i) {
    auto s = gen_induction(sp, i);
    ASSERT_EQ(s.tokens.size(), 33u);
    ASSERT_EQ(std::count(s.mask.begin(), s.mask.end(), 1), 1);
    ASSERT_EQ(s.mask.back(), 1);
    const auto q = s.tokens.back();
    ASSERT_LT(q, kFirstSymbol + std::int32_t(keys));
    std::set<std::int32_t> seen_keys;
    std::int32_t paired = -1;
    for (std::size_t t = 0; t + 1 < 32; t += 2) {
      if (s.tokens[t] == kBlank) continue;
      ASSERT_TRUE(seen_keys.insert(s.tokens[t]).second);
      ASSERT_GE(s.tokens[t + 1], kFirstSymbol + std::int32_t(keys));
      if (s.tokens[t] == q) paired = s.tokens[t + 1];
    }
    ASSERT_EQ(seen_keys.size(), 4u);
    ASSERT_EQ(s.targets.back(), paired);
  }
  EXPECT_THROW(gen_induction(spec(TaskKind::induction, 33, 6, 12), 0), TaskError);
}

TEST(ByteCorpus, TokenizeRoundTrip) {
  std::string bytes;
  for (int b = 0; b < 256; ++b) bytes.push_back(char(b));
  auto toks = tokenize(bytes);
  EXPECT_EQ(toks[255], 255);
  EXPECT_EQ(detokenize(toks), bytes);
  std::vector<std::int32_t> bad{300};
  EXPECT_THROW(detokenize(bad), TaskError);
}

TEST(ByteCorpus, SplitIsFloorOfRatio) {
  auto c = split_corpus(tokenize("abcdefghij"), 0.9);
  EXPECT_EQ(c.train.size(), 9u);
  EXPECT_EQ(c.val.size(), 1u);
  auto d = split_corpus(tokenize("abc"), 0.5);
  EXPECT_EQ(d.train.size(), 1u);
  EXPECT_THROW(split_corpus({}, 0.9), TaskError);
  EXPECT_THROW(load_byte_corpus("/nonexistent/corpus.txt", 0.9), TaskError);
}

TEST(ByteCorpus, WindowsPredictEveryTokenOnce) {
  auto toks = tokenize("the quick brown fox jumps");
  for (std::size_t n : {1u, 4u, 7u, 24u, 100u}) {
    auto ws = lm_windows(toks, n);
    std::vector<std::int32_t> predicted;
    for (const auto& w : ws) {
      EXPECT_LE(w.tokens.size(), n);
      for (std::size_t i = 0; i < w.tokens.size(); ++i) {
        EXPECT_EQ(w.mask[i], 1);
        predicted.push_back(w.targets[i]);
      }
    }
    EXPECT_EQ(predicted, std::vector<std::int32_t>(toks.begin() + 1, toks.end())) << n;
  }
}

TEST(ByteCorpus, WindowStreamCoversEachPass) {
  std::string text;
  for (int i = 0; i < 100; ++i) text.push_back(char('a' + i % 26));
  WindowStream ws(tokenize(text), 10, 3);
  EXPECT_EQ(ws.windows(), 9u);
  std::multiset<std::int32_t> firsts;
  for (std::uint64_t i = 0; i < 9; ++i) {
    auto s = ws.at(i);
    EXPECT_EQ(s.tokens.size(), 10u);
    firsts.insert(s.tokens[0]);
  }
  std::multiset<std::int32_t> expect;
  for (std::size_t o = 0; o < 90; o += 10) expect.insert(std::int32_t('a' + o % 26));
  EXPECT_EQ(firsts, expect);
  EXPECT_EQ(ws.at(4).tokens, WindowStream(tokenize(text), 10, 3).at(4).tokens);
  EXPECT_THROW(WindowStream(tokenize("abc"), 10, 1), TaskError);
}

TEST(BatchFile, RoundTrip) {
  const auto sp = spec(TaskKind::selective_copy, 30, 4, 9);
  std::vector<Sample> xs;
  for (std::uint64_t i = 0; i < 5; ++i) xs.push_back(gen_sample(sp, i));
  const auto path = (std::filesystem::temp_directory_path() / "hgrn_batch_test.bin").string();
  write_batch_file(path, xs);
  auto ys = read_batch_file(path);
  ASSERT_EQ(ys.size(), xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    EXPECT_EQ(xs[i].tokens, ys[i].tokens);
    EXPECT_EQ(xs[i].targets, ys[i].targets);
    EXPECT_EQ(xs[i].mask, ys[i].mask);
  }
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 1);
  EXPECT_THROW(read_batch_file(path), TaskError);
  std::filesystem::remove(path);
}

TEST(TaskSpec, FollowsRunConfig) {
  RunConfig cfg;
  cfg.task.kind = TaskKind::induction;
  cfg.train.seq_len = 77;
  cfg.train.seed = 9;
  auto sp = task_spec(cfg);
  EXPECT_EQ(sp.seq_len, 77u);
  EXPECT_EQ(sp.seed, 9u);
  cfg.task.seed = 4;
  EXPECT_EQ(task_spec(cfg).seed, 4u);
  EXPECT_THROW(gen_sample(spec(TaskKind::byte_lm, 10, 1, 256), 0), TaskError);
}
