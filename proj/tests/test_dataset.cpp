#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "modkit/dataset.hpp"

using namespace modkit;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("modkit_test_" + name);
  fs::remove_all(p);
  return p;
}

std::array<std::size_t, 3> sizes(const Dataset& ds) {
  return {ds.split(SplitName::Train).size(), ds.split(SplitName::Validation).size(),
          ds.split(SplitName::Test).size()};
}

}  // namespace

TEST(Splits, LowDataProtocolCounts) {
  auto s = assign_splits(200, {0.05, 0.10, 0.85}, 7);
  EXPECT_EQ(s[0].size(), 10u);
  EXPECT_EQ(s[1].size(), 20u);
  EXPECT_EQ(s[2].size(), 170u);
  s = assign_splits(200, {0.50, 0.10, 0.40}, 7);
  EXPECT_EQ(s[0].size(), 100u);
  EXPECT_EQ(s[1].size(), 20u);
  EXPECT_EQ(s[2].size(), 80u);
}

TEST(Splits, DisjointExhaustiveDeterministic) {
  const auto a = assign_splits(57, {0.3, 0.2, 0.5}, 3);
  const auto b = assign_splits(57, {0.3, 0.2, 0.5}, 3);
  EXPECT_EQ(a, b);
  std::set<int> all;
  std::size_t total = 0;
  for (const auto& s : a) {
    all.insert(s.begin(), s.end());
    total += s.size();
  }
  EXPECT_EQ(total, 57u);
  EXPECT_EQ(all.size(), 57u);
  EXPECT_NE(assign_splits(57, {0.3, 0.2, 0.5}, 4), a);
}

TEST(Splits, Validation) {
  EXPECT_THROW(validate_splits({0.5, 0.5, 0.5}), Error);
  EXPECT_THROW(validate_splits({-0.1, 0.6, 0.5}), Error);
  EXPECT_NO_THROW(validate_splits({0.05, 0.10, 0.85}));
}

TEST(Dataset, GenerateSmall) {
  DatasetConfig cfg;
  cfg.sample_count = 20;
  cfg.splits = {0.5, 0.2, 0.3};
  const auto ds = generate_dataset(cfg);
  EXPECT_EQ(ds.sequences.size(), 20u);
  EXPECT_EQ(sizes(ds), (std::array<std::size_t, 3>{10, 4, 6}));
  for (const auto& s : ds.sequences) {
    EXPECT_EQ(s.i_L.grid, cfg.grid);
    EXPECT_EQ(s.tuple, to_phase_shift_tuple(s.params));
  }
}

TEST(Dataset, RejectsBadConfig) {
  DatasetConfig cfg;
  cfg.sample_count = 5;
  EXPECT_THROW(generate_dataset(cfg), Error);
  cfg.sample_count = 20;
  cfg.splits = {0.5, 0.5, 0.5};
  EXPECT_THROW(generate_dataset(cfg), Error);
}

TEST(Dataset, RingingChangesVoltagesOnly) {
  DatasetConfig cfg;
  cfg.sample_count = 10;
  cfg.splits = {0.5, 0.2, 0.3};
  const auto clean = generate_dataset(cfg);
  cfg.ringing.enabled = true;
  const auto rung = generate_dataset(cfg);
  EXPECT_NE(clean.sequences[3].v_p.values, rung.sequences[3].v_p.values);
  EXPECT_EQ(clean.sequences[3].tuple, rung.sequences[3].tuple);
}

TEST(Dataset, DiskRoundTripAndByteDeterminism) {
  DatasetConfig cfg;
  cfg.sample_count = 12;
  cfg.splits = {0.5, 0.25, 0.25};
  cfg.ringing.enabled = true;
  const auto ds = generate_dataset(cfg);
  const auto a = scratch("ds_a"), b = scratch("ds_b");
  write_dataset(ds, a);
  write_dataset(generate_dataset(cfg), b);
  for (const auto& e : fs::directory_iterator(a)) {
    EXPECT_EQ(detail::read_text(e.path()), detail::read_text(b / e.path().filename()))
        << e.path();
  }
  EXPECT_EQ(detail::read_text(a / "seq_0.csv").substr(0, 15), "t,v_p,v_s,i_L\n0");
  const auto back = read_dataset(a);
  ASSERT_EQ(back.sequences.size(), ds.sequences.size());
  for (std::size_t j = 0; j < ds.sequences.size(); ++j) {
    EXPECT_EQ(back.sequences[j].i_L.values, ds.sequences[j].i_L.values);
    EXPECT_EQ(back.sequences[j].v_p.values, ds.sequences[j].v_p.values);
    EXPECT_EQ(back.sequences[j].params, ds.sequences[j].params);
  }
  EXPECT_EQ(back.splits, ds.splits);
  EXPECT_EQ(back.config.circuit, ds.config.circuit);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Dataset, MissingDirectoryIsAnError) {
  EXPECT_THROW(read_dataset(scratch("missing")), Error);
}
