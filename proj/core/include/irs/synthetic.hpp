#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "irs/config.hpp"
#include "irs/corpus.hpp"

namespace irs::harness {

// Planted-chain world: `chains` disjoint chains of `chain_length` items. Each
// user walks a contiguous segment of one chain, in either direction; with
// probability `noise` a step is replaced by a random item of the same chain.
// The objective sits min_hops..max_hops steps further along the user's walking
// direction than the last history item (the second to last event).
struct SyntheticWorld {
  std::vector<corpus::RawEvent> events;
  std::map<std::string, std::string> planted;              // user name -> objective item name
  std::vector<std::pair<std::string, std::string>> chain_edges;
};

std::string chain_item_name(std::size_t chain, std::size_t position);

SyntheticWorld make_synthetic(const SyntheticConfig& config, std::uint64_t seed);

// Writes events.csv (generic-csv), planted.json and chain_edges.txt.
void write_synthetic(const std::filesystem::path& dir, const SyntheticWorld& world);

std::map<std::string, std::string> read_planted(const std::filesystem::path& file);

}  // namespace irs::harness
