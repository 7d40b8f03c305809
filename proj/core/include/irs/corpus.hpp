#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

namespace irs {

using ItemId = std::int64_t;
using UserId = std::int64_t;

inline constexpr ItemId kPad = 0;

}  // namespace irs

namespace irs::corpus {

enum class Format { movielens_dat, lastfm_tsv, generic_csv };

Format parse_format(std::string_view name);
std::string_view format_name(Format format);

struct RawEvent {
  std::string user;
  std::string item;
  std::int64_t timestamp = 0;
  std::optional<double> weight;
};

struct IngestReport {
  std::size_t rows = 0;
  std::size_t malformed = 0;
  std::vector<std::string> samples;  // first few offending lines, for the error message
};

class IngestError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed rows are skipped and counted; more than 1% of rows aborts.
std::vector<RawEvent> ingest(const std::filesystem::path& path, Format format, IngestReport* report = nullptr);
std::vector<RawEvent> parse_events(std::istream& in, Format format, IngestReport* report = nullptr);

// Dense ids: items in [1, num_items], users in [1, num_users]. Index 0 of each
// name table is a placeholder so that names[id] works directly.
struct Catalog {
  std::vector<std::string> item_names{""};
  std::vector<std::string> user_names{""};

  std::size_t num_items() const noexcept { return item_names.size() - 1; }
  std::size_t num_users() const noexcept { return user_names.size() - 1; }

  std::optional<ItemId> find_item(const std::string& name) const;
  std::optional<UserId> find_user(const std::string& name) const;

  // Stable hash of both name tables; artifacts carry it to detect mixing catalogs.
  std::string fingerprint() const;

  // Call after editing the name tables directly.
  void rebuild_index();

 private:
  std::unordered_map<std::string, ItemId> item_lookup_;
  std::unordered_map<std::string, UserId> user_lookup_;
};

struct InteractionSequence {
  UserId user = 0;
  std::vector<ItemId> items;
  std::vector<std::int64_t> timestamps;
};

struct Corpus {
  Catalog catalog;
  std::vector<InteractionSequence> sequences;  // ordered by user id

  std::size_t num_interactions() const;
  // counts[item] = occurrences across all sequences; counts[0] = 0.
  std::vector<std::uint64_t> item_counts() const;
};

class EmptyCorpusError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Group by user, stable-sort by timestamp, optionally merge consecutive repeats
// of the same item, then drop users and items below `min_interactions` until
// nothing changes. Users and items are numbered in order of first appearance.
Corpus preprocess(const std::vector<RawEvent>& events, bool dedup_consecutive, std::size_t min_interactions = 5);

struct TrainingExample {
  UserId user = 0;
  std::vector<ItemId> items;  // length l_max, pads first, objective last
  std::size_t real_start = 0;

  std::size_t objective_index() const noexcept { return items.size() - 1; }
  ItemId objective() const noexcept { return items.back(); }
  std::size_t real_length() const noexcept { return items.size() - real_start; }
};

struct TestCase {
  UserId user = 0;
  std::vector<ItemId> history;
  ItemId held_out = kPad;
  ItemId objective = kPad;
};

struct SplitConfig {
  std::size_t l_min = 20;
  std::size_t l_max = 50;
  std::uint64_t seed = 0;
  double validation_fraction = 0.1;
};

struct DatasetSplit {
  std::vector<TrainingExample> train;
  std::vector<TrainingExample> validation;
  std::vector<TestCase> test;
  std::size_t l_min = 0;
  std::size_t l_max = 0;
  std::uint64_t seed = 0;
  std::vector<UserId> skipped_users;  // fewer than two interactions
};

// `planted` replaces the sampled objective for the listed users.
DatasetSplit split(const std::vector<InteractionSequence>& sequences, const std::vector<std::uint64_t>& item_counts,
                   const SplitConfig& config, const std::map<UserId, ItemId>* planted = nullptr);

// Uniform over items with count >= min_count that are not in `history`.
ItemId sample_objective(const std::vector<ItemId>& history, const std::vector<std::uint64_t>& item_counts,
                        std::uint64_t seed, UserId user, std::uint64_t min_count = 5);

// ---- on-disk forms ----------------------------------------------------------

struct SequenceRecord {
  std::uint32_t user = 0;
  std::vector<std::uint32_t> ids;
};

void write_sequence_file(const std::filesystem::path& path, const std::vector<SequenceRecord>& records);
std::vector<SequenceRecord> read_sequence_file(const std::filesystem::path& path);

nlohmann::json catalog_to_json(const Catalog& catalog);
Catalog catalog_from_json(const nlohmann::json& j);

// Corpus: `<dir>/catalog.json` + `<dir>/sequences.bin`.
void save_corpus(const std::filesystem::path& dir, const Corpus& corpus);
Corpus load_corpus(const std::filesystem::path& dir);

// Split: `<dir>/split.json` + `train.bin`, `validation.bin`, `test.bin`.
void save_split(const std::filesystem::path& dir, const DatasetSplit& split, const std::string& catalog_fingerprint);
DatasetSplit load_split(const std::filesystem::path& dir, std::string* catalog_fingerprint = nullptr);

}  // namespace irs::corpus
