#include "irs/corpus.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <unordered_set>

#include "irs/checkpoint.hpp"
#include "irs/rng.hpp"

namespace irs::corpus {

Format parse_format(std::string_view name) {
  if (name == "movielens-dat") return Format::movielens_dat;
  if (name == "lastfm-tsv") return Format::lastfm_tsv;
  if (name == "generic-csv") return Format::generic_csv;
  throw std::invalid_argument("unknown input format '" + std::string(name) +
                              "' (expected movielens-dat, lastfm-tsv or generic-csv)");
}

std::string_view format_name(Format format) {
  switch (format) {
    case Format::movielens_dat: return "movielens-dat";
    case Format::lastfm_tsv: return "lastfm-tsv";
    case Format::generic_csv: return "generic-csv";
  }
  return "?";
}

namespace {

std::vector<std::string_view> split_fields(std::string_view line, std::string_view sep) {
  std::vector<std::string_view> out;
  std::size_t pos = 0;
  while (true) {
    auto next = line.find(sep, pos);
    if (next == std::string_view::npos) {
      out.push_back(line.substr(pos));
      return out;
    }
    out.push_back(line.substr(pos, next - pos));
    pos = next + sep.size();
  }
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::optional<std::int64_t> parse_int(std::string_view s) {
  s = trim(s);
  std::int64_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) return std::nullopt;
  return v;
}

std::optional<double> parse_double(std::string_view s) {
  s = trim(s);
  if (s.empty()) return std::nullopt;
  std::string buf(s);
  char* end = nullptr;
  double v = std::strtod(buf.c_str(), &end);
  if (end != buf.c_str() + buf.size()) return std::nullopt;
  return v;
}

bool looks_like_header(std::string_view line, std::string_view sep) {
  auto fields = split_fields(line, sep);
  return !fields.empty() && !parse_int(fields.back()).has_value();
}

}  // namespace

std::vector<RawEvent> parse_events(std::istream& in, Format format, IngestReport* report) {
  IngestReport local;
  IngestReport& rep = report ? *report : local;
  rep = {};
  std::vector<RawEvent> events;
  std::string line;
  bool first = true;
  // Column positions for generic csv come from its header.
  std::size_t user_col = 0, item_col = 1, ts_col = 2, width = 3;

  auto malformed = [&](const std::string& l) {
    ++rep.malformed;
    if (rep.samples.size() < 3) rep.samples.push_back(l);
  };

  while (std::getline(in, line)) {
    std::string_view view = trim(line);
    if (view.empty()) continue;
    if (first) {
      first = false;
      if (format == Format::generic_csv) {
        auto header = split_fields(view, ",");
        std::map<std::string, std::size_t> cols;
        for (std::size_t i = 0; i < header.size(); ++i) cols[std::string(trim(header[i]))] = i;
        if (!cols.count("user") || !cols.count("item") || !cols.count("timestamp")) {
          throw IngestError("generic-csv input must start with a header containing user,item,timestamp");
        }
        user_col = cols["user"];
        item_col = cols["item"];
        ts_col = cols["timestamp"];
        width = header.size();
        continue;
      }
      if (format == Format::lastfm_tsv && looks_like_header(view, "\t")) continue;
    }
    ++rep.rows;
    RawEvent ev;
    switch (format) {
      case Format::movielens_dat: {
        auto f = split_fields(view, "::");
        auto ts = f.size() == 4 ? parse_int(f[3]) : std::nullopt;
        if (!ts || *ts < 0 || trim(f[0]).empty() || trim(f[1]).empty()) {
          malformed(line);
          continue;
        }
        ev = {std::string(trim(f[0])), std::string(trim(f[1])), *ts, parse_double(f[2])};
        break;
      }
      case Format::lastfm_tsv: {
        auto f = split_fields(view, "\t");
        auto ms = f.size() >= 3 ? parse_int(f.back()) : std::nullopt;
        if (!ms || *ms < 0 || trim(f[0]).empty() || trim(f[1]).empty()) {
          malformed(line);
          continue;
        }
        ev = {std::string(trim(f[0])), std::string(trim(f[1])), *ms / 1000, std::nullopt};
        break;
      }
      case Format::generic_csv: {
        auto f = split_fields(view, ",");
        auto ts = f.size() == width ? parse_int(f[ts_col]) : std::nullopt;
        if (!ts || *ts < 0 || trim(f[user_col]).empty() || trim(f[item_col]).empty()) {
          malformed(line);
          continue;
        }
        ev = {std::string(trim(f[user_col])), std::string(trim(f[item_col])), *ts, std::nullopt};
        break;
      }
    }
    events.push_back(std::move(ev));
  }
  if (rep.malformed * 100 > rep.rows) {
    std::string msg = std::to_string(rep.malformed) + " of " + std::to_string(rep.rows) + " rows are malformed for " +
                      std::string(format_name(format));
    if (!rep.samples.empty()) msg += "; first: '" + rep.samples.front() + "'";
    throw IngestError(msg);
  }
  return events;
}

std::vector<RawEvent> ingest(const std::filesystem::path& path, Format format, IngestReport* report) {
  std::ifstream in(path);
  if (!in) throw IngestError("cannot read " + path.string());
  return parse_events(in, format, report);
}

// ---- catalog ------------------------------------------------------------------

std::optional<ItemId> Catalog::find_item(const std::string& name) const {
  auto it = item_lookup_.find(name);
  if (it == item_lookup_.end()) return std::nullopt;
  return it->second;
}

std::optional<UserId> Catalog::find_user(const std::string& name) const {
  auto it = user_lookup_.find(name);
  if (it == user_lookup_.end()) return std::nullopt;
  return it->second;
}

void Catalog::rebuild_index() {
  item_lookup_.clear();
  user_lookup_.clear();
  for (std::size_t i = 1; i < item_names.size(); ++i) item_lookup_[item_names[i]] = static_cast<ItemId>(i);
  for (std::size_t u = 1; u < user_names.size(); ++u) user_lookup_[user_names[u]] = static_cast<UserId>(u);
}

std::string Catalog::fingerprint() const {
  std::uint64_t h = fnv1a("irs-catalog");
  auto mix = [&h](const std::string& s) {
    h ^= fnv1a(s);
    h = splitmix64(h);
  };
  for (const auto& n : item_names) mix(n);
  mix("\x1f");
  for (const auto& n : user_names) mix(n);
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::size_t Corpus::num_interactions() const {
  std::size_t n = 0;
  for (const auto& s : sequences) n += s.items.size();
  return n;
}

std::vector<std::uint64_t> Corpus::item_counts() const {
  std::vector<std::uint64_t> counts(catalog.num_items() + 1, 0);
  for (const auto& s : sequences)
    for (auto i : s.items) ++counts[static_cast<std::size_t>(i)];
  return counts;
}

// ---- preprocess ---------------------------------------------------------------

namespace {

struct Working {
  std::size_t user;  // index into first-appearance user order
  std::vector<std::size_t> items;
  std::vector<std::int64_t> ts;
};

void dedup(Working& w) {
  std::size_t out = 0;
  for (std::size_t i = 0; i < w.items.size(); ++i) {
    if (out > 0 && w.items[out - 1] == w.items[i]) continue;
    w.items[out] = w.items[i];
    w.ts[out] = w.ts[i];
    ++out;
  }
  w.items.resize(out);
  w.ts.resize(out);
}

}  // namespace

Corpus preprocess(const std::vector<RawEvent>& events, bool dedup_consecutive, std::size_t min_interactions) {
  if (events.empty()) throw EmptyCorpusError("no events to preprocess");

  std::unordered_map<std::string, std::size_t> user_idx, item_idx;
  std::vector<std::string> user_order, item_order;
  std::vector<std::vector<std::size_t>> per_user;  // event indices in input order
  std::vector<std::size_t> event_item(events.size());
  for (std::size_t e = 0; e < events.size(); ++e) {
    const auto& ev = events[e];
    auto [uit, unew] = user_idx.try_emplace(ev.user, user_order.size());
    if (unew) {
      user_order.push_back(ev.user);
      per_user.emplace_back();
    }
    auto [iit, inew] = item_idx.try_emplace(ev.item, item_order.size());
    if (inew) item_order.push_back(ev.item);
    event_item[e] = iit->second;
    per_user[uit->second].push_back(e);
  }

  std::vector<Working> users;
  users.reserve(per_user.size());
  for (std::size_t u = 0; u < per_user.size(); ++u) {
    auto& idx = per_user[u];
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return events[a].timestamp < events[b].timestamp; });
    Working w{u, {}, {}};
    for (auto e : idx) {
      w.items.push_back(event_item[e]);
      w.ts.push_back(events[e].timestamp);
    }
    if (dedup_consecutive) dedup(w);
    users.push_back(std::move(w));
  }

  std::vector<std::size_t> counts(item_order.size());
  while (true) {
    std::fill(counts.begin(), counts.end(), 0);
    for (const auto& w : users)
      for (auto i : w.items) ++counts[i];
    bool changed = false;
    for (auto& w : users) {
      std::size_t out = 0;
      for (std::size_t k = 0; k < w.items.size(); ++k) {
        if (counts[w.items[k]] < min_interactions) continue;
        w.items[out] = w.items[k];
        w.ts[out] = w.ts[k];
        ++out;
      }
      if (out != w.items.size()) {
        changed = true;
        w.items.resize(out);
        w.ts.resize(out);
        if (dedup_consecutive) dedup(w);
      }
    }
    const auto before = users.size();
    std::erase_if(users, [&](const Working& w) { return w.items.size() < min_interactions; });
    changed = changed || users.size() != before;
    if (!changed) break;
  }
  if (users.empty()) throw EmptyCorpusError("every user and item was removed by the minimum-interaction filter");

  Corpus corpus;
  std::vector<ItemId> dense(item_order.size(), kPad);
  for (const auto& w : users) {
    InteractionSequence seq;
    corpus.catalog.user_names.push_back(user_order[w.user]);
    seq.user = static_cast<UserId>(corpus.catalog.num_users());
    for (auto i : w.items) {
      if (dense[i] == kPad) {
        corpus.catalog.item_names.push_back(item_order[i]);
        dense[i] = static_cast<ItemId>(corpus.catalog.num_items());
      }
      seq.items.push_back(dense[i]);
    }
    seq.timestamps = w.ts;
    corpus.sequences.push_back(std::move(seq));
  }
  corpus.catalog.rebuild_index();
  return corpus;
}

// ---- split ----------------------------------------------------------------------

ItemId sample_objective(const std::vector<ItemId>& history, const std::vector<std::uint64_t>& item_counts,
                        std::uint64_t seed, UserId user, std::uint64_t min_count) {
  std::unordered_set<ItemId> seen(history.begin(), history.end());
  std::vector<ItemId> eligible;
  for (std::size_t i = 1; i < item_counts.size(); ++i) {
    if (item_counts[i] >= min_count && !seen.count(static_cast<ItemId>(i))) eligible.push_back(static_cast<ItemId>(i));
  }
  if (eligible.empty()) {
    throw std::runtime_error("user " + std::to_string(user) + " has no eligible objective item");
  }
  auto rng = derive_stream(seed, "objective", static_cast<std::uint64_t>(user));
  return eligible[uniform_index(rng, eligible.size())];
}

DatasetSplit split(const std::vector<InteractionSequence>& sequences, const std::vector<std::uint64_t>& item_counts,
                   const SplitConfig& config, const std::map<UserId, ItemId>* planted) {
  if (config.l_min < 2) throw std::invalid_argument("l_min must be >= 2");
  if (config.l_max < config.l_min) throw std::invalid_argument("l_max must be >= l_min");
  DatasetSplit out;
  out.l_min = config.l_min;
  out.l_max = config.l_max;
  out.seed = config.seed;
  for (const auto& seq : sequences) {
    if (seq.items.size() < 2) {
      out.skipped_users.push_back(seq.user);
      continue;
    }
    auto rng = derive_stream(config.seed, "split", static_cast<std::uint64_t>(seq.user));
    const std::size_t trainable = seq.items.size() - 1;
    std::size_t pos = 0;
    while (pos < trainable) {
      const auto want = static_cast<std::size_t>(
          uniform_int(rng, static_cast<std::int64_t>(config.l_min), static_cast<std::int64_t>(config.l_max)));
      const std::size_t len = std::min(want, trainable - pos);
      TrainingExample ex;
      ex.user = seq.user;
      ex.items.assign(config.l_max - len, kPad);
      ex.items.insert(ex.items.end(), seq.items.begin() + static_cast<std::ptrdiff_t>(pos),
                      seq.items.begin() + static_cast<std::ptrdiff_t>(pos + len));
      ex.real_start = config.l_max - len;
      pos += len;
      const bool to_validation = uniform_real(rng) < config.validation_fraction;
      (to_validation ? out.validation : out.train).push_back(std::move(ex));
    }
    TestCase tc;
    tc.user = seq.user;
    tc.history.assign(seq.items.begin(), seq.items.end() - 1);
    tc.held_out = seq.items.back();
    if (planted && planted->count(seq.user)) {
      tc.objective = planted->at(seq.user);
    } else {
      tc.objective = sample_objective(tc.history, item_counts, config.seed, seq.user);
    }
    out.test.push_back(std::move(tc));
  }
  return out;
}

// ---- binary and json forms ------------------------------------------------------

namespace {

constexpr char kSeqMagic[8] = {'I', 'R', 'S', 'S', 'E', 'Q', '0', '1'};

template <class T>
void put(std::string& out, T v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof(v));
}

template <class T>
T take(const std::string& raw, std::size_t& pos, const std::filesystem::path& path) {
  if (pos + sizeof(T) > raw.size()) throw FormatError(path.string() + ": truncated sequence file");
  T v;
  std::memcpy(&v, raw.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

std::uint32_t to_u32(std::int64_t v) {
  if (v < 0 || v > 0xffffffffLL) throw std::out_of_range("id does not fit in 32 bits");
  return static_cast<std::uint32_t>(v);
}

SequenceRecord make_record(std::int64_t user, const std::vector<ItemId>& ids) {
  SequenceRecord r{to_u32(user), {}};
  r.ids.reserve(ids.size());
  for (auto i : ids) r.ids.push_back(to_u32(i));
  return r;
}

std::vector<ItemId> widen(const std::vector<std::uint32_t>& ids) { return {ids.begin(), ids.end()}; }

}  // namespace

void write_sequence_file(const std::filesystem::path& path, const std::vector<SequenceRecord>& records) {
  std::string out(kSeqMagic, sizeof(kSeqMagic));
  put<std::uint64_t>(out, records.size());
  for (const auto& r : records) {
    put<std::uint32_t>(out, r.user);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(r.ids.size()));
    out.append(reinterpret_cast<const char*>(r.ids.data()), r.ids.size() * sizeof(std::uint32_t));
  }
  write_file_atomic(path, out);
}

std::vector<SequenceRecord> read_sequence_file(const std::filesystem::path& path) {
  const std::string raw = read_file(path);
  if (raw.size() < sizeof(kSeqMagic) || std::memcmp(raw.data(), kSeqMagic, sizeof(kSeqMagic)) != 0) {
    throw FormatError(path.string() + " is not a sequence file");
  }
  std::size_t pos = sizeof(kSeqMagic);
  const auto count = take<std::uint64_t>(raw, pos, path);
  std::vector<SequenceRecord> records;
  records.reserve(count);
  for (std::uint64_t r = 0; r < count; ++r) {
    SequenceRecord rec;
    rec.user = take<std::uint32_t>(raw, pos, path);
    const auto n = take<std::uint32_t>(raw, pos, path);
    if (pos + std::size_t{n} * 4 > raw.size()) throw FormatError(path.string() + ": truncated record");
    rec.ids.resize(n);
    std::memcpy(rec.ids.data(), raw.data() + pos, std::size_t{n} * 4);
    pos += std::size_t{n} * 4;
    records.push_back(std::move(rec));
  }
  if (pos != raw.size()) throw FormatError(path.string() + ": trailing bytes after last record");
  return records;
}

nlohmann::json catalog_to_json(const Catalog& catalog) {
  return {{"items", std::vector<std::string>(catalog.item_names.begin() + 1, catalog.item_names.end())},
          {"users", std::vector<std::string>(catalog.user_names.begin() + 1, catalog.user_names.end())},
          {"pad_id", kPad},
          {"fingerprint", catalog.fingerprint()}};
}

Catalog catalog_from_json(const nlohmann::json& j) {
  Catalog c;
  for (const auto& s : j.at("items")) c.item_names.push_back(s.get<std::string>());
  for (const auto& s : j.at("users")) c.user_names.push_back(s.get<std::string>());
  c.rebuild_index();
  return c;
}

void save_corpus(const std::filesystem::path& dir, const Corpus& corpus) {
  nlohmann::json j;
  j["format_version"] = 1;
  j["catalog"] = catalog_to_json(corpus.catalog);
  j["num_interactions"] = corpus.num_interactions();
  std::vector<SequenceRecord> records;
  std::vector<std::vector<std::int64_t>> ts;
  for (const auto& s : corpus.sequences) {
    records.push_back(make_record(s.user, s.items));
    ts.push_back(s.timestamps);
  }
  j["timestamps"] = ts;
  write_file_atomic(dir / "catalog.json", j.dump(1) + "\n");
  write_sequence_file(dir / "sequences.bin", records);
}

Corpus load_corpus(const std::filesystem::path& dir) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(dir / "catalog.json"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError((dir / "catalog.json").string() + ": " + e.what());
  }
  Corpus corpus;
  corpus.catalog = catalog_from_json(j.at("catalog"));
  const auto records = read_sequence_file(dir / "sequences.bin");
  const auto& ts = j.at("timestamps");
  if (ts.size() != records.size()) throw FormatError(dir.string() + ": timestamps do not match sequences");
  for (std::size_t r = 0; r < records.size(); ++r) {
    InteractionSequence s;
    s.user = records[r].user;
    s.items = widen(records[r].ids);
    s.timestamps = ts[r].get<std::vector<std::int64_t>>();
    corpus.sequences.push_back(std::move(s));
  }
  return corpus;
}

void save_split(const std::filesystem::path& dir, const DatasetSplit& split, const std::string& catalog_fingerprint) {
  auto examples = [](const std::vector<TrainingExample>& xs) {
    std::vector<SequenceRecord> recs;
    for (const auto& x : xs) recs.push_back(make_record(x.user, x.items));
    return recs;
  };
  std::vector<SequenceRecord> test;
  for (const auto& t : split.test) {
    auto ids = t.history;
    ids.push_back(t.held_out);
    ids.push_back(t.objective);
    test.push_back(make_record(t.user, ids));
  }
  // Per-user [begin, end) ranges into train.bin and validation.bin.
  auto ranges = [](const std::vector<TrainingExample>& xs) {
    nlohmann::json r = nlohmann::json::object();
    for (std::size_t i = 0; i < xs.size(); ++i) {
      auto key = std::to_string(xs[i].user);
      if (!r.contains(key)) r[key] = {i, i};
      r[key][1] = i + 1;
    }
    return r;
  };
  nlohmann::json j;
  j["format_version"] = 1;
  j["catalog_fingerprint"] = catalog_fingerprint;
  j["l_min"] = split.l_min;
  j["l_max"] = split.l_max;
  j["seed"] = split.seed;
  j["counts"] = {{"train", split.train.size()}, {"validation", split.validation.size()}, {"test", split.test.size()}};
  j["train_ranges"] = ranges(split.train);
  j["validation_ranges"] = ranges(split.validation);
  j["skipped_users"] = split.skipped_users;
  write_file_atomic(dir / "split.json", j.dump(1) + "\n");
  write_sequence_file(dir / "train.bin", examples(split.train));
  write_sequence_file(dir / "validation.bin", examples(split.validation));
  write_sequence_file(dir / "test.bin", test);
}

DatasetSplit load_split(const std::filesystem::path& dir, std::string* catalog_fingerprint) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(dir / "split.json"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError((dir / "split.json").string() + ": " + e.what());
  }
  DatasetSplit s;
  s.l_min = j.at("l_min").get<std::size_t>();
  s.l_max = j.at("l_max").get<std::size_t>();
  s.seed = j.at("seed").get<std::uint64_t>();
  s.skipped_users = j.at("skipped_users").get<std::vector<UserId>>();
  if (catalog_fingerprint) *catalog_fingerprint = j.at("catalog_fingerprint").get<std::string>();
  auto examples = [&](const std::string& name) {
    std::vector<TrainingExample> xs;
    for (const auto& r : read_sequence_file(dir / name)) {
      TrainingExample x;
      x.user = r.user;
      x.items = widen(r.ids);
      if (x.items.size() != s.l_max) throw FormatError(name + ": example length differs from l_max");
      x.real_start = static_cast<std::size_t>(
          std::find_if(x.items.begin(), x.items.end(), [](ItemId i) { return i != kPad; }) - x.items.begin());
      xs.push_back(std::move(x));
    }
    return xs;
  };
  s.train = examples("train.bin");
  s.validation = examples("validation.bin");
  for (const auto& r : read_sequence_file(dir / "test.bin")) {
    if (r.ids.size() < 3) throw FormatError("test.bin: record shorter than history + held-out + objective");
    TestCase t;
    t.user = r.user;
    t.history = widen(std::vector<std::uint32_t>(r.ids.begin(), r.ids.end() - 2));
    t.held_out = r.ids[r.ids.size() - 2];
    t.objective = r.ids.back();
    s.test.push_back(std::move(t));
  }
  return s;
}

}  // namespace irs::corpus
