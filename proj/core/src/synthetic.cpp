#include "irs/synthetic.hpp"

#include <algorithm>
#include <cstdio>

#include <nlohmann/json.hpp>

#include "irs/checkpoint.hpp"
#include "irs/rng.hpp"

namespace irs::harness {

std::string chain_item_name(std::size_t chain, std::size_t position) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "c%03zu_%03zu", chain, position);
  return buf;
}

SyntheticWorld make_synthetic(const SyntheticConfig& cfg, std::uint64_t seed) {
  if (cfg.chains == 0 || cfg.users == 0 || cfg.min_segment < 3 || cfg.max_segment < cfg.min_segment ||
      cfg.min_hops == 0 || cfg.max_hops < cfg.min_hops || cfg.max_segment + cfg.max_hops - 1 > cfg.chain_length) {
    throw ConfigError("inconsistent synthetic world settings");
  }
  const auto n = static_cast<std::int64_t>(cfg.chain_length);
  SyntheticWorld world;
  for (std::size_t c = 0; c < cfg.chains; ++c)
    for (std::size_t p = 1; p < cfg.chain_length; ++p)
      world.chain_edges.emplace_back(chain_item_name(c, p - 1), chain_item_name(c, p));

  for (std::size_t u = 0; u < cfg.users; ++u) {
    auto rng = derive_stream(seed, "synthetic", u);
    char name[32];
    std::snprintf(name, sizeof name, "u%05zu", u + 1);
    const auto chain = static_cast<std::size_t>(uniform_index(rng, cfg.chains));
    const bool reversed = uniform_index(rng, 2) == 1;
    const auto len = uniform_int(rng, static_cast<std::int64_t>(cfg.min_segment), static_cast<std::int64_t>(cfg.max_segment));
    const auto hops = uniform_int(rng, static_cast<std::int64_t>(cfg.min_hops), static_cast<std::int64_t>(cfg.max_hops));
    const auto start = uniform_int(rng, 0, n + 1 - len - hops);
    // Positions count along the user's walking direction.
    const auto place = [&](std::int64_t step) { return reversed ? n - 1 - step : step; };
    const std::int64_t objective = place(start + len - 2 + hops);
    for (std::int64_t j = 0; j < len; ++j) {
      std::int64_t pos = place(start + j);
      if (uniform_real(rng) < cfg.noise) {
        do {
          pos = uniform_int(rng, 0, n - 1);
        } while (pos == objective);
      }
      world.events.push_back({name, chain_item_name(chain, static_cast<std::size_t>(pos)), j, std::nullopt});
    }
    world.planted[name] = chain_item_name(chain, static_cast<std::size_t>(objective));
  }
  return world;
}

void write_synthetic(const std::filesystem::path& dir, const SyntheticWorld& world) {
  std::string csv = "user,item,timestamp\n";
  for (const auto& e : world.events) csv += e.user + ',' + e.item + ',' + std::to_string(e.timestamp) + '\n';
  write_file_atomic(dir / "events.csv", csv);
  write_file_atomic(dir / "planted.json", nlohmann::json(world.planted).dump(1) + "\n");
  std::string edges;
  for (const auto& [a, b] : world.chain_edges) edges += a + ' ' + b + '\n';
  write_file_atomic(dir / "chain_edges.txt", edges);
}

std::map<std::string, std::string> read_planted(const std::filesystem::path& file) {
  auto j = nlohmann::json::parse(read_file(file), nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw ArtifactError(file.string() + " is not a JSON object");
  return j.get<std::map<std::string, std::string>>();
}

}  // namespace irs::harness
