#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <map>

#include "irs/irn.hpp"
#include "support/fd.hpp"
#include "support/reference_decoder.hpp"

using namespace irs;
using namespace irs::irn;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

IrnConfig small_config(double w_t = 1.0) {
  IrnConfig c;
  c.d = 8;
  c.d_user = 4;
  c.layers = 2;
  c.heads = 2;
  c.l_max = 6;
  c.w_t = w_t;
  return c;
}

// Moves parameters away from their structured init so that tests exercise every term.
template <class T>
void scramble(BasicIrnModel<T>& model, std::uint64_t seed) {
  auto rng = derive_stream(seed, "scramble");
  for (auto* p : model.parameters()) {
    if (p->name.find("ln") != std::string::npos || p->name.find(".b") != std::string::npos) {
      for (auto& v : p->value.storage()) v += static_cast<T>(0.2 * (uniform_real(rng) - 0.5));
    }
  }
  for (auto& v : model.token_embeddings.value.storage()) v += static_cast<T>(uniform_real(rng) - 0.5);
  for (std::size_t c = 0; c < model.config().d; ++c) model.token_embeddings.value.at(0, c) = 0;
}

testing::Matrix pim_oracle(std::size_t m, double w_h, double objective_bias, bool visible) {
  testing::Matrix mask(m, std::vector<double>(m, -kInf));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j <= i; ++j) mask[i][j] = w_h;
  if (visible)
    for (std::size_t i = 0; i + 1 < m; ++i) mask[i][m - 1] = objective_bias;
  return mask;
}

class FixedScorer : public NextItemScorer {
 public:
  FixedScorer(std::size_t n, std::function<ItemId(const std::vector<ItemId>&, ItemId)> pick) : n_(n), pick_(pick) {}
  std::size_t num_items() const override { return n_; }
  std::vector<double> next_log_probs(const std::vector<ItemId>& ctx, ItemId objective, UserId) const override {
    std::vector<double> lp(n_ + 1, std::log(0.1 / static_cast<double>(n_)));
    lp[static_cast<std::size_t>(pick_(ctx, objective))] = std::log(0.9);
    return lp;
  }

 private:
  std::size_t n_;
  std::function<ItemId(const std::vector<ItemId>&, ItemId)> pick_;
};

}  // namespace

TEST_CASE("impressionability") {
  IrnModel model(small_config(), 10, 1000, 3);
  double sum = 0, sq = 0;
  for (UserId u = 1; u <= 1000; ++u) {
    const double r = model.impressionability(u);
    sum += r;
    sq += r * r;
  }
  const double mean = sum / 1000, sd = std::sqrt(sq / 1000 - mean * mean);
  CHECK(mean == doctest::Approx(1.0).epsilon(0.02));
  CHECK(sd < 0.1);
  CHECK(model.impressionability(0) == model.impressionability(5000));

  for (std::size_t c = 0; c < 4; ++c) model.user_embeddings.value.at(7, c) = c == 2 ? 1.0f : 0.0f;
  model.w_user.value = nn::Tensor<float>({1, 4}, std::vector<float>{0.5f, -1.0f, 3.25f, 2.0f});
  CHECK(model.impressionability(7) == doctest::Approx(3.25));
  model.w_user.value.fill(0.0f);
  for (UserId u = 0; u <= 1000; u += 111) CHECK(model.impressionability(u) == 0.0);
}

TEST_CASE("PIM construction") {
  IrnConfig c = small_config(0.0);
  c.l_max = 4;
  auto causal = build_pim(c, 1.7);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) CHECK(causal.at(i, j) == (j <= i ? 0.0f : -std::numeric_limits<float>::infinity()));

  c.l_max = 3;
  c.w_t = 1.0;
  auto one = build_pim(c, 1.0);
  CHECK(one.at(0, 2) == 1.0f);
  CHECK(one.at(1, 2) == 1.0f);
  CHECK(one.at(2, 2) == 0.0f);
  CHECK(one.at(0, 1) == -std::numeric_limits<float>::infinity());
  auto two = build_pim(c, 2.0);
  CHECK(two.at(0, 2) == 2 * one.at(0, 2));

  c.w_h = 0.5;
  c.w_t = 0.25;
  CHECK_THROWS(c.validate());
}

TEST_CASE("forward matches an independent decoder") {
  for (double w_t : {0.0, 0.7}) {
    CAPTURE(w_t);
    BasicIrnModel<double> model(small_config(w_t), 9, 5, 11);
    scramble(model, 1);
    std::vector<ItemId> window{0, 0, 3, 7, 1, 9};
    const UserId user = 4;
    std::vector<UserId> users{user};
    nn::Tape<double> tape;
    tape.set_grad_enabled(false);
    auto got = model.forward(tape, window, users).value();
    const auto mask = w_t == 0.0 ? testing::plain_causal_mask(6)
                                 : pim_oracle(6, 0.0, model.impressionability(user) * w_t, true);
    auto want = testing::reference_logits(model, window, mask);
    double worst = 0;
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t r = 0; r < 10; ++r) worst = std::max(worst, std::abs(got.at(i, r) - want[i][r]));
    CHECK(worst < 1e-9);
  }
}

TEST_CASE("two-item toy model with hand-set weights") {
  IrnConfig c;
  c.d = 2;
  c.d_user = 1;
  c.layers = 1;
  c.heads = 1;
  c.l_max = 3;
  c.ffn_dim = 2;
  c.w_t = 1.0;
  IrnModel model(c, 2, 1, 0);
  model.token_embeddings.value = nn::Tensor<float>::matrix(3, 2, {0, 0, 1, -1, 0.5f, 2});
  auto& lp = model.layer_params[0];
  lp.wq.value = nn::Tensor<float>::matrix(2, 2, {1, 0.5f, -0.5f, 1});
  lp.wk.value = nn::Tensor<float>::matrix(2, 2, {0.3f, 0, 0, 0.3f});
  lp.wv.value = nn::Tensor<float>::matrix(2, 2, {1, 1, 0, 2});
  lp.wo.value = nn::Tensor<float>::matrix(2, 2, {0.5f, 0, 0, 0.5f});
  lp.bo.value = nn::Tensor<float>({2}, std::vector<float>{0.1f, -0.1f});
  lp.w1.value = nn::Tensor<float>::matrix(2, 2, {1, -1, 1, 1});
  lp.b1.value = nn::Tensor<float>({2}, std::vector<float>{0, 0.2f});
  lp.w2.value = nn::Tensor<float>::matrix(2, 2, {0.7f, 0, -0.3f, 1});
  lp.b2.value = nn::Tensor<float>({2}, std::vector<float>{0, 0});
  lp.ln1_gain.value = nn::Tensor<float>({2}, std::vector<float>{1.5f, 0.5f});
  lp.ln2_bias.value = nn::Tensor<float>({2}, std::vector<float>{0.25f, 0});
  model.w_proj.value = nn::Tensor<float>::matrix(3, 2, {0, 0, 1, 2, -1, 1});
  model.user_embeddings.value = nn::Tensor<float>({2, 1}, 2.0f);
  model.w_user.value = nn::Tensor<float>({1, 1}, 0.75f);

  std::vector<ItemId> window{0, 1, 2};
  std::vector<UserId> users{1};
  nn::Tape<float> tape;
  tape.set_grad_enabled(false);
  auto got = model.forward(tape, window, users).value();
  auto ref_model = model.cast<double>();
  auto want = testing::reference_logits(ref_model, window, pim_oracle(3, 0.0, 1.5, true));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t r = 0; r < 3; ++r) CHECK(std::abs(got.at(i, r) - want[i][r]) < 1e-5);
}

TEST_CASE("causality and objective sensitivity") {
  std::vector<ItemId> base{0, 4, 5, 6, 7, 11};
  std::vector<UserId> users{2};
  // Strict causality holds for the plain mask and, with the objective visible, for a
  // single layer; deeper PIM layers read the objective's own hidden state.
  for (auto [w_t, layers] : {std::pair{0.0, 2}, std::pair{1.0, 1}}) {
    CAPTURE(w_t);
    IrnConfig c = small_config(w_t);
    c.layers = static_cast<std::size_t>(layers);
    IrnModel model(c, 12, 3, 5);
    scramble(model, 2);
    auto run = [&](const std::vector<ItemId>& w) {
      nn::Tape<float> tape;
      tape.set_grad_enabled(false);
      return model.forward(tape, w, users).value();
    };
    auto ref = run(base);
    for (std::size_t j = 1; j < 5; ++j) {
      auto w = base;
      w[j] = 9;
      auto out = run(w);
      double before = 0, after = 0;
      for (std::size_t k = 0; k < 6; ++k)
        for (std::size_t r = 0; r < 13; ++r) {
          const double diff = std::abs(out.at(k, r) - ref.at(k, r));
          (k < j ? before : after) = std::max(k < j ? before : after, diff);
        }
      CHECK(before < 1e-6);
      CHECK(after > 1e-4);
    }
  }

  IrnModel model(small_config(1.0), 12, 3, 5);
  scramble(model, 2);
  auto run = [&](const std::vector<ItemId>& w) {
    nn::Tape<float> tape;
    tape.set_grad_enabled(false);
    return model.forward(tape, w, users).value();
  };
  auto ref = run(base);
  auto w = base;
  w[5] = 2;
  auto out = run(w);
  double pre = 0;
  for (std::size_t k = 0; k < 5; ++k)
    for (std::size_t r = 0; r < 13; ++r) pre = std::max(pre, static_cast<double>(std::abs(out.at(k, r) - ref.at(k, r))));
  CHECK(pre > 1e-4);

  for (std::size_t k = 0; k < 6; ++k) {
    auto lp = item_log_softmax(ref.row(k));
    double total = 0;
    for (std::size_t i = 1; i < lp.size(); ++i) total += std::exp(lp[i]);
    CHECK(std::abs(total - 1.0) < 1e-6);
  }

  std::vector<ItemId> bad{0, 0, 0, 0, 0, 13};
  nn::Tape<float> tape;
  CHECK_THROWS_AS(model.forward(tape, bad, users), std::out_of_range);
}

TEST_CASE("window layout and targets") {
  CHECK(layout_window({5, 6}, 9, 5) == std::vector<ItemId>{0, 0, 5, 6, 9});
  CHECK(layout_window({1, 2, 3, 4, 5, 6}, 9, 4) == std::vector<ItemId>{4, 5, 6, 9});
  CHECK(layout_window({}, 0, 3) == std::vector<ItemId>{0, 0, 0});
  std::vector<ItemId> items{0, 0, 3, 4, 8};
  CHECK(window_targets(items) == std::vector<std::int64_t>{-1, 3, 4, 8, -1});
}

TEST_CASE("training") {
  SUBCASE("loss at init is close to uniform") {
    IrnConfig c = small_config();
    c.d = 16;
    IrnModel model(c, 50, 10, 1);
    corpus::DatasetSplit split;
    auto rng = derive_stream(1, "init-loss");
    for (int e = 0; e < 40; ++e) {
      corpus::TrainingExample ex{1 + e % 10, {}, 0};
      for (std::size_t k = 0; k < c.l_max; ++k) ex.items.push_back(1 + static_cast<ItemId>(uniform_index(rng, 50)));
      split.train.push_back(ex);
    }
    const double loss = mean_loss(model, split.train, 16);
    CHECK(std::abs(loss - std::log(50.0)) < 0.1 * std::log(50.0));
  }
  SUBCASE("memorizes an alternating sequence and is deterministic") {
    std::vector<corpus::InteractionSequence> seqs;
    for (UserId u = 1; u <= 12; ++u) {
      corpus::InteractionSequence s{u, {}, {}};
      for (int k = 0; k < 33; ++k) s.items.push_back(k % 2 ? 2 : 1);
      seqs.push_back(s);
    }
    std::vector<std::uint64_t> counts{0, 200, 200, 5};
    auto split = corpus::split(seqs, counts, {.l_min = 8, .l_max = 8, .seed = 3, .validation_fraction = 0.0});
    IrnConfig c = small_config();
    c.l_max = 8;
    auto run = [&] {
      IrnModel model(c, 3, 12, 7);
      auto logs = train(model, split, {.lr = 1e-2, .batch_size = 8, .epochs = 50, .seed = 2});
      return std::make_pair(logs, model.to_checkpoint());
    };
    auto [logs, ckpt] = run();
    CHECK(logs.back().train_ppl < 1.1);
    auto [logs2, ckpt2] = run();
    REQUIRE(logs.size() == logs2.size());
    for (std::size_t e = 0; e < logs.size(); ++e) CHECK(logs[e].train_loss == logs2[e].train_loss);
    auto p1 = std::filesystem::temp_directory_path() / "irs_irn_a.ckpt";
    auto p2 = std::filesystem::temp_directory_path() / "irs_irn_b.ckpt";
    save_checkpoint(p1, ckpt);
    save_checkpoint(p2, ckpt2);
    CHECK(read_file(p1) == read_file(p2));

    auto restored = IrnModel::from_checkpoint(load_checkpoint(p1));
    auto original = IrnModel::from_checkpoint(ckpt);
    std::vector<ItemId> w{0, 0, 1, 2, 1, 2, 1, 2};
    CHECK(restored.slot_logits(w, 3, 6) == original.slot_logits(w, 3, 6));
    CHECK(restored.token_embeddings.value.at(0, 0) == 0.0f);
    std::filesystem::remove(p1);
    std::filesystem::remove(p2);
  }
}

TEST_CASE("greedy path generation") {
  SUBCASE("argmax is the objective") {
    FixedScorer s(6, [](const auto&, ItemId obj) { return obj; });
    auto p = generate_path(s, {1, 2}, 5, 1, 20, true, "stub");
    CHECK(p.items == std::vector<ItemId>{5});
    CHECK(p.stop_reason == StopReason::reached_objective);
    CHECK(p.step_probs[0] == doctest::Approx(0.9));
  }
  SUBCASE("M=1 with a non-objective argmax") {
    FixedScorer s(6, [](const auto&, ItemId) { return ItemId{3}; });
    auto p = generate_path(s, {1}, 5, 1, 1, true, "stub");
    CHECK(p.items == std::vector<ItemId>{3});
    CHECK(p.stop_reason == StopReason::max_length);
  }
  SUBCASE("planted chain is followed to the objective") {
    // Chain 1 -> 2 -> ... -> 10; the scorer prefers the successor of the last item.
    FixedScorer s(10, [](const std::vector<ItemId>& ctx, ItemId) { return std::min<ItemId>(ctx.back() + 1, 10); });
    auto p = generate_path(s, {1, 2, 3}, 8, 1, 10, true, "stub");
    CHECK(p.items == std::vector<ItemId>{4, 5, 6, 7, 8});
    CHECK(p.reached());
    auto short_path = generate_path(s, {1, 2, 3}, 8, 1, 3, true, "stub");
    CHECK(short_path.items == std::vector<ItemId>{4, 5, 6});
    CHECK(!short_path.reached());
  }
  SUBCASE("repeats are skipped with lowest-id tie break") {
    FixedScorer s(4, [](const auto&, ItemId) { return ItemId{1}; });
    auto p = generate_path(s, {1}, 4, 1, 2, true, "stub");
    CHECK(p.items == std::vector<ItemId>{2, 3});
    auto q = generate_path(s, {1}, 4, 1, 2, false, "stub");
    CHECK(q.items == std::vector<ItemId>{1, 1});
  }
  SUBCASE("exhausted catalog and invalid arguments") {
    FixedScorer s(3, [](const auto&, ItemId) { return ItemId{1}; });
    auto p = generate_path(s, {1, 2}, 3, 1, 5, true, "stub");
    CHECK(p.items == std::vector<ItemId>{3});
    CHECK_THROWS_AS(generate_path(s, {1}, 4, 1, 5, true, "stub"), std::out_of_range);
    FixedScorer t(2, [](const auto&, ItemId) { return ItemId{1}; });
    CHECK_THROWS_AS(generate_path(t, {1}, 2, 1, 0, true, "stub"), std::invalid_argument);
  }
  SUBCASE("IRN scorer windows") {
    IrnModel model(small_config(), 12, 3, 5);
    IrnScorer scorer(model);
    auto lp = scorer.next_log_probs({3, 4}, 9, 1);
    auto logits = model.slot_logits(layout_window({3, 4}, 9, 6), 1, 4);
    auto want = item_log_softmax(logits);
    CHECK(lp == want);
    CHECK(lp[0] == -kInf);
    auto p = generate_path(scorer, {3, 4}, 9, 1, 4, true, "irn");
    CHECK(p.items.size() <= 4);
    CHECK(p.reached() == (std::find(p.items.begin(), p.items.end(), 9) != p.items.end()));
  }
}

TEST_CASE("path dump round trip") {
  std::vector<InfluencePath> paths{{3, 9, {4, 9}, {0.5, 0.25}, StopReason::reached_objective, "irn"},
                                   {4, 2, {}, {}, StopReason::max_length, "pf2inf-dijkstra"}};
  auto f = std::filesystem::temp_directory_path() / "irs_paths.jsonl";
  write_paths(f, paths);
  auto back = read_paths(f);
  REQUIRE(back.size() == 2);
  CHECK(back[0].items == paths[0].items);
  CHECK(back[0].step_probs == paths[0].step_probs);
  CHECK(back[1].method == "pf2inf-dijkstra");
  write_file_atomic(f, "{\"user\":1,\"objective\":2,\"items\":[3],\"step_probs\":[],\"stop_reason\":\"reached_objective\",\"method\":\"x\"}\n");
  CHECK_THROWS(read_paths(f));
  std::filesystem::remove(f);
}

TEST_CASE("IRN gradients match central differences") {
  IrnConfig c;
  c.d = 16;
  c.d_user = 4;
  c.layers = 2;
  c.heads = 2;
  c.l_max = 6;
  c.w_t = 1.0;
  c.learned_positional = true;
  BasicIrnModel<double> model(c, 20, 4, 9);
  scramble(model, 4);
  std::vector<ItemId> ids{0, 0, 3, 8, 12, 17, 1, 2, 3, 4, 5, 6};
  std::vector<UserId> users{1, 3};
  std::vector<std::int64_t> targets;
  for (std::size_t b = 0; b < 2; ++b) {
    auto t = window_targets(std::vector<ItemId>(ids.begin() + 6 * b, ids.begin() + 6 * (b + 1)));
    targets.insert(targets.end(), t.begin(), t.end());
  }
  auto loss = [&] {
    nn::Tape<double> tape;
    tape.set_grad_enabled(false);
    return nn::cross_entropy(model.forward(tape, ids, users), targets, -1).value().item();
  };
  auto analytic = [&] {
    nn::Tape<double> tape;
    tape.backward(nn::cross_entropy(model.forward(tape, ids, users), targets, -1));
  };
  auto result = testing::check_gradients(model.parameters(), loss, analytic, 6, 1, 1e-5);
  CHECK(result.checked >= 100);
  CHECK(result.max_rel_error < 1e-5);
}
