#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "core/error.hpp"
#include "core/fusion.hpp"
#include "core/matching.hpp"
#include "core/rng.hpp"
#include "core/tape.hpp"
#include "core/tensor.hpp"

using namespace locov;
using diff::Tape;
using diff::Var;

namespace {

fusion::FusionDims tiny_dims() {
  fusion::FusionDims d;
  d.dim = 8;
  d.layers = 1;
  d.heads = 2;
  d.ffn_hidden = 16;
  d.max_positions = 8;
  return d;
}

Tensor wiggle(std::size_t r, std::size_t c, double start = 0.2) {
  Tensor t(r, c);
  double x = start;
  for (double& e : t.v) {
    e = std::cos(x) + 0.3 * x;
    x += 0.41;
  }
  return t;
}

double kl_by_hand(const std::vector<double>& p, const std::vector<double>& q) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) continue;
    s += p[i] * (std::log(p[i]) - std::log(std::max(q[i], 1e-12)));
  }
  return s;
}

std::string thrown_code(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return "";
}

}  // namespace

TEST_SUITE("fusion") {
  TEST_CASE("match score loss closed forms") {
    Tensor one(1, 1);
    one.at(0, 0) = -1.2;
    CHECK(fusion::icm_loss(one) == 0.0);

    Tensor flat = Tensor::full(4, 4, 0.7);
    CHECK(fusion::icm_loss(flat) == doctest::Approx(1.3862943611198906).epsilon(1e-14));

    Tensor scores = wiggle(3, 3);
    double expect = 0.5 * (match::grounding_loss(scores, match::Axis::image) +
                           match::grounding_loss(scores, match::Axis::caption));
    CHECK(fusion::icm_loss(scores) == doctest::Approx(expect).epsilon(1e-13));
  }

  TEST_CASE("caption masking picks nonempty pad-free positions") {
    const std::size_t mask_id = 1, pad_id = 0;
    std::vector<std::size_t> ids{5, 6, 7, 8, 9, 10, 11, 12, 13, 14};

    Rng rng(11);
    fusion::MaskedCaption m = fusion::mask_caption(ids, 0.15, rng, mask_id, pad_id);
    // floor(0.15 * 10) = 1
    REQUIRE(m.positions.size() == 1);
    CHECK(m.tokens.size() == ids.size());
    CHECK(m.tokens[m.positions[0]] == mask_id);
    CHECK(m.originals[0] == ids[m.positions[0]]);

    // even a tiny rate masks at least one token
    Rng rng2(12);
    fusion::MaskedCaption m2 = fusion::mask_caption(ids, 0.01, rng2, mask_id, pad_id);
    CHECK(m2.positions.size() == 1);

    // full rate masks every non-pad slot and never a pad
    std::vector<std::size_t> padded{5, 0, 7, 0, 9};
    Rng rng3(13);
    fusion::MaskedCaption m3 = fusion::mask_caption(padded, 1.0, rng3, mask_id, pad_id);
    REQUIRE(m3.positions.size() == 3);
    CHECK(std::is_sorted(m3.positions.begin(), m3.positions.end()));
    for (std::size_t pos : m3.positions) CHECK(padded[pos] != pad_id);
    CHECK(m3.tokens[1] == pad_id);
    CHECK(m3.tokens[3] == pad_id);

    // untouched slots keep their ids
    for (std::size_t i = 0; i < m.tokens.size(); ++i)
      if (i != m.positions[0]) CHECK(m.tokens[i] == ids[i]);

    // all-pad caption cannot be masked
    std::vector<std::size_t> pads{0, 0, 0};
    Rng rng4(14);
    CHECK(thrown_code([&] { fusion::mask_caption(pads, 0.15, rng4, mask_id, pad_id); }) == "empty-mask");

    // same seed, same choice
    Rng a(21), b(21);
    fusion::MaskedCaption ma = fusion::mask_caption(ids, 0.4, a, mask_id, pad_id);
    fusion::MaskedCaption mb = fusion::mask_caption(ids, 0.4, b, mask_id, pad_id);
    CHECK(ma.positions == mb.positions);
  }

  TEST_CASE("reconstruction over an all-equal vocabulary costs ln V") {
    // identical table rows make every vocabulary logit equal, so the NLL of
    // any original id is exactly log of the vocabulary size
    Rng rng(3);
    fusion::CrossAttentionModel model;
    model.init(tiny_dims(), rng);

    Tensor table_v(5, 8);
    for (std::size_t j = 0; j < 5; ++j)
      for (std::size_t k = 0; k < 8; ++k) table_v.at(j, k) = 0.1 * static_cast<double>(k) - 0.3;

    std::vector<std::size_t> ids{2, 3, 4, 2};
    Rng mask_rng(9);
    fusion::MaskedCaption masked = fusion::mask_caption(ids, 0.5, mask_rng, 1, 0);

    Tape tape;
    emb::Binding bind(tape);
    Var table = tape.constant(table_v);
    Var regions = tape.constant(wiggle(3, 8));
    Var loss = fusion::mlm_loss(bind, model, table, masked, regions, 0);
    CHECK(loss.value().scalar_value() == doctest::Approx(std::log(5.0)).epsilon(1e-12));
  }

  TEST_CASE("reconstruction gradient on the vocabulary table matches differences") {
    Rng rng(5);
    fusion::CrossAttentionModel model;
    model.init(tiny_dims(), rng);

    Rng trng(6);
    Tensor table0 = Tensor::randn(6, 8, trng, 0.3);
    std::vector<std::size_t> ids{2, 3, 4, 5};
    Rng mask_rng(7);
    fusion::MaskedCaption masked = fusion::mask_caption(ids, 0.5, mask_rng, 1, 0);
    Tensor regions0 = wiggle(2, 8);

    auto eval = [&](const Tensor& tv) {
      Tape tape;
      emb::Binding bind(tape);
      Var table = tape.constant(tv);
      Var loss =
          fusion::mlm_loss(bind, model, table, masked, tape.constant(regions0), 0);
      return loss.value().scalar_value();
    };

    Tape tape;
    emb::Binding bind(tape);
    Var table = tape.leaf(table0, true);
    Var loss = fusion::mlm_loss(bind, model, table, masked, tape.constant(regions0), 0);
    tape.backward(loss);

    Tensor fd = diff::finite_difference_gradient(eval, table0);
    for (std::size_t i = 0; i < fd.v.size(); ++i)
      CHECK(std::abs(table.grad().v[i] - fd.v[i]) < 1e-7);
  }

  TEST_CASE("fused forward shapes and set behavior") {
    Rng rng(17);
    fusion::CrossAttentionModel model;
    model.init(tiny_dims(), rng);
    // the score head initializes to zero; give it weights so the scalar
    // actually reflects the fused state
    for (emb::Parameter* p : model.parameters())
      if (p->name == "fusion/score/weight") p->value = Tensor::randn(8, 1, rng, 0.5);

    Tensor regions0 = wiggle(4, 8);
    Tensor words0 = wiggle(3, 8, 1.3);

    Tape tape;
    emb::Binding bind(tape);
    auto fused = model.forward(bind, tape.constant(regions0), tape.constant(words0));
    CHECK(fused.score.value().rows() == 1);
    CHECK(fused.score.value().cols() == 1);
    CHECK(fused.word_states.value().rows() == 3);
    CHECK(fused.word_states.value().cols() == 8);

    // regions carry no positions, so any region order fuses to the same score
    Tensor shuffled(4, 8);
    std::vector<std::size_t> perm{2, 0, 3, 1};
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t k = 0; k < 8; ++k) shuffled.at(i, k) = regions0.at(perm[i], k);
    Tape tape2;
    emb::Binding bind2(tape2);
    auto fused2 = model.forward(bind2, tape2.constant(shuffled), tape2.constant(words0));
    CHECK(fused2.score.value().scalar_value() ==
          doctest::Approx(fused.score.value().scalar_value()).epsilon(1e-10));

    // words do carry positions, so reversing them changes the score
    Tensor reversed(3, 8);
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t k = 0; k < 8; ++k) reversed.at(i, k) = words0.at(2 - i, k);
    Tape tape3;
    emb::Binding bind3(tape3);
    auto fused3 = model.forward(bind3, tape3.constant(regions0), tape3.constant(reversed));
    CHECK(std::abs(fused3.score.value().scalar_value() - fused.score.value().scalar_value()) > 1e-8);

    // same seed builds an identical model
    Rng rng_b(17);
    fusion::CrossAttentionModel model_b;
    model_b.init(tiny_dims(), rng_b);
    for (emb::Parameter* p : model_b.parameters())
      if (p->name == "fusion/score/weight") p->value = Tensor::randn(8, 1, rng_b, 0.5);
    Tape tape4;
    emb::Binding bind4(tape4);
    auto fused4 = model_b.forward(bind4, tape4.constant(regions0), tape4.constant(words0));
    CHECK(fused4.score.value().scalar_value() == fused.score.value().scalar_value());
  }

  TEST_CASE("fused forward rejects bad inputs") {
    Rng rng(19);
    fusion::CrossAttentionModel model;
    model.init(tiny_dims(), rng);
    Tape tape;
    emb::Binding bind(tape);

    Tensor none(0, 8);
    Tensor words = wiggle(3, 8);
    CHECK(thrown_code([&] { model.forward(bind, tape.constant(none), tape.constant(words)); }) ==
          "empty-side");
    CHECK(thrown_code([&] { model.forward(bind, tape.constant(words), tape.constant(none)); }) ==
          "empty-side");
    Tensor narrow = wiggle(3, 4);
    CHECK(thrown_code([&] { model.forward(bind, tape.constant(narrow), tape.constant(words)); }) ==
          "shape-mismatch");
    Tensor long_caption = wiggle(9, 8);
    CHECK(thrown_code([&] { model.forward(bind, tape.constant(words), tape.constant(long_caption)); }) ==
          "shape-mismatch");

    fusion::FusionDims odd = tiny_dims();
    odd.heads = 3;  // 8 % 3 != 0
    fusion::CrossAttentionModel bad;
    Rng rng2(20);
    CHECK(thrown_code([&] { bad.init(odd, rng2); }) == "invalid-config");
  }

  TEST_CASE("agreement penalty closed forms and tags") {
    fusion::MatchDistribution p_box{{0.2, 0.8}, fusion::Phase::pre, regions::RegionKind::box};
    fusion::MatchDistribution p_grid{{0.5, 0.5}, fusion::Phase::pre, regions::RegionKind::grid};
    fusion::MatchDistribution q_box{{0.3, 0.7}, fusion::Phase::post, regions::RegionKind::box};
    fusion::MatchDistribution q_grid{{0.4, 0.6}, fusion::Phase::post, regions::RegionKind::grid};

    double expect = kl_by_hand(p_box.probs, q_box.probs) + kl_by_hand(p_grid.probs, q_grid.probs) +
                    kl_by_hand(p_grid.probs, q_box.probs);
    CHECK(fusion::consistency_loss(p_box, p_grid, q_box, q_grid) ==
          doctest::Approx(expect).epsilon(1e-13));

    // perfect agreement costs nothing
    fusion::MatchDistribution q_box_same{p_box.probs, fusion::Phase::post, regions::RegionKind::box};
    fusion::MatchDistribution q_grid_same{p_grid.probs, fusion::Phase::post, regions::RegionKind::grid};
    fusion::MatchDistribution p_grid_same{p_box.probs, fusion::Phase::pre, regions::RegionKind::grid};
    fusion::MatchDistribution q_grid_match{p_box.probs, fusion::Phase::post, regions::RegionKind::grid};
    CHECK(fusion::consistency_loss(p_box, p_grid_same, q_box_same, q_grid_match) == 0.0);

    // swapped phase or kind tags are caught
    CHECK(thrown_code([&] { fusion::consistency_loss(q_box, p_grid, p_box, q_grid); }) ==
          "shape-mismatch");
    fusion::MatchDistribution box_in_grid_slot{{0.5, 0.5}, fusion::Phase::pre, regions::RegionKind::box};
    CHECK(thrown_code([&] { fusion::consistency_loss(p_box, box_in_grid_slot, q_box, q_grid); }) ==
          "shape-mismatch");
    fusion::MatchDistribution empty{{}, fusion::Phase::pre, regions::RegionKind::box};
    CHECK(thrown_code([&] { fusion::consistency_loss(empty, p_grid, q_box, q_grid); }) ==
          "empty-distribution");
    fusion::MatchDistribution longer{{0.1, 0.2, 0.7}, fusion::Phase::pre, regions::RegionKind::box};
    CHECK(thrown_code([&] { fusion::consistency_loss(longer, p_grid, q_box, q_grid); }) ==
          "shape-mismatch");
  }

  TEST_CASE("agreement penalty on stacked rows averages and respects stop-gradient") {
    Tensor p0 = wiggle(2, 3);
    Tensor q0 = wiggle(2, 3, 0.9);

    Tape tape;
    Var p = diff::row_softmax(tape.leaf(p0, true));
    Var q = diff::row_softmax(tape.leaf(q0, true));
    Var single = fusion::consistency_loss_single(p, q);
    // mean over rows of KL(p_i || q_i)
    double expect = 0.0;
    for (std::size_t i = 0; i < 2; ++i) {
      std::vector<double> pi(3), qi(3);
      for (std::size_t j = 0; j < 3; ++j) {
        pi[j] = p.value().at(i, j);
        qi[j] = q.value().at(i, j);
      }
      expect += kl_by_hand(pi, qi);
    }
    CHECK(single.value().scalar_value() == doctest::Approx(expect / 2.0).epsilon(1e-12));

    // identical rows agree for free
    Tape tape2;
    Var same = diff::row_softmax(tape2.leaf(p0, false));
    CHECK(fusion::consistency_loss_single(same, same).value().scalar_value() == 0.0);

    // freezing the target side leaves it without gradient
    Tape tape3;
    Var a = tape3.leaf(p0, true);
    Var b = tape3.leaf(q0, true);
    Var target = diff::stop_gradient(diff::row_softmax(a));
    Var chaser = diff::row_softmax(b);
    tape3.backward(fusion::consistency_loss_single(target, chaser));
    // the frozen side is cut out of the backward pass entirely
    CHECK(!tape3.has_grad(a.id));
    double b_grad = 0.0;
    for (double g : b.grad().v) b_grad += std::abs(g);
    CHECK(b_grad > 0.0);
  }

  TEST_CASE("loss total adds components and rejects bad values") {
    Tape tape;
    Var a = tape.constant(Tensor::full(1, 1, 0.5));
    Var b = tape.constant(Tensor::full(1, 1, 1.25));
    CHECK(fusion::lsm_total_loss({a, b}).value().scalar_value() == 1.75);
    CHECK(fusion::lsm_total_loss({a}).value().scalar_value() == 0.5);
    CHECK(thrown_code([&] { fusion::lsm_total_loss({}); }) == "empty-side");

    Tensor bad(1, 1);
    bad.at(0, 0) = std::numeric_limits<double>::infinity();
    Var c = tape.constant(bad);
    CHECK(thrown_code([&] { fusion::lsm_total_loss({a, c}); }) == "non-finite-loss");
  }
}
