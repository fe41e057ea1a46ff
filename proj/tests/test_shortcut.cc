#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <vector>

#include "sitok/diffusion.hpp"
#include "sitok/shortcut.hpp"
#include "test_util.hpp"

using namespace sitok;
using R = double;

TEST(Shortcut, DyadicGrid) {
    auto g = shortcut_d_grid(128);
    ASSERT_EQ(g.size(), 7u);
    EXPECT_EQ(g.front(), 1.0 / 128.0);
    EXPECT_EQ(g.back(), 0.5);
    for (std::size_t i = 1; i < g.size(); ++i) EXPECT_EQ(g[i], 2.0 * g[i - 1]);

    auto small = shortcut_d_grid(8);
    EXPECT_EQ(small, (std::vector<double>{1.0 / 8.0, 1.0 / 4.0, 1.0 / 2.0}));

    EXPECT_THROW(shortcut_d_grid(12), usage_error);
    EXPECT_THROW(shortcut_d_grid(0), usage_error);
    EXPECT_THROW(shortcut_d_grid(1), usage_error);
}

TEST(Shortcut, SampledPairsStayOnGridAndInBudget) {
    Rng rng(404);
    const int m = 16;
    auto grid = shortcut_d_grid(m);
    std::set<double> seen_d;
    std::set<double> seen_t_at_half;
    for (int i = 0; i < 4000; ++i) {
        auto draw = sample_shortcut_td(rng, m);
        // d on the dyadic grid
        bool on_grid = false;
        for (double d : grid) on_grid |= (draw.d == d);
        EXPECT_TRUE(on_grid) << draw.d;
        seen_d.insert(draw.d);
        // t a multiple of d, both half-steps inside the unit interval
        const double ratio = draw.t / draw.d;
        EXPECT_NEAR(ratio, std::round(ratio), 1e-12);
        EXPECT_GE(draw.t, 0.0);
        EXPECT_LE(draw.t + 2.0 * draw.d, 1.0 + 1e-12);
        if (draw.d == 0.5) seen_t_at_half.insert(draw.t);
    }
    EXPECT_EQ(seen_d.size(), grid.size());          // every step size drawn
    EXPECT_EQ(seen_t_at_half.size(), 1u);           // d=1/2 admits only t=0
    EXPECT_TRUE(seen_t_at_half.count(0.0));
}

TEST(Shortcut, TargetOnConstantField) {
    Rng rng(7);
    Tensor<R> x = testutil::rand_tensor(rng, {3, 4}, -1.0, 1.0);
    Tensor<R> c = testutil::rand_tensor(rng, {3, 4}, -1.0, 1.0);
    int calls = 0;
    auto res = shortcut_target<R>(
        [&](const Tensor<R>&, R, R) {
            ++calls;
            return c;
        },
        x, R(0.25), R(0.25));
    EXPECT_EQ(calls, 2);
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        EXPECT_EQ(res.target.data[i], c.data[i]);
        EXPECT_EQ(res.x_next.data[i], x.data[i] + 0.25 * c.data[i]);
    }
    EXPECT_THROW(shortcut_target<R>([&](const Tensor<R>&, R, R) { return c; }, x, R(0.75),
                                    R(0.25)),
                 usage_error);
}

TEST(Shortcut, TargetAveragesTheTwoHalfSteps) {
    Tensor<R> x({1, 1});
    auto res = shortcut_target<R>(
        [](const Tensor<R>&, R t, R) {
            Tensor<R> v({1, 1});
            v.data[0] = t == R(0.0) ? 1.0 : 3.0;  // v1 at t, v2 at t+d
            return v;
        },
        x, R(0.0), R(0.25));
    EXPECT_EQ(res.target.data[0], 2.0);
    EXPECT_EQ(res.x_next.data[0], 0.25 * 1.0);
}

// Velocity evaluations inside the target must never reach the tape: the
// consistency gradient flows only through the 2d-branch prediction.
TEST(Shortcut, TargetCarriesNoGradient) {
    ParamStore<R> store;
    DecoderConfig cfg;
    cfg.input_dim = 5;
    cfg.cond_dim = 3;
    cfg.hidden = 8;
    cfg.intermediate = 16;
    cfg.heads = 2;
    cfg.main_layers = 1;
    cfg.head_layers = 1;
    cfg.time_feat_dim = 8;
    Rng rng(55);
    auto params = make_decoder(store, "dec", cfg, rng);
    // nonzero modulation so t and d actually influence the head
    for (auto& blk : params.head.blocks)
        for (auto* n : {&blk.norm1, &blk.norm2}) {
            for (auto& v : n->scale_w->value.data) v = rng.normal(0.0, 0.1);
            for (auto& v : n->shift_w->value.data) v = rng.normal(0.0, 0.1);
        }
    for (auto& v : params.step_w->value.data) v = rng.normal(0.0, 0.05);

    Tensor<R> cond = testutil::rand_tensor(rng, {4, 3}, -1.0, 1.0);
    Tensor<R> x_t = testutil::rand_tensor(rng, {4, 5}, -1.0, 1.0);
    const R t = 0.25, d = 0.25;
    Tensor<R> mask_t = attn_mask<R>(4, 4, false);

    auto velocity = [&](const Tensor<R>& x, R tt, R dd) {
        auto mask = ad::constant(mask_t);
        auto base = decoder_base(params, cfg, ad::constant(cond), mask, false);
        auto v = decoder_velocity(params, cfg, ad::constant(x), base,
                                  ad::constant(Tensor<R>::scalar(tt)),
                                  ad::constant(Tensor<R>::scalar(dd)), mask);
        return v->value;
    };

    // correct construction: suspended-tape target
    ad::Tape<R> tape;
    std::map<std::string, Tensor<R>> good_grads;
    {
        ad::TapeScope<R> scope(tape);
        const std::size_t before = tape.size();
        auto tgt = shortcut_target<R>(velocity, x_t, t, d);
        EXPECT_EQ(tape.size(), before);  // nothing recorded while building it

        auto mask = ad::constant(mask_t);
        auto base = decoder_base(params, cfg, ad::constant(cond), mask, false);
        auto v2d = decoder_velocity(params, cfg, ad::constant(x_t), base,
                                    ad::constant(Tensor<R>::scalar(t)),
                                    ad::constant(Tensor<R>::scalar(R(2) * d)), mask);
        tape.backward(ad::l2_loss(v2d, ad::constant(tgt.target)));
        for (auto& [name, p] : store.by_name) good_grads[name] = p->grad;
    }
    tape.clear();
    store.zero_grads();

    // leaky construction: the same target values assembled on the tape
    std::map<std::string, Tensor<R>> leaky_grads;
    {
        ad::TapeScope<R> scope(tape);
        auto mask = ad::constant(mask_t);
        auto base = decoder_base(params, cfg, ad::constant(cond), mask, false);
        auto v1 = decoder_velocity(params, cfg, ad::constant(x_t), base,
                                   ad::constant(Tensor<R>::scalar(t)),
                                   ad::constant(Tensor<R>::scalar(d)), mask);
        Tensor<R> x_next = x_t;
        for (std::size_t i = 0; i < x_next.data.size(); ++i)
            x_next.data[i] += d * v1->value.data[i];
        auto v2 = decoder_velocity(params, cfg, ad::constant(x_next), base,
                                   ad::constant(Tensor<R>::scalar(t + d)),
                                   ad::constant(Tensor<R>::scalar(d)), mask);
        auto taped_target = ad::scale(ad::add(v1, v2), R(0.5));
        auto v2d = decoder_velocity(params, cfg, ad::constant(x_t), base,
                                    ad::constant(Tensor<R>::scalar(t)),
                                    ad::constant(Tensor<R>::scalar(R(2) * d)), mask);
        tape.backward(ad::l2_loss(v2d, taped_target));
        for (auto& [name, p] : store.by_name) leaky_grads[name] = p->grad;
    }

    bool any_mismatch = false;
    for (auto& [name, g] : good_grads) {
        const auto& lg = leaky_grads.at(name);
        for (std::size_t i = 0; i < g.data.size(); ++i) any_mismatch |= (g.data[i] != lg.data[i]);
    }
    EXPECT_TRUE(any_mismatch) << "detaching the target changed nothing; leak check is vacuous";

    // and the suspended-tape version equals a plain-constant-target build
    store.zero_grads();
    tape.clear();
    {
        ad::TapeScope<R> scope(tape);
        Tensor<R> frozen;
        {
            auto tgt = shortcut_target<R>(velocity, x_t, t, d);
            frozen = tgt.target;
        }
        auto mask = ad::constant(mask_t);
        auto base = decoder_base(params, cfg, ad::constant(cond), mask, false);
        auto v2d = decoder_velocity(params, cfg, ad::constant(x_t), base,
                                    ad::constant(Tensor<R>::scalar(t)),
                                    ad::constant(Tensor<R>::scalar(R(2) * d)), mask);
        tape.backward(ad::l2_loss(v2d, ad::constant(frozen)));
        for (auto& [name, p] : store.by_name) {
            const auto& want = good_grads.at(name);
            for (std::size_t i = 0; i < want.data.size(); ++i)
                EXPECT_EQ(p->grad.data[i], want.data[i]) << name;
        }
    }
}

TEST(Shortcut, FewStepSamplerPassesStepSizeAndCountsCalls) {
    Tensor<R> x({2, 2});
    x.data = {0.5, -0.25, 1.0, 0.75};
    Tensor<R> v({2, 2});
    v.data = {0.25, 0.5, -0.5, 0.125};

    int calls = 0;
    std::vector<R> seen_d, seen_t;
    auto fn = [&](const Tensor<R>&, R t, R d) {
        ++calls;
        seen_t.push_back(t);
        seen_d.push_back(d);
        return v;
    };

    auto out2 = few_step_sample<R>(fn, x, 2);
    EXPECT_EQ(calls, 2);
    EXPECT_EQ(seen_d, (std::vector<R>{0.5, 0.5}));
    EXPECT_EQ(seen_t, (std::vector<R>{0.0, 0.5}));

    // dyadic values keep every partial sum exact, so a constant field gives
    // bitwise-identical endpoints for any step count
    auto out1 = few_step_sample<R>(fn, x, 1);
    auto out16 = few_step_sample<R>(fn, x, 16);
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        EXPECT_EQ(out1.data[i], x.data[i] + v.data[i]);
        EXPECT_EQ(out16.data[i], out1.data[i]);
        EXPECT_EQ(out2.data[i], out1.data[i]);
    }

    EXPECT_THROW(few_step_sample<R>(fn, x, 0), usage_error);
}

// On a constant field, one step of size 2d lands exactly where two steps of
// size d do; dyadic-rational inputs keep the arithmetic exact.
TEST(Shortcut, OneDoubleStepEqualsTwoSingleStepsOnConstantField) {
    Tensor<R> x({2, 2});
    x.data = {0.5, -0.25, 1.0, 0.75};
    Tensor<R> c({2, 2});
    c.data = {0.25, 0.5, -0.5, 0.125};
    const R d = 0.25;

    Tensor<R> two = x;
    for (int step = 0; step < 2; ++step)
        for (std::size_t i = 0; i < two.data.size(); ++i) two.data[i] += d * c.data[i];
    Tensor<R> one = x;
    for (std::size_t i = 0; i < one.data.size(); ++i) one.data[i] += (R(2) * d) * c.data[i];
    for (std::size_t i = 0; i < x.data.size(); ++i) EXPECT_EQ(two.data[i], one.data[i]);
}
