// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "eloforge/rng.hpp"
#include "eloforge/surgery.hpp"

using namespace eloforge;

namespace {

ModelConfig small_config(size_t n_layers, uint64_t seed) {
    ModelConfig c;
    c.n_layers = n_layers;
    c.d_model = 8;
    c.n_heads = 2;
    c.d_ff = 16;
    c.vocab_size = 16;
    c.max_seq_len = 16;
    c.seed = seed;
    return c;
}

bool models_bitwise_equal(const Model& a, const Model& b) {
    auto at = a.tensors(), bt = b.tensors();
    if (at.size() != bt.size()) return false;
    for (size_t i = 0; i < at.size(); ++i) {
        if (at[i].first != bt[i].first) return false;
        if (at[i].second.shape() != bt[i].second.shape()) return false;
        if (at[i].second.data() != bt[i].second.data()) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("LayerSelection: parse and validate") {
    auto s = LayerSelection::parse("1,16");
    CHECK(s.indices == std::vector<size_t>{1, 16});
    CHECK(s.to_string() == "1,16");
    CHECK(LayerSelection::parse(" 2 , 5 ,9").indices == std::vector<size_t>{2, 5, 9});

    CHECK_THROWS_AS(LayerSelection::parse("1,,3"), SelectionError);
    CHECK_THROWS_AS(LayerSelection::parse("a,b"), SelectionError);
    CHECK_THROWS_AS(LayerSelection::parse(""), SelectionError);

    LayerSelection dup;
    dup.indices = {1, 1};
    CHECK_THROWS_AS(dup.validate(4), SelectionError);
    LayerSelection desc;
    desc.indices = {3, 2};
    CHECK_THROWS_AS(desc.validate(4), SelectionError);
    LayerSelection over;
    over.indices = {1, 5};
    CHECK_THROWS_AS(over.validate(4), SelectionError);
    LayerSelection zero;
    zero.indices = {0, 2};
    CHECK_THROWS_AS(zero.validate(4), SelectionError);
    LayerSelection ok;
    ok.indices = {1, 4};
    CHECK_NOTHROW(ok.validate(4));
}

TEST_CASE("detach_elo: bitwise copies, freeze flags, runnable and causal") {
    auto m = build_model<float>(small_config(6, 11));
    LayerSelection sel;
    sel.indices = {1, 6};
    auto sub = detach_elo(m, sel);

    CHECK(sub.model.config.n_layers == 2);
    CHECK(sub.source_lineage == m.lineage);
    // Bitwise equality with donor tensors.
    CHECK(sub.model.tok_emb.data() == m.tok_emb.data());
    CHECK(sub.model.head_w.data() == m.head_w.data());
    CHECK(sub.model.head_norm.data() == m.head_norm.data());
    CHECK(sub.model.layers[0].wq.data() == m.layers[0].wq.data());
    CHECK(sub.model.layers[1].wq.data() == m.layers[5].wq.data());
    // Renamed to sub positions.
    CHECK(sub.model.layers[1].wq.name() == "layer.2.attn.q");
    // Frozen set = embedding + head group; trainable set = the layers.
    CHECK(!sub.model.tok_emb.requires_grad());
    CHECK(!sub.model.head_w.requires_grad());
    CHECK(!sub.model.head_norm.requires_grad());
    CHECK(sub.model.layers[0].wq.requires_grad());
    CHECK(sub.model.layers[1].w_down.requires_grad());
    // Donor unmodified.
    CHECK(m.tok_emb.requires_grad());

    // Trainable/frozen name lists.
    auto tn = sub.trainable_names();
    CHECK(tn.size() == 16);
    CHECK(std::find(tn.begin(), tn.end(), "layer.2.ffn.up") != tn.end());
    CHECK(EloSubModel::frozen_names() ==
          std::vector<std::string>{"emb.tok", "head.norm", "head.w"});

    // Runs without error and stays causal; differs from the donor's forward
    // in general (interior layers are skipped).
    NoGradGuard ng;
    std::vector<int32_t> toks{1, 4, 2, 9};
    auto sl = sub.model.forward_one(toks);
    auto fl = m.forward_one(toks);
    CHECK(sl.shape() == fl.shape());
    auto toks2 = toks;
    toks2.back() = 3;
    auto sl2 = sub.model.forward_one(toks2);
    size_t V = 16;
    for (size_t p = 0; p + 1 < toks.size(); ++p)
        for (size_t j = 0; j < V; ++j) CHECK(sl.data()[p * V + j] == sl2.data()[p * V + j]);

    // Out-of-range selection.
    LayerSelection bad;
    bad.indices = {1, 7};
    CHECK_THROWS_AS(detach_elo(m, bad), SelectionError);
}

TEST_CASE("detach_elo: param count identity and degenerate full selection") {
    ModelConfig ref;  // reference config
    auto m = build_model<float>(ref);
    LayerSelection sel;
    sel.indices = {1, 16};
    auto sub = detach_elo(m, sel);
    CHECK(count_params(sub.model) == 410240);  // 8192 emb + 8320 head group + 2·196864
    size_t expect = count_params(m, {"emb.tok"}) + count_params(m, {"head.norm", "head.w"}) +
                    count_params(m, layer_tensor_names(1)) +
                    count_params(m, layer_tensor_names(16));
    CHECK(count_params(sub.model) == expect);

    // λ = {1..n} -> parameter-identical to the full model.
    auto msmall = build_model<float>(small_config(3, 2));
    LayerSelection all;
    all.indices = {1, 2, 3};
    auto suball = detach_elo(msmall, all);
    CHECK(fingerprint(suball.model) == fingerprint(msmall));
}

TEST_CASE("replace_layers: roundtrip identity over random configs and selections") {
    CounterRng rng(2024, "roundtrip");
    for (int trial = 0; trial < 20; ++trial) {
        size_t n = 2 + size_t(rng.uniform_int(7));  // n in [2,8]
        auto m = build_model<float>(small_config(n, 100 + trial));
        // Random non-empty strictly-increasing selection.
        LayerSelection sel;
        for (size_t i = 1; i <= n; ++i)
            if (rng.uniform_int(2) == 0) sel.indices.push_back(i);
        if (sel.indices.empty()) sel.indices.push_back(1 + size_t(rng.uniform_int(n)));
        auto sub = detach_elo(m, sel);
        auto merged = replace_layers(m, sub);
        CHECK(models_bitwise_equal(merged, m));
        CHECK(fingerprint(merged) == fingerprint(m));
    }
}

TEST_CASE("replace_layers: write-set exactness and lineage guard") {
    auto m = build_model<float>(small_config(5, 7));
    LayerSelection sel;
    sel.indices = {2, 4};
    auto sub = detach_elo(m, sel);
    // Simulate training: perturb every sub layer tensor.
    for (auto& L : sub.model.layers)
        for (Tensor* t : {&L.attn_norm, &L.wq, &L.wk, &L.wv, &L.wo, &L.ffn_norm, &L.w_up,
                          &L.w_down})
            for (auto& v : t->data()) v += 0.5f;
    auto merged = replace_layers(m, sub);
    // Tensors named layer.{2,4}.* differ; everything else bitwise unchanged.
    auto orig = m.tensors();
    auto got = merged.tensors();
    REQUIRE(orig.size() == got.size());
    for (size_t i = 0; i < orig.size(); ++i) {
        size_t li = 0;
        bool in_sel = parse_layer_tensor(orig[i].first, &li) && sel.contains(li);
        if (in_sel)
            CHECK(orig[i].second.data() != got[i].second.data());
        else
            CHECK(orig[i].second.data() == got[i].second.data());
    }
    // Merged layer values match the trained sub values bitwise.
    CHECK(merged.layers[1].wq.data() == sub.model.layers[0].wq.data());
    CHECK(merged.layers[3].w_up.data() == sub.model.layers[1].w_up.data());
    // Donor model untouched by the whole procedure.
    CHECK(fingerprint(m) == build_model<float>(small_config(5, 7)).lineage);

    // Different seed's model -> LineageError.
    auto other = build_model<float>(small_config(5, 8));
    CHECK_THROWS_AS(replace_layers(other, sub), LineageError);
}

TEST_CASE("compute_delta: zero case, locality, brute-force oracle") {
    auto m = build_model<float>(small_config(3, 21));
    auto zero = compute_delta(m, m);
    for (auto& [name, t] : zero.entries)
        for (float v : t.data()) CHECK(v == 0.0f);
    CHECK(zero.minuend_fingerprint == zero.subtrahend_fingerprint);

    // Perturb one tensor: delta nonzero only there.
    auto m2 = clone_model(m);
    for (auto& v : m2.layers[1].wv.data()) v += 0.25f;
    auto d = compute_delta(m2, m);
    for (auto& [name, t] : d.entries) {
        bool nonzero = false;
        for (float v : t.data()) nonzero |= (v != 0.0f);
        CHECK(nonzero == (name == "layer.2.attn.v"));
    }

    // Brute-force elementwise oracle: sum |a−b| equals sum |delta|.
    auto m3 = build_model<float>(small_config(3, 22));
    auto d2 = compute_delta(m3, m);
    auto at = m3.tensors();
    auto bt = m.tensors();
    double sum_direct = 0, sum_delta = 0;
    for (size_t i = 0; i < at.size(); ++i)
        for (size_t j = 0; j < at[i].second.numel(); ++j)
            sum_direct += std::abs(double(at[i].second.data()[j]) - double(bt[i].second.data()[j]));
    for (auto& [name, t] : d2.entries)
        for (float v : t.data()) sum_delta += std::abs(double(v));
    CHECK(sum_delta == doctest::Approx(sum_direct).epsilon(1e-6));

    // Config mismatch -> ShapeError.
    auto wide = build_model<float>(small_config(4, 21));
    CHECK_THROWS_AS(compute_delta(wide, m), ShapeError);
}

TEST_CASE("apply_delta: identity, roundtrip, non-idempotence, name guard") {
    auto pt = build_model<float>(small_config(3, 31));
    auto inst = build_model<float>(small_config(3, 32));

    auto zero = compute_delta(pt, pt);
    auto same = apply_delta(pt, zero);
    CHECK(fingerprint(same) == fingerprint(pt));

    // apply(θ_PT, θ_Inst − θ_PT) ≈ θ_Inst within 1e-6·max(1,|θ_Inst|).
    auto d = compute_delta(inst, pt);
    auto rebuilt = apply_delta(pt, d);
    auto it = inst.tensors();
    auto rt = rebuilt.tensors();
    for (size_t i = 0; i < it.size(); ++i)
        for (size_t j = 0; j < it[i].second.numel(); ++j) {
            double want = it[i].second.data()[j];
            double got = rt[i].second.data()[j];
            CHECK(std::abs(got - want) <= 1e-6 * std::max(1.0, std::abs(want)));
        }

    // Applying a nonzero delta twice is not the same as once.
    auto once = apply_delta(pt, d);
    auto twice = apply_delta(once, d);
    CHECK(fingerprint(once) != fingerprint(twice));

    // Delta naming a tensor the model lacks -> NameError.
    ParamDelta rogue = d;
    rogue.entries.emplace_back("layer.9.attn.q", Tensor::zeros({8, 8}));
    CHECK_THROWS_AS(apply_delta(pt, rogue), NameError);

    // Lineage flows through: applying a delta keeps the model's identity.
    CHECK(rebuilt.lineage == pt.lineage);
}
