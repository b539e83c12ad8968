// SPDX-License-Identifier: Apache-2.0
#include "eloforge/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <map>
#include <numeric>

#include "eloforge/rng.hpp"

namespace eloforge {

std::string_view method_name(Method m) {
    switch (m) {
        case Method::FFT: return "fft";
        case Method::ELO: return "elo";
        case Method::LORA: return "lora";
        case Method::ALIGN: return "align";
        case Method::SFT: return "sft";
    }
    throw ConfigError("unknown method");
}

Method parse_method(std::string_view name) {
    if (name == "fft") return Method::FFT;
    if (name == "elo") return Method::ELO;
    if (name == "lora") return Method::LORA;
    if (name == "align") return Method::ALIGN;
    if (name == "sft") return Method::SFT;
    throw ConfigError("unknown method '" + std::string(name) + "'");
}

namespace {

std::string samples_digest(const std::vector<Sample>& samples) {
    uint64_t h = 0xcbf29ce484222325ull;
    auto mix_bytes = [&h](const void* p, size_t n) {
        const unsigned char* b = static_cast<const unsigned char*>(p);
        for (size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 0x100000001b3ull;
        }
    };
    for (const auto& s : samples) {
        mix_bytes(s.tokens.data(), s.tokens.size() * sizeof(int32_t));
        mix_bytes(s.targets.data(), s.targets.size() * sizeof(int32_t));
        mix_bytes(s.mask.data(), s.mask.size());
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace

Tensor batch_loss(const ModelT<float>& model, const AdapterSetT<float>* adapters,
                  const std::vector<const Sample*>& batch) {
    std::vector<size_t> counts;
    counts.reserve(batch.size());
    size_t total = 0;
    for (const auto* s : batch) {
        size_t c = 0;
        for (uint8_t m : s->mask) c += m ? 1 : 0;
        counts.push_back(c);
        total += c;
    }
    if (total == 0) throw EmptyLossError("batch has no unmasked positions");
    std::vector<Tensor> losses;
    std::vector<double> weights;
    losses.reserve(batch.size());
    for (size_t i = 0; i < batch.size(); ++i) {
        if (counts[i] == 0) continue;  // fully padded sample carries no loss
        const Sample& s = *batch[i];
        Tensor logits = model.forward_one(s.tokens, adapters);
        losses.push_back(cross_entropy(logits, std::span<const int32_t>(s.targets),
                                       std::span<const uint8_t>(s.mask)));
        weights.push_back(static_cast<double>(counts[i]) / static_cast<double>(total));
    }
    return weighted_sum(losses, weights);
}

PhaseMetrics run_steps(const std::vector<std::pair<std::string, Tensor>>& params,
                       const std::set<std::string>& mask, const BatchLossFn& loss_fn,
                       const std::vector<Sample>& samples, const TrainPlan& plan,
                       std::string_view phase, double step_flops) {
    if (plan.batch < 1) throw ConfigError("batch must be >= 1");
    if (plan.seq_len < 1) throw ConfigError("seq_len must be >= 1");
    if (samples.empty()) throw EmptyDataError("no samples to train on");
    for (const auto& s : samples)
        if (s.tokens.size() != plan.seq_len || s.targets.size() != plan.seq_len ||
            s.mask.size() != plan.seq_len)
            throw ShapeError("sample length does not match plan.seq_len");

    std::set<std::string> known;
    for (const auto& [n, t] : params) known.insert(n);
    for (const auto& n : mask)
        if (!known.count(n)) throw ConfigError("trainable mask names unknown tensor '" + n + "'");

    std::vector<std::pair<std::string, Tensor>> trainable;
    size_t params_total = 0, params_trainable = 0;
    for (const auto& [n, t] : params) {
        params_total += t.numel();
        if (mask.count(n)) {
            params_trainable += t.numel();
            trainable.emplace_back(n, t);
        }
    }

    // Bitwise-freeze verification set: everything outside the mask.
    std::vector<std::pair<std::string, Tensor>> frozen;
    std::vector<std::vector<float>> frozen_bytes;
    if (plan.verify_mask) {
        for (const auto& [n, t] : params)
            if (!mask.count(n)) {
                frozen.emplace_back(n, t);
                frozen_bytes.push_back(t.data());
            }
    }

    std::map<std::string, AdamWState> opt_state;

    PhaseMetrics m;
    m.phase = std::string(phase);
    m.step_flops = step_flops;
    m.params_total = params_total;
    m.params_trainable = params_trainable;
    m.opt_state_bytes = 12 * params_trainable;  // f32 weights + m + v
    m.batch = plan.batch;
    m.seq_len = plan.seq_len;
    m.seed = plan.seed;
    m.data_digest = samples_digest(samples);

    const size_t epochs = plan.resolved_epochs();
    size_t positions_done = 0;
    bool capped = false;
    for (size_t epoch = 0; epoch < epochs && !capped; ++epoch) {
        std::vector<size_t> order(samples.size());
        std::iota(order.begin(), order.end(), size_t{0});
        if (plan.method == Method::SFT) {
            // Fresh sample order per epoch, deterministic in (seed, epoch).
            CounterRng rng(plan.seed ^ fnv1a64("sft-shuffle/" + std::to_string(epoch)));
            for (size_t i = order.size(); i > 1; --i)
                std::swap(order[i - 1], order[rng.uniform_int(i)]);
        }
        for (size_t start = 0; start < order.size(); start += plan.batch) {
            if (plan.max_steps && m.steps >= plan.max_steps) {
                capped = true;
                break;
            }
            auto t0 = std::chrono::steady_clock::now();
            std::vector<const Sample*> batch;
            size_t end = std::min(start + plan.batch, order.size());
            for (size_t i = start; i < end; ++i) batch.push_back(&samples[order[i]]);

            for (const auto& [n, t] : params) const_cast<Tensor&>(t).zero_grad();
            Tensor loss = loss_fn(batch);
            double lv = loss.item();
            if (!std::isfinite(lv))
                throw DivergenceError("loss became non-finite at step " +
                                      std::to_string(m.steps + 1) + " of phase " + m.phase);
            loss.backward();
            for (auto& [n, t] : trainable) adamw_step(t, opt_state[n], plan.opt);

            auto t1 = std::chrono::steady_clock::now();
            double ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
            m.loss_curve.push_back(lv);
            m.step_wall_ms.push_back(ms);
            m.steps += 1;
            positions_done += batch.size() * plan.seq_len;

            if (plan.verify_mask) {
                for (size_t f = 0; f < frozen.size(); ++f) {
                    const auto& now = frozen[f].second.data();
                    if (std::memcmp(now.data(), frozen_bytes[f].data(),
                                    now.size() * sizeof(float)) != 0)
                        throw EloError("tensor '" + frozen[f].first +
                                       "' outside the trainable mask changed at step " +
                                       std::to_string(m.steps));
                }
            }
            if (plan.log_every && m.steps % plan.log_every == 0)
                std::fprintf(stderr, "[%s] step %zu loss %.6f (%.1f ms)\n", m.phase.c_str(),
                             m.steps, lv, ms);
        }
    }

    m.wall_seconds = 0;
    for (double ms : m.step_wall_ms) m.wall_seconds += ms / 1000.0;
    m.tokens_per_second =
        m.wall_seconds > 0 ? static_cast<double>(positions_done) / m.wall_seconds : 0.0;
    finalize_timing(m);
    return m;
}

namespace {

std::set<std::string> all_names(const ModelT<float>& model) {
    std::set<std::string> out;
    for (const auto& [n, t] : model.tensors()) out.insert(n);
    return out;
}

void require_method(const TrainPlan& plan, Method want) {
    if (plan.method != want)
        throw ConfigError(std::string("plan.method must be ") + std::string(method_name(want)) +
                          ", got " + std::string(method_name(plan.method)));
}

}  // namespace

TrainedResult train_fft(ModelT<float>& model, const std::vector<Sample>& samples,
                        const TrainPlan& plan) {
    require_method(plan, Method::FFT);
    auto params = model.tensors();
    double flops = 3.0 *
                   static_cast<double>(forward_flops(model.config, model.config.n_layers,
                                                     plan.seq_len)) *
                   static_cast<double>(plan.batch);
    auto loss_fn = [&model](const std::vector<const Sample*>& b) {
        return batch_loss(model, nullptr, b);
    };
    TrainedResult r;
    r.metrics = run_steps(params, all_names(model), loss_fn, samples, plan, "fft", flops);
    r.metrics.config_digest = config_digest(model.config);
    return r;
}

TrainedResult train_elo(EloSubModel& sub, const std::vector<Sample>& samples,
                        const TrainPlan& plan) {
    require_method(plan, Method::ELO);
    auto params = sub.model.tensors();
    std::set<std::string> mask;
    for (const auto& n : sub.trainable_names()) mask.insert(n);
    if (plan.train_emb_head)
        for (const auto& n : EloSubModel::frozen_names()) mask.insert(n);
    double flops = 3.0 *
                   static_cast<double>(forward_flops(sub.model.config, sub.model.config.n_layers,
                                                     plan.seq_len)) *
                   static_cast<double>(plan.batch);
    auto loss_fn = [&sub](const std::vector<const Sample*>& b) {
        return batch_loss(sub.model, nullptr, b);
    };
    TrainedResult r;
    r.metrics = run_steps(params, mask, loss_fn, samples, plan, "elo", flops);
    r.metrics.config_digest = config_digest(sub.model.config);
    return r;
}

TrainedResult align(ModelT<float>& model, const std::vector<Sample>& samples,
                    const TrainPlan& plan) {
    require_method(plan, Method::ALIGN);
    TrainedResult r;
    if (samples.empty()) {
        // Zero budget: nothing trains, nothing is reported.
        r.metrics.phase = "align";
        r.metrics.batch = plan.batch;
        r.metrics.seq_len = plan.seq_len;
        r.metrics.seed = plan.seed;
        r.metrics.config_digest = config_digest(model.config);
        return r;
    }
    auto params = model.tensors();
    double flops = 3.0 *
                   static_cast<double>(forward_flops(model.config, model.config.n_layers,
                                                     plan.seq_len)) *
                   static_cast<double>(plan.batch);
    auto loss_fn = [&model](const std::vector<const Sample*>& b) {
        return batch_loss(model, nullptr, b);
    };
    r.metrics = run_steps(params, all_names(model), loss_fn, samples, plan, "align", flops);
    r.metrics.config_digest = config_digest(model.config);
    return r;
}

TrainedResult sft(ModelT<float>& model, const std::vector<Sample>& samples,
                  const TrainPlan& plan) {
    require_method(plan, Method::SFT);
    auto params = model.tensors();
    double flops = 3.0 *
                   static_cast<double>(forward_flops(model.config, model.config.n_layers,
                                                     plan.seq_len)) *
                   static_cast<double>(plan.batch);
    auto loss_fn = [&model](const std::vector<const Sample*>& b) {
        return batch_loss(model, nullptr, b);
    };
    TrainedResult r;
    r.metrics = run_steps(params, all_names(model), loss_fn, samples, plan, "sft", flops);
    r.metrics.config_digest = config_digest(model.config);
    return r;
}

// --- low-rank adapters ---------------------------------------------------------

namespace {

std::string lora_name(size_t layer, std::string_view target, char which) {
    return "lora." + std::to_string(layer) + "." + std::string(target) + "." + which;
}

}  // namespace

size_t LoraModel::adapter_param_count() const {
    size_t n = 0;
    for (const auto& [name, t] : adapter_params) n += t.numel();
    return n;
}

LoraModel attach_lora(const ModelT<float>& model, const LoraConfig& cfg) {
    if (cfg.rank < 1) throw ConfigError("adapter rank must be >= 1");
    if (cfg.alpha <= 0) throw ConfigError("adapter alpha must be > 0");
    if (cfg.targets.empty()) throw ConfigError("adapter target list is empty");
    std::set<std::string> seen;
    for (const auto& t : cfg.targets) {
        if (t != "q" && t != "v")
            throw NameError("unknown adapter target '" + t + "' (supported: q, v)");
        if (!seen.insert(t).second) throw ConfigError("duplicate adapter target '" + t + "'");
    }

    LoraModel lm;
    lm.base = model;  // shared handles: the adapter wrapper does not own a copy
    lm.cfg = cfg;
    lm.adapters.scaling = cfg.scaling();
    lm.adapters.layers.resize(model.config.n_layers);

    const size_t d = model.config.d_model, r = cfg.rank;
    for (size_t i = 1; i <= model.config.n_layers; ++i) {
        for (const auto& t : cfg.targets) {
            std::string an = lora_name(i, t, 'a');
            std::string bn = lora_name(i, t, 'b');
            Tensor a = Tensor::normal({d, r}, 1.0 / static_cast<double>(r), cfg.seed, an, true);
            Tensor b = Tensor::zeros({r, d}, true);
            b.set_name(bn);
            auto& la = lm.adapters.layers[i - 1];
            (t == "q" ? la.q : la.v) = AdapterPairT<float>{a, b};
            lm.adapter_params.emplace_back(an, a);
            lm.adapter_params.emplace_back(bn, b);
        }
    }
    return lm;
}

TrainedResult train_lora(LoraModel& lm, const std::vector<Sample>& samples,
                         const TrainPlan& plan) {
    require_method(plan, Method::LORA);
    auto params = lm.base.tensors();
    std::set<std::string> mask;
    for (const auto& [n, t] : lm.adapter_params) {
        params.emplace_back(n, t);
        mask.insert(n);
    }
    const ModelConfig& cfg = lm.base.config;
    double flops =
        3.0 *
        (static_cast<double>(forward_flops(cfg, cfg.n_layers, plan.seq_len)) +
         static_cast<double>(lora_forward_flops(cfg, lm.cfg.rank, lm.cfg.targets.size(),
                                                plan.seq_len))) *
        static_cast<double>(plan.batch);
    auto loss_fn = [&lm](const std::vector<const Sample*>& b) {
        return batch_loss(lm.base, &lm.adapters, b);
    };
    TrainedResult r;
    r.metrics = run_steps(params, mask, loss_fn, samples, plan, "lora", flops);
    r.metrics.config_digest = config_digest(cfg);
    return r;
}

ModelT<float> merge_lora(LoraModel& lm) {
    if (lm.merged) throw MergeError("adapters were already merged once");
    ModelT<float> out = clone_model(lm.base);
    const size_t d = out.config.d_model, r = lm.cfg.rank;
    const double s = lm.adapters.scaling;
    for (size_t i = 0; i < out.layers.size(); ++i) {
        if (i >= lm.adapters.layers.size()) break;
        const auto& la = lm.adapters.layers[i];
        auto fold = [&](const AdapterPairT<float>& ab, Tensor& w) {
            if (!ab.a.defined()) return;
            const auto& av = ab.a.data();
            const auto& bv = ab.b.data();
            auto& wv = w.data();
            std::vector<double> acc(d);
            for (size_t row = 0; row < d; ++row) {
                std::fill(acc.begin(), acc.end(), 0.0);
                for (size_t k = 0; k < r; ++k) {
                    double aik = static_cast<double>(av[row * r + k]);
                    for (size_t col = 0; col < d; ++col)
                        acc[col] += aik * static_cast<double>(bv[k * d + col]);
                }
                for (size_t col = 0; col < d; ++col)
                    wv[row * d + col] = static_cast<float>(
                        static_cast<double>(wv[row * d + col]) + s * acc[col]);
            }
        };
        fold(la.q, out.layers[i].wq);
        fold(la.v, out.layers[i].wv);
    }
    lm.merged = true;
    return out;
}

}  // namespace eloforge
