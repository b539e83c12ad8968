// SPDX-License-Identifier: Apache-2.0
#include "eloforge/model.hpp"

#include <charconv>

namespace eloforge {

std::vector<std::string> layer_tensor_names(size_t i) {
    std::vector<std::string> out;
    out.reserve(layer_tensor_suffixes().size());
    for (const auto& s : layer_tensor_suffixes()) out.push_back(layer_tensor_name(i, s));
    return out;
}

bool parse_layer_tensor(std::string_view name, size_t* layer_out) {
    constexpr std::string_view prefix = "layer.";
    if (name.substr(0, prefix.size()) != prefix) return false;
    std::string_view rest = name.substr(prefix.size());
    size_t dot = rest.find('.');
    if (dot == std::string_view::npos || dot == 0) return false;
    size_t idx = 0;
    auto [p, ec] = std::from_chars(rest.data(), rest.data() + dot, idx);
    if (ec != std::errc() || p != rest.data() + dot || idx == 0) return false;
    if (layer_out) *layer_out = idx;
    return true;
}

uint64_t layer_flops(const ModelConfig& config, uint64_t s) {
    uint64_t d = config.d_model, ff = config.d_ff;
    return 8 * s * d * d + 4 * s * s * d + 4 * s * d * ff;
}

uint64_t head_flops(const ModelConfig& config, uint64_t s) {
    return 2 * s * config.d_model * uint64_t(config.vocab_size);
}

uint64_t forward_flops(const ModelConfig& config, uint64_t n_active_layers, uint64_t s) {
    return n_active_layers * layer_flops(config, s) + head_flops(config, s);
}

uint64_t lora_forward_flops(const ModelConfig& config, uint64_t rank,
                            uint64_t targets_per_layer, uint64_t s) {
    return uint64_t(config.n_layers) * targets_per_layer * 4 * s * config.d_model * rank;
}

}  // namespace eloforge
