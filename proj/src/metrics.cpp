// SPDX-License-Identifier: Apache-2.0
#include "eloforge/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "eloforge/digest.hpp"
#include "eloforge/errors.hpp"

namespace eloforge {

std::string Table::render_text() const {
    std::vector<size_t> width(header.size(), 0);
    for (size_t c = 0; c < header.size(); ++c) width[c] = header[c].size();
    for (const auto& row : rows) {
        if (row.size() != header.size()) throw ShapeError("table row width != header width");
        for (size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
    }
    std::ostringstream out;
    auto emit = [&](const std::vector<std::string>& row) {
        for (size_t c = 0; c < row.size(); ++c) {
            out << row[c] << std::string(width[c] - row[c].size(), ' ');
            out << (c + 1 == row.size() ? "\n" : "  ");
        }
    };
    emit(header);
    size_t total = header.empty() ? 0 : header.size() * 2 - 2;
    for (size_t w : width) total += w;
    out << std::string(total, '-') << '\n';
    for (const auto& row : rows) emit(row);
    return out.str();
}

std::string Table::render_tsv() const {
    std::ostringstream out;
    for (size_t c = 0; c < header.size(); ++c)
        out << header[c] << (c + 1 == header.size() ? "\n" : "\t");
    for (const auto& row : rows) {
        if (row.size() != header.size()) throw ShapeError("table row width != header width");
        for (size_t c = 0; c < row.size(); ++c)
            out << row[c] << (c + 1 == row.size() ? "\n" : "\t");
    }
    return out.str();
}

std::string short_digest(std::string_view bytes) {
    return sha256_hex(bytes.data(), bytes.size()).substr(0, 12);
}

std::string config_digest(const ModelConfig& config) {
    std::ostringstream s;
    s << config.n_layers << '/' << config.d_model << '/' << config.n_heads << '/'
      << config.d_ff << '/' << config.vocab_size << '/' << config.max_seq_len << '/'
      << config.eps << '/' << config.seed;
    return short_digest(s.str());
}

std::string format_double(double v, int precision) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*g", precision, v);
    return buf;
}

void write_step_log(const std::string& path, const PhaseMetrics& m) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open '" + path + "' for writing");
    f << "step\tloss\twall_ms\tflops\n";
    for (size_t i = 0; i < m.loss_curve.size(); ++i) {
        double ms = i < m.step_wall_ms.size() ? m.step_wall_ms[i] : 0.0;
        f << i + 1 << '\t' << format_double(m.loss_curve[i], 9) << '\t'
          << format_double(ms, 6) << '\t' << format_double(m.step_flops, 12) << '\n';
    }
    if (!f) throw IoError("write failed for '" + path + "'");
}

void finalize_timing(PhaseMetrics& m) {
    if (m.step_wall_ms.empty()) {
        m.median_step_ms = 0.0;
        m.mean_step_ms = 0.0;
        return;
    }
    std::vector<double> ms = m.step_wall_ms;
    std::sort(ms.begin(), ms.end());
    size_t n = ms.size();
    m.median_step_ms = (n % 2 == 1) ? ms[n / 2] : 0.5 * (ms[n / 2 - 1] + ms[n / 2]);
    double sum = 0;
    for (double v : ms) sum += v;
    m.mean_step_ms = sum / static_cast<double>(n);
}

}  // namespace eloforge
