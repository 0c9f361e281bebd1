#pragma once

#include <cmath>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "flowse/common.hpp"
#include "flowse/dsp.hpp"
#include "flowse/flow.hpp"
#include "flowse/training.hpp"

namespace flowse {

// Exact matches (and anything above) report the cap instead of infinity.
inline constexpr double kSnrCapDb = 99.0;

// Waveform-domain SNR in dB between a reference and an estimate. Only a toy
// proxy here: alignment-sensitive, so meaningful for synthetic mixtures, not
// for perceptual claims.
inline double snr_db(const Waveform& reference, const Waveform& estimate) {
    if (reference.samples.size() != estimate.samples.size()) {
        throw DomainError("snr_db: length mismatch");
    }
    if (reference.samples.empty()) {
        throw DomainError("snr_db: empty signals");
    }
    double p_ref = 0.0;
    double p_err = 0.0;
    for (size_t i = 0; i < reference.samples.size(); ++i) {
        const double r = reference.samples[i];
        const double e = estimate.samples[i] - r;
        p_ref += r * r;
        p_err += e * e;
    }
    if (p_ref <= 0.0) {
        throw DomainError("snr_db: zero-power reference");
    }
    if (p_err <= 0.0) {
        return kSnrCapDb;
    }
    return std::min(kSnrCapDb, 10.0 * std::log10(p_ref / p_err));
}

struct EvalRow {
    std::string item;
    double snr_in_db = 0.0;
    double snr_out_db = 0.0;
    double mel_l1_in = 0.0;
    double mel_l1_out = 0.0;
    bool improved = false;
};

struct EvalReport {
    std::vector<EvalRow> rows;
    double mean_snr_in = 0.0;
    double mean_snr_out = 0.0;
    double mean_mel_l1_in = 0.0;
    double mean_mel_l1_out = 0.0;
    double improvement_rate = 0.0;
};

// Per-item metrics for a waveform-level enhancer. `enhance_fn` maps (noisy,
// transcript, index) to the enhanced waveform (same length); tests substitute
// oracle or identity enhancers.
template <typename EnhanceFn>
inline EvalReport eval_report(const std::vector<EvalItem>& items, const MelConfig& mel_cfg,
                              EnhanceFn&& enhance_fn) {
    if (items.empty()) {
        throw DomainError("eval_report: empty test set");
    }
    EvalReport report;
    report.rows.reserve(items.size());
    int improved = 0;
    for (size_t i = 0; i < items.size(); ++i) {
        const EvalItem& item = items[i];
        const Waveform enhanced = enhance_fn(item.noisy, item.transcript, static_cast<int>(i));
        const MelSpectrogram mel_clean = wav_to_mel(item.clean, mel_cfg);
        const MelSpectrogram mel_noisy = wav_to_mel(item.noisy, mel_cfg);
        const MelSpectrogram mel_enh = wav_to_mel(enhanced, mel_cfg);

        EvalRow row;
        row.item = "item_" + std::to_string(i);
        row.snr_in_db = snr_db(item.clean, item.noisy);
        row.snr_out_db = snr_db(item.clean, enhanced);
        row.mel_l1_in = mel_l1(mel_noisy, mel_clean);
        row.mel_l1_out = mel_l1(mel_enh, mel_clean);
        row.improved = row.mel_l1_out < row.mel_l1_in;
        improved += row.improved ? 1 : 0;

        report.mean_snr_in += row.snr_in_db;
        report.mean_snr_out += row.snr_out_db;
        report.mean_mel_l1_in += row.mel_l1_in;
        report.mean_mel_l1_out += row.mel_l1_out;
        report.rows.push_back(std::move(row));
    }
    const double n = static_cast<double>(items.size());
    report.mean_snr_in /= n;
    report.mean_snr_out /= n;
    report.mean_mel_l1_in /= n;
    report.mean_mel_l1_out /= n;
    report.improvement_rate = static_cast<double>(improved) / n;
    return report;
}

// CSV form. The dnsmos/spk_sim/wer columns are reserved so externally
// computed scores can be merged into the same schema; this tool leaves them
// empty.
inline std::string eval_report_csv(const EvalReport& report) {
    std::ostringstream os;
    os << "item,snr_in_db,snr_out_db,mel_l1_in,mel_l1_out,improved,dnsmos,spk_sim,wer\n";
    os << std::setprecision(10);
    for (const auto& row : report.rows) {
        os << row.item << "," << row.snr_in_db << "," << row.snr_out_db << "," << row.mel_l1_in
           << "," << row.mel_l1_out << "," << (row.improved ? 1 : 0) << ",,,\n";
    }
    return os.str();
}

inline std::string eval_report_table(const EvalReport& report) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(4);
    os << "  items            : " << report.rows.size() << "\n";
    os << "  mean snr in  (dB): " << report.mean_snr_in << "\n";
    os << "  mean snr out (dB): " << report.mean_snr_out << "\n";
    os << "  mean mel L1 in   : " << report.mean_mel_l1_in << "\n";
    os << "  mean mel L1 out  : " << report.mean_mel_l1_out << "\n";
    os << "  improvement rate : " << report.improvement_rate << "\n";
    return os.str();
}

}  // namespace flowse
