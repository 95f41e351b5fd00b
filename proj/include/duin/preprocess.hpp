#pragma once

#include "duin/signal.hpp"

#include <vector>

namespace duin {

struct FilterSpec {
    double low_hz = 0.5;
    double high_hz = 200.0;
    double notch_hz = 50.0;
    double notch_q = 35.0;
    double target_rate_hz = 1000.0;
    bool bipolar = true;  // synthetic single-electrode corpora turn this off
    // Post-pipeline channel subset (indices into the re-referenced layout);
    // empty keeps everything. Feeds the two-phase top-k selection flow.
    std::vector<Index> keep_channels;

    void validate(double sample_rate_hz) const;
};

/// Returns the recording restricted to the given channel rows, in the given
/// order.
Recording select_channels(const Recording& rec, const std::vector<Index>& keep);

/// Zero-phase (forward-backward) 4th-order Butterworth band-pass per channel.
Recording bandpass(const Recording& rec, double low_hz, double high_hz);

/// Zero-phase second-order IIR notch per channel.
Recording notch(const Recording& rec, double notch_hz, double q);

/// Kaiser-windowed sinc polyphase resampling; the rate ratio must reduce to
/// L/M with denominator <= 1000.
Recording resample(const Recording& rec, double target_rate_hz);

/// Per electrode with n contacts, emits n-1 difference channels
/// contact_{i+1} - contact_i named "E.i+1-E.i", electrodes in input order.
Recording bipolar_reref(const Recording& rec);

/// Per-channel (x - mean)/std with population std.
Recording zscore(const Recording& rec);

/// bandpass -> notch -> resample -> bipolar_reref -> zscore, in that order
/// (the re-reference stage is skipped when spec.bipolar is false).
Recording run_pipeline(const Recording& rec, const FilterSpec& spec);

namespace dsp {

/// One biquad, coefficients normalized to a0 = 1.
struct Biquad {
    double b0, b1, b2, a1, a2;
};

std::vector<Biquad> butter_bandpass_sos(int order, double low_hz, double high_hz, double rate_hz);
Biquad notch_biquad(double notch_hz, double q, double rate_hz);

/// Forward-backward filtering through a biquad cascade with odd-reflection
/// padding and steady-state initial conditions.
std::vector<double> filtfilt(const std::vector<Biquad>& sos, const std::vector<double>& x);

/// Rational resampling of one channel.
std::vector<double> resample_channel(const std::vector<double>& x, long up, long down);

/// target/source as a reduced fraction with denominator <= max_den.
std::pair<long, long> rational_rate_ratio(double source_hz, double target_hz, long max_den = 1000);

}  // namespace dsp

}  // namespace duin
