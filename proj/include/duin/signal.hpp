#pragma once

#include "duin/rng.hpp"
#include "duin/tensor.hpp"

#include <optional>
#include <string>
#include <vector>

namespace duin {

struct ChannelMeta {
    std::string name;
    std::string electrode_id;
    int contact_index = 0;
};

struct TrialAnnotation {
    Index onset_sample = 0;
    Index n_samples = 0;
    int label = 0;
};

/// Multichannel recording: data is [C, T] float32. Trial annotations and
/// label names travel with it so the sidecar manifest round-trips in one
/// piece; both lists may be empty for non-task recordings.
struct Recording {
    std::string subject_id;
    double sample_rate_hz = 0.0;
    std::vector<ChannelMeta> channels;
    Tensor<float> data;  // [C, T]
    std::vector<TrialAnnotation> trials;
    std::vector<std::string> label_names;

    Index n_channels() const { return data.empty() ? 0 : data.dim(0); }
    Index n_samples() const { return data.empty() ? 0 : data.dim(1); }

    void validate() const;
};

/// Fixed-length training window [C, T_s] with an optional class label.
struct Sample {
    Tensor<float> data;  // [C, T_s]
    std::optional<int> label;
    Index source_offset = 0;
};

struct SyntheticSpec {
    Index n_channels = 10;
    double sample_rate_hz = 400.0;
    int n_classes = 8;
    int n_trials_per_class = 25;
    std::vector<Index> informative_channels = {2, 5};
    double noise_sigma = 1.0;
    std::uint64_t seed = 0;

    void validate() const;
};

struct SplitSpec {
    double train_fraction = 0.8;
    double val_fraction = 0.1;
    double test_fraction = 0.1;
    std::uint64_t seed = 0;

    void validate() const;
};

struct SplitResult {
    std::vector<Index> train;
    std::vector<Index> val;
    std::vector<Index> test;
};

/// A half-open window [offset, offset + n_samples) into a recording.
struct SegmentDescriptor {
    Index offset = 0;
    Index n_samples = 0;
};

// Binary recording file: magic "DUIN" | u16 version=1 | u16 flags=0 |
// u32 n_channels | f64 sample_rate | u64 n_samples, little-endian, then a
// channel-major float32 payload. Metadata goes to a "<path>.json" sidecar.
void save_recording(const Recording& rec, const std::string& path);
Recording load_recording(const std::string& path);

/// Deterministic synthetic corpus: Gaussian background, class templates (two
/// seeded sinusoids in 4-40 Hz) added on the informative channels during
/// trial windows, trials separated by >= 0.5 s with filler spans totalling
/// >= 4x the trial time.
Recording generate_synthetic(const SyntheticSpec& spec);

/// 8 s windows starting every 4 s.
std::vector<SegmentDescriptor> segment_pretrain(const Recording& rec);

/// Random 4 s window out of an 8 s segment; start offset uniform over
/// [0, 4 s] in whole samples.
Sample fetch_pretrain_sample(const Recording& rec, const SegmentDescriptor& seg, Rng& rng);

/// One labeled window per trial, aligned to trial onset.
std::vector<Sample> extract_trial_samples(const Recording& rec,
                                          const std::vector<TrialAnnotation>& annotations,
                                          double window_s = 3.0);

/// Shift by whole samples, zero-filling the vacated region; the label rides
/// along. Positive shift moves content right.
Sample shift_sample(const Sample& sample, Index signed_shift);

/// Random shift in [0, 0.3 s], direction by one fair bit.
Sample augment_trial(const Sample& sample, double sample_rate_hz, Rng& rng);

/// Stratified split: per-class counts within one sample of the target
/// fractions; requires every class to have at least 3 samples.
SplitResult split_dataset(const std::vector<Sample>& samples, const SplitSpec& spec);

}  // namespace duin
