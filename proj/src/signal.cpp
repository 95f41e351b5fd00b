#include "duin/signal.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <stdexcept>

namespace duin {

using nlohmann::json;

void Recording::validate() const {
    if (sample_rate_hz <= 0.0) throw std::invalid_argument("recording: sample rate must be > 0");
    if (data.rank() != 2) throw std::invalid_argument("recording: data must be [C, T]");
    if (static_cast<Index>(channels.size()) != data.dim(0)) {
        throw std::invalid_argument("recording: " + std::to_string(channels.size()) +
                                    " channel entries for " + std::to_string(data.dim(0)) +
                                    " data rows");
    }
    if (!data.all_finite()) throw std::invalid_argument("recording: non-finite sample values");
    // (name, electrode, contact) unique; contacts contiguous from 0 per electrode.
    std::map<std::pair<std::string, int>, int> seen;
    std::map<std::string, std::vector<int>> contacts;
    for (const auto& ch : channels) {
        auto key = std::make_pair(ch.electrode_id, ch.contact_index);
        if (ch.contact_index < 0) throw std::invalid_argument("recording: negative contact index");
        if (seen.count(key)) {
            throw std::invalid_argument("recording: duplicate contact " + ch.electrode_id + "." +
                                        std::to_string(ch.contact_index));
        }
        seen[key] = 1;
        contacts[ch.electrode_id].push_back(ch.contact_index);
    }
    for (auto& [eid, idx] : contacts) {
        std::sort(idx.begin(), idx.end());
        for (std::size_t i = 0; i < idx.size(); ++i) {
            if (idx[i] != static_cast<int>(i)) {
                throw std::invalid_argument("recording: electrode " + eid +
                                            " contacts not contiguous from 0");
            }
        }
    }
    for (const auto& tr : trials) {
        if (tr.onset_sample < 0 || tr.n_samples <= 0 ||
            tr.onset_sample + tr.n_samples > n_samples()) {
            throw std::invalid_argument("recording: trial outside recording bounds");
        }
        if (tr.label < 0 ||
            (!label_names.empty() && tr.label >= static_cast<int>(label_names.size()))) {
            throw std::invalid_argument("recording: trial label outside label-name list");
        }
    }
}

namespace {

constexpr char kMagic[4] = {'D', 'U', 'I', 'N'};
constexpr std::uint16_t kVersion = 1;

template <typename T>
void write_le(std::ofstream& out, T v) {
    // Little-endian host assumed (x86/ARM); bytes written as stored.
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_le(std::ifstream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw std::runtime_error("recording file truncated in header");
    return v;
}

std::string manifest_path(const std::string& path) { return path + ".json"; }

}  // namespace

void save_recording(const Recording& rec, const std::string& path) {
    rec.validate();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    out.write(kMagic, 4);
    write_le<std::uint16_t>(out, kVersion);
    write_le<std::uint16_t>(out, 0);  // flags
    write_le<std::uint32_t>(out, static_cast<std::uint32_t>(rec.n_channels()));
    write_le<double>(out, rec.sample_rate_hz);
    write_le<std::uint64_t>(out, static_cast<std::uint64_t>(rec.n_samples()));
    out.write(reinterpret_cast<const char*>(rec.data.data()),
              static_cast<std::streamsize>(rec.data.size() * sizeof(float)));
    if (!out) throw std::runtime_error("write failed for " + path);
    out.close();

    json manifest;
    manifest["subject_id"] = rec.subject_id;
    manifest["channels"] = json::array();
    for (const auto& ch : rec.channels) {
        manifest["channels"].push_back({{"name", ch.name},
                                        {"electrode_id", ch.electrode_id},
                                        {"contact_index", ch.contact_index}});
    }
    manifest["trials"] = json::array();
    for (const auto& tr : rec.trials) {
        manifest["trials"].push_back({{"onset_sample", tr.onset_sample},
                                      {"n_samples", tr.n_samples},
                                      {"label", tr.label}});
    }
    manifest["label_names"] = rec.label_names;
    std::ofstream mout(manifest_path(path), std::ios::trunc);
    if (!mout) throw std::runtime_error("cannot open " + manifest_path(path) + " for writing");
    mout << manifest.dump(2) << "\n";
}

Recording load_recording(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0) {
        throw std::runtime_error("bad magic in " + path);
    }
    const auto version = read_le<std::uint16_t>(in);
    if (version != kVersion) {
        throw std::runtime_error("unsupported recording version " + std::to_string(version));
    }
    read_le<std::uint16_t>(in);  // flags
    const auto n_channels = read_le<std::uint32_t>(in);
    const double rate = read_le<double>(in);
    const auto n_samples = read_le<std::uint64_t>(in);

    Recording rec;
    rec.sample_rate_hz = rate;
    rec.data = Tensor<float>({static_cast<Index>(n_channels), static_cast<Index>(n_samples)});
    in.read(reinterpret_cast<char*>(rec.data.data()),
            static_cast<std::streamsize>(rec.data.size() * sizeof(float)));
    if (in.gcount() != static_cast<std::streamsize>(rec.data.size() * sizeof(float))) {
        throw std::runtime_error("truncated payload in " + path);
    }

    std::ifstream min(manifest_path(path));
    if (!min) throw std::runtime_error("missing manifest " + manifest_path(path));
    json manifest = json::parse(min);
    rec.subject_id = manifest.value("subject_id", "");
    for (const auto& ch : manifest.at("channels")) {
        rec.channels.push_back({ch.at("name").get<std::string>(),
                                ch.at("electrode_id").get<std::string>(),
                                ch.at("contact_index").get<int>()});
    }
    for (const auto& tr : manifest.value("trials", json::array())) {
        rec.trials.push_back({tr.at("onset_sample").get<Index>(),
                              tr.at("n_samples").get<Index>(), tr.at("label").get<int>()});
    }
    for (const auto& name : manifest.value("label_names", json::array())) {
        rec.label_names.push_back(name.get<std::string>());
    }
    rec.validate();
    return rec;
}

void SyntheticSpec::validate() const {
    if (n_channels <= 0) throw std::invalid_argument("synthetic: n_channels must be > 0");
    if (sample_rate_hz <= 0) throw std::invalid_argument("synthetic: sample rate must be > 0");
    if (n_classes < 2) throw std::invalid_argument("synthetic: need at least 2 classes");
    if (n_trials_per_class <= 0) throw std::invalid_argument("synthetic: need trials per class");
    if (noise_sigma < 0) throw std::invalid_argument("synthetic: negative noise sigma");
    for (Index c : informative_channels) {
        if (c < 0 || c >= n_channels) {
            throw std::invalid_argument("synthetic: informative channel " + std::to_string(c) +
                                        " outside [0, " + std::to_string(n_channels) + ")");
        }
    }
}

namespace {

constexpr double kTrialSeconds = 3.0;
constexpr double kTrialGapSeconds = 0.5;
constexpr double kFillerFactor = 4.0;  // non-task time >= 4x total trial time

struct ClassTemplate {
    double f1, f2, phi1, phi2, a1, a2;
};

// Two sinusoids per class at seeded frequencies in 4-40 Hz so the templates
// survive the band-pass stage.
ClassTemplate class_template(int cls, std::uint64_t seed) {
    Rng rng = Rng(seed).child("class_template_" + std::to_string(cls));
    ClassTemplate t;
    t.f1 = rng.uniform(4.0, 20.0);
    t.f2 = rng.uniform(20.0, 40.0);
    t.phi1 = rng.uniform(0.0, 2.0 * M_PI);
    t.phi2 = rng.uniform(0.0, 2.0 * M_PI);
    t.a1 = 1.0;
    t.a2 = 0.8;
    return t;
}

}  // namespace

Recording generate_synthetic(const SyntheticSpec& spec) {
    spec.validate();
    const double rate = spec.sample_rate_hz;
    const Index trial_len = static_cast<Index>(std::llround(kTrialSeconds * rate));
    const Index gap_len = static_cast<Index>(std::llround(kTrialGapSeconds * rate));
    const int n_trials = spec.n_classes * spec.n_trials_per_class;
    const Index total_trial = static_cast<Index>(n_trials) * trial_len;
    const Index filler_half = static_cast<Index>(
        std::llround(kFillerFactor / 2.0 * static_cast<double>(total_trial)));

    const Index total = filler_half + total_trial +
                        static_cast<Index>(n_trials > 0 ? n_trials - 1 : 0) * gap_len +
                        filler_half;

    Recording rec;
    rec.subject_id = "synthetic-" + std::to_string(spec.seed);
    rec.sample_rate_hz = rate;
    for (Index c = 0; c < spec.n_channels; ++c) {
        rec.channels.push_back({"S0." + std::to_string(c), "S0", static_cast<int>(c)});
    }
    rec.data = Tensor<float>({spec.n_channels, total});

    Rng noise_rng = Rng(spec.seed).child("background_noise");
    for (Index c = 0; c < spec.n_channels; ++c) {
        for (Index t = 0; t < total; ++t) {
            rec.data.at2(c, t) = static_cast<float>(noise_rng.normal(0.0, spec.noise_sigma));
        }
    }

    // Class order: each class repeated trials_per_class times, seeded shuffle.
    std::vector<int> order;
    order.reserve(static_cast<std::size_t>(n_trials));
    for (int c = 0; c < spec.n_classes; ++c) {
        for (int r = 0; r < spec.n_trials_per_class; ++r) order.push_back(c);
    }
    Rng shuffle_rng = Rng(spec.seed).child("trial_order");
    for (std::size_t i = order.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(shuffle_rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
        std::swap(order[i - 1], order[j]);
    }

    std::vector<ClassTemplate> templates;
    templates.reserve(static_cast<std::size_t>(spec.n_classes));
    for (int c = 0; c < spec.n_classes; ++c) templates.push_back(class_template(c, spec.seed));

    Index cursor = filler_half;
    for (int i = 0; i < n_trials; ++i) {
        const int cls = order[static_cast<std::size_t>(i)];
        const ClassTemplate& tpl = templates[static_cast<std::size_t>(cls)];
        for (Index ch : spec.informative_channels) {
            for (Index t = 0; t < trial_len; ++t) {
                const double ts = static_cast<double>(t) / rate;
                const double v = tpl.a1 * std::sin(2.0 * M_PI * tpl.f1 * ts + tpl.phi1) +
                                 tpl.a2 * std::sin(2.0 * M_PI * tpl.f2 * ts + tpl.phi2);
                rec.data.at2(ch, cursor + t) += static_cast<float>(v);
            }
        }
        rec.trials.push_back({cursor, trial_len, cls});
        cursor += trial_len + gap_len;
    }

    for (int c = 0; c < spec.n_classes; ++c) rec.label_names.push_back("class_" + std::to_string(c));
    rec.validate();
    return rec;
}

std::vector<SegmentDescriptor> segment_pretrain(const Recording& rec) {
    const Index seg_len = static_cast<Index>(std::llround(8.0 * rec.sample_rate_hz));
    const Index hop = static_cast<Index>(std::llround(4.0 * rec.sample_rate_hz));
    if (rec.n_samples() < seg_len) {
        throw std::invalid_argument("segment_pretrain: recording shorter than 8 s");
    }
    const Index count = (rec.n_samples() - seg_len) / hop + 1;
    std::vector<SegmentDescriptor> segments;
    segments.reserve(static_cast<std::size_t>(count));
    for (Index i = 0; i < count; ++i) segments.push_back({i * hop, seg_len});
    return segments;
}

Sample fetch_pretrain_sample(const Recording& rec, const SegmentDescriptor& seg, Rng& rng) {
    const Index window = static_cast<Index>(std::llround(4.0 * rec.sample_rate_hz));
    if (seg.n_samples != 2 * window) {
        throw std::invalid_argument("fetch_pretrain_sample: segment must be 8 s long");
    }
    const Index offset = rng.uniform_int(0, window);  // inclusive, whole samples
    Sample s;
    s.source_offset = seg.offset + offset;
    const Index C = rec.n_channels();
    s.data = Tensor<float>({C, window});
    for (Index c = 0; c < C; ++c) {
        std::memcpy(s.data.data() + c * window, rec.data.data() + c * rec.n_samples() + s.source_offset,
                    static_cast<std::size_t>(window) * sizeof(float));
    }
    return s;
}

std::vector<Sample> extract_trial_samples(const Recording& rec,
                                          const std::vector<TrialAnnotation>& annotations,
                                          double window_s) {
    const Index window = static_cast<Index>(std::llround(window_s * rec.sample_rate_hz));
    std::vector<Sample> out;
    out.reserve(annotations.size());
    const Index C = rec.n_channels();
    for (const auto& tr : annotations) {
        if (tr.onset_sample < 0 || tr.onset_sample + window > rec.n_samples()) {
            throw std::invalid_argument("extract_trial_samples: trial at sample " +
                                        std::to_string(tr.onset_sample) +
                                        " does not fit the recording");
        }
        Sample s;
        s.label = tr.label;
        s.source_offset = tr.onset_sample;
        s.data = Tensor<float>({C, window});
        for (Index c = 0; c < C; ++c) {
            std::memcpy(s.data.data() + c * window,
                        rec.data.data() + c * rec.n_samples() + tr.onset_sample,
                        static_cast<std::size_t>(window) * sizeof(float));
        }
        out.push_back(std::move(s));
    }
    return out;
}

Sample shift_sample(const Sample& sample, Index signed_shift) {
    const Index C = sample.data.dim(0), T = sample.data.dim(1);
    Sample out;
    out.label = sample.label;
    out.source_offset = sample.source_offset;
    out.data = Tensor<float>({C, T});
    const Index shift = std::clamp<Index>(signed_shift, -T, T);
    for (Index c = 0; c < C; ++c) {
        for (Index t = 0; t < T; ++t) {
            const Index src = t - shift;
            out.data.at2(c, t) = (src >= 0 && src < T) ? sample.data.at2(c, src) : 0.0f;
        }
    }
    return out;
}

Sample augment_trial(const Sample& sample, double sample_rate_hz, Rng& rng) {
    const double shift_s = rng.uniform(0.0, 0.3);
    const Index shift = static_cast<Index>(std::llround(shift_s * sample_rate_hz));
    const bool right = rng.fair_bit();
    return shift_sample(sample, right ? shift : -shift);
}

void SplitSpec::validate() const {
    if (train_fraction <= 0 || val_fraction <= 0 || test_fraction <= 0) {
        throw std::invalid_argument("split: all fractions must be > 0");
    }
    if (std::abs(train_fraction + val_fraction + test_fraction - 1.0) > 1e-9) {
        throw std::invalid_argument("split: fractions must sum to 1");
    }
}

SplitResult split_dataset(const std::vector<Sample>& samples, const SplitSpec& spec) {
    spec.validate();
    if (samples.size() < 10) throw std::invalid_argument("split: need at least 10 samples");
    std::map<int, std::vector<Index>> by_class;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (!samples[i].label) throw std::invalid_argument("split: unlabeled sample");
        by_class[*samples[i].label].push_back(static_cast<Index>(i));
    }
    Rng rng = Rng(spec.seed).child("split_shuffle");
    SplitResult res;
    for (auto& [cls, members] : by_class) {
        if (members.size() < 3) {
            throw std::invalid_argument("split: class " + std::to_string(cls) + " has only " +
                                        std::to_string(members.size()) + " samples (need >= 3)");
        }
        for (std::size_t i = members.size(); i > 1; --i) {
            const auto j =
                static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
            std::swap(members[i - 1], members[j]);
        }
        const auto n = static_cast<double>(members.size());
        Index n_val = static_cast<Index>(std::llround(spec.val_fraction * n));
        Index n_test = static_cast<Index>(std::llround(spec.test_fraction * n));
        n_val = std::max<Index>(1, n_val);
        n_test = std::max<Index>(1, n_test);
        while (n_val + n_test + 1 > static_cast<Index>(members.size())) {
            if (n_val > 1) --n_val;
            else --n_test;
        }
        const Index n_train = static_cast<Index>(members.size()) - n_val - n_test;
        for (Index i = 0; i < n_train; ++i) res.train.push_back(members[static_cast<std::size_t>(i)]);
        for (Index i = 0; i < n_val; ++i)
            res.val.push_back(members[static_cast<std::size_t>(n_train + i)]);
        for (Index i = 0; i < n_test; ++i)
            res.test.push_back(members[static_cast<std::size_t>(n_train + n_val + i)]);
    }
    std::sort(res.train.begin(), res.train.end());
    std::sort(res.val.begin(), res.val.end());
    std::sort(res.test.begin(), res.test.end());
    return res;
}

}  // namespace duin
