#include "duin/preprocess.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <complex>
#include <map>
#include <numeric>
#include <stdexcept>

namespace duin {

void FilterSpec::validate(double sample_rate_hz) const {
    if (!(low_hz > 0.0 && low_hz < high_hz && high_hz < sample_rate_hz / 2.0)) {
        throw std::invalid_argument("filter spec: need 0 < low < high < Nyquist, got [" +
                                    std::to_string(low_hz) + ", " + std::to_string(high_hz) +
                                    ") at rate " + std::to_string(sample_rate_hz));
    }
    if (!(notch_hz > low_hz && notch_hz < high_hz)) {
        throw std::invalid_argument("filter spec: notch_hz must lie inside the pass band");
    }
    if (notch_q <= 0.0) throw std::invalid_argument("filter spec: notch_q must be > 0");
    if (target_rate_hz <= 0.0) throw std::invalid_argument("filter spec: target rate must be > 0");
}

namespace dsp {

namespace {

using cplx = std::complex<double>;

// Analog Butterworth prototype -> band transform -> bilinear, the standard
// zpk route. Digital zeros land at +1 and -1, one of each per section.
struct Zpk {
    std::vector<cplx> zeros;
    std::vector<cplx> poles;
    double gain = 1.0;
};

Zpk butter_prototype(int order) {
    Zpk zpk;
    for (int i = 0; i < order; ++i) {
        const double m = static_cast<double>(-order + 1 + 2 * i);
        const double theta = M_PI * m / (2.0 * order);
        zpk.poles.push_back(-std::exp(cplx(0.0, theta)));
    }
    zpk.gain = 1.0;
    return zpk;
}

Zpk lowpass_to_bandpass(const Zpk& lp, double wo, double bw) {
    Zpk out;
    for (const cplx& p : lp.poles) {
        const cplx scaled = p * (bw / 2.0);
        const cplx root = std::sqrt(scaled * scaled - wo * wo);
        out.poles.push_back(scaled + root);
        out.poles.push_back(scaled - root);
    }
    const int degree = static_cast<int>(lp.poles.size()) - static_cast<int>(lp.zeros.size());
    for (int i = 0; i < degree; ++i) out.zeros.push_back(cplx(0.0, 0.0));
    out.gain = lp.gain * std::pow(bw, degree);
    return out;
}

Zpk bilinear(const Zpk& analog, double fs) {
    const double fs2 = 2.0 * fs;
    Zpk out;
    cplx num(1.0, 0.0), den(1.0, 0.0);
    for (const cplx& z : analog.zeros) {
        out.zeros.push_back((fs2 + z) / (fs2 - z));
        num *= (fs2 - z);
    }
    for (const cplx& p : analog.poles) {
        out.poles.push_back((fs2 + p) / (fs2 - p));
        den *= (fs2 - p);
    }
    const int degree =
        static_cast<int>(analog.poles.size()) - static_cast<int>(analog.zeros.size());
    for (int i = 0; i < degree; ++i) out.zeros.push_back(cplx(-1.0, 0.0));
    out.gain = analog.gain * (num / den).real();
    return out;
}

}  // namespace

std::vector<Biquad> butter_bandpass_sos(int order, double low_hz, double high_hz,
                                        double rate_hz) {
    const double nyq = rate_hz / 2.0;
    if (!(low_hz > 0.0 && low_hz < high_hz && high_hz < nyq)) {
        throw std::invalid_argument("bandpass: band [" + std::to_string(low_hz) + ", " +
                                    std::to_string(high_hz) + "] outside (0, " +
                                    std::to_string(nyq) + ")");
    }
    const double fs = 2.0;
    const double w1 = 4.0 * std::tan(M_PI * (low_hz / nyq) / fs);
    const double w2 = 4.0 * std::tan(M_PI * (high_hz / nyq) / fs);
    const double wo = std::sqrt(w1 * w2);
    const double bw = w2 - w1;

    Zpk digital = bilinear(lowpass_to_bandpass(butter_prototype(order), wo, bw), fs);

    // Conjugate pole pairs sorted closest-to-unit-circle first; each section
    // carries one zero at +1 and one at -1, i.e. numerator (1, 0, -1).
    std::vector<cplx> upper;
    for (const cplx& p : digital.poles) {
        if (p.imag() > 0.0) upper.push_back(p);
    }
    if (upper.size() != static_cast<std::size_t>(order)) {
        throw std::runtime_error("bandpass: unexpected pole layout");
    }
    std::sort(upper.begin(), upper.end(),
              [](const cplx& a, const cplx& b) { return std::abs(a) > std::abs(b); });

    const double section_gain = std::pow(digital.gain, 1.0 / static_cast<double>(order));
    std::vector<Biquad> sos;
    for (const cplx& p : upper) {
        Biquad s;
        s.b0 = section_gain;
        s.b1 = 0.0;
        s.b2 = -section_gain;
        s.a1 = -2.0 * p.real();
        s.a2 = std::norm(p);
        sos.push_back(s);
    }
    return sos;
}

Biquad notch_biquad(double notch_hz, double q, double rate_hz) {
    if (notch_hz >= rate_hz / 2.0) {
        throw std::invalid_argument("notch: frequency at or above Nyquist");
    }
    const double w0 = 2.0 * M_PI * notch_hz / rate_hz;
    const double alpha = std::sin(w0) / (2.0 * q);
    const double a0 = 1.0 + alpha;
    Biquad s;
    s.b0 = 1.0 / a0;
    s.b1 = -2.0 * std::cos(w0) / a0;
    s.b2 = 1.0 / a0;
    s.a1 = -2.0 * std::cos(w0) / a0;
    s.a2 = (1.0 - alpha) / a0;
    return s;
}

namespace {

// Transposed direct form II, one section, in place.
void sosfilt_section(const Biquad& s, std::vector<double>& x, double zi1, double zi2) {
    double z1 = zi1, z2 = zi2;
    for (double& v : x) {
        const double y = s.b0 * v + z1;
        z1 = s.b1 * v - s.a1 * y + z2;
        z2 = s.b2 * v - s.a2 * y;
        v = y;
    }
}

// Steady-state filter state for a unit step input.
void steady_state_zi(const Biquad& s, double& zi1, double& zi2) {
    Eigen::Matrix2d m;
    m << 1.0 + s.a1, -1.0, s.a2, 1.0;
    Eigen::Vector2d rhs(s.b1 - s.a1 * s.b0, s.b2 - s.a2 * s.b0);
    Eigen::Vector2d zi = m.colPivHouseholderQr().solve(rhs);
    zi1 = zi[0];
    zi2 = zi[1];
}

void filt_cascade(const std::vector<Biquad>& sos, std::vector<double>& x) {
    for (const Biquad& s : sos) {
        double zi1, zi2;
        steady_state_zi(s, zi1, zi2);
        sosfilt_section(s, x, zi1 * x.front(), zi2 * x.front());
    }
}

}  // namespace

std::vector<double> filtfilt(const std::vector<Biquad>& sos, const std::vector<double>& x) {
    const std::size_t n = x.size();
    if (n < 2) return x;
    const std::size_t padlen =
        std::min(n - 1, std::max<std::size_t>(81, 3 * (2 * sos.size() + 1)));

    std::vector<double> ext;
    ext.reserve(n + 2 * padlen);
    for (std::size_t i = padlen; i >= 1; --i) ext.push_back(2.0 * x[0] - x[i]);
    ext.insert(ext.end(), x.begin(), x.end());
    for (std::size_t i = 1; i <= padlen; ++i) ext.push_back(2.0 * x[n - 1] - x[n - 1 - i]);

    filt_cascade(sos, ext);
    std::reverse(ext.begin(), ext.end());
    filt_cascade(sos, ext);
    std::reverse(ext.begin(), ext.end());

    return std::vector<double>(ext.begin() + static_cast<long>(padlen),
                               ext.begin() + static_cast<long>(padlen + n));
}

std::pair<long, long> rational_rate_ratio(double source_hz, double target_hz, long max_den) {
    for (long den = 1; den <= max_den; ++den) {
        const double num_exact = target_hz * static_cast<double>(den) / source_hz;
        const long num = std::lround(num_exact);
        if (num >= 1 && std::abs(num_exact - static_cast<double>(num)) < 1e-8) {
            const long g = std::gcd(num, den);
            return {num / g, den / g};
        }
    }
    throw std::invalid_argument("resample: ratio " + std::to_string(target_hz) + "/" +
                                std::to_string(source_hz) +
                                " has no rational form with denominator <= " +
                                std::to_string(max_den));
}

namespace {

double bessel_i0(double x) {
    double sum = 1.0, term = 1.0;
    const double q = x * x / 4.0;
    for (int k = 1; k < 64; ++k) {
        term *= q / (static_cast<double>(k) * k);
        sum += term;
        if (term < 1e-16 * sum) break;
    }
    return sum;
}

// Kaiser-windowed sinc prototype, beta 8, 64 taps per phase, unity DC gain
// before the upsampling factor is applied.
std::vector<double> resample_kernel(long up, long down) {
    const long scale = std::max(up, down);
    const long half = 32 * scale;
    const double fc = 1.0 / static_cast<double>(scale);  // fraction of upsampled Nyquist
    const double beta = 8.0;
    std::vector<double> h(static_cast<std::size_t>(2 * half + 1));
    const double i0b = bessel_i0(beta);
    for (long i = -half; i <= half; ++i) {
        const double t = static_cast<double>(i);
        const double sinc = (i == 0) ? 1.0 : std::sin(M_PI * fc * t) / (M_PI * fc * t);
        const double frac = t / static_cast<double>(half);
        const double w = bessel_i0(beta * std::sqrt(std::max(0.0, 1.0 - frac * frac))) / i0b;
        h[static_cast<std::size_t>(i + half)] = fc * sinc * w;
    }
    return h;
}

}  // namespace

std::vector<double> resample_channel(const std::vector<double>& x, long up, long down) {
    if (up == down) return x;
    const long n = static_cast<long>(x.size());
    const std::vector<double> h = resample_kernel(up, down);
    const long half = (static_cast<long>(h.size()) - 1) / 2;
    const long n_out = std::lround(static_cast<double>(n) * up / down);

    auto sample_ext = [&](long i) -> double {
        // Odd reflection about both ends.
        if (i >= 0 && i < n) return x[static_cast<std::size_t>(i)];
        if (i < 0) {
            const long k = std::min(-i, n - 1);
            return 2.0 * x[0] - x[static_cast<std::size_t>(k)];
        }
        const long k = std::min(i - (n - 1), n - 1);
        return 2.0 * x[static_cast<std::size_t>(n - 1)] - x[static_cast<std::size_t>(n - 1 - k)];
    };

    std::vector<double> y(static_cast<std::size_t>(n_out));
    for (long m = 0; m < n_out; ++m) {
        const long u0 = m * down + half;  // center tap in the upsampled domain
        long j = ((u0 % up) + up) % up;   // first tap index hitting a real sample
        double acc = 0.0;
        for (; j < static_cast<long>(h.size()); j += up) {
            const long u = u0 - j;
            acc += h[static_cast<std::size_t>(j)] * sample_ext(u / up);
        }
        y[static_cast<std::size_t>(m)] = acc * static_cast<double>(up);
    }
    return y;
}

}  // namespace dsp

namespace {

std::vector<double> channel_vector(const Recording& rec, Index c) {
    std::vector<double> x(static_cast<std::size_t>(rec.n_samples()));
    for (Index t = 0; t < rec.n_samples(); ++t) {
        x[static_cast<std::size_t>(t)] = rec.data.at2(c, t);
    }
    return x;
}

Recording filtered_copy(const Recording& rec, const std::vector<dsp::Biquad>& sos) {
    Recording out = rec;
    for (Index c = 0; c < rec.n_channels(); ++c) {
        const std::vector<double> y = dsp::filtfilt(sos, channel_vector(rec, c));
        for (Index t = 0; t < rec.n_samples(); ++t) {
            out.data.at2(c, t) = static_cast<float>(y[static_cast<std::size_t>(t)]);
        }
    }
    return out;
}

}  // namespace

Recording bandpass(const Recording& rec, double low_hz, double high_hz) {
    return filtered_copy(rec, dsp::butter_bandpass_sos(4, low_hz, high_hz, rec.sample_rate_hz));
}

Recording notch(const Recording& rec, double notch_hz, double q) {
    return filtered_copy(rec, {dsp::notch_biquad(notch_hz, q, rec.sample_rate_hz)});
}

Recording resample(const Recording& rec, double target_rate_hz) {
    const auto [up, down] = dsp::rational_rate_ratio(rec.sample_rate_hz, target_rate_hz);
    if (up == down) return rec;
    Recording out;
    out.subject_id = rec.subject_id;
    out.sample_rate_hz = target_rate_hz;
    out.channels = rec.channels;
    out.label_names = rec.label_names;
    const Index n_out = std::lround(static_cast<double>(rec.n_samples()) * up /
                                    static_cast<double>(down));
    out.data = Tensor<float>({rec.n_channels(), n_out});
    for (Index c = 0; c < rec.n_channels(); ++c) {
        const std::vector<double> y = dsp::resample_channel(channel_vector(rec, c), up, down);
        for (Index t = 0; t < n_out; ++t) {
            out.data.at2(c, t) = static_cast<float>(y[static_cast<std::size_t>(t)]);
        }
    }
    const double ratio = static_cast<double>(up) / static_cast<double>(down);
    for (const auto& tr : rec.trials) {
        TrialAnnotation scaled = tr;
        scaled.onset_sample = static_cast<Index>(std::llround(tr.onset_sample * ratio));
        scaled.n_samples = static_cast<Index>(std::llround(tr.n_samples * ratio));
        scaled.n_samples = std::min(scaled.n_samples, n_out - scaled.onset_sample);
        out.trials.push_back(scaled);
    }
    return out;
}

Recording bipolar_reref(const Recording& rec) {
    // Electrodes in first-appearance order; contacts ascending within each.
    std::vector<std::string> electrode_order;
    std::map<std::string, std::map<int, Index>> rows;
    for (Index c = 0; c < rec.n_channels(); ++c) {
        const auto& ch = rec.channels[static_cast<std::size_t>(c)];
        if (!rows.count(ch.electrode_id)) electrode_order.push_back(ch.electrode_id);
        rows[ch.electrode_id][ch.contact_index] = c;
    }
    for (const auto& eid : electrode_order) {
        if (rows[eid].size() < 2) {
            throw std::invalid_argument("bipolar_reref: electrode " + eid +
                                        " has a single contact");
        }
    }

    Recording out;
    out.subject_id = rec.subject_id;
    out.sample_rate_hz = rec.sample_rate_hz;
    out.trials = rec.trials;
    out.label_names = rec.label_names;
    Index n_out = 0;
    for (const auto& eid : electrode_order) n_out += static_cast<Index>(rows[eid].size()) - 1;
    out.data = Tensor<float>({n_out, rec.n_samples()});

    Index dst = 0;
    for (const auto& eid : electrode_order) {
        const auto& contacts = rows[eid];
        auto it = contacts.begin();
        auto next = std::next(it);
        for (; next != contacts.end(); ++it, ++next) {
            const Index hi = next->second, lo = it->second;
            for (Index t = 0; t < rec.n_samples(); ++t) {
                out.data.at2(dst, t) = rec.data.at2(hi, t) - rec.data.at2(lo, t);
            }
            out.channels.push_back({eid + "." + std::to_string(next->first) + "-" + eid + "." +
                                        std::to_string(it->first),
                                    eid, it->first});
            ++dst;
        }
    }
    return out;
}

Recording zscore(const Recording& rec) {
    Recording out = rec;
    const Index T = rec.n_samples();
    for (Index c = 0; c < rec.n_channels(); ++c) {
        double sum = 0.0, sum2 = 0.0;
        for (Index t = 0; t < T; ++t) sum += rec.data.at2(c, t);
        const double mu = sum / static_cast<double>(T);
        for (Index t = 0; t < T; ++t) {
            const double d = rec.data.at2(c, t) - mu;
            sum2 += d * d;
        }
        const double var = sum2 / static_cast<double>(T);
        if (var <= 0.0) {
            throw std::invalid_argument("zscore: channel '" +
                                        rec.channels[static_cast<std::size_t>(c)].name +
                                        "' has zero variance");
        }
        const double inv_std = 1.0 / std::sqrt(var);
        for (Index t = 0; t < T; ++t) {
            out.data.at2(c, t) = static_cast<float>((rec.data.at2(c, t) - mu) * inv_std);
        }
    }
    return out;
}

Recording select_channels(const Recording& rec, const std::vector<Index>& keep) {
    if (keep.empty()) return rec;
    Recording out;
    out.subject_id = rec.subject_id;
    out.sample_rate_hz = rec.sample_rate_hz;
    out.trials = rec.trials;
    out.label_names = rec.label_names;
    out.data = Tensor<float>({static_cast<Index>(keep.size()), rec.n_samples()});
    for (std::size_t i = 0; i < keep.size(); ++i) {
        const Index c = keep[i];
        if (c < 0 || c >= rec.n_channels()) {
            throw std::invalid_argument("select_channels: index " + std::to_string(c) +
                                        " outside [0, " + std::to_string(rec.n_channels()) + ")");
        }
        out.data.mat().row(static_cast<Index>(i)) = rec.data.mat().row(c);
        // Renumber contacts so the subset still satisfies the contiguity
        // invariant; the original identity stays in the name.
        ChannelMeta meta = rec.channels[static_cast<std::size_t>(c)];
        meta.electrode_id = "sel";
        meta.contact_index = static_cast<int>(i);
        out.channels.push_back(meta);
    }
    return out;
}

Recording run_pipeline(const Recording& rec, const FilterSpec& spec) {
    spec.validate(rec.sample_rate_hz);
    Recording r = bandpass(rec, spec.low_hz, spec.high_hz);
    r = notch(r, spec.notch_hz, spec.notch_q);
    r = resample(r, spec.target_rate_hz);
    if (spec.bipolar) r = bipolar_reref(r);
    r = zscore(r);
    if (!spec.keep_channels.empty()) r = select_channels(r, spec.keep_channels);
    return r;
}

}  // namespace duin
