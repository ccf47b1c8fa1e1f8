#include "csifall/csi_ingest.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <complex>
#include <cstring>
#include <fstream>
#include <istream>
#include <numbers>
#include <ostream>
#include <sstream>
#include <string>

#include "csifall/errors.hpp"

namespace csifall {

namespace {

std::uint16_t load_u16(const unsigned char* p) { return static_cast<std::uint16_t>(p[0] | (p[1] << 8)); }

std::uint32_t load_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint64_t load_u64(const unsigned char* p) {
    return static_cast<std::uint64_t>(load_u32(p)) | (static_cast<std::uint64_t>(load_u32(p + 4)) << 32);
}

void store_u16(unsigned char* p, std::uint16_t v) {
    p[0] = static_cast<unsigned char>(v);
    p[1] = static_cast<unsigned char>(v >> 8);
}

void store_u32(unsigned char* p, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) p[i] = static_cast<unsigned char>(v >> (8 * i));
}

void store_u64(unsigned char* p, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) p[i] = static_cast<unsigned char>(v >> (8 * i));
}

// Reads up to n bytes; returns the count actually read.
std::size_t read_some(std::istream& in, unsigned char* buf, std::size_t n) {
    in.read(reinterpret_cast<char*>(buf), static_cast<std::streamsize>(n));
    return static_cast<std::size_t>(in.gcount());
}

}  // namespace

bool is_valid_perm(const std::array<std::uint8_t, kNumRx>& perm) {
    std::array<bool, kNumRx> seen{};
    for (auto p : perm) {
        if (p >= kNumRx || seen[p]) return false;
        seen[p] = true;
    }
    return true;
}

void validate_frame(const CsiFrame& frame) {
    if (!is_valid_perm(frame.perm)) throw ValidationError("frame perm is not a permutation of {0,1,2}");
    for (float a : frame.amplitude) {
        if (!std::isfinite(a) || a < 0.0f) throw ValidationError("frame amplitude must be finite and >= 0");
    }
}

CsiFrame apply_perm(const CsiFrame& frame) {
    if (!is_valid_perm(frame.perm)) throw ValidationError("frame perm is not a permutation of {0,1,2}");
    CsiFrame out;
    out.timestamp_us = frame.timestamp_us;
    for (int i = 0; i < kNumRx; ++i) {
        std::copy_n(frame.amplitude.begin() + frame.perm[i] * kNumSub, kNumSub, out.amplitude.begin() + i * kNumSub);
    }
    out.perm = {0, 1, 2};
    return out;
}

ReplayReader::ReplayReader(std::istream& in) : in_(in) {
    unsigned char buf[kReplayHeaderBytes];
    const std::size_t got = read_some(in_, buf, kReplayHeaderBytes);
    if (got < 4 || std::memcmp(buf, "CSIR", 4) != 0) throw FormatError("replay: bad magic, expected \"CSIR\"");
    if (got < kReplayHeaderBytes) throw TruncationError("replay: truncated header", got);
    std::memcpy(header_.magic.data(), buf, 4);
    header_.version = load_u16(buf + 4);
    header_.n_rx = buf[6];
    header_.n_sub = buf[7];
    header_.nominal_rate_hz = load_u32(buf + 8);
    if (header_.version != 1) throw FormatError("replay: unsupported version " + std::to_string(header_.version));
    if (header_.n_rx != kNumRx || header_.n_sub != kNumSub) {
        throw FormatError("replay: v1 requires n_rx=3 and n_sub=30, got n_rx=" + std::to_string(header_.n_rx) +
                          " n_sub=" + std::to_string(header_.n_sub));
    }
    if (header_.nominal_rate_hz == 0) throw FormatError("replay: nominal rate must be positive");
    offset_ = kReplayHeaderBytes;
}

std::optional<CsiFrame> ReplayReader::next() {
    unsigned char buf[kReplayFrameBytes];
    const std::size_t got = read_some(in_, buf, kReplayFrameBytes);
    if (got == 0) return std::nullopt;
    if (got < kReplayFrameBytes) throw TruncationError("replay: truncated frame", offset_);
    CsiFrame f;
    f.timestamp_us = load_u64(buf);
    f.perm = {buf[8], buf[9], buf[10]};
    for (int i = 0; i < kNumStreams; ++i) f.amplitude[i] = std::bit_cast<float>(load_u32(buf + 12 + 4 * i));
    try {
        validate_frame(f);
    } catch (const ValidationError& e) {
        throw FormatError(std::string("replay: invalid frame at byte offset ") + std::to_string(offset_) + ": " +
                          e.what());
    }
    if (have_last_ && f.timestamp_us < last_ts_) {
        throw FormatError("replay: timestamps decrease at byte offset " + std::to_string(offset_));
    }
    last_ts_ = f.timestamp_us;
    have_last_ = true;
    offset_ += kReplayFrameBytes;
    return f;
}

std::vector<CsiFrame> read_replay_csv(std::istream& in) {
    std::vector<CsiFrame> frames;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::replace(line.begin(), line.end(), ',', ' ');
        std::istringstream ls(line);
        CsiFrame f;
        unsigned p[3];
        if (!(ls >> f.timestamp_us >> p[0] >> p[1] >> p[2])) {
            throw FormatError("replay csv: malformed line " + std::to_string(lineno));
        }
        for (int i = 0; i < 3; ++i) {
            if (p[i] > 255) throw FormatError("replay csv: perm out of range on line " + std::to_string(lineno));
            f.perm[i] = static_cast<std::uint8_t>(p[i]);
        }
        for (int i = 0; i < kNumStreams; ++i) {
            if (!(ls >> f.amplitude[i])) {
                throw FormatError("replay csv: expected 90 amplitudes on line " + std::to_string(lineno));
            }
        }
        std::string extra;
        if (ls >> extra) throw FormatError("replay csv: trailing fields on line " + std::to_string(lineno));
        try {
            validate_frame(f);
        } catch (const ValidationError& e) {
            throw FormatError("replay csv: line " + std::to_string(lineno) + ": " + e.what());
        }
        if (!frames.empty() && f.timestamp_us < frames.back().timestamp_us) {
            throw FormatError("replay csv: timestamps decrease on line " + std::to_string(lineno));
        }
        frames.push_back(f);
    }
    return frames;
}

std::vector<CsiFrame> read_replay(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open replay file " + path.string());
    char magic[4] = {};
    in.read(magic, 4);
    const bool binary = in.gcount() == 4 && std::memcmp(magic, "CSIR", 4) == 0;
    in.clear();
    in.seekg(0);
    if (!binary) {
        // Anything that does not parse as CSV text is reported as a bad binary header.
        const auto ext = path.extension().string();
        if (ext != ".csv" && ext != ".txt") throw FormatError("replay: bad magic, expected \"CSIR\"");
        return read_replay_csv(in);
    }
    ReplayReader reader(in);
    std::vector<CsiFrame> frames;
    while (auto f = reader.next()) frames.push_back(*f);
    return frames;
}

void write_replay_header(std::ostream& out, const ReplayHeader& header) {
    unsigned char buf[kReplayHeaderBytes];
    std::memcpy(buf, header.magic.data(), 4);
    store_u16(buf + 4, header.version);
    buf[6] = header.n_rx;
    buf[7] = header.n_sub;
    store_u32(buf + 8, header.nominal_rate_hz);
    out.write(reinterpret_cast<const char*>(buf), kReplayHeaderBytes);
}

void write_replay_frame(std::ostream& out, const CsiFrame& frame) {
    unsigned char buf[kReplayFrameBytes];
    store_u64(buf, frame.timestamp_us);
    buf[8] = frame.perm[0];
    buf[9] = frame.perm[1];
    buf[10] = frame.perm[2];
    buf[11] = 0;
    for (int i = 0; i < kNumStreams; ++i) store_u32(buf + 12 + 4 * i, std::bit_cast<std::uint32_t>(frame.amplitude[i]));
    out.write(reinterpret_cast<const char*>(buf), kReplayFrameBytes);
}

void write_replay(const std::filesystem::path& path, std::span<const CsiFrame> frames, std::uint32_t rate_hz) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot create replay file " + path.string());
    ReplayHeader h;
    h.nominal_rate_hz = rate_hz;
    write_replay_header(out, h);
    for (const auto& f : frames) write_replay_frame(out, f);
    if (!out) throw IoError("failed writing replay file " + path.string());
}

void write_replay_csv(std::ostream& out, std::span<const CsiFrame> frames) {
    out.precision(9);
    for (const auto& f : frames) {
        out << f.timestamp_us << ',' << int(f.perm[0]) << ',' << int(f.perm[1]) << ',' << int(f.perm[2]);
        for (float a : f.amplitude) out << ',' << a;
        out << '\n';
    }
}

std::vector<Biquad> design_butterworth_lowpass(int order, double cutoff_hz, double rate_hz) {
    if (order < 1) throw ParameterError("butterworth order must be >= 1");
    if (!(rate_hz > 0.0)) throw ParameterError("sample rate must be positive");
    if (!(cutoff_hz > 0.0) || !(cutoff_hz < rate_hz / 2.0)) {
        throw ParameterError("butterworth cutoff " + std::to_string(cutoff_hz) + " Hz must lie in (0, Nyquist=" +
                             std::to_string(rate_hz / 2.0) + " Hz)");
    }
    const double k = std::tan(std::numbers::pi * cutoff_hz / rate_hz);
    const double k2 = k * k;
    std::vector<Biquad> sos;
    for (int i = 0; i < order / 2; ++i) {
        // Conjugate analog pole pair at angle theta on the unit circle (left half plane).
        const double theta = std::numbers::pi * (2.0 * i + order + 1) / (2.0 * order);
        const double a1s = -2.0 * std::cos(theta);
        const double a0 = 1.0 + a1s * k + k2;
        sos.push_back({k2 / a0, 2.0 * k2 / a0, k2 / a0, (2.0 * k2 - 2.0) / a0, (1.0 - a1s * k + k2) / a0});
    }
    if (order % 2 == 1) {
        const double a0 = 1.0 + k;
        sos.push_back({k / a0, k / a0, 0.0, (k - 1.0) / a0, 0.0});
    }
    return sos;
}

std::size_t butterworth_warmup_length(int order) { return static_cast<std::size_t>(3 * std::max(order, 1)); }

namespace {

void filter_forward(const std::vector<Biquad>& sos, std::vector<double>& x) {
    if (x.empty()) return;
    for (const auto& s : sos) {
        // Steady state for a constant input equal to x[0].
        const double u = x[0];
        const double y_ss = u * (s.b0 + s.b1 + s.b2) / (1.0 + s.a1 + s.a2);
        double z2 = s.b2 * u - s.a2 * y_ss;
        double z1 = s.b1 * u - s.a1 * y_ss + z2;
        for (double& v : x) {
            const double in = v;
            const double y = s.b0 * in + z1;
            z1 = s.b1 * in - s.a1 * y + z2;
            z2 = s.b2 * in - s.a2 * y;
            v = y;
        }
    }
}

}  // namespace

std::vector<double> butterworth_lowpass(std::span<const double> series, int order, double cutoff_hz, double rate_hz,
                                        FilterMode mode) {
    const auto sos = design_butterworth_lowpass(order, cutoff_hz, rate_hz);
    if (series.size() < butterworth_warmup_length(order)) {
        throw ParameterError("series of length " + std::to_string(series.size()) +
                             " is shorter than the filter warm-up length " +
                             std::to_string(butterworth_warmup_length(order)));
    }
    std::vector<double> y(series.begin(), series.end());
    filter_forward(sos, y);
    if (mode == FilterMode::zero_phase) {
        std::reverse(y.begin(), y.end());
        filter_forward(sos, y);
        std::reverse(y.begin(), y.end());
    }
    return y;
}

void butterworth_lowpass_columns(std::span<double> matrix, std::size_t rows, std::size_t cols, int order,
                                 double cutoff_hz, double rate_hz, FilterMode mode) {
    if (matrix.size() != rows * cols) throw ShapeError("butterworth_lowpass_columns: size mismatch");
    std::vector<double> col(rows);
    for (std::size_t c = 0; c < cols; ++c) {
        for (std::size_t r = 0; r < rows; ++r) col[r] = matrix[r * cols + c];
        const auto y = butterworth_lowpass(col, order, cutoff_hz, rate_hz, mode);
        for (std::size_t r = 0; r < rows; ++r) matrix[r * cols + c] = y[r];
    }
}

}  // namespace csifall
