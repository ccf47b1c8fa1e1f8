#pragma once

// CSI replay ingestion: binary/CSV replay parsing, antenna permutation and
// Butterworth low-pass filtering of per-stream time series.

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

namespace csifall {

inline constexpr int kNumRx = 3;
inline constexpr int kNumSub = 30;
inline constexpr int kNumStreams = kNumRx * kNumSub;
inline constexpr std::uint32_t kNominalRateHz = 1000;

struct CsiFrame {
    std::uint64_t timestamp_us = 0;
    std::array<std::uint8_t, kNumRx> perm{0, 1, 2};
    // Antenna-major, subcarrier-minor linear amplitudes.
    std::array<float, kNumStreams> amplitude{};

    float at(int rx, int sub) const { return amplitude[static_cast<std::size_t>(rx * kNumSub + sub)]; }
    float& at(int rx, int sub) { return amplitude[static_cast<std::size_t>(rx * kNumSub + sub)]; }
};

bool is_valid_perm(const std::array<std::uint8_t, kNumRx>& perm);
// Throws ValidationError on a bad perm or negative/non-finite amplitude.
void validate_frame(const CsiFrame& frame);

// Row i of the result is row perm[i] of the input; the result carries the identity perm.
CsiFrame apply_perm(const CsiFrame& frame);

struct ReplayHeader {
    std::array<char, 4> magic{'C', 'S', 'I', 'R'};
    std::uint16_t version = 1;
    std::uint8_t n_rx = kNumRx;
    std::uint8_t n_sub = kNumSub;
    std::uint32_t nominal_rate_hz = kNominalRateHz;
};

inline constexpr std::size_t kReplayHeaderBytes = 12;
inline constexpr std::size_t kReplayFrameBytes = 8 + 3 + 1 + 4 * kNumStreams;

// Pull parser over the v1 binary replay format. Works on any istream (file or socket).
class ReplayReader {
public:
    explicit ReplayReader(std::istream& in);

    const ReplayHeader& header() const { return header_; }
    // Next frame in stream order, or nullopt at a clean end of stream.
    std::optional<CsiFrame> next();
    std::uint64_t offset() const { return offset_; }

private:
    std::istream& in_;
    ReplayHeader header_;
    std::uint64_t offset_ = 0;
    std::uint64_t last_ts_ = 0;
    bool have_last_ = false;
};

// Reads a whole replay; CSV debug files are recognised by content (no CSIR magic).
std::vector<CsiFrame> read_replay(const std::filesystem::path& path);
std::vector<CsiFrame> read_replay_csv(std::istream& in);

void write_replay_header(std::ostream& out, const ReplayHeader& header = {});
void write_replay_frame(std::ostream& out, const CsiFrame& frame);
void write_replay(const std::filesystem::path& path, std::span<const CsiFrame> frames,
                  std::uint32_t rate_hz = kNominalRateHz);
void write_replay_csv(std::ostream& out, std::span<const CsiFrame> frames);

// Second-order section in transposed direct form II, a0 normalised to 1.
struct Biquad {
    double b0, b1, b2, a1, a2;
};

// Digital Butterworth low-pass as cascaded second-order sections (bilinear transform,
// pre-warped cutoff). Odd orders end with a first-order section (b2 = a2 = 0).
std::vector<Biquad> design_butterworth_lowpass(int order, double cutoff_hz, double rate_hz);

// Minimum series length accepted by butterworth_lowpass.
std::size_t butterworth_warmup_length(int order);

enum class FilterMode { causal, zero_phase };

// Filters one series. The state starts at the steady state of the first sample, so a
// constant series passes through unchanged.
std::vector<double> butterworth_lowpass(std::span<const double> series, int order, double cutoff_hz,
                                        double rate_hz, FilterMode mode = FilterMode::causal);

// Filters every column of a row-major T x S matrix independently, in place.
void butterworth_lowpass_columns(std::span<double> matrix, std::size_t rows, std::size_t cols, int order,
                                 double cutoff_hz, double rate_hz, FilterMode mode = FilterMode::causal);

}  // namespace csifall
