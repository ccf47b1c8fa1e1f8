#pragma once

// Window segmentation, temporal down-sampling, tensor re-layout and the two
// normalisation stages that turn raw CSI windows into model input.

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "csifall/csi_ingest.hpp"
#include "csifall/nn/tensor.hpp"

namespace csifall {

inline constexpr int kWindowFrames = 5000;
inline constexpr int kDownsampleFactor = 8;
inline constexpr int kTensorTime = kWindowFrames / kDownsampleFactor;  // 625
inline constexpr double kInstanceNormEps = 1e-8;

// ImageNet channel statistics used for channel standardisation.
inline constexpr std::array<double, 3> kChannelMean{0.485, 0.456, 0.406};
inline constexpr std::array<double, 3> kChannelStd{0.229, 0.224, 0.225};

// T x 90 matrix of PERM-corrected amplitudes, antenna-major columns.
struct CsiWindow {
    nn::Tensor data;
    std::uint64_t start_timestamp_us = 0;
    std::uint64_t end_timestamp_us = 0;

    int frames() const { return data.dim(0); }
};

enum class TensorStage : std::uint16_t { reorganized = 0, instance_normalized = 1, standardized = 2, gated = 3 };

const char* stage_name(TensorStage s);

// C x T x S tensor (3 x 625 x 30 in the canonical pipeline).
struct CsiTensor {
    nn::Tensor data;
    TensorStage stage = TensorStage::reorganized;

    int channels() const { return data.dim(0); }
    int time() const { return data.dim(1); }
    int subcarriers() const { return data.dim(2); }
};

// Builds a window from frames [first, first + count), applying each frame's PERM.
CsiWindow make_window(std::span<const CsiFrame> frames);

// Windows of `window` consecutive frames, advancing by `step`. Fewer than `window`
// frames yields nothing.
std::vector<CsiWindow> segment_stream(std::span<const CsiFrame> frames, int window = kWindowFrames,
                                      int step = kWindowFrames);

enum class DownsampleMethod { block_mean, stride };

// Row t of the result is the mean (or first sample, for stride) of rows [r*t, r*t + r).
nn::Tensor downsample(const CsiWindow& window, int r = kDownsampleFactor,
                      DownsampleMethod method = DownsampleMethod::block_mean);

// T x 90 (antenna-major columns) -> 3 x T x 30 with out[c][t][s] = in[t][30c + s].
CsiTensor reorganize(const nn::Tensor& matrix);

// Global min-max scaling into [0, 1).
CsiTensor instance_normalize(const CsiTensor& t, double eps = kInstanceNormEps);

CsiTensor channel_standardize(const CsiTensor& t);
// Exact inverse of channel_standardize (returns stage instance_normalized).
CsiTensor channel_destandardize(const CsiTensor& t);

struct LowpassOptions {
    bool enabled = false;
    int order = 4;
    double cutoff_hz = 50.0;
    double rate_hz = kNominalRateHz;
    FilterMode mode = FilterMode::causal;
};

struct PreprocessOptions {
    int window = kWindowFrames;
    int downsample = kDownsampleFactor;
    DownsampleMethod method = DownsampleMethod::block_mean;
    LowpassOptions lowpass{};
};

// Optional low-pass -> downsample -> reorganize -> instance_normalize, with the
// shape contract (window x 90 -> window/r x 90 -> 3 x window/r x 30) asserted.
CsiTensor preprocess_window(const CsiWindow& window, const PreprocessOptions& opt = {});

// Sample archive: 8-byte header (u16 C, u16 T, u16 S, u16 stage) then f32 LE data in C order.
void write_tensor_file(const std::filesystem::path& path, const CsiTensor& t);
CsiTensor read_tensor_file(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_tensor(const CsiTensor& t);
CsiTensor decode_tensor(std::span<const std::uint8_t> bytes);

void require_finite(const nn::Tensor& t, const char* what);

}  // namespace csifall
