#include "csifall/preprocess.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>

#include "csifall/errors.hpp"

namespace csifall {

const char* stage_name(TensorStage s) {
    switch (s) {
        case TensorStage::reorganized: return "reorganized";
        case TensorStage::instance_normalized: return "instance_normalized";
        case TensorStage::standardized: return "standardized";
        case TensorStage::gated: return "gated";
    }
    return "unknown";
}

void require_finite(const nn::Tensor& t, const char* what) {
    for (double v : t.values()) {
        if (!std::isfinite(v)) throw ValidationError(std::string(what) + ": non-finite value");
    }
}

CsiWindow make_window(std::span<const CsiFrame> frames) {
    if (frames.empty()) throw ParameterError("make_window: no frames");
    CsiWindow w;
    w.data = nn::Tensor({static_cast<int>(frames.size()), kNumStreams});
    for (std::size_t r = 0; r < frames.size(); ++r) {
        const CsiFrame f = apply_perm(frames[r]);
        std::copy(f.amplitude.begin(), f.amplitude.end(), w.data.data() + r * kNumStreams);
    }
    w.start_timestamp_us = frames.front().timestamp_us;
    w.end_timestamp_us = frames.back().timestamp_us;
    return w;
}

std::vector<CsiWindow> segment_stream(std::span<const CsiFrame> frames, int window, int step) {
    if (window < 1) throw ParameterError("segment_stream: window must be >= 1");
    if (step < 1 || step > window) throw ParameterError("segment_stream: step must lie in [1, window]");
    std::vector<CsiWindow> out;
    for (std::size_t start = 0; start + static_cast<std::size_t>(window) <= frames.size(); start += step) {
        out.push_back(make_window(frames.subspan(start, static_cast<std::size_t>(window))));
    }
    return out;
}

nn::Tensor downsample(const CsiWindow& window, int r, DownsampleMethod method) {
    const int T = window.data.dim(0);
    const int S = window.data.dim(1);
    if (r < 1 || T % r != 0) {
        throw ParameterError("downsample: factor " + std::to_string(r) + " does not divide window length " +
                             std::to_string(T));
    }
    const int To = T / r;
    nn::Tensor out({To, S});
    for (int t = 0; t < To; ++t) {
        for (int s = 0; s < S; ++s) {
            if (method == DownsampleMethod::stride) {
                out.at(t, s) = window.data.at(t * r, s);
                continue;
            }
            double acc = 0.0;
            for (int k = 0; k < r; ++k) acc += window.data.at(t * r + k, s);
            out.at(t, s) = acc / r;
        }
    }
    return out;
}

CsiTensor reorganize(const nn::Tensor& matrix) {
    if (matrix.ndim() != 2 || matrix.dim(1) != kNumStreams) {
        throw ShapeError("reorganize: expected T x 90 matrix, got " + nn::shape_str(matrix.shape()));
    }
    const int T = matrix.dim(0);
    CsiTensor out{nn::Tensor({kNumRx, T, kNumSub}), TensorStage::reorganized};
    for (int c = 0; c < kNumRx; ++c)
        for (int t = 0; t < T; ++t)
            for (int s = 0; s < kNumSub; ++s) out.data.at(c, t, s) = matrix.at(t, kNumSub * c + s);
    return out;
}

CsiTensor instance_normalize(const CsiTensor& t, double eps) {
    if (t.stage != TensorStage::reorganized) {
        throw StateError(std::string("instance_normalize expects a reorganized tensor, got ") + stage_name(t.stage));
    }
    require_finite(t.data, "instance_normalize");
    const auto [lo_it, hi_it] = std::minmax_element(t.data.values().begin(), t.data.values().end());
    const double lo = *lo_it;
    const double denom = *hi_it - lo + eps;
    CsiTensor out{t.data, TensorStage::instance_normalized};
    for (double& v : out.data.values()) v = (v - lo) / denom;
    return out;
}

CsiTensor channel_standardize(const CsiTensor& t) {
    if (t.stage != TensorStage::instance_normalized) {
        throw StateError(std::string("channel_standardize expects an instance-normalized tensor, got ") +
                         stage_name(t.stage));
    }
    if (t.channels() != 3) throw ShapeError("channel_standardize expects 3 channels");
    CsiTensor out{t.data, TensorStage::standardized};
    const std::size_t plane = static_cast<std::size_t>(t.time()) * t.subcarriers();
    for (int c = 0; c < 3; ++c) {
        double* p = out.data.data() + c * plane;
        for (std::size_t i = 0; i < plane; ++i) p[i] = (p[i] - kChannelMean[c]) / kChannelStd[c];
    }
    return out;
}

CsiTensor channel_destandardize(const CsiTensor& t) {
    if (t.stage != TensorStage::standardized) throw StateError("channel_destandardize expects a standardized tensor");
    CsiTensor out{t.data, TensorStage::instance_normalized};
    const std::size_t plane = static_cast<std::size_t>(t.time()) * t.subcarriers();
    for (int c = 0; c < 3; ++c) {
        double* p = out.data.data() + c * plane;
        for (std::size_t i = 0; i < plane; ++i) p[i] = p[i] * kChannelStd[c] + kChannelMean[c];
    }
    return out;
}

CsiTensor preprocess_window(const CsiWindow& window, const PreprocessOptions& opt) {
    if (window.data.ndim() != 2 || window.data.dim(0) != opt.window || window.data.dim(1) != kNumStreams) {
        throw ShapeError("preprocess: expected " + std::to_string(opt.window) + "x90 window, got " +
                         nn::shape_str(window.data.shape()));
    }
    require_finite(window.data, "preprocess");
    const CsiWindow* src = &window;
    CsiWindow filtered;
    if (opt.lowpass.enabled) {
        filtered = window;
        butterworth_lowpass_columns(filtered.data.values(), static_cast<std::size_t>(opt.window), kNumStreams,
                                    opt.lowpass.order, opt.lowpass.cutoff_hz, opt.lowpass.rate_hz, opt.lowpass.mode);
        src = &filtered;
    }
    const nn::Tensor ds = downsample(*src, opt.downsample, opt.method);
    if (ds.dim(0) != opt.window / opt.downsample || ds.dim(1) != kNumStreams) {
        throw ShapeError("preprocess: downsample produced " + nn::shape_str(ds.shape()));
    }
    CsiTensor re = reorganize(ds);
    if (re.data.shape() != nn::Shape{kNumRx, opt.window / opt.downsample, kNumSub}) {
        throw ShapeError("preprocess: reorganize produced " + nn::shape_str(re.data.shape()));
    }
    return instance_normalize(re);
}

std::vector<std::uint8_t> encode_tensor(const CsiTensor& t) {
    if (t.data.ndim() != 3) throw ShapeError("encode_tensor expects a 3-D tensor");
    std::vector<std::uint8_t> out(8 + 4 * t.data.numel());
    const std::uint16_t head[4] = {static_cast<std::uint16_t>(t.channels()), static_cast<std::uint16_t>(t.time()),
                                   static_cast<std::uint16_t>(t.subcarriers()), static_cast<std::uint16_t>(t.stage)};
    for (int i = 0; i < 4; ++i) {
        out[2 * i] = static_cast<std::uint8_t>(head[i]);
        out[2 * i + 1] = static_cast<std::uint8_t>(head[i] >> 8);
    }
    for (std::size_t i = 0; i < t.data.numel(); ++i) {
        const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(t.data[i]));
        for (int b = 0; b < 4; ++b) out[8 + 4 * i + b] = static_cast<std::uint8_t>(bits >> (8 * b));
    }
    return out;
}

CsiTensor decode_tensor(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 8) throw TruncationError("tensor file: truncated header", bytes.size());
    std::uint16_t head[4];
    for (int i = 0; i < 4; ++i) head[i] = static_cast<std::uint16_t>(bytes[2 * i] | (bytes[2 * i + 1] << 8));
    if (head[3] > static_cast<std::uint16_t>(TensorStage::gated)) throw FormatError("tensor file: unknown stage");
    const std::size_t n = static_cast<std::size_t>(head[0]) * head[1] * head[2];
    if (bytes.size() != 8 + 4 * n) {
        throw TruncationError("tensor file: expected " + std::to_string(8 + 4 * n) + " bytes", bytes.size());
    }
    CsiTensor t{nn::Tensor({head[0], head[1], head[2]}), static_cast<TensorStage>(head[3])};
    for (std::size_t i = 0; i < n; ++i) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(bytes[8 + 4 * i + b]) << (8 * b);
        t.data[i] = std::bit_cast<float>(bits);
    }
    return t;
}

void write_tensor_file(const std::filesystem::path& path, const CsiTensor& t) {
    const auto bytes = encode_tensor(t);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot create tensor file " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing tensor file " + path.string());
}

CsiTensor read_tensor_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open tensor file " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return decode_tensor(bytes);
    } catch (const Error& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

}  // namespace csifall
