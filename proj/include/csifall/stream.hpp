#pragma once

// Live inference: overlapping ring buffer, per-window preprocessing and model
// inference, and the Normal / Wait / Alert smoother.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "csifall/model.hpp"
#include "csifall/preprocess.hpp"

namespace csifall {

class RingBuffer {
public:
    explicit RingBuffer(int capacity = kWindowFrames, int step = 500);

    // Frame must already be PERM-corrected. Returns a window when the buffer is full
    // and `step` frames have arrived since the previous emission.
    std::optional<CsiWindow> push_frame(const CsiFrame& frame);

    int capacity() const { return capacity_; }
    int step() const { return step_; }
    std::uint64_t total() const { return total_; }
    int fill() const { return fill_; }

private:
    int capacity_;
    int step_;
    std::vector<CsiFrame> slots_;
    int cursor_ = 0;
    int fill_ = 0;
    std::uint64_t total_ = 0;
};

struct SmootherConfig {
    double threshold = 0.5;
    int history_size = 3;
    // false: Alert once count >= H; true: Alert only once count > H.
    bool strict = false;

    void validate() const;
};

enum class AlertLevel { Normal, Wait, Alert };
const char* alert_name(AlertLevel s);

struct AlertState {
    AlertLevel state = AlertLevel::Normal;
    int consecutive_count = 0;
    bool operator==(const AlertState&) const = default;
};

AlertState update_alert(const AlertState& state, double p_fall, const SmootherConfig& cfg);

struct StreamConfig {
    SmootherConfig smoother{};
    int window = kWindowFrames;
    int step = 500;
    PreprocessOptions preprocess = [] {
        PreprocessOptions p;
        p.lowpass.enabled = true;
        return p;
    }();
    bool threaded = false;
    int queue_capacity = 4;

    void validate() const;
};

struct StreamRecord {
    long window_id = 0;
    std::uint64_t t_end_us = 0;
    double p_fall = 0.0;
    AlertState state{};
    double latency_ms = 0.0;
    long drops = 0;
};

std::string to_ndjson(const StreamRecord& r);

// Source returns the next raw (physical-order) frame or nullopt when exhausted.
using FrameSource = std::function<std::optional<CsiFrame>()>;
using RecordSink = std::function<void(const StreamRecord&)>;

struct StreamSummary {
    long windows = 0;
    long drops = 0;
    long frames = 0;
    double mean_latency_ms = 0.0;
};

// The per-window path shared with offline evaluation: preprocess -> standardize.
CsiTensor live_window_tensor(const CsiWindow& window, const PreprocessOptions& opt);

StreamSummary run_live(const FrameSource& source, const FallDetector& model, const StreamConfig& cfg,
                       const RecordSink& sink);

// Frame source over a binary replay stream (file or socket).
FrameSource replay_source(std::istream& in);
FrameSource vector_source(const std::vector<CsiFrame>& frames);

}  // namespace csifall
