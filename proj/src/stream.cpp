#include "csifall/stream.hpp"

#include <chrono>
#include <condition_variable>
#include <deque>
#include <exception>
#include <istream>
#include <memory>
#include <mutex>
#include <thread>

#include <json.hpp>

#include "csifall/errors.hpp"

namespace csifall {

RingBuffer::RingBuffer(int capacity, int step) : capacity_(capacity), step_(step) {
    if (capacity < 1) throw ParameterError("ring buffer capacity must be >= 1");
    if (step < 1 || step > capacity) throw ParameterError("ring buffer step must lie in [1, capacity]");
    slots_.resize(static_cast<std::size_t>(capacity));
}

std::optional<CsiWindow> RingBuffer::push_frame(const CsiFrame& frame) {
    slots_[static_cast<std::size_t>(cursor_)] = frame;
    cursor_ = (cursor_ + 1) % capacity_;
    fill_ = std::min(fill_ + 1, capacity_);
    ++total_;
    const auto cap = static_cast<std::uint64_t>(capacity_);
    if (total_ < cap || (total_ - cap) % static_cast<std::uint64_t>(step_) != 0) return std::nullopt;
    std::vector<CsiFrame> ordered;
    ordered.reserve(slots_.size());
    for (int i = 0; i < capacity_; ++i) ordered.push_back(slots_[static_cast<std::size_t>((cursor_ + i) % capacity_)]);
    return make_window(ordered);
}

void SmootherConfig::validate() const {
    if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("stream.threshold must lie in (0, 1)");
    if (history_size < 1) throw ConfigError("stream.history_size must be >= 1");
}

const char* alert_name(AlertLevel s) {
    switch (s) {
        case AlertLevel::Normal: return "Normal";
        case AlertLevel::Wait: return "Wait";
        default: return "Alert";
    }
}

AlertState update_alert(const AlertState& state, double p_fall, const SmootherConfig& cfg) {
    if (!(p_fall >= 0.0 && p_fall <= 1.0)) throw ParameterError("p_fall must lie in [0, 1]");
    AlertState next;
    next.consecutive_count = p_fall > cfg.threshold ? state.consecutive_count + 1 : 0;
    const bool alert = cfg.strict ? next.consecutive_count > cfg.history_size
                                  : next.consecutive_count >= cfg.history_size;
    if (next.consecutive_count == 0) next.state = AlertLevel::Normal;
    else next.state = alert ? AlertLevel::Alert : AlertLevel::Wait;
    return next;
}

void StreamConfig::validate() const {
    smoother.validate();
    if (window < 1) throw ConfigError("stream window must be >= 1");
    if (step < 1 || step > window) throw ConfigError("stream.step must lie in [1, window]");
    if (queue_capacity < 1) throw ConfigError("stream.queue_capacity must be >= 1");
    if (preprocess.window != window) throw ConfigError("stream window must equal preprocess.window");
}

std::string to_ndjson(const StreamRecord& r) {
    const nlohmann::json j = {{"window_id", r.window_id},
                              {"t_end_us", r.t_end_us},
                              {"p_fall", r.p_fall},
                              {"state", alert_name(r.state.state)},
                              {"latency_ms", r.latency_ms},
                              {"drops", r.drops}};
    return j.dump();
}

CsiTensor live_window_tensor(const CsiWindow& window, const PreprocessOptions& opt) {
    return channel_standardize(preprocess_window(window, opt));
}

namespace {

using Clock = std::chrono::steady_clock;

struct Pending {
    long id = 0;
    CsiWindow window;
    Clock::time_point ready;
};

class Consumer {
public:
    Consumer(const FallDetector& model, const StreamConfig& cfg, const RecordSink& sink)
        : model_(model), cfg_(cfg), sink_(sink) {}

    void process(const Pending& w, long drops) {
        const CsiTensor x = live_window_tensor(w.window, cfg_.preprocess);
        const double p = model_.forward(x).probs.p_fall;
        state_ = update_alert(state_, p, cfg_.smoother);
        StreamRecord r;
        r.window_id = w.id;
        r.t_end_us = w.window.end_timestamp_us;
        r.p_fall = p;
        r.state = state_;
        r.latency_ms = std::chrono::duration<double, std::milli>(Clock::now() - w.ready).count();
        r.drops = drops;
        latency_sum_ += r.latency_ms;
        ++windows_;
        sink_(r);
    }

    long windows() const { return windows_; }
    double mean_latency() const { return windows_ ? latency_sum_ / static_cast<double>(windows_) : 0.0; }

private:
    const FallDetector& model_;
    const StreamConfig& cfg_;
    const RecordSink& sink_;
    AlertState state_{};
    long windows_ = 0;
    double latency_sum_ = 0.0;
};

StreamSummary run_inline(const FrameSource& source, Consumer& consumer, const StreamConfig& cfg) {
    RingBuffer buf(cfg.window, cfg.step);
    StreamSummary s;
    long next_id = 0;
    while (auto frame = source()) {
        ++s.frames;
        if (auto w = buf.push_frame(apply_perm(*frame))) consumer.process({next_id++, std::move(*w), Clock::now()}, 0);
    }
    s.windows = consumer.windows();
    s.mean_latency_ms = consumer.mean_latency();
    return s;
}

StreamSummary run_threaded(const FrameSource& source, Consumer& consumer, const StreamConfig& cfg) {
    std::mutex mu;
    std::condition_variable cv;
    std::deque<Pending> queue;
    bool done = false;
    long drops = 0;
    long frames = 0;
    std::exception_ptr producer_error;

    std::thread producer([&] {
        try {
            RingBuffer buf(cfg.window, cfg.step);
            long next_id = 0;
            while (auto frame = source()) {
                ++frames;
                auto w = buf.push_frame(apply_perm(*frame));
                if (!w) continue;
                std::lock_guard<std::mutex> lock(mu);
                if (static_cast<int>(queue.size()) >= cfg.queue_capacity) {
                    queue.pop_front();
                    ++drops;
                }
                queue.push_back({next_id++, std::move(*w), Clock::now()});
                cv.notify_one();
            }
        } catch (...) {
            producer_error = std::current_exception();
        }
        std::lock_guard<std::mutex> lock(mu);
        done = true;
        cv.notify_one();
    });

    try {
        for (;;) {
            Pending item;
            long drops_now;
            {
                std::unique_lock<std::mutex> lock(mu);
                cv.wait(lock, [&] { return done || !queue.empty(); });
                if (queue.empty()) break;
                item = std::move(queue.front());
                queue.pop_front();
                drops_now = drops;
            }
            consumer.process(item, drops_now);
        }
    } catch (...) {
        producer.join();
        throw;
    }
    producer.join();
    if (producer_error) std::rethrow_exception(producer_error);
    StreamSummary s;
    s.frames = frames;
    s.drops = drops;
    s.windows = consumer.windows();
    s.mean_latency_ms = consumer.mean_latency();
    return s;
}

}  // namespace

StreamSummary run_live(const FrameSource& source, const FallDetector& model, const StreamConfig& cfg,
                       const RecordSink& sink) {
    cfg.validate();
    Consumer consumer(model, cfg, sink);
    return cfg.threaded ? run_threaded(source, consumer, cfg) : run_inline(source, consumer, cfg);
}

FrameSource replay_source(std::istream& in) {
    auto reader = std::make_shared<ReplayReader>(in);
    return [reader]() { return reader->next(); };
}

FrameSource vector_source(const std::vector<CsiFrame>& frames) {
    auto pos = std::make_shared<std::size_t>(0);
    return [&frames, pos]() -> std::optional<CsiFrame> {
        if (*pos >= frames.size()) return std::nullopt;
        return frames[(*pos)++];
    };
}

}  // namespace csifall
