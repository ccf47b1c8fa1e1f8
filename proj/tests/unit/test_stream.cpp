#include <doctest.h>

#include <chrono>
#include <istream>
#include <json.hpp>
#include <sstream>
#include <thread>

#include "csifall/errors.hpp"
#include "csifall/net.hpp"
#include "csifall/stream.hpp"
#include "csifall/synthcsi.hpp"
#include "test_util.hpp"

using namespace csifall;

namespace {

std::vector<CsiFrame> numbered_frames(int n) {
    std::vector<CsiFrame> v(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        v[i].timestamp_us = static_cast<std::uint64_t>(i) * 1000;
        v[i].amplitude.fill(static_cast<float>(i % 1000));
    }
    return v;
}

// Contract oracle: count consecutive supra-threshold values, derive the level from it.
AlertLevel expected_level(int count, int h, bool strict) {
    if (count == 0) return AlertLevel::Normal;
    return (strict ? count > h : count >= h) ? AlertLevel::Alert : AlertLevel::Wait;
}

const Recording& fall_recording() {
    static const Recording r = [] {
        const SynthSpec spec = make_synth_spec(1, 0, 1, 1, 21);
        return generate_recording(EventKind::fall_front, spec.environments[0], spec, 10.0, 5.0, 4);
    }();
    return r;
}

std::vector<StreamRecord> run_records(const std::vector<CsiFrame>& frames, const FallDetector& m, StreamConfig cfg,
                                      StreamSummary* summary = nullptr) {
    std::vector<StreamRecord> out;
    const StreamSummary s = run_live(vector_source(frames), m, cfg, [&](const StreamRecord& r) { out.push_back(r); });
    if (summary) *summary = s;
    return out;
}

}  // namespace

TEST_SUITE("stream") {
    TEST_CASE("ring buffer emits at capacity and every step after") {
        RingBuffer buf(5000, 500);
        const auto frames = numbered_frames(12000);
        std::vector<std::uint64_t> at;
        for (const auto& f : frames) {
            if (auto w = buf.push_frame(f)) {
                at.push_back(buf.total());
                CHECK(w->frames() == 5000);
                CHECK(w->start_timestamp_us == (buf.total() - 5000) * 1000);
                CHECK(w->end_timestamp_us == (buf.total() - 1) * 1000);
                CHECK(w->data.at(4999, 0) == frames[buf.total() - 1].amplitude[0]);
            }
        }
        REQUIRE(at.size() == 15);
        for (std::size_t k = 0; k < at.size(); ++k) CHECK(at[k] == 5000 + 500 * k);

        RingBuffer b2(5000, 500);
        int n = 0;
        for (const auto& f : numbered_frames(10000)) n += b2.push_frame(f).has_value();
        CHECK(n == 11);
        CHECK_THROWS_AS(RingBuffer(10, 0), ParameterError);
        CHECK_THROWS_AS(RingBuffer(10, 11), ParameterError);
    }

    TEST_CASE("alert traces match the contract for every short sequence") {
        for (bool strict : {false, true})
            for (int h = 1; h <= 3; ++h) {
                SmootherConfig cfg;
                cfg.history_size = h;
                cfg.strict = strict;
                for (int len = 1; len <= 6; ++len)
                    for (int bits = 0; bits < (1 << len); ++bits) {
                        AlertState s;
                        int count = 0;
                        for (int i = 0; i < len; ++i) {
                            const bool supra = (bits >> i) & 1;
                            s = update_alert(s, supra ? 0.9 : 0.1, cfg);
                            count = supra ? count + 1 : 0;
                            CHECK(s.consecutive_count == count);
                            CHECK(s.state == expected_level(count, h, strict));
                        }
                    }
            }
        SmootherConfig h3;
        std::vector<AlertLevel> trace{AlertLevel::Normal};
        AlertState s;
        for (double p : {0.6, 0.7, 0.8}) {
            s = update_alert(s, p, h3);
            trace.push_back(s.state);
        }
        CHECK(trace == std::vector<AlertLevel>{AlertLevel::Normal, AlertLevel::Wait, AlertLevel::Wait, AlertLevel::Alert});
        s = update_alert(update_alert({}, 0.6, h3), 0.3, h3);
        CHECK(s.state == AlertLevel::Normal);
        // Exactly at the threshold is not an alarm.
        CHECK(update_alert({}, 0.5, h3).state == AlertLevel::Normal);
        CHECK_THROWS_AS(update_alert({}, 1.5, h3), ParameterError);
        CHECK_THROWS_AS(update_alert({}, std::nan(""), h3), ParameterError);
    }

    TEST_CASE("live windows are bit-identical to the offline segmentation") {
        const Recording& rec = fall_recording();
        std::vector<CsiFrame> logical;
        for (const auto& f : rec.frames) logical.push_back(apply_perm(f));
        const StreamConfig cfg;
        const auto offline = segment_stream(logical, 5000, 500);
        RingBuffer buf(5000, 500);
        std::size_t k = 0;
        for (const auto& f : rec.frames) {
            if (auto w = buf.push_frame(apply_perm(f))) {
                REQUIRE(k < offline.size());
                const CsiTensor live = live_window_tensor(*w, cfg.preprocess);
                const CsiTensor off = channel_standardize(preprocess_window(offline[k], cfg.preprocess));
                CHECK(nn::max_abs_diff(live.data, off.data) == 0.0);
                ++k;
            }
        }
        CHECK(k == offline.size());
        CHECK(k == 11);
    }

    TEST_CASE("run_live scores every window in order") {
        const FallDetector m(desk_model_config(), 5);
        const Recording& rec = fall_recording();
        StreamSummary sum;
        const auto recs = run_records(rec.frames, m, {}, &sum);
        REQUIRE(recs.size() == 11);
        CHECK(sum.frames == 10000);
        CHECK(sum.windows == 11);
        CHECK(sum.drops == 0);
        std::vector<CsiFrame> logical;
        for (const auto& f : rec.frames) logical.push_back(apply_perm(f));
        const auto windows = segment_stream(logical, 5000, 500);
        for (std::size_t i = 0; i < recs.size(); ++i) {
            CHECK(recs[i].window_id == static_cast<long>(i));
            CHECK(recs[i].t_end_us == (5000 + 500 * i - 1) * 1000);
            const double p = m.forward(live_window_tensor(windows[i], StreamConfig{}.preprocess)).probs.p_fall;
            CHECK(recs[i].p_fall == p);
        }
    }

    TEST_CASE("threaded mode matches inline when the queue is large enough") {
        const FallDetector m(desk_model_config(), 6);
        const auto inline_recs = run_records(fall_recording().frames, m, {});
        StreamConfig cfg;
        cfg.threaded = true;
        cfg.queue_capacity = 16;
        StreamSummary sum;
        const auto threaded = run_records(fall_recording().frames, m, cfg, &sum);
        REQUIRE(threaded.size() == inline_recs.size());
        for (std::size_t i = 0; i < threaded.size(); ++i) {
            CHECK(threaded[i].p_fall == inline_recs[i].p_fall);
            CHECK(threaded[i].state == inline_recs[i].state);
        }
        CHECK(sum.drops == 0);
    }

    TEST_CASE("a slow consumer drops the oldest windows and counts them") {
        const FallDetector m(desk_model_config(), 7);
        StreamConfig cfg;
        cfg.threaded = true;
        cfg.queue_capacity = 1;
        std::vector<StreamRecord> out;
        const StreamSummary sum = run_live(vector_source(fall_recording().frames), m, cfg, [&](const StreamRecord& r) {
            out.push_back(r);
            std::this_thread::sleep_for(std::chrono::milliseconds(200));
        });
        CHECK(sum.windows + sum.drops == 11);
        CHECK(sum.drops > 0);
        CHECK(static_cast<long>(out.size()) == sum.windows);
        // The newest window always survives.
        CHECK(out.back().window_id == 10);
        for (std::size_t i = 1; i < out.size(); ++i) CHECK(out[i].window_id > out[i - 1].window_id);
    }

    TEST_CASE("NDJSON record layout") {
        StreamRecord r;
        r.window_id = 3;
        r.t_end_us = 123;
        r.p_fall = 0.75;
        r.state = {AlertLevel::Wait, 1};
        r.drops = 2;
        const std::string line = to_ndjson(r);
        CHECK(line.find('\n') == std::string::npos);
        const auto j = nlohmann::json::parse(line);
        CHECK(j["window_id"] == 3);
        CHECK(j["t_end_us"] == 123);
        CHECK(j["p_fall"] == 0.75);
        CHECK(j["state"] == "Wait");
        CHECK(j["drops"] == 2);
        CHECK(j.contains("latency_ms"));
    }

    TEST_CASE("replay bytes over a socket give the same records as memory") {
        const FallDetector m(desk_model_config(), 8);
        const auto& frames = fall_recording().frames;
        std::ostringstream bytes;
        write_replay_header(bytes);
        for (const auto& f : frames) write_replay_frame(bytes, f);

        int port = 0;
        const int lfd = tcp_listen(0, &port);
        std::thread sender([&] {
            const int fd = tcp_connect("127.0.0.1:" + std::to_string(port));
            write_all(fd, bytes.str());
            close_fd(fd);
        });
        const int cfd = tcp_accept(lfd);
        FdInBuf sb(cfd);
        std::istream in(&sb);
        std::vector<StreamRecord> got;
        run_live(replay_source(in), m, {}, [&](const StreamRecord& r) { got.push_back(r); });
        sender.join();
        close_fd(cfd);
        close_fd(lfd);

        const auto want = run_records(frames, m, {});
        REQUIRE(got.size() == want.size());
        for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i].p_fall == want[i].p_fall);
        CHECK_THROWS_AS(tcp_connect("nonsense"), ParameterError);
    }

    TEST_CASE("stream config validation") {
        StreamConfig c;
        CHECK_NOTHROW(c.validate());
        c.smoother.threshold = 1.0;
        CHECK_THROWS_AS(c.validate(), ConfigError);
        c = {};
        c.step = 0;
        CHECK_THROWS_AS(c.validate(), ConfigError);
        c = {};
        c.window = 4000;
        CHECK_THROWS_AS(c.validate(), ConfigError);
    }
}
