#pragma once

// EMDS dataset container, all integers and floats little-endian:
//
//   "EMDS"                    4 bytes magic
//   version                   u16 (= 1)
//   agent_count K             u64
//   sample_count n            u64
//   seed                      u64
//   K x { agent_id u64, feature_dim u64, label_cardinality u64 }
//   n x {
//     step_index u64, app_class u64, demand_level u64, channel_level u64,
//     traffic_rate f64, snr f64,
//     K x { noise_seed u64, label u64, feature_dim x f64 }
//   }
//
// Observation windows inside GlobalState are not stored.

#include <string>
#include <vector>

#include "emcomm/bytes.hpp"
#include "emcomm/env.hpp"

namespace emcomm {

inline constexpr std::uint16_t dataset_format_version = 1;

inline std::vector<std::uint8_t> encode_dataset(const Dataset& ds) {
    ds.check_aligned();
    ByteWriter w;
    w.raw("EMDS");
    w.u16(dataset_format_version);
    w.u64(ds.agent_count());
    w.u64(ds.n);
    w.u64(ds.seed);
    for (std::size_t k = 0; k < ds.agent_count(); ++k) {
        w.u64(k + 1);
        w.u64(ds.feature_dims[k]);
        w.u64(ds.label_cardinalities[k]);
    }
    for (std::size_t i = 0; i < ds.n; ++i) {
        const auto& g = ds.samples[0][i].global_truth;
        w.u64(g.step_index);
        w.u64(g.app_class);
        w.u64(g.demand_level);
        w.u64(g.channel_level);
        w.f64(g.traffic_rate);
        w.f64(g.snr);
        for (std::size_t k = 0; k < ds.agent_count(); ++k) {
            const auto& s = ds.samples[k][i];
            w.u64(s.observation.noise_seed);
            w.u64(s.target.label);
            for (double f : s.observation.features) w.f64(f);
        }
    }
    return w.take();
}

inline Dataset decode_dataset(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes);
    r.expect_magic("EMDS");
    const auto version = r.u16();
    if (version != dataset_format_version) {
        throw format_error("unsupported EMDS version " + std::to_string(version));
    }
    Dataset ds;
    const auto agents = r.u64();
    ds.n = r.u64();
    ds.seed = r.u64();
    if (agents == 0 || agents > 1024) throw format_error("implausible agent count");
    ds.samples.resize(agents);
    for (std::size_t k = 0; k < agents; ++k) {
        if (r.u64() != k + 1) throw format_error("agent ids must be 1..K in order");
        ds.feature_dims.push_back(r.u64());
        ds.label_cardinalities.push_back(r.u64());
    }
    std::size_t per_sample = 48;
    for (auto d : ds.feature_dims) per_sample += 16 + 8 * d;
    if (ds.n > r.remaining() / per_sample) throw format_error("truncated buffer");
    for (auto& v : ds.samples) v.reserve(ds.n);
    for (std::size_t i = 0; i < ds.n; ++i) {
        GlobalState g;
        g.step_index = r.u64();
        g.app_class = r.u64();
        g.demand_level = r.u64();
        g.channel_level = r.u64();
        g.traffic_rate = r.f64();
        g.snr = r.f64();
        for (std::size_t k = 0; k < agents; ++k) {
            EnvSample s;
            s.global_truth = g;
            s.observation.agent_id = k + 1;
            s.observation.noise_seed = r.u64();
            s.target.agent_id = k + 1;
            s.target.label = r.u64();
            s.observation.features.resize(ds.feature_dims[k]);
            for (double& f : s.observation.features) f = r.f64();
            ds.samples[k].push_back(std::move(s));
        }
    }
    if (r.remaining() != 0) throw format_error("trailing bytes after dataset payload");
    ds.check_aligned();
    return ds;
}

inline void write_dataset(const std::string& path, const Dataset& ds) {
    write_file_bytes(path, encode_dataset(ds));
}

inline Dataset read_dataset(const std::string& path) {
    const auto bytes = read_file_bytes(path);
    try {
        return decode_dataset(bytes);
    } catch (const format_error& e) {
        throw format_error(path + ": " + e.what());
    } catch (const std::invalid_argument& e) {
        throw format_error(path + ": " + e.what());
    }
}

} // namespace emcomm
