#pragma once

// Run configuration: JSON file plus flat dotted-key overrides
// (e.g. schedule.N2=600). The fully resolved config is echoed into the run
// directory before any computation.

#include <string>
#include <vector>

#include <json.hpp>

#include "metapix/data.hpp"
#include "metapix/meta.hpp"
#include "metapix/nn.hpp"

namespace metapix::config {

struct NetConfig {
    int split_at = 1;
    std::vector<int> widths = {8, 16, 32, 32, 32};
    std::vector<int> wnet_widths = {8, 16, 32};
    int wnet_out_channels = 1;  // 1 or num_classes
};

struct RunConfig {
    std::uint64_t seed = 0;
    std::string precision = "f32";  // f32 | f64
    data::DatasetSpec data;
    NetConfig net;
    meta::Schedule schedule;
    std::string data_dir = "data";
    std::string run_dir;
    long checkpoint_every = 0;

    nn::SegConfig seg_config() const {
        return nn::SegConfig{data.num_classes, net.split_at, net.widths};
    }
    nn::WeightConfig wnet_config() const {
        return nn::WeightConfig{data.num_classes, net.wnet_out_channels, net.wnet_widths};
    }
    void validate() const;
};

nlohmann::json to_json(const RunConfig& cfg);
RunConfig from_json(const nlohmann::json& j);

RunConfig load(const std::string& path);

// Applies "a.b.c=value"; value parses as JSON when possible, else as string.
void apply_override(nlohmann::json& j, const std::string& assignment);

// Writes the resolved config echo; returns the dumped string.
std::string echo(const RunConfig& cfg, const std::string& dir);

}  // namespace metapix::config
