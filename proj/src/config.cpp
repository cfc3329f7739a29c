#include "metapix/config.hpp"

#include <filesystem>
#include <fstream>

namespace metapix::config {

namespace {

nlohmann::json net_to_json(const NetConfig& n) {
    return {{"split_at", n.split_at},
            {"widths", n.widths},
            {"wnet_widths", n.wnet_widths},
            {"wnet_out_channels", n.wnet_out_channels}};
}

NetConfig net_from_json(const nlohmann::json& j) {
    NetConfig d, n;
    n.split_at = j.value("split_at", d.split_at);
    n.widths = j.value("widths", d.widths);
    n.wnet_widths = j.value("wnet_widths", d.wnet_widths);
    n.wnet_out_channels = j.value("wnet_out_channels", d.wnet_out_channels);
    return n;
}

nlohmann::json schedule_to_json(const meta::Schedule& s) {
    return {{"N1", s.N1},
            {"N2", s.N2},
            {"N3", s.N3},
            {"G", s.G},
            {"alpha", s.alpha},
            {"beta", s.beta},
            {"base_lr", s.base_lr},
            {"poly_power", s.poly_power},
            {"meta_opt_reset_per_generation", s.meta_opt_reset_per_generation},
            {"target_only", s.target_only}};
}

meta::Schedule schedule_from_json(const nlohmann::json& j) {
    meta::Schedule d, s;
    s.N1 = j.value("N1", d.N1);
    s.N2 = j.value("N2", d.N2);
    s.N3 = j.value("N3", d.N3);
    s.G = j.value("G", d.G);
    s.alpha = j.value("alpha", d.alpha);
    s.beta = j.value("beta", d.beta);
    s.base_lr = j.value("base_lr", d.base_lr);
    s.poly_power = j.value("poly_power", d.poly_power);
    s.meta_opt_reset_per_generation =
        j.value("meta_opt_reset_per_generation", d.meta_opt_reset_per_generation);
    s.target_only = j.value("target_only", d.target_only);
    return s;
}

}  // namespace

void RunConfig::validate() const {
    require(precision == "f32" || precision == "f64",
            "config: precision must be f32 or f64, got " + precision);
    require(net.wnet_out_channels == 1 || net.wnet_out_channels == data.num_classes,
            "config: net.wnet_out_channels must be 1 or num_classes");
    require(net.widths.size() == 5, "config: net.widths must have 5 entries");
    require(net.wnet_widths.size() == 3, "config: net.wnet_widths must have 3 entries");
    require(net.split_at >= 0 && net.split_at <= 5, "config: net.split_at must be in [0,5]");
    schedule.validate();
}

nlohmann::json to_json(const RunConfig& cfg) {
    return {{"seed", cfg.seed},
            {"precision", cfg.precision},
            {"data", cfg.data},
            {"net", net_to_json(cfg.net)},
            {"schedule", schedule_to_json(cfg.schedule)},
            {"data_dir", cfg.data_dir},
            {"run_dir", cfg.run_dir},
            {"checkpoint_every", cfg.checkpoint_every}};
}

RunConfig from_json(const nlohmann::json& j) {
    RunConfig d, cfg;
    cfg.seed = j.value("seed", d.seed);
    cfg.precision = j.value("precision", d.precision);
    if (j.contains("data")) cfg.data = j.at("data").get<data::DatasetSpec>();
    if (j.contains("net")) cfg.net = net_from_json(j.at("net"));
    if (j.contains("schedule")) cfg.schedule = schedule_from_json(j.at("schedule"));
    cfg.data_dir = j.value("data_dir", d.data_dir);
    cfg.run_dir = j.value("run_dir", d.run_dir);
    cfg.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
    return cfg;
}

RunConfig load(const std::string& path) {
    std::ifstream f(path);
    require(f.good(), "config: cannot open " + path);
    return from_json(nlohmann::json::parse(f));
}

void apply_override(nlohmann::json& j, const std::string& assignment) {
    const auto eq = assignment.find('=');
    require(eq != std::string::npos && eq > 0,
            "config: override must look like key.path=value, got '" + assignment + "'");
    const std::string path = assignment.substr(0, eq);
    const std::string value = assignment.substr(eq + 1);

    nlohmann::json* node = &j;
    size_t start = 0;
    while (true) {
        const auto dot = path.find('.', start);
        const std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
        require(!key.empty(), "config: empty key segment in '" + path + "'");
        if (dot == std::string::npos) {
            auto parsed = nlohmann::json::parse(value, nullptr, false);
            (*node)[key] = parsed.is_discarded() ? nlohmann::json(value) : parsed;
            return;
        }
        node = &(*node)[key];
        start = dot + 1;
    }
}

std::string echo(const RunConfig& cfg, const std::string& dir) {
    const std::string dump = to_json(cfg).dump(2) + "\n";
    std::filesystem::create_directories(dir);
    std::ofstream f(dir + "/config.json", std::ios::trunc);
    require(f.good(), "config: cannot write echo under " + dir);
    f << dump;
    require(f.good(), "config: short write of echo");
    return dump;
}

}  // namespace metapix::config
