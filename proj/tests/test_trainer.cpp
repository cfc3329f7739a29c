#include <doctest.h>

#include <filesystem>

#include "metapix/checkpoint.hpp"
#include "metapix/config.hpp"
#include "metapix/meta.hpp"

using namespace metapix;
namespace fs = std::filesystem;

namespace {

data::DatasetSpec tiny_spec(std::uint64_t seed) {
    data::DatasetSpec s;
    s.image_size = 16;
    s.num_classes = 4;
    s.n_source = 10;
    s.n_target_train = 2;
    s.n_target_val = 3;
    s.rho = 0.5;
    s.seed = seed;
    return s;
}

std::string fresh_dir(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("metapix_trainer_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir.string();
}

const data::Manifest& tiny_manifest() {
    static data::Manifest m = data::generate(tiny_spec(1), fresh_dir("data"));
    return m;
}

nn::SegConfig tiny_seg() { return nn::SegConfig{4, 1, {2, 2, 2, 2, 2}}; }
nn::WeightConfig tiny_wnet() { return nn::WeightConfig{4, 1, {2, 2, 2}}; }

meta::Schedule tiny_schedule() {
    meta::Schedule s;
    s.N1 = 6;
    s.N2 = 4;
    s.N3 = 5;
    s.G = 2;
    s.base_lr = 1e-3;
    s.beta = 1e-3;
    s.alpha = 1e-3;
    return s;
}

// Compares every entry present in both files bitwise (model parameters,
// optimizer moments, sampler states). At least the seg parameters must exist.
template <class Real>
bool checkpoints_params_equal(const std::string& a, const std::string& b) {
    ckpt::Reader ra(a), rb(b);
    int seg_params = 0;
    for (const auto& name : ra.names()) {
        if (name == "config" || !rb.has(name)) continue;
        if (name.rfind("seg.", 0) == 0) ++seg_params;
        if (ra.dtype(name) == "i64") {
            if (ra.read_i64(name) != rb.read_i64(name)) return false;
            continue;
        }
        if (ra.dtype(name) == "u8") continue;
        auto ta = ra.read_tensor<Real>(name);
        auto tb = rb.read_tensor<Real>(name);
        if (*ta.values != *tb.values) return false;
    }
    return seg_params > 0;
}

}  // namespace

TEST_CASE("degeneration: schedule with N2=N3=0 reproduces straight pretraining bitwise") {
    auto sched = tiny_schedule();
    sched.N1 = 12;
    sched.N2 = 0;
    sched.N3 = 0;

    const auto dir_a = fresh_dir("degen_a");
    meta::TrainerOptions opt_a{7, dir_a, 0, ""};
    meta::Trainer<float> trainer(tiny_manifest(), sched, tiny_seg(), tiny_wnet(), opt_a);
    trainer.run();

    const auto dir_b = fresh_dir("degen_b");
    meta::TrainerOptions opt_b{7, dir_b, 0, ""};
    meta::run_pretrain_only<float>(tiny_manifest(), sched, tiny_seg(), tiny_wnet(), opt_b);

    CHECK(checkpoints_params_equal<float>(dir_a + "/ckpt-final.mpx", dir_b + "/ckpt-final.mpx"));
}

TEST_CASE("N1=0 skips directly to the first generation") {
    auto sched = tiny_schedule();
    sched.N1 = 0;
    sched.N2 = 2;
    sched.N3 = 2;
    sched.G = 1;
    const auto dir = fresh_dir("skip");
    meta::TrainerOptions opt{3, dir, 0, ""};
    meta::Trainer<float> trainer(tiny_manifest(), sched, tiny_seg(), tiny_wnet(), opt);
    trainer.run();
    CHECK(trainer.phase() == meta::Phase::Done);
    CHECK(fs::exists(dir + "/ckpt-final.mpx"));
}

TEST_CASE("resume from a mid-generation checkpoint reproduces the run bitwise") {
    auto sched = tiny_schedule();

    const auto dir_a = fresh_dir("resume_full");
    meta::TrainerOptions opt_a{11, dir_a, /*checkpoint_every=*/7, ""};
    meta::Trainer<float> full(tiny_manifest(), sched, tiny_seg(), tiny_wnet(), opt_a);
    full.run();

    // step 14 lands inside generation 1 (6 pretrain + 4 meta + 5 weighted = 15)
    const std::string mid = dir_a + "/ckpt-step14.mpx";
    REQUIRE(fs::exists(mid));

    const auto dir_b = fresh_dir("resume_half");
    meta::TrainerOptions opt_b{11, dir_b, 0, ""};
    meta::Trainer<float> resumed(tiny_manifest(), sched, tiny_seg(), tiny_wnet(), opt_b);
    resumed.load_checkpoint(mid);
    resumed.run();

    CHECK(checkpoints_params_equal<float>(dir_a + "/ckpt-final.mpx", dir_b + "/ckpt-final.mpx"));
    CHECK(full.last_miou() == resumed.last_miou());
}

TEST_CASE("training never reads corruption masks") {
    // run on a copy of the dataset with meta/ deleted; results must match
    const auto src_dir = tiny_manifest().root;
    const auto stripped = fresh_dir("nomask_data");
    fs::copy(src_dir, stripped, fs::copy_options::recursive | fs::copy_options::overwrite_existing);
    fs::remove_all(stripped + "/meta");
    auto manifest2 = data::load_manifest(stripped);

    auto sched = tiny_schedule();
    const auto dir_a = fresh_dir("mask_a");
    meta::TrainerOptions opt_a{13, dir_a, 0, ""};
    meta::Trainer<float> a(tiny_manifest(), sched, tiny_seg(), tiny_wnet(), opt_a);
    a.run();

    const auto dir_b = fresh_dir("mask_b");
    meta::TrainerOptions opt_b{13, dir_b, 0, ""};
    meta::Trainer<float> b(manifest2, sched, tiny_seg(), tiny_wnet(), opt_b);
    b.run();

    CHECK(checkpoints_params_equal<float>(dir_a + "/ckpt-final.mpx", dir_b + "/ckpt-final.mpx"));
}

TEST_CASE("weighting network is disposable: evaluation depends on theta alone") {
    auto sched = tiny_schedule();
    const auto dir = fresh_dir("dispose");
    meta::TrainerOptions opt{17, dir, 0, ""};
    meta::Trainer<float> t(tiny_manifest(), sched, tiny_seg(), tiny_wnet(), opt);
    t.run();
    const double with_wnet = t.last_miou();

    // wreck phi, re-evaluate
    for (auto& p : t.wnet().params)
        std::fill(p.values->begin(), p.values->end(), 0.0f);
    auto rep = meta::evaluate_split(t.seg(), tiny_manifest(), "target_val");
    CHECK(rep.miou == with_wnet);
}

TEST_CASE("checkpoint round trip is bitwise exact") {
    ckpt::Writer w;
    Rng rng(23);
    auto t32 = Tensor<float>::zeros({3, 5});
    for (long k = 0; k < t32.size(); ++k) (*t32.values)[k] = float(rng.uniform(-1, 1));
    auto t64 = Tensor<double>::zeros({7});
    for (long k = 0; k < t64.size(); ++k) (*t64.values)[k] = rng.uniform(-1, 1);
    w.add_tensor("a", t32);
    w.add_tensor("b", t64);
    w.add_i64("ints", {1, -9, 1LL << 40});
    w.add_bytes("blob", "hello\0world");

    const auto path = fresh_dir("ckpt") + "/x.mpx";
    w.save(path);

    ckpt::Reader r(path);
    CHECK(r.has("a"));
    CHECK(*r.read_tensor<float>("a").values == *t32.values);
    CHECK(*r.read_tensor<double>("b").values == *t64.values);
    CHECK(r.read_i64("ints") == std::vector<std::int64_t>{1, -9, 1LL << 40});
    CHECK_THROWS(r.read_tensor<float>("b"));  // dtype mismatch
    CHECK_THROWS(r.read_tensor<float>("missing"));

    // the file starts with the magic
    std::ifstream f(path, std::ios::binary);
    char magic[8];
    f.read(magic, 8);
    CHECK(std::string(magic, 8) == "MPXCKPT1");
}

TEST_CASE("config: json round trip and dotted overrides") {
    config::RunConfig cfg;
    cfg.seed = 5;
    auto j = config::to_json(cfg);
    config::apply_override(j, "schedule.N2=42");
    config::apply_override(j, "data.rho=0.25");
    config::apply_override(j, "precision=f64");
    config::apply_override(j, "net.widths=[2,2,2,2,2]");
    auto back = config::from_json(j);
    CHECK(back.schedule.N2 == 42);
    CHECK(back.data.rho == 0.25);
    CHECK(back.precision == "f64");
    CHECK(back.net.widths == std::vector<int>{2, 2, 2, 2, 2});
    CHECK(back.seed == 5);

    CHECK_THROWS(config::apply_override(j, "no-equals-sign"));

    config::RunConfig bad;
    bad.net.wnet_out_channels = 3;  // neither 1 nor num_classes(5)
    CHECK_THROWS(bad.validate());
}
