#pragma once

// Training procedures: joint pretraining, the meta step that learns the
// weighting network by gradient-on-gradient, the weighted training step, and
// the outer schedule driving them.
//
// Workflow of one meta step (two forward-backward passes on one tape):
//   W(phi)        weighting net on concat(source image, one-hot source label)
//   Loss_s(phi)   pixel-weighted source cross entropy, graph created
//   g(phi)        d Loss_s / d theta, graph retained and differentiable
//   theta+(phi)   one plain gradient-descent step, still a function of phi
//   Loss_t(phi)   unweighted target cross entropy under theta+
//   phi          -= meta optimizer step on d Loss_t / d phi
// The stored segmentation parameters are never touched; theta+ is ephemeral.
// After training the weighting network is discarded: evaluation depends on
// theta alone.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>

#include <json.hpp>

#include "metapix/checkpoint.hpp"
#include "metapix/data.hpp"
#include "metapix/eval.hpp"
#include "metapix/losses.hpp"
#include "metapix/nn.hpp"

namespace metapix::meta {

struct Schedule {
    long N1 = 3000;  // pretrain steps
    long N2 = 600;   // meta steps per generation
    long N3 = 900;   // weighted training steps per generation
    int G = 3;       // generations
    double alpha = 1e-4;    // inner step size for the ephemeral update
    double beta = 1e-4;     // meta learning rate (no decay)
    double base_lr = 1e-4;  // segmentation learning rate
    double poly_power = 0.9;
    bool meta_opt_reset_per_generation = false;
    bool target_only = false;  // pretraining uses only the target loss

    long total_seg_steps() const { return N1 + long(G) * N3; }

    void validate() const {
        require(N1 >= 0 && N2 >= 0 && N3 >= 0 && G >= 0, "schedule: counts must be >= 0");
        require(G >= 1 || N2 + N3 == 0, "schedule: G must be >= 1 when N2+N3 > 0");
        require(alpha >= 0 && beta >= 0 && base_lr >= 0, "schedule: rates must be >= 0");
    }
};

struct StepRecord {
    double loss_s = std::numeric_limits<double>::quiet_NaN();
    double loss_t = std::numeric_limits<double>::quiet_NaN();
    double lr = std::numeric_limits<double>::quiet_NaN();
    double w_mean = std::numeric_limits<double>::quiet_NaN();
    double w_min = std::numeric_limits<double>::quiet_NaN();
    double w_max = std::numeric_limits<double>::quiet_NaN();
    bool skipped = false;
};

namespace detail {

template <class Real>
void weight_stats(const Tensor<Real>& w, StepRecord& rec) {
    double sum = 0, lo = 1e30, hi = -1e30;
    for (long k = 0; k < w.size(); ++k) {
        const double v = double((*w.values)[k]);
        sum += v;
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    rec.w_mean = sum / double(w.size());
    rec.w_min = lo;
    rec.w_max = hi;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// single steps
// ---------------------------------------------------------------------------

// One Adam step on theta minimizing unweighted source CE + target CE (or the
// target term alone). Source images run through the source head, target
// images through the target head.
template <class Real>
StepRecord pretrain_step(nn::SegNet<Real>& seg, nn::Adam<Real>& opt,
                         const data::Batch<Real>* batch_s, const data::Batch<Real>& batch_t,
                         bool target_only = false) {
    StepRecord rec;
    rec.lr = opt.effective_lr();
    Tape<Real> tape;
    GraphScope<Real> scope(tape);

    losses::LossValue<Real> loss;
    if (target_only) {
        loss = losses::pixel_ce(seg.forward(seg.params, batch_t.image, nn::Domain::Target),
                                batch_t.label);
        rec.loss_t = double(loss.value.item());
    } else {
        require(batch_s != nullptr, "pretrain_step: missing source batch");
        auto loss_s = losses::pixel_ce(seg.forward(seg.params, batch_s->image, nn::Domain::Source),
                                       batch_s->label);
        auto loss_t = losses::pixel_ce(seg.forward(seg.params, batch_t.image, nn::Domain::Target),
                                       batch_t.label);
        rec.loss_s = double(loss_s.value.item());
        rec.loss_t = double(loss_t.value.item());
        loss = losses::joint_loss(loss_s, loss_t);
    }

    if (!std::isfinite(double(loss.value.item()))) {
        rec.skipped = true;
        return rec;
    }
    auto grads = ops::grad(loss.value, seg.params, {.retain = false});
    rec.skipped = !opt.step(seg.params, grads.grads);
    return rec;
}

template <class Real>
struct MetaForward {
    Tensor<Real> loss_t;  // scalar, a function of phi through theta+
    Tensor<Real> w_map;
    double loss_s = 0.0;
};

// The two-pass forward of one meta step (weight map, weighted source loss,
// inner gradient, ephemeral step, target loss). Nothing is updated. Needs an
// active graph; with second_order the inner gradient stays differentiable so
// d loss_t / d phi exists.
template <class Real>
MetaForward<Real> meta_forward(const nn::SegNet<Real>& seg,
                               const std::vector<Tensor<Real>>& phi_params,
                               const nn::WeightNet<Real>& wnet, const data::Batch<Real>& batch_s,
                               const data::Batch<Real>& batch_t, double alpha, bool second_order) {
    MetaForward<Real> out;
    auto onehot = losses::one_hot<Real>(batch_s.label, seg.cfg.num_classes);
    out.w_map = wnet.forward(phi_params, batch_s.image, onehot);

    auto loss_s = losses::pixel_ce(seg.forward(seg.params, batch_s.image, nn::Domain::Source),
                                   batch_s.label, out.w_map);
    out.loss_s = double(loss_s.value.item());

    // theta = source head + shared parameters; the target head receives no
    // source gradient by construction
    const auto theta_ids = seg.domain_param_ids(nn::Domain::Source);
    std::vector<Tensor<Real>> theta;
    theta.reserve(theta_ids.size());
    for (int id : theta_ids) theta.push_back(seg.params[size_t(id)]);
    auto g_theta =
        ops::grad(loss_s.value, theta, {.retain = true, .create_graph = second_order});

    auto theta_plus = ops::differentiable_step(theta, g_theta.grads, alpha);

    auto p_plus = seg.params;
    for (size_t i = 0; i < theta_ids.size(); ++i) p_plus[size_t(theta_ids[i])] = theta_plus[i];
    auto loss_t = losses::pixel_ce(seg.forward(p_plus, batch_t.image, nn::Domain::Target),
                                   batch_t.label);
    out.loss_t = loss_t.value;
    return out;
}

// One meta update of the weighting network. The segmentation parameters are
// bitwise unchanged on return.
template <class Real>
StepRecord meta_step(nn::SegNet<Real>& seg, nn::WeightNet<Real>& wnet, nn::Adam<Real>& meta_opt,
                     const data::Batch<Real>& batch_s, const data::Batch<Real>& batch_t,
                     double alpha) {
    StepRecord rec;
    rec.lr = meta_opt.effective_lr();

    Tape<Real> tape;
    GraphScope<Real> scope(tape);

    auto mf = meta_forward(seg, wnet.params, wnet, batch_s, batch_t, alpha, /*second_order=*/true);
    detail::weight_stats(mf.w_map, rec);
    rec.loss_s = mf.loss_s;
    rec.loss_t = double(mf.loss_t.item());

    // gradient-on-gradient onto phi
    auto g_phi = ops::grad(mf.loss_t, wnet.params);
    for (const auto& g : g_phi.grads) {
        if (!g.all_finite()) {
            rec.skipped = true;
            return rec;
        }
    }
    rec.skipped = !meta_opt.step(wnet.params, g_phi.grads);
    return rec;
}

// One Adam step on theta with the weight map computed and detached. phi is
// not part of the graph at all. `forced_weights` substitutes the weighting
// network's output (identity/zero checks in tests).
template <class Real>
StepRecord weighted_train_step(nn::SegNet<Real>& seg, const nn::WeightNet<Real>& wnet,
                               nn::Adam<Real>& opt, const data::Batch<Real>& batch_s,
                               const data::Batch<Real>& batch_t,
                               const Tensor<Real>* forced_weights = nullptr) {
    StepRecord rec;
    rec.lr = opt.effective_lr();

    Tensor<Real> w_map;
    if (forced_weights) {
        w_map = forced_weights->detached();
    } else {
        NoGradScope<Real> no_grad;  // detached by construction
        auto onehot = losses::one_hot<Real>(batch_s.label, seg.cfg.num_classes);
        w_map = wnet.forward(wnet.params, batch_s.image, onehot);
    }
    detail::weight_stats(w_map, rec);

    Tape<Real> tape;
    GraphScope<Real> scope(tape);
    auto loss_s = losses::pixel_ce(seg.forward(seg.params, batch_s.image, nn::Domain::Source),
                                   batch_s.label, w_map);
    auto loss_t = losses::pixel_ce(seg.forward(seg.params, batch_t.image, nn::Domain::Target),
                                   batch_t.label);
    rec.loss_s = double(loss_s.value.item());
    rec.loss_t = double(loss_t.value.item());
    auto loss = losses::joint_loss(loss_s, loss_t);

    if (!std::isfinite(double(loss.value.item()))) {
        rec.skipped = true;
        return rec;
    }
    auto grads = ops::grad(loss.value, seg.params, {.retain = false});
    rec.skipped = !opt.step(seg.params, grads.grads);
    return rec;
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

template <class Real>
eval::IouReport evaluate_split(const nn::SegNet<Real>& seg, const data::Manifest& m,
                               const std::string& split) {
    NoGradScope<Real> no_grad;
    const auto items = m.split(split);
    require(!items.empty(), "evaluate_split: empty split " + split);
    eval::Confusion conf(seg.cfg.num_classes);
    for (size_t i = 0; i < items.size(); ++i) {
        auto batch = data::load_batch<Real>(m, split, int(i));
        auto logits = seg.forward(seg.params, batch.image, nn::Domain::Target);
        conf.accumulate(eval::argmax_channels(logits), batch.label);
    }
    return eval::miou(conf);
}

// ---------------------------------------------------------------------------
// schedule driver
// ---------------------------------------------------------------------------

// Straight-line joint training: N1 steps of pretrain_step, evaluation, final
// checkpoint. No meta machinery. The full schedule with N2=N3=0 reduces to
// exactly this, bitwise.
template <class Real>
double run_pretrain_only(const data::Manifest& manifest, const Schedule& schedule,
                         const nn::SegConfig& seg_cfg, const nn::WeightConfig& wnet_cfg,
                         const struct TrainerOptions& options);

enum class Phase : int { Pretrain = 0, MetaPhase = 1, Weighted = 2, Done = 3 };

inline const char* phase_name(Phase p) {
    switch (p) {
        case Phase::Pretrain: return "pretrain";
        case Phase::MetaPhase: return "meta";
        case Phase::Weighted: return "weighted";
        case Phase::Done: return "done";
    }
    return "?";
}

struct TrainerOptions {
    std::uint64_t seed = 0;
    std::string run_dir;
    long checkpoint_every = 0;  // extra mid-phase checkpoints; 0 = phase ends only
    std::string config_echo;    // stored verbatim in checkpoints
};

template <class Real>
class Trainer {
  public:
    Trainer(data::Manifest manifest, Schedule schedule, nn::SegConfig seg_cfg,
            nn::WeightConfig wnet_cfg, TrainerOptions opt)
        : manifest_(std::move(manifest)),
          schedule_(schedule),
          opt_(std::move(opt)),
          seg_(nn::build_seg_net<Real>(seg_cfg.num_classes, seg_cfg.split_at, seg_cfg.widths,
                                       mix_seed(opt_.seed, "seg-init"))),
          wnet_(nn::build_weight_net<Real>(wnet_cfg.num_classes, wnet_cfg.out_channels,
                                           wnet_cfg.widths, mix_seed(opt_.seed, "wnet-init"))),
          source_sampler_(mix_seed(opt_.seed, "sampler-source"),
                          int(manifest_.split("source").size())),
          target_sampler_(mix_seed(opt_.seed, "sampler-target"),
                          int(manifest_.split("target_train").size())),
          meta_source_sampler_(mix_seed(opt_.seed, "sampler-source-meta"),
                               int(manifest_.split("source").size())),
          meta_target_sampler_(mix_seed(opt_.seed, "sampler-target-meta"),
                               int(manifest_.split("target_train").size())) {
        schedule_.validate();
        require(seg_cfg.num_classes == manifest_.spec.num_classes,
                "trainer: net classes do not match dataset");
        require(wnet_cfg.num_classes == seg_cfg.num_classes, "trainer: weight net class mismatch");

        nn::OptimConfig seg_opt_cfg;
        seg_opt_cfg.lr = schedule_.base_lr;
        seg_opt_cfg.decay = nn::Decay::Polynomial;
        seg_opt_cfg.power = schedule_.poly_power;
        seg_opt_cfg.total_steps = schedule_.total_seg_steps();
        seg_opt_ = nn::make_adam(seg_.params, seg_opt_cfg);

        nn::OptimConfig meta_opt_cfg;
        meta_opt_cfg.lr = schedule_.beta;
        meta_opt_cfg.decay = nn::Decay::None;
        meta_opt_ = nn::make_adam(wnet_.params, meta_opt_cfg);

        if (!opt_.run_dir.empty()) std::filesystem::create_directories(opt_.run_dir);
    }

    nn::SegNet<Real>& seg() { return seg_; }
    nn::WeightNet<Real>& wnet() { return wnet_; }
    const data::Manifest& manifest() const { return manifest_; }
    Phase phase() const { return phase_; }
    double last_miou() const { return last_miou_; }

    // Runs Algorithm 1 from the current state to completion.
    void run() {
        if (!opt_.run_dir.empty() && !metrics_.is_open())
            metrics_.open(opt_.run_dir + "/metrics.jsonl", std::ios::app);
        const auto t0 = std::chrono::steady_clock::now();

        while (phase_ != Phase::Done) {
            if (phase_boundary()) continue;  // transitions, eval, checkpoints
            StepRecord rec = one_step();
            ++global_step_;
            ++step_in_phase_;
            if (metrics_.is_open()) write_record(metrics_, rec);
            if (opt_.checkpoint_every > 0 && global_step_ % opt_.checkpoint_every == 0)
                save_checkpoint(checkpoint_path("step" + std::to_string(global_step_)));
        }

        if (!opt_.run_dir.empty()) {
            save_checkpoint(checkpoint_path("final"));
            const double secs =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            nlohmann::json summary{{"final_miou", last_miou_},
                                   {"steps", global_step_},
                                   {"seconds_this_session", secs}};
            if (!last_report_.per_class.empty()) {
                for (size_t c = 0; c < last_report_.per_class.size(); ++c)
                    summary["per_class_iou"].push_back(
                        last_report_.present[c] ? nlohmann::json(last_report_.per_class[c])
                                                : nlohmann::json());
            }
            std::ofstream f(opt_.run_dir + "/summary.json", std::ios::trunc);
            f << summary.dump(2) << "\n";
            eval::write_iou_csv(last_report_, opt_.run_dir + "/iou.csv");
        }
    }

    // ---- checkpointing -----------------------------------------------------

    std::string checkpoint_path(const std::string& tag) const {
        return opt_.run_dir + "/ckpt-" + tag + ".mpx";
    }

    void save_checkpoint(const std::string& path) const {
        ckpt::Writer w;
        for (size_t i = 0; i < seg_.params.size(); ++i)
            w.add_tensor("seg." + seg_.names[i], seg_.params[i]);
        for (size_t i = 0; i < wnet_.params.size(); ++i)
            w.add_tensor(wnet_.names[i], wnet_.params[i]);
        for (size_t i = 0; i < seg_.params.size(); ++i) {
            w.add_tensor("opt.seg.m." + seg_.names[i], seg_opt_.m[i]);
            w.add_tensor("opt.seg.v." + seg_.names[i], seg_opt_.v[i]);
        }
        for (size_t i = 0; i < wnet_.params.size(); ++i) {
            w.add_tensor("opt.meta.m." + wnet_.names[i], meta_opt_.m[i]);
            w.add_tensor("opt.meta.v." + wnet_.names[i], meta_opt_.v[i]);
        }
        w.add_i64("opt.seg.t", {seg_opt_.t});
        w.add_i64("opt.meta.t", {meta_opt_.t});
        w.add_i64("sampler.source", {long(source_sampler_.epoch()), source_sampler_.pos()});
        w.add_i64("sampler.target", {long(target_sampler_.epoch()), target_sampler_.pos()});
        w.add_i64("sampler.source.meta",
                  {long(meta_source_sampler_.epoch()), meta_source_sampler_.pos()});
        w.add_i64("sampler.target.meta",
                  {long(meta_target_sampler_.epoch()), meta_target_sampler_.pos()});
        w.add_i64("state", {int(phase_), generation_, step_in_phase_, global_step_});
        if (!opt_.config_echo.empty()) w.add_bytes("config", opt_.config_echo);
        w.save(path);
    }

    void load_checkpoint(const std::string& path) {
        ckpt::Reader r(path);
        for (size_t i = 0; i < seg_.params.size(); ++i)
            seg_.params[i] = restore_param(r, "seg." + seg_.names[i], seg_.params[i].shape);
        for (size_t i = 0; i < wnet_.params.size(); ++i)
            wnet_.params[i] = restore_param(r, wnet_.names[i], wnet_.params[i].shape);
        for (size_t i = 0; i < seg_.params.size(); ++i) {
            seg_opt_.m[i] = r.read_tensor<Real>("opt.seg.m." + seg_.names[i]);
            seg_opt_.v[i] = r.read_tensor<Real>("opt.seg.v." + seg_.names[i]);
        }
        for (size_t i = 0; i < wnet_.params.size(); ++i) {
            meta_opt_.m[i] = r.read_tensor<Real>("opt.meta.m." + wnet_.names[i]);
            meta_opt_.v[i] = r.read_tensor<Real>("opt.meta.v." + wnet_.names[i]);
        }
        seg_opt_.t = r.read_i64("opt.seg.t")[0];
        meta_opt_.t = r.read_i64("opt.meta.t")[0];
        auto ss = r.read_i64("sampler.source");
        source_sampler_.restore(ss[0], int(ss[1]));
        auto ts = r.read_i64("sampler.target");
        target_sampler_.restore(ts[0], int(ts[1]));
        auto ms = r.read_i64("sampler.source.meta");
        meta_source_sampler_.restore(ms[0], int(ms[1]));
        auto mt = r.read_i64("sampler.target.meta");
        meta_target_sampler_.restore(mt[0], int(mt[1]));
        auto st = r.read_i64("state");
        phase_ = Phase(int(st[0]));
        generation_ = st[1];
        step_in_phase_ = st[2];
        global_step_ = st[3];
    }

  private:
    Tensor<Real> restore_param(const ckpt::Reader& r, const std::string& name, const Shape& shape) {
        auto t = r.read_tensor<Real>(name);
        require(t.shape == shape, "checkpoint: shape mismatch for " + name);
        t.requires_grad = true;
        return t;
    }

    bool phase_done() const {
        switch (phase_) {
            case Phase::Pretrain: return step_in_phase_ >= schedule_.N1;
            case Phase::MetaPhase: return step_in_phase_ >= schedule_.N2;
            case Phase::Weighted: return step_in_phase_ >= schedule_.N3;
            case Phase::Done: return true;
        }
        return true;
    }

    // Handles phase completion; returns true if the state changed.
    bool phase_boundary() {
        if (!phase_done()) return false;
        switch (phase_) {
            case Phase::Pretrain:
                run_eval("pretrain");
                if (!opt_.run_dir.empty()) save_checkpoint(checkpoint_path("pretrain"));
                if (schedule_.G >= 1 && schedule_.N2 + schedule_.N3 > 0) {
                    phase_ = Phase::MetaPhase;
                    generation_ = 1;
                } else {
                    phase_ = Phase::Done;
                }
                break;
            case Phase::MetaPhase:
                phase_ = Phase::Weighted;
                break;
            case Phase::Weighted:
                run_eval("gen" + std::to_string(generation_));
                if (!opt_.run_dir.empty())
                    save_checkpoint(checkpoint_path("gen" + std::to_string(generation_)));
                if (generation_ < schedule_.G) {
                    ++generation_;
                    phase_ = Phase::MetaPhase;
                    if (schedule_.meta_opt_reset_per_generation) reset_meta_opt();
                } else {
                    phase_ = Phase::Done;
                }
                break;
            case Phase::Done: break;
        }
        step_in_phase_ = 0;
        return true;
    }

    void reset_meta_opt() {
        for (auto& t : meta_opt_.m) std::fill(t.values->begin(), t.values->end(), Real(0));
        for (auto& t : meta_opt_.v) std::fill(t.values->begin(), t.values->end(), Real(0));
        meta_opt_.t = 0;
    }

    StepRecord one_step() {
        switch (phase_) {
            case Phase::Pretrain: {
                auto batch_t = next_batch("target_train", target_sampler_);
                if (schedule_.target_only)
                    return pretrain_step<Real>(seg_, seg_opt_, nullptr, batch_t, true);
                auto batch_s = next_batch("source", source_sampler_);
                return pretrain_step<Real>(seg_, seg_opt_, &batch_s, batch_t, false);
            }
            case Phase::MetaPhase: {
                // meta draws come from their own streams, so the weighted
                // phase sees exactly the batch sequence a pure joint run
                // would see at the same step index
                auto batch_s = next_batch("source", meta_source_sampler_);
                auto batch_t = next_batch("target_train", meta_target_sampler_);
                return meta_step<Real>(seg_, wnet_, meta_opt_, batch_s, batch_t, schedule_.alpha);
            }
            case Phase::Weighted: {
                auto batch_s = next_batch("source", source_sampler_);
                auto batch_t = next_batch("target_train", target_sampler_);
                return weighted_train_step<Real>(seg_, wnet_, seg_opt_, batch_s, batch_t);
            }
            case Phase::Done: break;
        }
        fail("trainer: step in Done phase");
    }

    data::Batch<Real> next_batch(const std::string& split, data::Sampler& sampler) {
        return data::load_batch<Real>(manifest_, split, sampler.next());
    }

    void run_eval(const std::string& tag) {
        last_report_ = evaluate_split(seg_, manifest_, "target_val");
        last_miou_ = last_report_.miou;
        if (metrics_.is_open()) {
            nlohmann::json j{{"phase_end", tag}, {"miou", last_report_.miou}};
            for (size_t c = 0; c < last_report_.per_class.size(); ++c)
                j["per_class_iou"].push_back(last_report_.present[c]
                                                 ? nlohmann::json(last_report_.per_class[c])
                                                 : nlohmann::json());
            metrics_ << j.dump() << "\n";
        }
    }

    void write_record(std::ofstream& out, const StepRecord& rec) {
        nlohmann::json j{{"step", global_step_},
                         {"phase", phase_name(phase_)},
                         {"gen", generation_},
                         {"lr", rec.lr}};
        auto set_if = [&](const char* key, double v) {
            if (std::isfinite(v)) j[key] = v;
        };
        set_if("loss_s", rec.loss_s);
        set_if("loss_t", rec.loss_t);
        set_if("w_mean", rec.w_mean);
        set_if("w_min", rec.w_min);
        set_if("w_max", rec.w_max);
        if (rec.skipped) j["skipped"] = true;
        out << j.dump() << "\n";
    }

    data::Manifest manifest_;
    Schedule schedule_;
    TrainerOptions opt_;
    nn::SegNet<Real> seg_;
    nn::WeightNet<Real> wnet_;
    nn::Adam<Real> seg_opt_;
    nn::Adam<Real> meta_opt_;
    data::Sampler source_sampler_;
    data::Sampler target_sampler_;
    data::Sampler meta_source_sampler_;
    data::Sampler meta_target_sampler_;

    Phase phase_ = Phase::Pretrain;
    long generation_ = 0;
    long step_in_phase_ = 0;
    long global_step_ = 0;
    double last_miou_ = 0.0;
    eval::IouReport last_report_;
    std::ofstream metrics_;
};

template <class Real>
double run_pretrain_only(const data::Manifest& manifest, const Schedule& schedule,
                         const nn::SegConfig& seg_cfg, const nn::WeightConfig& wnet_cfg,
                         const TrainerOptions& options) {
    schedule.validate();
    auto seg = nn::build_seg_net<Real>(seg_cfg.num_classes, seg_cfg.split_at, seg_cfg.widths,
                                       mix_seed(options.seed, "seg-init"));
    auto wnet = nn::build_weight_net<Real>(wnet_cfg.num_classes, wnet_cfg.out_channels,
                                           wnet_cfg.widths, mix_seed(options.seed, "wnet-init"));
    data::Sampler source_sampler(mix_seed(options.seed, "sampler-source"),
                                 int(manifest.split("source").size()));
    data::Sampler target_sampler(mix_seed(options.seed, "sampler-target"),
                                 int(manifest.split("target_train").size()));

    nn::OptimConfig opt_cfg;
    opt_cfg.lr = schedule.base_lr;
    opt_cfg.decay = nn::Decay::Polynomial;
    opt_cfg.power = schedule.poly_power;
    opt_cfg.total_steps = schedule.total_seg_steps();
    auto opt = nn::make_adam(seg.params, opt_cfg);

    std::ofstream metrics;
    if (!options.run_dir.empty()) {
        std::filesystem::create_directories(options.run_dir);
        metrics.open(options.run_dir + "/metrics.jsonl", std::ios::app);
    }

    for (long step = 0; step < schedule.N1; ++step) {
        StepRecord rec;
        auto batch_t = data::load_batch<Real>(manifest, "target_train", target_sampler.next());
        if (schedule.target_only) {
            rec = pretrain_step<Real>(seg, opt, nullptr, batch_t, true);
        } else {
            auto batch_s = data::load_batch<Real>(manifest, "source", source_sampler.next());
            rec = pretrain_step<Real>(seg, opt, &batch_s, batch_t, false);
        }
        if (metrics.is_open()) {
            nlohmann::json j{{"step", step + 1}, {"phase", "pretrain"}, {"lr", rec.lr}};
            if (std::isfinite(rec.loss_s)) j["loss_s"] = rec.loss_s;
            if (std::isfinite(rec.loss_t)) j["loss_t"] = rec.loss_t;
            if (rec.skipped) j["skipped"] = true;
            metrics << j.dump() << "\n";
        }
    }

    auto report = evaluate_split(seg, manifest, "target_val");
    if (!options.run_dir.empty()) {
        if (metrics.is_open()) {
            nlohmann::json j{{"phase_end", "pretrain"}, {"miou", report.miou}};
            metrics << j.dump() << "\n";
        }
        ckpt::Writer w;
        for (size_t i = 0; i < seg.params.size(); ++i)
            w.add_tensor("seg." + seg.names[i], seg.params[i]);
        for (size_t i = 0; i < wnet.params.size(); ++i)
            w.add_tensor(wnet.names[i], wnet.params[i]);
        for (size_t i = 0; i < seg.params.size(); ++i) {
            w.add_tensor("opt.seg.m." + seg.names[i], opt.m[i]);
            w.add_tensor("opt.seg.v." + seg.names[i], opt.v[i]);
        }
        w.add_i64("opt.seg.t", {opt.t});
        w.add_i64("sampler.source", {long(source_sampler.epoch()), source_sampler.pos()});
        w.add_i64("sampler.target", {long(target_sampler.epoch()), target_sampler.pos()});
        if (!options.config_echo.empty()) w.add_bytes("config", options.config_echo);
        w.save(options.run_dir + "/ckpt-final.mpx");

        nlohmann::json summary{{"final_miou", report.miou}, {"steps", schedule.N1}};
        std::ofstream f(options.run_dir + "/summary.json", std::ios::trunc);
        f << summary.dump(2) << "\n";
        eval::write_iou_csv(report, options.run_dir + "/iou.csv");
    }
    return report.miou;
}

}  // namespace metapix::meta
