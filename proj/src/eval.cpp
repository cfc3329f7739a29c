#include "metapix/eval.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

namespace metapix::eval {

long Confusion::total() const {
    long t = 0;
    for (long v : m_) t += v;
    return t;
}

void Confusion::accumulate(const IntMap& pred, const IntMap& truth, int ignore_id) {
    require(pred.shape == truth.shape, "confusion: shape mismatch " + shape_str(pred.shape) +
                                           " vs " + shape_str(truth.shape));
    for (size_t k = 0; k < truth.v.size(); ++k) {
        const int t = truth.v[k];
        if (t == ignore_id) continue;
        const int p = pred.v[k];
        require(t >= 0 && t < c_ && p >= 0 && p < c_,
                "confusion: label out of range (truth=" + std::to_string(t) +
                    ", pred=" + std::to_string(p) + ")");
        ++m_[size_t(t) * c_ + p];
    }
}

Confusion& Confusion::merge(const Confusion& other) {
    require(c_ == other.c_, "confusion: class count mismatch");
    for (size_t k = 0; k < m_.size(); ++k) m_[k] += other.m_[k];
    return *this;
}

IouReport miou(const Confusion& conf) {
    const int C = conf.num_classes();
    IouReport rep;
    rep.per_class.resize(size_t(C), std::numeric_limits<double>::quiet_NaN());
    rep.present.resize(size_t(C), false);
    double sum = 0.0;
    int counted = 0;
    for (int c = 0; c < C; ++c) {
        long row = 0, col = 0;
        for (int k = 0; k < C; ++k) {
            row += conf.at(c, k);
            col += conf.at(k, c);
        }
        const long denom = row + col - conf.at(c, c);
        if (denom == 0) continue;
        rep.per_class[size_t(c)] = double(conf.at(c, c)) / double(denom);
        rep.present[size_t(c)] = true;
        sum += rep.per_class[size_t(c)];
        ++counted;
    }
    rep.miou = counted > 0 ? sum / counted : 0.0;
    return rep;
}

std::string iou_csv(const IouReport& rep) {
    std::string out = "class,iou\n";
    char buf[64];
    for (size_t c = 0; c < rep.per_class.size(); ++c) {
        if (rep.present[c]) {
            std::snprintf(buf, sizeof buf, "%zu,%.6f\n", c, rep.per_class[c]);
            out += buf;
        } else {
            std::snprintf(buf, sizeof buf, "%zu,absent\n", c);
            out += buf;
        }
    }
    std::snprintf(buf, sizeof buf, "miou,%.6f\n", rep.miou);
    out += buf;
    return out;
}

void write_iou_csv(const IouReport& rep, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    require(f.good(), "write_iou_csv: cannot open " + path);
    f << iou_csv(rep);
    require(f.good(), "write_iou_csv: short write to " + path);
}

}  // namespace metapix::eval
