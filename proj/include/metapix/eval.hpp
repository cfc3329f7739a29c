#pragma once

// Confusion-matrix accumulation, per-class IoU / mIoU, and weight-map export.

#include <string>
#include <vector>

#include "metapix/png_io.hpp"
#include "metapix/tensor.hpp"

namespace metapix::eval {

class Confusion {
  public:
    explicit Confusion(int num_classes) : c_(num_classes), m_(size_t(num_classes) * num_classes, 0) {}

    int num_classes() const { return c_; }
    long at(int truth, int pred) const { return m_[size_t(truth) * c_ + pred]; }
    long total() const;

    // Adds counts; pixels whose truth equals ignore_id are skipped.
    void accumulate(const IntMap& pred, const IntMap& truth, int ignore_id = 255);
    Confusion& merge(const Confusion& other);

  private:
    int c_;
    std::vector<long> m_;
};

struct IouReport {
    std::vector<double> per_class;  // NaN where absent
    std::vector<bool> present;      // false: zero denominator, excluded from mean
    double miou = 0.0;
};

// IoU_c = diag / (row + col - diag); zero-denominator classes are excluded
// from the mean and reported absent.
IouReport miou(const Confusion& conf);

// "class,iou" rows (value or "absent"), then a final "miou,<value>" row.
void write_iou_csv(const IouReport& rep, const std::string& path);
std::string iou_csv(const IouReport& rep);

// Argmax over the channel axis of [B,C,H,W] logits -> [B,H,W] ids.
template <class Real>
IntMap argmax_channels(const Tensor<Real>& logits) {
    require(logits.shape.size() == 4, "argmax_channels: expected [B,C,H,W]");
    const int B = logits.shape[0], C = logits.shape[1];
    const long hw = long(logits.shape[2]) * logits.shape[3];
    IntMap out = IntMap::zeros({B, logits.shape[2], logits.shape[3]});
    for (int b = 0; b < B; ++b)
        for (long k = 0; k < hw; ++k) {
            int best = 0;
            Real bv = (*logits.values)[long(b) * C * hw + k];
            for (int c = 1; c < C; ++c) {
                const Real v = (*logits.values)[(long(b) * C + c) * hw + k];
                if (v > bv) {
                    bv = v;
                    best = c;
                }
            }
            out.v[size_t(b * hw + k)] = best;
        }
    return out;
}

// 8-bit grayscale export, pixel = round-half-up(255 * w). For a C-channel
// map the ground-truth channel is exported when a label is supplied,
// channel 0 otherwise.
template <class Real>
void export_weight_map(const Tensor<Real>& w, const std::string& path,
                       const IntMap* label = nullptr) {
    require(w.shape.size() == 4 && w.shape[0] == 1,
            "export_weight_map: expected [1,m,H,W], got " + shape_str(w.shape));
    const int m = w.shape[1], H = w.shape[2], W = w.shape[3];
    const long hw = long(H) * W;
    png::Image img;
    img.width = W;
    img.height = H;
    img.channels = 1;
    img.pixels.resize(size_t(hw));
    for (long k = 0; k < hw; ++k) {
        int ch = 0;
        if (m > 1 && label) {
            const int id = label->v[size_t(k)];
            if (id >= 0 && id < m) ch = id;
        }
        const double v = double((*w.values)[long(ch) * hw + k]);
        img.pixels[size_t(k)] = std::uint8_t(std::floor(255.0 * v + 0.5));
    }
    png::write(path, img);
}

}  // namespace metapix::eval
