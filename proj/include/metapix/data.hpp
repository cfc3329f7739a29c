#pragma once

// Synthetic two-domain benchmark: target images are clean renderings of
// random shapes; source images get a per-image color affine shift plus
// texture noise, and a fraction rho of them carry one rectangular region of
// uniformly resampled labels. Corruption masks are written under meta/ and
// are never read by any training path.

#include <string>
#include <vector>

#include <json.hpp>

#include "metapix/png_io.hpp"
#include "metapix/tensor.hpp"

namespace metapix::data {

struct DatasetSpec {
    int image_size = 64;
    int num_classes = 5;  // including background
    int n_source = 400;
    int n_target_train = 40;
    int n_target_val = 100;
    int shapes_min = 2;
    int shapes_max = 5;
    double sigma_tex = 0.08;     // texture noise amplitude (source shift)
    double color_jitter = 0.25;  // affine scale range (source shift)
    double rho = 0.5;            // fraction of source images with poisoned labels
    double corrupt_area_min = 0.10;
    double corrupt_area_max = 0.40;
    std::uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const DatasetSpec& s);
void from_json(const nlohmann::json& j, DatasetSpec& s);

struct Item {
    std::string image_path;
    std::string label_path;
    std::string mask_path;  // empty unless source
    std::string split;      // source | target_train | target_val
    std::string domain;     // source | target
    int index = 0;
};

struct Manifest {
    DatasetSpec spec;
    std::string root;
    std::vector<Item> items;

    std::vector<const Item*> split(const std::string& name) const {
        std::vector<const Item*> out;
        for (const auto& it : items)
            if (it.split == name) out.push_back(&it);
        return out;
    }
};

// Writes images/labels/masks and manifest.json; byte-identical per spec+seed.
Manifest generate(const DatasetSpec& spec, const std::string& out_dir);

Manifest load_manifest(const std::string& dir);

// Decoded label map of one item; validates ids against num_classes/255.
IntMap load_label(const Manifest& m, const Item& item);

// Corruption mask (0 = clean, nonzero = poisoned). Evaluation-only.
IntMap load_mask(const Manifest& m, const Item& item);

template <class Real>
struct Batch {
    Tensor<Real> image;  // [B,3,H,W] in [0,1]
    IntMap label;        // [B,H,W]
    std::string domain;
};

template <class Real>
Batch<Real> load_batch(const Manifest& m, const std::string& split, const std::vector<int>& indices) {
    auto items = m.split(split);
    require(!items.empty(), "load_batch: unknown or empty split " + split);
    const int B = int(indices.size());
    require(B > 0, "load_batch: empty index list");

    Batch<Real> out;
    const int S = m.spec.image_size;
    out.image = Tensor<Real>::zeros({B, 3, S, S});
    out.label = IntMap::zeros({B, S, S});
    out.domain = items[0]->domain;
    const long hw = long(S) * S;
    for (int b = 0; b < B; ++b) {
        require(indices[size_t(b)] >= 0 && indices[size_t(b)] < int(items.size()),
                "load_batch: index " + std::to_string(indices[size_t(b)]) + " out of range for " + split);
        const Item& it = *items[size_t(indices[size_t(b)])];
        auto img = png::read(m.root + "/" + it.image_path);
        require(img.width == S && img.height == S && img.channels == 3,
                "load_batch: unexpected image geometry in " + it.image_path);
        for (long k = 0; k < hw; ++k)
            for (int c = 0; c < 3; ++c)
                (*out.image.values)[(long(b) * 3 + c) * hw + k] =
                    Real(img.pixels[size_t(k) * 3 + size_t(c)]) / Real(255);
        IntMap lbl = load_label(m, it);
        std::copy(lbl.v.begin(), lbl.v.end(), out.label.v.begin() + b * hw);
    }
    return out;
}

template <class Real>
Batch<Real> load_batch(const Manifest& m, const std::string& split, int index, int batch_size = 1) {
    std::vector<int> idx;
    for (int b = 0; b < batch_size; ++b) idx.push_back(index + b);
    return load_batch<Real>(m, split, idx);
}

// Seeded epoch-permutation sampler; state is three integers, so a resumed
// run continues the exact same stream.
class Sampler {
  public:
    Sampler(std::uint64_t seed, int count) : seed_(seed), count_(count) { reshuffle(); }

    int next() {
        if (pos_ >= count_) {
            ++epoch_;
            pos_ = 0;
            reshuffle();
        }
        return perm_[size_t(pos_++)];
    }

    std::uint64_t seed() const { return seed_; }
    long epoch() const { return epoch_; }
    int pos() const { return pos_; }
    int count() const { return count_; }

    void restore(long epoch, int pos) {
        require(pos >= 0 && pos <= count_, "sampler: bad restore position");
        epoch_ = epoch;
        pos_ = pos;
        reshuffle();
    }

    const std::vector<int>& current_permutation() const { return perm_; }

  private:
    void reshuffle() {
        perm_.resize(size_t(count_));
        for (int i = 0; i < count_; ++i) perm_[size_t(i)] = i;
        Rng rng(mix_seed(seed_, std::uint64_t(epoch_) + 0x5e11ull));
        for (int i = count_ - 1; i > 0; --i)
            std::swap(perm_[size_t(i)], perm_[size_t(rng.uniform_int(i + 1))]);
    }

    std::uint64_t seed_;
    int count_;
    long epoch_ = 0;
    int pos_ = 0;
    std::vector<int> perm_;
};

}  // namespace metapix::data
