#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "metapix/data.hpp"
#include "metapix/eval.hpp"

using namespace metapix;
namespace fs = std::filesystem;

namespace {

data::DatasetSpec tiny_spec(double rho, std::uint64_t seed) {
    data::DatasetSpec s;
    s.image_size = 16;
    s.num_classes = 4;
    s.n_source = 10;
    s.n_target_train = 2;
    s.n_target_val = 3;
    s.rho = rho;
    s.seed = seed;
    return s;
}

std::string fresh_dir(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("metapix_test_" + name);
    fs::remove_all(dir);
    return dir.string();
}

std::vector<std::string> tree_files(const std::string& root) {
    std::vector<std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) files.push_back(fs::relative(e.path(), root).string());
    std::sort(files.begin(), files.end());
    return files;
}

std::string file_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("png round trip: gray and rgb") {
    png::Image img;
    img.width = 5;
    img.height = 3;
    img.channels = 3;
    Rng rng(1);
    img.pixels.resize(45);
    for (auto& p : img.pixels) p = std::uint8_t(rng.uniform_int(256));
    const auto path = fresh_dir("png") + ".png";
    png::write(path, img);
    auto back = png::read(path);
    CHECK(back.width == 5);
    CHECK(back.channels == 3);
    CHECK(back.pixels == img.pixels);

    CHECK_THROWS_WITH_AS(png::read("/nonexistent/x.png"), doctest::Contains("/nonexistent/x.png"),
                         std::runtime_error);
}

TEST_CASE("generate: determinism, corruption count, rho=0") {
    const auto dir_a = fresh_dir("gen_a");
    const auto dir_b = fresh_dir("gen_b");
    auto m1 = data::generate(tiny_spec(0.5, 9), dir_a);
    auto m2 = data::generate(tiny_spec(0.5, 9), dir_b);

    // byte-identical trees for identical spec+seed
    auto fa = tree_files(dir_a), fb = tree_files(dir_b);
    REQUIRE(fa == fb);
    for (const auto& f : fa) CHECK(file_bytes(dir_a + "/" + f) == file_bytes(dir_b + "/" + f));

    // floor(rho*n) = 5 corrupted source images
    int nonempty = 0;
    for (const auto* item : m1.split("source")) {
        auto mask = data::load_mask(m1, *item);
        bool any = false;
        for (int v : mask.v) any = any || v != 0;
        nonempty += any ? 1 : 0;
    }
    CHECK(nonempty == 5);

    // rho = 0: every mask is all-zero
    const auto dir_c = fresh_dir("gen_c");
    auto m3 = data::generate(tiny_spec(0.0, 9), dir_c);
    for (const auto* item : m3.split("source")) {
        auto mask = data::load_mask(m3, *item);
        for (int v : mask.v) CHECK(v == 0);
    }

    data::DatasetSpec bad = tiny_spec(1.5, 0);
    CHECK_THROWS(data::generate(bad, fresh_dir("gen_bad")));
}

TEST_CASE("manifest round trip and split disjointness") {
    const auto dir = fresh_dir("manifest");
    auto m = data::generate(tiny_spec(0.5, 3), dir);
    auto loaded = data::load_manifest(dir);
    CHECK(loaded.items.size() == m.items.size());
    CHECK(loaded.spec.num_classes == 4);

    std::vector<std::string> paths;
    for (const auto& it : loaded.items) paths.push_back(it.image_path);
    std::sort(paths.begin(), paths.end());
    CHECK(std::adjacent_find(paths.begin(), paths.end()) == paths.end());  // no file in two splits
    CHECK(loaded.split("source").size() == 10);
    CHECK(loaded.split("target_train").size() == 2);
    CHECK(loaded.split("target_val").size() == 3);
}

TEST_CASE("load_batch: round trip, determinism, validation") {
    const auto dir = fresh_dir("load");
    auto m = data::generate(tiny_spec(0.5, 5), dir);

    auto b1 = data::load_batch<float>(m, "source", 0);
    auto b2 = data::load_batch<float>(m, "source", 0);
    CHECK(*b1.image.values == *b2.image.values);  // bit-exact reload
    CHECK(b1.label.v == b2.label.v);
    CHECK(b1.image.shape == Shape{1, 3, 16, 16});
    CHECK(b1.domain == "source");
    for (float v : *b1.image.values) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }
    for (int v : b1.label.v) CHECK(v < 4);

    CHECK_THROWS(data::load_batch<float>(m, "source", 99));
    CHECK_THROWS(data::load_batch<float>(m, "no_such_split", 0));

    // batch of 2 stacks images
    auto b3 = data::load_batch<float>(m, "source", 0, 2);
    CHECK(b3.image.shape == Shape{2, 3, 16, 16});

    // a label file with out-of-range ids is rejected on load
    png::Image evil;
    evil.width = evil.height = 16;
    evil.channels = 1;
    evil.pixels.assign(256, 200);  // 200 >= C and != 255
    png::write(dir + "/source/labels/000000.png", evil);
    CHECK_THROWS_WITH_AS(data::load_batch<float>(m, "source", 0),
                         doctest::Contains("out of range"), std::runtime_error);
}

TEST_CASE("sampler: epoch permutation covers every index once, restore works") {
    data::Sampler s(42, 7);
    std::vector<int> seen;
    for (int i = 0; i < 7; ++i) seen.push_back(s.next());
    std::sort(seen.begin(), seen.end());
    CHECK(seen == std::vector<int>{0, 1, 2, 3, 4, 5, 6});

    data::Sampler a(11, 5), b(11, 5);
    for (int i = 0; i < 12; ++i) CHECK(a.next() == b.next());

    // restore mid-epoch reproduces the stream
    data::Sampler c(11, 5);
    for (int i = 0; i < 7; ++i) c.next();
    data::Sampler d(11, 5);
    d.restore(c.epoch(), c.pos());
    data::Sampler e(11, 5);
    for (int i = 0; i < 7; ++i) e.next();
    for (int i = 0; i < 8; ++i) CHECK(d.next() == e.next());
}

TEST_CASE("confusion: oracle match, ignore handling, merge additivity") {
    Rng rng(3);
    IntMap pred = IntMap::zeros({8, 8}), truth = IntMap::zeros({8, 8});
    for (auto& v : pred.v) v = rng.uniform_int(3);
    for (auto& v : truth.v) v = rng.uniform_int(4) == 3 ? 255 : rng.uniform_int(3);

    eval::Confusion conf(3);
    conf.accumulate(pred, truth);

    long oracle[3][3] = {};
    long total = 0;
    for (size_t k = 0; k < truth.v.size(); ++k) {
        if (truth.v[k] == 255) continue;
        ++oracle[truth.v[k]][pred.v[k]];
        ++total;
    }
    for (int t = 0; t < 3; ++t)
        for (int p = 0; p < 3; ++p) CHECK(conf.at(t, p) == oracle[t][p]);
    CHECK(conf.total() == total);

    // pred == truth: off-diagonal all zero
    eval::Confusion diag(3);
    diag.accumulate(truth, truth, /*ignore_id=*/255);
    for (int t = 0; t < 3; ++t)
        for (int p = 0; p < 3; ++p)
            if (t != p) CHECK(diag.at(t, p) == 0);

    // all ignored: unchanged
    IntMap ignored = IntMap::zeros({4, 4});
    for (auto& v : ignored.v) v = 255;
    eval::Confusion empty(3);
    empty.accumulate(ignored, ignored);
    CHECK(empty.total() == 0);

    // additivity: accumulating two sets equals merging per-set confusions
    IntMap p2 = IntMap::zeros({8, 8}), t2 = IntMap::zeros({8, 8});
    for (auto& v : p2.v) v = rng.uniform_int(3);
    for (auto& v : t2.v) v = rng.uniform_int(3);
    eval::Confusion both(3);
    both.accumulate(pred, truth);
    both.accumulate(p2, t2);
    eval::Confusion second(3);
    second.accumulate(p2, t2);
    eval::Confusion merged(3);
    merged.accumulate(pred, truth);
    merged.merge(second);
    for (int t = 0; t < 3; ++t)
        for (int p = 0; p < 3; ++p) CHECK(both.at(t, p) == merged.at(t, p));
}

TEST_CASE("miou: perfect, forced arithmetic, absent classes, permutation equivariance") {
    eval::Confusion perfect(3);
    IntMap t = IntMap::zeros({4, 4});
    for (size_t k = 0; k < t.v.size(); ++k) t.v[k] = int(k % 3);
    perfect.accumulate(t, t);
    auto rp = eval::miou(perfect);
    for (int c = 0; c < 3; ++c) CHECK(rp.per_class[size_t(c)] == 1.0);
    CHECK(rp.miou == 1.0);

    // binary [[3,1],[1,3]]: IoU 3/5 each, mean 0.6
    eval::Confusion bin(2);
    IntMap bp = IntMap::zeros({1, 8}), bt = IntMap::zeros({1, 8});
    bt.v = {0, 0, 0, 0, 1, 1, 1, 1};
    bp.v = {0, 0, 0, 1, 0, 1, 1, 1};
    bin.accumulate(bp, bt);
    auto rb = eval::miou(bin);
    CHECK(rb.per_class[0] == doctest::Approx(0.6));
    CHECK(rb.per_class[1] == doctest::Approx(0.6));
    CHECK(rb.miou == doctest::Approx(0.6));

    // class 2 absent from truth and prediction: excluded from the mean
    eval::Confusion absent(3);
    absent.accumulate(bp, bt);
    auto ra = eval::miou(absent);
    CHECK_FALSE(ra.present[2]);
    CHECK(ra.miou == doctest::Approx(0.6));

    // permuting class labels permutes IoU and keeps the mean
    const int perm[3] = {2, 0, 1};
    IntMap pp = IntMap::zeros({8, 8}), pt = IntMap::zeros({8, 8});
    Rng rng(9);
    for (size_t k = 0; k < pp.v.size(); ++k) {
        pp.v[k] = rng.uniform_int(3);
        pt.v[k] = rng.uniform_int(3);
    }
    eval::Confusion c1(3), c2(3);
    c1.accumulate(pp, pt);
    IntMap ppp = pp, ppt = pt;
    for (auto& v : ppp.v) v = perm[v];
    for (auto& v : ppt.v) v = perm[v];
    c2.accumulate(ppp, ppt);
    auto r1 = eval::miou(c1), r2 = eval::miou(c2);
    CHECK(r1.miou == doctest::Approx(r2.miou).epsilon(1e-12));
    for (int c = 0; c < 3; ++c)
        CHECK(r1.per_class[size_t(c)] == doctest::Approx(r2.per_class[size_t(perm[c])]).epsilon(1e-12));
}

TEST_CASE("iou csv format") {
    eval::Confusion bin(3);
    IntMap bp = IntMap::zeros({1, 8}), bt = IntMap::zeros({1, 8});
    bt.v = {0, 0, 0, 0, 1, 1, 1, 1};
    bp.v = {0, 0, 0, 1, 0, 1, 1, 1};
    bin.accumulate(bp, bt);
    auto csv = eval::iou_csv(eval::miou(bin));
    CHECK(csv.find("class,iou\n") == 0);
    CHECK(csv.find("0,0.600000") != std::string::npos);
    CHECK(csv.find("2,absent") != std::string::npos);
    CHECK(csv.find("miou,0.600000") != std::string::npos);
}

TEST_CASE("weight map export: rounding rule and quantization bound") {
    auto w = Tensor<float>::full({1, 1, 4, 4}, 0.5f);
    const auto path = fresh_dir("wmap") + ".png";
    eval::export_weight_map(w, path);
    auto img = png::read(path);
    for (auto p : img.pixels) CHECK(int(p) == 128);  // round(127.5) half-up

    Rng rng(15);
    auto w2 = Tensor<float>::zeros({1, 1, 4, 4});
    for (long k = 0; k < w2.size(); ++k) (*w2.values)[k] = float(rng.uniform(0.001, 0.999));
    eval::export_weight_map(w2, path);
    auto img2 = png::read(path);
    for (long k = 0; k < w2.size(); ++k) {
        const double decoded = img2.pixels[size_t(k)] / 255.0;
        CHECK(std::abs(decoded - double((*w2.values)[k])) <= 1.0 / 510.0 + 1e-9);
    }

    // range ends
    auto lo = Tensor<float>::full({1, 1, 2, 2}, 0.0001f);
    eval::export_weight_map(lo, path);
    for (auto p : png::read(path).pixels) CHECK(int(p) == 0);
    auto hi = Tensor<float>::full({1, 1, 2, 2}, 0.9999f);
    eval::export_weight_map(hi, path);
    for (auto p : png::read(path).pixels) CHECK(int(p) == 255);

    // C-channel map exports the ground-truth channel when a label is given
    auto wc = Tensor<float>::zeros({1, 3, 2, 2});
    for (int c = 0; c < 3; ++c)
        for (long k = 0; k < 4; ++k) (*wc.values)[c * 4 + k] = 0.1f + 0.3f * float(c);
    IntMap label = IntMap::zeros({2, 2});
    label.v = {0, 1, 2, 1};
    eval::export_weight_map(wc, path, &label);
    auto img3 = png::read(path);
    CHECK(int(img3.pixels[0]) == int(std::floor(255 * 0.1 + 0.5)));
    CHECK(int(img3.pixels[1]) == int(std::floor(255 * 0.4 + 0.5)));
    CHECK(int(img3.pixels[2]) == int(std::floor(255.0 * 0.7 + 0.5)));
}
