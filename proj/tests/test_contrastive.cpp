#include <catch2/catch_amalgamated.hpp>

#include "oracles.hpp"
#include "uniclam/contrastive.hpp"

using namespace uniclam;

namespace {

EncoderConfig tiny_cfg() {
    EncoderConfig c;
    c.layers = 2;
    c.hidden = 8;
    c.heads = 2;
    c.patch_size = 4;
    c.vocab_size = 16;
    c.q_max = 6;
    c.proj_dim = 4;
    c.image_size = 8;
    return c;
}

MaskingConfig tiny_mask_cfg() {
    MaskingConfig c;
    c.n_vision = 2;
    c.n_text = 2;
    c.channels = 4;
    c.hidden = 8;
    c.heads = 2;
    return c;
}

Tensor rand_vec(int n, Rng& rng) {
    Tensor t({n});
    for (auto& x : t.v) x = rng.uniform(-1.0, 1.0);
    return t;
}

Tensor rand_image(int h, int w, Rng& rng) {
    Tensor t({h, w});
    for (auto& x : t.v) x = rng.next_unit();
    return t;
}

std::vector<double> vec(const Tensor& t) { return t.v; }

}  // namespace

TEST_CASE("info_nce at the uniform-similarity point equals log(2n-1)") {
    for (int n : {2, 3, 8}) {
        for (double tau : {0.1, 0.5, 2.0}) {
            TapeT<double> tape;
            Ctx<double> ctx(tape);
            Tensor same({4}, {0.5, -0.5, 0.5, -0.5});
            std::vector<VarT<double>> anchors, positives;
            for (int i = 0; i < n; ++i) {
                anchors.push_back(ctx.input(same));
                positives.push_back(ctx.input(same));
            }
            double loss = info_nce(ctx, anchors, positives, tau).scalar();
            CHECK(loss == Catch::Approx(std::log(2.0 * n - 1.0)).margin(1e-6));
        }
    }
}

TEST_CASE("info_nce rejects degenerate batches and temperatures") {
    TapeT<double> tape;
    Ctx<double> ctx(tape);
    Rng rng(1);
    std::vector<VarT<double>> one{ctx.input(rand_vec(4, rng))};
    CHECK_THROWS_AS(info_nce(ctx, one, one, 0.1), Error);
    std::vector<VarT<double>> two{ctx.input(rand_vec(4, rng)), ctx.input(rand_vec(4, rng))};
    CHECK_THROWS_AS(info_nce(ctx, two, two, 0.0), Error);
    CHECK_THROWS_AS(info_nce(ctx, two, two, -1.0), Error);
}

TEST_CASE("aligned positives, orthogonal negatives: loss shrinks as tau shrinks") {
    // n=2 with orthogonal pairs; evaluated at tau=0.5 and tau=0.05 against the
    // loop oracle, and the smaller temperature must give the smaller loss.
    std::vector<std::vector<double>> anchors = {{1, 0, 0, 0}, {0, 1, 0, 0}};
    std::vector<std::vector<double>> positives = anchors;
    double losses[2];
    int idx = 0;
    for (double tau : {0.5, 0.05}) {
        TapeT<double> tape;
        Ctx<double> ctx(tape);
        std::vector<VarT<double>> av, pv;
        for (auto& a : anchors) av.push_back(ctx.input(Tensor({4}, std::vector<double>(a))));
        for (auto& p : positives) pv.push_back(ctx.input(Tensor({4}, std::vector<double>(p))));
        double got = info_nce(ctx, av, pv, tau).scalar();
        double expect = oracle::info_nce_ref(anchors, positives, tau);
        CHECK(got == Catch::Approx(expect).margin(1e-9));
        losses[idx++] = got;
    }
    CHECK(losses[1] < losses[0]);
    CHECK(losses[1] < 1e-5);  // -> 0 as tau -> 0
}

TEST_CASE("info_nce matches the brute-force pairwise oracle on a random batch") {
    Rng rng(7);
    int n = 3, dim = 8;
    std::vector<std::vector<double>> anchors, positives;
    for (int i = 0; i < n; ++i) {
        anchors.push_back(vec(rand_vec(dim, rng)));
        positives.push_back(vec(rand_vec(dim, rng)));
    }
    TapeT<double> tape;
    Ctx<double> ctx(tape);
    std::vector<VarT<double>> av, pv;
    for (auto& a : anchors) av.push_back(ctx.input(Tensor({dim}, std::vector<double>(a))));
    for (auto& p : positives) pv.push_back(ctx.input(Tensor({dim}, std::vector<double>(p))));
    double got = info_nce(ctx, av, pv, 0.1).scalar();
    CHECK(got == Catch::Approx(oracle::info_nce_ref(anchors, positives, 0.1)).margin(1e-9));
}

TEST_CASE("info_nce is invariant to a common permutation of the pairs") {
    Rng rng(11);
    int n = 4, dim = 6;
    std::vector<Tensor> anchors, positives;
    for (int i = 0; i < n; ++i) {
        anchors.push_back(rand_vec(dim, rng));
        positives.push_back(rand_vec(dim, rng));
    }
    auto eval = [&](const std::vector<int>& order) {
        TapeT<double> tape;
        Ctx<double> ctx(tape);
        std::vector<VarT<double>> av, pv;
        for (int i : order) av.push_back(ctx.input(anchors[i]));
        for (int i : order) pv.push_back(ctx.input(positives[i]));
        return info_nce(ctx, av, pv, 0.2).scalar();
    };
    double base = eval({0, 1, 2, 3});
    CHECK(eval({2, 0, 3, 1}) == Catch::Approx(base).margin(1e-12));
    CHECK(base > 0.0);  // lower-bound property on a non-degenerate batch
}

TEST_CASE("Eq 2 gradient matches central finite differences (n=3, dim=8, tau=0.1)") {
    Rng rng(13);
    int n = 3, dim = 8;
    std::vector<Tensor> zs;
    for (int i = 0; i < 2 * n; ++i) zs.push_back(rand_vec(dim, rng));
    ParamList<double> params;
    for (int i = 0; i < 2 * n; ++i) params.push_back({"z" + std::to_string(i), &zs[i]});
    auto report = grad_check<double>(
        [&](Ctx<double>& ctx) {
            std::vector<VarT<double>> av, pv;
            for (int i = 0; i < n; ++i) av.push_back(ctx.use(zs[i]));
            for (int i = n; i < 2 * n; ++i) pv.push_back(ctx.use(zs[i]));
            return info_nce(ctx, av, pv, 0.1);
        },
        params, 1e-5);
    INFO("worst " << report.worst);
    CHECK(report.worst < 1e-4);
}

TEST_CASE("clam with all-zero masks reduces to anchor==positive InfoNCE form") {
    auto cfg = tiny_cfg();
    auto enc = make_encoder_stack<double>(cfg, Modality::Vision, 3, "ev");
    auto masker = make_masking_model<double>(tiny_mask_cfg(), 4, "m");
    Rng rng(17);
    std::vector<Tensor> images{rand_image(8, 8, rng), rand_image(8, 8, rng), rand_image(8, 8, rng)};

    // zero masks via the random-source path
    std::vector<MaskSetT<double>> zero_masks(3);
    for (auto& ms : zero_masks) {
        ms.modality = Modality::Vision;
        ms.values = Tensor({2, 8, 8});  // all zeros: occlusion keeps x intact
    }
    TapeT<double> tape;
    Ctx<double> ctx(tape);
    auto out = clam_loss_vision(ctx, enc, enc.layers, masker, images, 0.1, MaskSemantics::Occlude,
                                MaskSource::Random, &zero_masks);

    // oracle: anchors equal the unmasked encodings
    std::vector<std::vector<double>> z;
    for (auto& img : images) z.push_back(oracle::encode_ref(enc, oracle::embed_image_ref(enc, img)).z);
    std::vector<std::vector<std::vector<double>>> anchors(3, std::vector<std::vector<double>>(2));
    for (int i = 0; i < 3; ++i) anchors[i][0] = anchors[i][1] = z[i];
    double expect = oracle::clam_ref(anchors, z, 0.1);
    CHECK(out.loss.scalar() == Catch::Approx(expect).margin(1e-9));
}

TEST_CASE("clam matches the brute-force oracle on a seeded toy batch (n=2, N=1)") {
    auto cfg = tiny_cfg();
    auto enc = make_encoder_stack<double>(cfg, Modality::Vision, 5, "ev");
    MaskingConfig mcfg = tiny_mask_cfg();
    mcfg.n_vision = 1;
    auto masker = make_masking_model<double>(mcfg, 6, "m");
    Rng rng(19);
    std::vector<Tensor> images{rand_image(8, 8, rng), rand_image(8, 8, rng)};

    TapeT<double> tape;
    Ctx<double> ctx(tape);
    auto out = clam_loss_vision(ctx, enc, enc.layers, masker, images, 0.1);

    std::vector<std::vector<double>> z;
    std::vector<std::vector<std::vector<double>>> anchors;
    for (auto& img : images) {
        z.push_back(oracle::encode_ref(enc, oracle::embed_image_ref(enc, img)).z);
        auto masks = oracle::mask_image_ref(masker, img);
        Tensor occluded = img;
        for (int i = 0; i < 64; ++i) occluded.v[i] *= (1.0 - masks[i]);
        anchors.push_back({oracle::encode_ref(enc, oracle::embed_image_ref(enc, occluded)).z});
    }
    CHECK(out.loss.scalar() == Catch::Approx(oracle::clam_ref(anchors, z, 0.1)).margin(1e-9));
}

TEST_CASE("total occlusion drives the anchor to the zero-input representation") {
    auto cfg = tiny_cfg();
    auto enc = make_encoder_stack<double>(cfg, Modality::Vision, 7, "ev");
    for (auto& b : enc.patch_b.v) b = 0.0;  // bias-free embedder
    Rng rng(23);
    std::vector<Tensor> images{rand_image(8, 8, rng), rand_image(8, 8, rng)};

    std::vector<MaskSetT<double>> ones_masks(2);
    for (auto& ms : ones_masks) {
        ms.modality = Modality::Vision;
        ms.values = Tensor({1, 8, 8}, 1.0);
    }
    auto masker = make_masking_model<double>(tiny_mask_cfg(), 8, "m");
    TapeT<double> tape;
    Ctx<double> ctx(tape);
    auto out = clam_loss_vision(ctx, enc, enc.layers, masker, images, 0.1, MaskSemantics::Occlude,
                                MaskSource::Random, &ones_masks);

    // every anchor equals encode(zero image), and the loss matches the oracle
    auto z_zero = oracle::encode_ref(enc, oracle::embed_image_ref(enc, Tensor({8, 8}))).z;
    std::vector<std::vector<double>> z;
    for (auto& img : images) z.push_back(oracle::encode_ref(enc, oracle::embed_image_ref(enc, img)).z);
    std::vector<std::vector<std::vector<double>>> anchors{{z_zero}, {z_zero}};
    double expect = oracle::clam_ref(anchors, z, 0.1);
    double got = out.loss.scalar();
    CHECK(std::isfinite(got));
    CHECK(got == Catch::Approx(expect).margin(1e-9));
}

TEST_CASE("clam gradient certifies the min-max coupling (encoder AND masker)") {
    auto cfg = tiny_cfg();
    auto enc = make_encoder_stack<double>(cfg, Modality::Vision, 9, "ev");
    MaskingConfig mcfg = tiny_mask_cfg();
    mcfg.channels = 2;
    mcfg.n_vision = 2;
    auto masker = make_masking_model<double>(mcfg, 10, "m");
    Rng rng(29);
    std::vector<Tensor> images{rand_image(8, 8, rng), rand_image(8, 8, rng)};

    ParamList<double> params;
    enc.for_each_param([&](const std::string& n, Tensor& t) { params.push_back({n, &t}); });
    masker.for_each_vision_param([&](const std::string& n, Tensor& t) { params.push_back({n, &t}); });
    auto report = grad_check<double>(
        [&](Ctx<double>& ctx) {
            return clam_loss_vision(ctx, enc, enc.layers, masker, images, 0.1).loss;
        },
        params, 1e-5);
    INFO("worst " << report.worst);
    CHECK(report.worst < 1e-4);
}

TEST_CASE("uniclam mixing degenerate cases and affine identity") {
    auto cfg = tiny_cfg();
    auto ev = make_encoder_stack<double>(cfg, Modality::Vision, 11, "ev");
    auto et = make_encoder_stack<double>(cfg, Modality::Text, 12, "et");
    auto masker = make_masking_model<double>(tiny_mask_cfg(), 13, "m");
    Rng rng(31);
    std::vector<Tensor> images{rand_image(8, 8, rng), rand_image(8, 8, rng)};
    std::vector<std::vector<int>> captions{{1, 2, 3}, {4, 5, 6}};

    SECTION("beta=1, lambda=0 collapses to the vision term") {
        TapeT<double> tape;
        Ctx<double> ctx(tape);
        auto out = uniclam_loss(ctx, ev, et, ev.layers, et.layers, masker, images, captions, 0.1,
                                1.0, 0.0);
        CHECK(out.total.scalar() == out.l_clam_v.scalar());
    }

    SECTION("identical stacks zero the sharing term") {
        for (int k = 0; k < cfg.layers; ++k) et.layers[k] = ev.layers[k];
        TapeT<double> tape;
        Ctx<double> ctx(tape);
        auto out = uniclam_loss(ctx, ev, et, ev.layers, et.layers, masker, images, captions, 0.1,
                                0.3, 1e-3);
        CHECK(out.l_gs.scalar() == 0.0);
        double expect = 0.3 * out.l_clam_v.scalar() + 0.7 * out.l_clam_t.scalar();
        CHECK(out.total.scalar() == Catch::Approx(expect).margin(1e-9));
    }

    SECTION("defaults match the sum of component oracles") {
        TapeT<double> tape;
        Ctx<double> ctx(tape);
        auto out = uniclam_loss(ctx, ev, et, ev.layers, et.layers, masker, images, captions, 0.1,
                                0.3, 1e-3);
        auto b = out.breakdown(0.1, 0.3, 1e-3);
        CHECK(b.total ==
              Catch::Approx(0.3 * b.l_clam_v + 0.7 * b.l_clam_t + 1e-3 * b.l_gs).margin(1e-9));

        // components against their own oracles
        std::vector<std::vector<double>> zv;
        std::vector<std::vector<std::vector<double>>> av;
        for (auto& img : images) {
            zv.push_back(oracle::encode_ref(ev, oracle::embed_image_ref(ev, img)).z);
            auto masks = oracle::mask_image_ref(masker, img);
            std::vector<std::vector<double>> per_mask;
            for (int j = 0; j < 2; ++j) {
                Tensor occ = img;
                for (int i = 0; i < 64; ++i) occ.v[i] *= 1.0 - masks[static_cast<std::size_t>(j) * 64 + i];
                per_mask.push_back(oracle::encode_ref(ev, oracle::embed_image_ref(ev, occ)).z);
            }
            av.push_back(per_mask);
        }
        CHECK(b.l_clam_v == Catch::Approx(oracle::clam_ref(av, zv, 0.1)).margin(1e-9));
    }
}

TEST_CASE("uniclam rejects invalid mixing weights") {
    auto cfg = tiny_cfg();
    auto ev = make_encoder_stack<double>(cfg, Modality::Vision, 14, "ev");
    auto et = make_encoder_stack<double>(cfg, Modality::Text, 15, "et");
    auto masker = make_masking_model<double>(tiny_mask_cfg(), 16, "m");
    Rng rng(37);
    std::vector<Tensor> images{rand_image(8, 8, rng), rand_image(8, 8, rng)};
    std::vector<std::vector<int>> captions{{1, 2}, {3, 4}};
    TapeT<double> tape;
    Ctx<double> ctx(tape);
    CHECK_THROWS_AS(uniclam_loss(ctx, ev, et, ev.layers, et.layers, masker, images, captions, 0.1,
                                 1.5, 0.0),
                    Error);
    CHECK_THROWS_AS(uniclam_loss(ctx, ev, et, ev.layers, et.layers, masker, images, captions, 0.1,
                                 0.3, -1.0),
                    Error);
}
