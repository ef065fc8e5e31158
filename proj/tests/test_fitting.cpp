#include "support.hpp"

#include <numeric>

using namespace testsupport;

namespace {

double inverse_softplus(double s) { return std::log(std::expm1(s)); }

// Solid hair box: dense inside, exactly empty outside.
HairEntry box_hair(const std::string& id, const Vec3& center, double half) {
    HairEntry h;
    h.id = id;
    const Bbox box{center - Vec3::Constant(half), center + Vec3::Constant(half)};
    h.planes = HexPlanes::zeros(2, 1, box, 0.25 * 2 * half);
    std::fill(h.planes.data.begin(), h.planes.data.end(), 1.0f / 3.0f);
    h.decoder = FieldDecoder::make(1, -1000.0);
    h.decoder.params[0] = static_cast<float>(1000.0 + inverse_softplus(60.0));
    return h;
}

Camera front_camera(int size = 32) {
    return Camera::look_at(Vec3(0.3, 0.4, 2.6), Vec3::Zero(), Intrinsics::from_fov(30, size, size));
}

RenderConfig match_render() {
    RenderConfig c;
    c.samples = 64;
    return c;
}

Mask threshold(const std::vector<float>& alpha, int w, int h) {
    Mask m(w, h);
    for (std::size_t p = 0; p < alpha.size(); ++p) m.data[p] = alpha[p] > 0.5f;
    return m;
}

HeadLibrary box_library() {
    HeadLibrary lib;
    lib.hair.push_back(box_hair("s1", Vec3(0, 0.3, 0), 0.2));
    lib.hair.push_back(box_hair("s2", Vec3(0, 0.3, 0), 0.35));
    lib.hair.push_back(box_hair("s3", Vec3(0.3, 0.3, 0), 0.2));
    return lib;
}

FitInput fit_input(const HeadLibrary& lib, std::size_t k, const std::string& hair, const Camera& cam) {
    const HeadInstance h = library_instance(lib, k, 0, hair);
    FitInput in;
    in.camera = cam;
    in.image = render_instance(lib, h, cam, lib.render).image;
    const auto alpha = hair_alpha(lib, hair, cam, lib.render);
    in.hair_mask = threshold(alpha, cam.width(), cam.height());
    in.landmarks = project_landmarks(lib.model, h.s, h.b, cam, lib.landmarks);
    return in;
}

Image frame_of(const HeadLibrary& lib, const HeadInstance& h, const Camera& cam, bool with_hair = true) {
    return render_instance(lib, h, cam, lib.render, with_hair).image;
}

} // namespace

TEST(HairMatch, SelfMatch) {
    const HeadLibrary lib = box_library();
    const Camera cam = front_camera();
    for (const auto& id : {"s1", "s2", "s3"}) {
        const auto alpha = hair_alpha(lib, id, cam, match_render());
        const HairQuery q{threshold(alpha, 32, 32), cam};
        ASSERT_GT(q.silhouette.count(), 0u);
        const HairMatch m = match_hairstyle(lib, std::span(&q, 1), match_render());
        EXPECT_EQ(m.id, id);
        ASSERT_EQ(m.distances.size(), 4u);
        EXPECT_EQ(m.distances[0].first, "bald");
    }
}

TEST(HairMatch, EmptySilhouetteIsBald) {
    const HeadLibrary lib = box_library();
    const Camera cam = front_camera();
    const HairQuery q{Mask(32, 32), cam};
    const HairMatch m = match_hairstyle(lib, std::span(&q, 1), match_render());
    EXPECT_EQ(m.id, "bald");
    EXPECT_EQ(m.distances[0].second, 0.0);
}

TEST(HairMatch, TieGoesToEarlierEntry) {
    HeadLibrary lib;
    lib.hair.push_back(box_hair("s1", Vec3(0, 0.3, 0), 0.25));
    lib.hair.push_back(box_hair("s2", Vec3(0, 0.3, 0), 0.25));
    const Camera cam = front_camera();
    const HairQuery q{threshold(hair_alpha(lib, "s2", cam, match_render()), 32, 32), cam};
    const HairMatch m = match_hairstyle(lib, std::span(&q, 1), match_render());
    EXPECT_EQ(m.distances[1].second, m.distances[2].second);
    EXPECT_EQ(m.id, "s1");
}

TEST(HairMatch, DescriptorBoxAverage) {
    Mask m(32, 32);
    // top-left 2x2 block fully covered maps to one descriptor cell
    m.data[0] = m.data[1] = m.data[32] = m.data[33] = 1;
    m.data[2] = 1;
    const auto d = silhouette_descriptor(m);
    ASSERT_EQ(d.size(), 256u);
    EXPECT_DOUBLE_EQ(d[0], 1.0);
    EXPECT_DOUBLE_EQ(d[1], 0.25);
    EXPECT_DOUBLE_EQ(std::accumulate(d.begin(), d.end(), 0.0), 1.25);
    EXPECT_THROW(silhouette_descriptor(std::vector<float>(10), 4, 4), Error);
}

TEST(Fit, ZeroTextureStepsKeepsInitTexture) {
    const HeadLibrary& lib = tiny_library();
    const Camera cam = lib.cameras[1];
    const FitInput in = fit_input(lib, 2, "bald", cam);
    FitConfig cfg;
    cfg.texture_steps = 0;
    cfg.init_texture = 1;
    cfg.hairstyle = "bald";
    const FittedHead f = fit_single_image(lib, in, cfg);
    EXPECT_EQ(f.init_texture, 1u);
    EXPECT_EQ(f.texture.features, lib.textures[1].features);
    EXPECT_EQ(f.hairstyle, "bald");
}

TEST(Fit, RecoversShapeFromLandmarks) {
    const HeadLibrary& lib = tiny_library();
    const Camera cam = lib.cameras[0];
    const FitInput in = fit_input(lib, 1, "bald", cam);
    FitConfig cfg;
    cfg.texture_steps = 0;
    cfg.hairstyle = "bald";
    const FittedHead f = fit_single_image(lib, in, cfg);
    const Eigen::VectorXd truth = lib.identity_shape(1).values;
    EXPECT_LT((f.s.values - truth).norm() / truth.norm(), 0.05);
    EXPECT_LT(f.report["stage1"]["rms_residual_px"].get<double>(), 0.05);
}

TEST(Fit, TextureStageImprovesBaldRegion) {
    const HeadLibrary& lib = tiny_library();
    const Camera cam = lib.cameras[0];
    const FitInput in = fit_input(lib, 0, "bald", cam);
    FitConfig cfg;
    cfg.texture_steps = 25;
    cfg.rays_per_step = 0;
    cfg.texture_lr = 0.02;
    cfg.init_texture = 3;
    cfg.hairstyle = "bald";
    const FittedHead f = fit_single_image(lib, in, cfg);
    const auto& losses = f.report["stage2_losses"];
    ASSERT_EQ(losses.size(), 25u);
    EXPECT_LT(losses.back().get<double>(), losses.front().get<double>());
    EXPECT_GT(f.report["stage2_final_psnr"].get<double>(), f.report["stage2_init_psnr"].get<double>());
    // deterministic for a fixed seed
    const FittedHead g = fit_single_image(lib, in, cfg);
    EXPECT_EQ(g.texture.features, f.texture.features);
}

TEST(Fit, RejectsBadInputs) {
    const HeadLibrary& lib = tiny_library();
    const Camera cam = lib.cameras[0];
    FitInput in = fit_input(lib, 0, "bald", cam);
    FitConfig cfg;
    cfg.texture_steps = 0;
    FitInput all_hair = in;
    std::fill(all_hair.hair_mask.data.begin(), all_hair.hair_mask.data.end(), 1);
    EXPECT_THROW(fit_single_image(lib, all_hair, cfg), Error);
    FitInput no_lm = in;
    no_lm.landmarks.clear();
    EXPECT_THROW(fit_single_image(lib, no_lm, cfg), Error);
    FitInput wrong = in;
    wrong.hair_mask = Mask(8, 8);
    EXPECT_THROW(fit_single_image(lib, wrong, cfg), Error);
    cfg.hairstyle = "nope";
    EXPECT_THROW(fit_single_image(lib, in, cfg), Error);
}

TEST(Fit, SaveLoadRoundTrip) {
    const HeadLibrary& lib = tiny_library();
    const FitInput in = fit_input(lib, 0, "bald", lib.cameras[0]);
    FitConfig cfg;
    cfg.texture_steps = 2;
    cfg.rays_per_step = 16;
    cfg.hairstyle = "s1";
    const FittedHead f = fit_single_image(lib, in, cfg);
    const fs::path dir = scratch_dir("fitted");
    save_fitted_head(f, dir);
    const FittedHead g = load_fitted_head(dir);
    EXPECT_EQ(g.s.values, f.s.values);
    EXPECT_EQ(g.texture.features, f.texture.features);
    EXPECT_EQ(g.hairstyle, "s1");
    EXPECT_EQ(g.init_texture, f.init_texture);
    EXPECT_EQ(g.report, f.report);
    fs::remove_all(dir);
}

TEST(Swap, BaldEqualsHeadOnly) {
    const HeadLibrary& lib = tiny_library();
    const Camera cam = lib.cameras[3];
    const HeadInstance h = library_instance(lib, 1, 0, "s2");
    const HeadInstance bald = swap_hair(lib, h, "bald");
    EXPECT_EQ(encode_png(frame_of(lib, bald, cam)), encode_png(frame_of(lib, h, cam, false)));
    EXPECT_EQ(bald.texture.features, h.texture.features);
    EXPECT_EQ(bald.s.values, h.s.values);
}

TEST(Swap, RoundTripIsBitIdentical) {
    const HeadLibrary& lib = tiny_library();
    const Camera cam = lib.cameras[5];
    const HeadInstance h = library_instance(lib, 2, 0, "s1");
    const Image before = frame_of(lib, h, cam);
    const HeadInstance back = swap_hair(lib, swap_hair(lib, h, "s3"), "s1");
    const Image after = frame_of(lib, back, cam);
    EXPECT_EQ(after.rgb, before.rgb);
    EXPECT_NE(frame_of(lib, swap_hair(lib, h, "s3"), cam).rgb, before.rgb);
    EXPECT_THROW(swap_hair(lib, h, "s9"), Error);
}

TEST(Animate, ConstantStreamGivesIdenticalFrames) {
    const HeadLibrary& lib = tiny_library();
    const HeadInstance h = library_instance(lib, 0, 0, "s1");
    const nlohmann::json stream = nlohmann::json::parse(R"([
        {"activations": [0.3, 0.6], "camera_id": 2},
        {"activations": [0.3, 0.6], "camera_id": 2},
        {"activations": [0.3, 0.6], "camera_id": 2}])");
    const auto frames = parse_animation_stream(stream, lib);
    const auto out = animate(lib, h.s, h.texture, h.hairstyle, frames, lib.render);
    ASSERT_EQ(out.size(), 3u);
    EXPECT_EQ(out[0].rgb, out[1].rgb);
    EXPECT_EQ(out[1].rgb, out[2].rgb);
}

TEST(Animate, ZeroActivationsEqualStaticRender) {
    const HeadLibrary& lib = tiny_library();
    const HeadInstance h = library_instance(lib, 1, 0, "s2");
    const AnimationFrame f{{0.0, 0.0}, lib.cameras[4]};
    const auto out = animate(lib, h.s, h.texture, h.hairstyle, std::span(&f, 1), lib.render);
    EXPECT_EQ(out[0].rgb, frame_of(lib, h, lib.cameras[4]).rgb);
}

TEST(Animate, JawRampLowersChin) {
    const HeadLibrary& lib = tiny_library();
    const ShapeCode s = lib.identity_shape(0);
    // chin: the lowest frontal vertex of the neutral mesh
    const auto neutral = synthesize_vertices(lib.model, s, lib.model.neutral());
    int chin = -1;
    for (int v = 0; v < lib.model.vertex_count; ++v)
        if (neutral[v].z() > 0.3 && (chin < 0 || neutral[v].y() < neutral[chin].y())) chin = v;
    ASSERT_GE(chin, 0);
    double prev = neutral[chin].y();
    for (int k = 1; k <= 5; ++k) {
        const std::vector<double> a{0.2 * k, 0.0};
        const double y = synthesize_vertices(lib.model, s, blend_from_activations(a))[chin].y();
        EXPECT_LT(y, prev) << "activation " << 0.2 * k;
        prev = y;
    }

}

TEST(Animate, StreamValidation) {
    const HeadLibrary& lib = tiny_library();
    using nlohmann::json;
    EXPECT_THROW(parse_animation_stream(json::object(), lib), Error);
    EXPECT_THROW(parse_animation_stream(json::parse(R"([{"activations":[0.1],"camera_id":0}])"), lib), Error);
    EXPECT_THROW(parse_animation_stream(json::parse(R"([{"activations":[0.1,1.5],"camera_id":0}])"), lib), Error);
    EXPECT_THROW(parse_animation_stream(json::parse(R"([{"activations":[0.1,0.5],"camera_id":999}])"), lib), Error);
    EXPECT_THROW(parse_animation_stream(json::parse(R"([{"activations":[0.1,0.5]}])"), lib), Error);
    const auto f = parse_animation_stream(json::parse(R"([{"activations":[0.1,0.5],"camera_id":0}])"), lib,
                                          Intrinsics::from_fov(30, 16, 16));
    EXPECT_EQ(f[0].camera.width(), 16);
}
