#include "support.hpp"

#include <set>

using namespace testsupport;

namespace {

std::uint32_t le32(std::string_view s, std::size_t p) {
    std::uint32_t v = 0;
    for (int k = 3; k >= 0; --k) v = (v << 8) | static_cast<unsigned char>(s[p + k]);
    return v;
}

// Serves the tiny library on an ephemeral port for the lifetime of the fixture.
class ServiceTest : public ::testing::Test {
protected:
    void SetUp() override {
        service = std::make_unique<HeadService>(std::make_shared<HeadLibrary>(tiny_library()), ServiceOptions{64, 4});
        port = service->bind_any_port("127.0.0.1");
        ASSERT_GT(port, 0);
        thread = std::thread([this] { service->listen_after_bind(); });
        service->wait_until_ready();
        client = std::make_unique<httplib::Client>("127.0.0.1", port);
        client->set_read_timeout(120, 0);
    }
    void TearDown() override {
        service->stop();
        thread.join();
        service.reset();
    }

    httplib::MultipartFormDataItems fit_form(int steps, std::uint64_t seed) const {
        const HeadLibrary& lib = tiny_library();
        const Camera& cam = lib.cameras[0];
        const HeadInstance h = library_instance(lib, 1, 0, "bald");
        const std::string png = encode_png(render_instance(lib, h, cam, lib.render).image);
        const std::string mask = encode_png(Mask(cam.width(), cam.height()));
        nlohmann::json doc;
        doc["camera_id"] = 0;
        doc["landmarks"] = nlohmann::json::array();
        for (const auto& l : project_landmarks(lib.model, h.s, h.b, cam, lib.landmarks))
            doc["landmarks"].push_back({{"vertex", l.vertex}, {"pixel", {l.pixel.x(), l.pixel.y()}}});
        doc["config"] = {{"texture_steps", steps}, {"rays_per_step", 0}, {"seed", seed}, {"hairstyle", "bald"}};
        return {{"image", png, "image.png", "image/png"},
                {"mask", mask, "mask.png", "image/png"},
                {"landmarks", doc.dump(), "landmarks.json", "application/json"}};
    }

    nlohmann::json job(const std::string& id) {
        auto r = client->Get("/jobs/" + id);
        EXPECT_TRUE(r);
        EXPECT_EQ(r->status, 200);
        return nlohmann::json::parse(r->body);
    }

    nlohmann::json wait_for(const std::string& id) {
        for (;;) {
            auto j = job(id);
            const auto state = j["state"].get<std::string>();
            if (state == "done" || state == "failed") return j;
            std::this_thread::sleep_for(std::chrono::milliseconds(20));
        }
    }

    std::unique_ptr<HeadService> service;
    std::unique_ptr<httplib::Client> client;
    std::thread thread;
    int port = 0;
};

} // namespace

TEST(Zip, StoredRoundTrip) {
    ZipWriter z;
    const std::string big(70000, 'x');
    z.add("a.txt", "hello");
    z.add("dir/b.bin", std::string("\0\1\2", 3));
    z.add("big", big);
    const std::string bytes = z.finish();
    // local header of the first entry: signature, stored method, crc and sizes
    EXPECT_EQ(le32(bytes, 0), 0x04034b50u);
    EXPECT_EQ(le32(bytes, 14), static_cast<std::uint32_t>(crc32(0L, reinterpret_cast<const Bytef*>("hello"), 5)));
    EXPECT_EQ(le32(bytes, 18), 5u);
    EXPECT_EQ(bytes.substr(30, 5), "a.txt");
    EXPECT_EQ(bytes.substr(35, 5), "hello");
    EXPECT_EQ(le32(bytes, bytes.size() - 22), 0x06054b50u);
    const auto files = read_stored_zip(bytes);
    ASSERT_EQ(files.size(), 3u);
    EXPECT_EQ(files.at("a.txt"), "hello");
    EXPECT_EQ(files.at("dir/b.bin"), std::string("\0\1\2", 3));
    EXPECT_EQ(files.at("big"), big);
}

TEST(Ulid, FormatAndOrder) {
    const std::string a = make_ulid(1000, 1), b = make_ulid(1001, 1), c = make_ulid(1000, 2);
    for (const auto& u : {a, b, c}) {
        ASSERT_EQ(u.size(), 26u);
        for (char ch : u) EXPECT_NE(std::string_view("0123456789ABCDEFGHJKMNPQRSTVWXYZ").find(ch), std::string_view::npos);
    }
    EXPECT_LT(a, b);
    EXPECT_NE(a, c);
    EXPECT_EQ(a.substr(0, 10), c.substr(0, 10));
    EXPECT_EQ(make_ulid(1000, 1), a);
    // time prefix: 1000 ms = 0b1111101000 -> "00000000Z8"
    EXPECT_EQ(a.substr(0, 10), "00000000Z8");
    std::set<std::string> seen;
    for (std::uint64_t k = 0; k < 1000; ++k) seen.insert(make_ulid(5, k));
    EXPECT_EQ(seen.size(), 1000u);
}

TEST(RenderRequest, Defaults) {
    const HeadLibrary& lib = tiny_library();
    const RenderRequest r = parse_render_request(nlohmann::json::object(), lib, 256);
    EXPECT_EQ(r.texture.features, lib.textures[0].features);
    EXPECT_EQ(r.s.values, lib.identity_shape(0).values);
    EXPECT_EQ(r.activations, std::vector<double>(lib.model.expressions - 1, 0.0));
    EXPECT_EQ(r.hairstyle, "bald");
    EXPECT_EQ(r.camera.width(), lib.cameras[0].width());
    EXPECT_EQ(r.samples, lib.render.samples);
}

TEST(RenderRequest, Errors) {
    const HeadLibrary& lib = tiny_library();
    auto code_of = [&](const std::string& body) -> std::optional<Errc> {
        try {
            parse_render_request(nlohmann::json::parse(body), lib, 64);
        } catch (const Error& e) {
            return e.code();
        }
        return std::nullopt;
    };
    EXPECT_EQ(code_of(R"({"activations": [0.5]})"), Errc::dimension_mismatch);
    EXPECT_EQ(code_of(R"({"activations": [0.5, 2.0]})"), Errc::parse);
    EXPECT_EQ(code_of(R"({"s": [1, 2]})"), Errc::dimension_mismatch);
    EXPECT_EQ(code_of(R"({"hairstyle": "s42"})"), Errc::not_found);
    EXPECT_EQ(code_of(R"({"texture": "77"})"), Errc::not_found);
    EXPECT_EQ(code_of(R"({"camera_id": 9999})"), Errc::not_found);
    EXPECT_EQ(code_of(R"({"size": 65})"), Errc::dimension_mismatch);
    EXPECT_EQ(code_of(R"({"samples": 1})"), Errc::parse);
    EXPECT_EQ(code_of(R"([1, 2])"), Errc::parse);
    EXPECT_EQ(code_of(R"({"texture": {"code": [0]}})"), Errc::dimension_mismatch);
    EXPECT_EQ(code_of(R"({"size": 16, "hairstyle": "s1"})"), std::nullopt);
}

TEST_F(ServiceTest, HealthAndModel) {
    auto h = client->Get("/healthz");
    ASSERT_TRUE(h);
    EXPECT_EQ(h->status, 200);
    EXPECT_EQ(h->body, "ok");
    auto m = client->Get("/model");
    ASSERT_TRUE(m);
    const auto j = nlohmann::json::parse(m->body);
    const HeadLibrary& lib = tiny_library();
    EXPECT_EQ(j["r"], lib.model.rank);
    EXPECT_EQ(j["E"], lib.model.expressions);
    EXPECT_EQ(j["hairstyle_ids"], nlohmann::json(lib.hairstyle_ids()));
    EXPECT_EQ(j["rig"]["cameras"], lib.cameras.size());
}

TEST_F(ServiceTest, RenderMatchesLibrary) {
    const HeadLibrary& lib = tiny_library();
    const nlohmann::json req = {{"texture", lib.texture_id(2)}, {"hairstyle", "s1"}, {"camera_id", 3},
                                {"activations", {0.25, 0.5}}, {"size", 24}};
    auto r = client->Post("/render", req.dump(), "application/json");
    ASSERT_TRUE(r);
    ASSERT_EQ(r->status, 200);
    EXPECT_EQ(r->get_header_value("Content-Type"), "image/png");
    EXPECT_EQ(r->body, render_request_png(lib, req, 64));
    const Image img = decode_png_image(r->body);
    EXPECT_EQ(img.width, 24);

    auto bad = client->Post("/render", R"({"activations": [0.1]})", "application/json");
    ASSERT_TRUE(bad);
    EXPECT_EQ(bad->status, 422);
    EXPECT_TRUE(nlohmann::json::parse(bad->body).contains("error"));
    auto junk = client->Post("/render", "{not json", "application/json");
    ASSERT_TRUE(junk);
    EXPECT_EQ(junk->status, 400);
}

TEST_F(ServiceTest, AnimateReturnsFrames) {
    const nlohmann::json req = {{"hairstyle", "s2"},
                                {"size", 16},
                                {"frames", {{{"activations", {0.0, 0.0}}, {"camera_id", 0}},
                                            {{"activations", {1.0, 0.0}}, {"camera_id", 1}}}}};
    auto r = client->Post("/animate", req.dump(), "application/json");
    ASSERT_TRUE(r);
    ASSERT_EQ(r->status, 200);
    const auto files = read_stored_zip(r->body);
    ASSERT_EQ(files.size(), 2u);
    const Image f0 = decode_png_image(files.at("frame_0000.png"));
    EXPECT_EQ(f0.width, 16);
    const nlohmann::json still = {{"hairstyle", "s2"}, {"size", 16}, {"camera_id", 0}};
    EXPECT_EQ(files.at("frame_0000.png"), render_request_png(tiny_library(), still, 64));
}

TEST_F(ServiceTest, FitJobLifecycle) {
    // the long job keeps the single worker busy so the short one is still queued
    auto slow = client->Post("/fit", fit_form(150, 1));
    ASSERT_TRUE(slow);
    ASSERT_EQ(slow->status, 202);
    auto quick = client->Post("/fit", fit_form(3, 2));
    ASSERT_TRUE(quick);
    ASSERT_EQ(quick->status, 202);
    const auto qj = nlohmann::json::parse(quick->body);
    const std::string id = qj["id"];
    EXPECT_EQ(id.size(), 26u);
    EXPECT_EQ(qj["state"], "queued");

    auto early = client->Get("/jobs/" + id + "/result");
    ASSERT_TRUE(early);
    EXPECT_EQ(early->status, 409);

    const auto done = wait_for(id);
    ASSERT_EQ(done["state"], "done") << done.dump();
    EXPECT_EQ(done["progress"], 1.0);
    auto result = client->Get(done["result_path"].get<std::string>());
    ASSERT_TRUE(result);
    ASSERT_EQ(result->status, 200);
    EXPECT_EQ(sha256_hex(result->body), done["result_digest"]);
    const auto files = read_stored_zip(result->body);
    EXPECT_EQ(files.count("fitted.json"), 1u);
    EXPECT_EQ(files.count("texture.bin"), 1u);
    EXPECT_EQ(files.count("render.png"), 1u);
    EXPECT_EQ(nlohmann::json::parse(files.at("fitted.json"))["hairstyle"], "bald");

    // same request again gives the same bundle
    auto again = client->Post("/fit", fit_form(3, 2));
    ASSERT_TRUE(again);
    const auto done2 = wait_for(nlohmann::json::parse(again->body)["id"]);
    EXPECT_EQ(done2["result_digest"], done["result_digest"]);
    EXPECT_EQ(wait_for(nlohmann::json::parse(slow->body)["id"])["state"], "done");
}

TEST_F(ServiceTest, FitErrors) {
    auto missing = client->Get("/jobs/01ARZ3NDEKTSV4RRFFQ69G5FAV");
    ASSERT_TRUE(missing);
    EXPECT_EQ(missing->status, 404);
    auto missing_result = client->Get("/jobs/01ARZ3NDEKTSV4RRFFQ69G5FAV/result");
    ASSERT_TRUE(missing_result);
    EXPECT_EQ(missing_result->status, 404);

    auto form = fit_form(1, 0);
    form.pop_back();
    auto r = client->Post("/fit", form);
    ASSERT_TRUE(r);
    EXPECT_EQ(r->status, 400);

    auto wrong = fit_form(1, 0);
    wrong[1].content = encode_png(Mask(5, 5));
    auto w = client->Post("/fit", wrong);
    ASSERT_TRUE(w);
    EXPECT_EQ(w->status, 422);
}

TEST_F(ServiceTest, ReloadSwapsLibrary) {
    auto lib = std::make_shared<HeadLibrary>(tiny_library());
    lib->hair.pop_back();
    service->reload(lib);
    auto m = client->Get("/model");
    ASSERT_TRUE(m);
    EXPECT_EQ(nlohmann::json::parse(m->body)["hairstyle_ids"].size(), tiny_library().hairstyle_ids().size() - 1);
}
