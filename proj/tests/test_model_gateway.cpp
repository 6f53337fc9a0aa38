#include <gtest/gtest.h>

#include <httplib.h>

#include <atomic>
#include <thread>

#include <mugshot/model_gateway.hpp>

#include "support/synthetic.hpp"

using namespace mugshot;
namespace mt = mugshot::testing;
using mt::TempDir;

namespace {

std::string write_face(const fs::path& dir, const std::string& name, std::size_t subject = 0, std::size_t variant = 0) {
    fs::create_directories(dir);
    const auto p = (dir / name).string();
    write_pgm(p, mt::face_image(subject, variant));
    return p;
}

void write_fixture(const fs::path& root, BackendKind kind, const std::string& digest, const nlohmann::json& body) {
    const auto p = FixtureTransport::fixture_path(root, kind, digest);
    fs::create_directories(p.parent_path());
    detail::write_file(p.string(), body.dump());
}

std::string digest_for(const std::vector<std::string>& paths, const nlohmann::json& params) {
    std::vector<std::string> d;
    for (const auto& p : paths) d.push_back(sha256_hex(detail::read_file(p)));
    return request_digest(d, params);
}

GatewayOptions journal_at(const fs::path& p) {
    GatewayOptions o;
    o.journal_path = p;
    return o;
}

void attach_fixtures(ModelGateway& g, const fs::path& root) {
    for (auto k : kAllBackendKinds) g.attach(k, std::make_shared<FixtureTransport>(root));
}

PromptSpec simple_prompt() {
    PromptSpec p;
    p.positive = {{"mugshot", TokenRole::Preamble}, {"male", TokenRole::Gender}};
    p.negative = {"blurry"};
    return p;
}

// In-process stand-in for a model server on an ephemeral port.
class FakeServer {
public:
    FakeServer() {
        port_ = server_.bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }
    ~FakeServer() {
        server_.stop();
        thread_.join();
    }
    httplib::Server& server() { return server_; }
    std::string url() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1"; }

private:
    httplib::Server server_;
    int port_ = 0;
    std::thread thread_;
};

int closed_port() {
    httplib::Server s;
    return s.bind_to_any_port("127.0.0.1");  // released when s goes out of scope
}

}  // namespace

TEST(Digest, Sha256AndBase64) {
    EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    EXPECT_EQ(base64_encode("hello"), "aGVsbG8=");
    EXPECT_EQ(base64_decode("aGVsbG8="), "hello");
    EXPECT_EQ(base64_decode(base64_encode(std::string("\0\1\2\3", 4))), std::string("\0\1\2\3", 4));
    EXPECT_THROW(base64_decode("a*b="), ProtocolError);
}

TEST(Endpoint, ExactlyOneTarget) {
    BackendEndpoint ep;
    EXPECT_THROW(ep.validate(), ConfigError);
    ep.url = "http://x";
    ep.validate();
    ep.fixture_dir = "/tmp";
    EXPECT_THROW(ep.validate(), ConfigError);
    ep.fixture_dir.clear();
    ep.timeout_s = 0;
    EXPECT_THROW(ep.validate(), ConfigError);
    ep.timeout_s = 1;
    ep.max_retries = -1;
    EXPECT_THROW(ep.validate(), ConfigError);
}

TEST(Enhance, TvDenoiseNativeAndDeterministic) {
    TempDir dir("tvd");
    const auto img = write_face(dir.path(), "face.pgm");
    ModelGateway g(journal_at(dir / "journal.jsonl"));  // no enhance backend attached
    const auto a = g.enhance(img, EnhanceMethod::TvDenoise, dir / "a");
    const auto b = g.enhance(img, EnhanceMethod::TvDenoise, dir / "b");
    EXPECT_EQ(detail::read_file(a), detail::read_file(b));
    EXPECT_NE(detail::read_file(a), detail::read_file(img));
    EXPECT_EQ(fs::path(a).extension(), ".pgm");
    const auto recs = RunJournal::read(dir / "journal.jsonl");
    ASSERT_EQ(recs.size(), 2u);
    EXPECT_EQ(recs[0].at("backend"), "native");
    EXPECT_EQ(recs[0].at("status"), "ok");
}

TEST(Enhance, TvDenoisePngIsRgb) {
    TempDir dir("tvdpng");
    const auto g0 = mt::face_image(1, 0);
    const auto p = (dir / "face.png").string();
    write_png(p, RgbImage::from_channels(g0, g0, g0));
    ModelGateway g;
    const auto out = g.enhance(p, EnhanceMethod::TvDenoise, dir.path());
    EXPECT_EQ(sniff_format(detail::read_file(out)), ImageFormat::Png);
}

TEST(Enhance, MaximFixtureByContentDigest) {
    TempDir dir("maxim");
    const auto img = write_face(dir / "in", "face.pgm");
    const auto canned = encode_pgm(mt::face_image(3, 3));
    write_fixture(dir / "fx", BackendKind::Enhance, digest_for({img}, {{"method", "maxim"}}),
                  {{"image_b64", base64_encode(canned)}});
    ModelGateway g;
    attach_fixtures(g, dir / "fx");
    const auto out = g.enhance(img, EnhanceMethod::Maxim, dir / "out");
    EXPECT_EQ(detail::read_file(out), canned);
    // same bytes under another path hit the same fixture
    fs::copy_file(img, dir / "in" / "copy.pgm");
    EXPECT_EQ(detail::read_file(g.enhance((dir / "in" / "copy.pgm").string(), EnhanceMethod::Maxim, dir / "out")), canned);
    // srgan has no fixture
    EXPECT_THROW(g.enhance(img, EnhanceMethod::Srgan, dir / "out"), GatewayError);
}

TEST(Enhance, MalformedFixtureIsProtocolError) {
    TempDir dir("badfx");
    const auto img = write_face(dir.path(), "face.pgm");
    const auto p = FixtureTransport::fixture_path(dir / "fx", BackendKind::Enhance, digest_for({img}, {{"method", "srgan"}}));
    fs::create_directories(p.parent_path());
    detail::write_file(p.string(), "{not json");
    ModelGateway g;
    attach_fixtures(g, dir / "fx");
    EXPECT_THROW(g.enhance(img, EnhanceMethod::Srgan, dir.path()), ProtocolError);
    write_fixture(dir / "fx", BackendKind::Enhance, digest_for({img}, {{"method", "srgan"}}), {{"image_b64", "%%%"}});
    EXPECT_THROW(g.enhance(img, EnhanceMethod::Srgan, dir.path()), ProtocolError);
}

TEST(Enhance, UnreachableUrlRetriesExactly) {
    TempDir dir("retry");
    const auto img = write_face(dir.path(), "face.pgm");
    BackendEndpoint ep;
    ep.kind = BackendKind::Enhance;
    ep.url = "http://127.0.0.1:" + std::to_string(closed_port());
    ep.max_retries = 2;
    ep.retry_backoff_ms = 0;
    ep.timeout_s = 2;
    auto http = std::make_shared<HttpTransport>(ep);
    ModelGateway g(journal_at(dir / "journal.jsonl"));
    g.attach(BackendKind::Enhance, http);
    EXPECT_THROW(g.enhance(img, EnhanceMethod::Maxim, dir.path()), GatewayError);
    EXPECT_EQ(http->attempts_made(), 3);
    EXPECT_EQ(RunJournal::read(dir / "journal.jsonl").size(), 1u);
    EXPECT_EQ(exit_code_for(GatewayError("x")), exit_code::gateway);
}

TEST(Http, RetriesServerErrorsNotClientErrors) {
    TempDir dir("http");
    const auto img = write_face(dir.path(), "face.pgm");
    FakeServer fake;
    std::atomic<int> hits{0};
    std::string auth;
    fake.server().Post("/v1/enhance", [&](const httplib::Request& req, httplib::Response& res) {
        auth = req.get_header_value("Authorization");
        if (++hits < 3) {
            res.status = 503;
            return;
        }
        const auto body = nlohmann::json::parse(req.body);
        res.set_content(nlohmann::json{{"image_b64", body.at("image_b64")}}.dump(), "application/json");
    });
    fake.server().Post("/v1/embed", [&](const httplib::Request&, httplib::Response& res) { res.status = 404; });

    BackendEndpoint ep;
    ep.url = fake.url();
    ep.retry_backoff_ms = 0;
    ep.bearer_token = "s3cret";
    ModelGateway g(journal_at(dir / "journal.jsonl"));
    ep.kind = BackendKind::Enhance;
    g.attach(ep);
    ep.kind = BackendKind::Embed;
    auto embed_http = std::make_shared<HttpTransport>(ep);
    g.attach(BackendKind::Embed, embed_http);

    const auto out = g.enhance(img, EnhanceMethod::Srgan, dir / "out");
    EXPECT_EQ(detail::read_file(out), detail::read_file(img));
    EXPECT_EQ(hits.load(), 3);
    EXPECT_EQ(auth, "Bearer s3cret");
    EXPECT_THROW(g.embed(img, "p", Provenance::Original), GatewayError);
    EXPECT_EQ(embed_http->attempts_made(), 1);

    // one journal record per call, carrying the attempt count of the success
    const auto recs = RunJournal::read(dir / "journal.jsonl");
    ASSERT_EQ(recs.size(), 2u);
    EXPECT_EQ(recs[0].at("attempts"), 3);
    EXPECT_EQ(recs[0].at("status"), "ok");
    EXPECT_EQ(recs[1].at("status"), "error");
}

TEST(Http, GeneratePayloadCarriesDefaults) {
    TempDir dir("genhttp");
    const auto img = write_face(dir.path(), "face.pgm");
    FakeServer fake;
    nlohmann::json seen;
    fake.server().Post("/v1/generate", [&](const httplib::Request& req, httplib::Response& res) {
        seen = nlohmann::json::parse(req.body);
        nlohmann::json imgs = nlohmann::json::array();
        for (int k = 0; k < seen.at("count").get<int>(); ++k) imgs.push_back(seen.at("images_b64")[0]);
        res.set_content(nlohmann::json{{"images_b64", imgs}}.dump(), "application/json");
    });
    BackendEndpoint ep;
    ep.kind = BackendKind::Generate;
    ep.url = fake.url();
    ModelGateway g;
    g.attach(ep);
    GenerationRequest req;
    req.input_images = {img};
    req.prompt = simple_prompt();
    const auto paths = g.generate(req, dir / "gen", "p01");
    EXPECT_EQ(paths.size(), 4u);
    EXPECT_EQ(seen.at("sample_steps"), 50);
    EXPECT_EQ(seen.at("style_strength"), 20);
    EXPECT_EQ(seen.at("prompt"), "mugshot, male");
    EXPECT_EQ(seen.at("negative_prompt"), "blurry");
    EXPECT_EQ(seen.at("images_b64").size(), 1u);
}

TEST(Http, MalformedJsonIsProtocolError) {
    TempDir dir("badjson");
    const auto img = write_face(dir.path(), "face.pgm");
    FakeServer fake;
    fake.server().Post("/v1/embed", [](const httplib::Request&, httplib::Response& res) {
        res.set_content("{\"vector\": [1, 2", "application/json");
    });
    BackendEndpoint ep;
    ep.kind = BackendKind::Embed;
    ep.url = fake.url();
    ModelGateway g;
    g.attach(ep);
    EXPECT_THROW(g.embed(img, "p", Provenance::Original), ProtocolError);
}

TEST(Describe, FullAnswersAndNormalization) {
    TempDir dir("describe");
    const auto img = write_face(dir.path(), "face.pgm");
    const auto q = build_vlm_questions();
    write_fixture(dir / "fx", BackendKind::Describe, digest_for({img}, {{"questions", q}}),
                  {{"answers", {"Male", "about 40", "Caucasian", "Brown.", "blue", "5'10\"", "180 lbs"}}});
    ModelGateway g;
    attach_fixtures(g, dir / "fx");
    const auto d = g.describe(img, q, "p01", Provenance::Original);
    for (auto c : kAllCategories) EXPECT_TRUE(d.attributes[c].known()) << category_key(c);
    EXPECT_EQ(d.attributes[Category::EthnicGroup].label(), "white");
    EXPECT_EQ(d.attributes[Category::HairColor].label(), "brown");
    EXPECT_EQ(d.attributes[Category::Height].number(), 177.8);
    EXPECT_EQ(d.attributes[Category::Weight].number(), 81.65);
    EXPECT_EQ(d.attributes[Category::Age].number(), 40.0);
    EXPECT_EQ(d.subject_id, "p01");
}

TEST(Describe, MissingIrisAnswerIsUnknown) {
    TempDir dir("describe2");
    const auto img = write_face(dir.path(), "face.pgm");
    const auto q = build_vlm_questions();
    write_fixture(dir / "fx", BackendKind::Describe, digest_for({img}, {{"questions", q}}),
                  {{"answers", {"female", 33, "asian", "black", nullptr, "160 cm", ""}}});
    ModelGateway g;
    attach_fixtures(g, dir / "fx");
    const auto d = g.describe(img, q, "p", Provenance::Srgan);
    EXPECT_FALSE(d.attributes[Category::IrisColor].known());
    EXPECT_FALSE(d.attributes[Category::Weight].known());
    EXPECT_EQ(d.attributes[Category::Age].number(), 33.0);
    EXPECT_EQ(d.provenance, Provenance::Srgan);
}

TEST(Describe, AnswerCountMismatch) {
    TempDir dir("describe3");
    const auto img = write_face(dir.path(), "face.pgm");
    const auto q = build_vlm_questions();
    write_fixture(dir / "fx", BackendKind::Describe, digest_for({img}, {{"questions", q}}), {{"answers", {"male", "40"}}});
    ModelGateway g(journal_at(dir / "j.jsonl"));
    attach_fixtures(g, dir / "fx");
    EXPECT_THROW(g.describe(img, q, "p", Provenance::Original), ProtocolError);
    const auto recs = RunJournal::read(dir / "j.jsonl");
    ASSERT_EQ(recs.size(), 1u);
    EXPECT_EQ(recs[0].at("status"), "error");
    EXPECT_EQ(exit_code_for(ProtocolError("x")), exit_code::protocol);
}

TEST(Generate, CountImagesAndSidecar) {
    TempDir dir("gen");
    const auto img = write_face(dir.path(), "face.pgm");
    GenerationRequest req;
    req.input_images = {img};
    req.prompt = simple_prompt();
    req.count = 3;
    const auto digest = digest_for({img}, req.params());
    nlohmann::json imgs = nlohmann::json::array();
    for (std::size_t k = 0; k < 3; ++k) imgs.push_back(base64_encode(encode_pgm(mt::face_image(0, 10 + k))));
    write_fixture(dir / "fx", BackendKind::Generate, digest, {{"images_b64", imgs}});
    ModelGateway g(journal_at(dir / "j.jsonl"));
    attach_fixtures(g, dir / "fx");
    const auto paths = g.generate(req, dir / "out", "p01");
    ASSERT_EQ(paths.size(), 3u);
    for (const auto& p : paths) EXPECT_TRUE(fs::is_regular_file(p));
    const auto sidecar = nlohmann::json::parse(detail::read_file((dir / "out" / ("p01_" + digest.substr(0, 12) + ".request.json")).string()));
    EXPECT_EQ(sidecar.at("sample_steps"), 50);
    EXPECT_EQ(sidecar.at("style_strength"), 20);
    EXPECT_EQ(sidecar.at("outputs").size(), 3u);
    EXPECT_EQ(sidecar.at("request_digest"), digest);
    const auto recs = RunJournal::read(dir / "j.jsonl");
    ASSERT_EQ(recs.size(), 1u);
    EXPECT_EQ(recs[0].at("outputs").size(), 3u);
    EXPECT_EQ(recs[0].at("inputs")[0].at("sha256"), sha256_hex(detail::read_file(img)));
}

TEST(Generate, TooFewImagesIsProtocolError) {
    TempDir dir("gen2");
    const auto img = write_face(dir.path(), "face.pgm");
    GenerationRequest req;
    req.input_images = {img};
    req.prompt = simple_prompt();
    req.count = 2;
    write_fixture(dir / "fx", BackendKind::Generate, digest_for({img}, req.params()),
                  {{"images_b64", {base64_encode(detail::read_file(img))}}});
    ModelGateway g;
    attach_fixtures(g, dir / "fx");
    EXPECT_THROW(g.generate(req, dir / "out", "p"), ProtocolError);
}

TEST(Generate, CountZeroRejected) {
    TempDir dir("gen3");
    const auto img = write_face(dir.path(), "face.pgm");
    GenerationRequest req;
    req.input_images = {img};
    req.count = 0;
    ModelGateway g;
    attach_fixtures(g, dir / "fx");
    EXPECT_THROW(g.generate(req, dir / "out", "p"), UsageError);
    req.count = 1;
    req.style_strength_percent = 101;
    EXPECT_THROW(g.generate(req, dir / "out", "p"), UsageError);
}

TEST(Embed, DeterministicAndDimensioned) {
    TempDir dir("embed");
    const auto img = write_face(dir.path(), "face.pgm");
    std::vector<double> v(128);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::sin(static_cast<double>(i));
    write_fixture(dir / "fx", BackendKind::Embed, digest_for({img}, nlohmann::json::object()), {{"vector", v}, {"dimension", 128}});
    ModelGateway g;
    attach_fixtures(g, dir / "fx");
    const auto a = g.embed(img, "p", Provenance::Original);
    const auto b = g.embed(img, "p", Provenance::Original);
    EXPECT_EQ(a.vector, b.vector);
    EXPECT_EQ(a.vector.size(), 128u);
    EXPECT_EQ(g.embedding_dimension(), 128u);
}

TEST(Embed, InvalidVectorsAreProtocolErrors) {
    TempDir dir("embed2");
    const auto a = write_face(dir.path(), "a.pgm", 0);
    const auto b = write_face(dir.path(), "b.pgm", 1);
    const auto c = write_face(dir.path(), "c.pgm", 2);
    const auto d = write_face(dir.path(), "d.pgm", 3);
    const auto e = write_face(dir.path(), "e.pgm", 4);
    const auto key = [](const std::string& p) { return digest_for({p}, nlohmann::json::object()); };
    write_fixture(dir / "fx", BackendKind::Embed, key(a), {{"vector", {1.0, nullptr, 2.0}}});
    const auto p = FixtureTransport::fixture_path(dir / "fx", BackendKind::Embed, key(b));
    detail::write_file(p.string(), "{\"vector\": [1.0, 1e999, 2.0]}");
    write_fixture(dir / "fx", BackendKind::Embed, key(c), {{"vector", {1.0, 2.0, 3.0}}, {"dimension", 4}});
    write_fixture(dir / "fx", BackendKind::Embed, key(d), {{"vector", {1.0, 2.0, 3.0}}});
    write_fixture(dir / "fx", BackendKind::Embed, key(e), {{"vector", {1.0, 2.0}}});
    ModelGateway g;
    attach_fixtures(g, dir / "fx");
    EXPECT_THROW(g.embed(a, "p", Provenance::Original), ProtocolError);
    EXPECT_THROW(g.embed(b, "p", Provenance::Original), ProtocolError);
    EXPECT_THROW(g.embed(c, "p", Provenance::Original), ProtocolError);
    EXPECT_EQ(g.embed(d, "p", Provenance::Original).vector.size(), 3u);
    EXPECT_THROW(g.embed(e, "p", Provenance::Original), ProtocolError);  // dimension changed within the run
}

TEST(Gateway, ImageSizeCap) {
    TempDir dir("cap");
    const auto img = write_face(dir.path(), "face.pgm");
    GatewayOptions o;
    o.max_image_bytes = 100;
    ModelGateway g(o);
    EXPECT_THROW(g.enhance(img, EnhanceMethod::TvDenoise, dir.path()), ValidationError);
}

TEST(Gateway, UnconfiguredBackend) {
    TempDir dir("none");
    const auto img = write_face(dir.path(), "face.pgm");
    ModelGateway g;
    EXPECT_FALSE(g.configured(BackendKind::Embed));
    EXPECT_THROW(g.embed(img, "p", Provenance::Original), ConfigError);
}

TEST(Replay, JournalReproducesResponses) {
    TempDir dir("replay");
    const auto img = write_face(dir.path(), "face.pgm");
    auto synth = std::make_shared<mt::SyntheticBackend>();
    ModelGateway live(journal_at(dir / "live.jsonl"));
    for (auto k : kAllBackendKinds) live.attach(k, synth);
    const auto q = build_vlm_questions();
    GenerationRequest req;
    req.input_images = {img};
    req.prompt = simple_prompt();
    req.count = 2;
    const auto d1 = live.describe(img, q, "p01", Provenance::Original);
    const auto e1 = live.embed(img, "p01", Provenance::Original);
    const auto g1 = live.generate(req, dir / "gen", "p01");
    const auto m1 = live.enhance(img, EnhanceMethod::Maxim, dir / "enh");

    ModelGateway again;
    auto replay = std::make_shared<ReplayTransport>(dir / "live.jsonl");
    for (auto k : kAllBackendKinds) again.attach(k, replay);
    EXPECT_EQ(again.describe(img, q, "p01", Provenance::Original).attributes, d1.attributes);
    EXPECT_EQ(again.embed(img, "p01", Provenance::Original).vector, e1.vector);
    const auto g2 = again.generate(req, dir / "gen2", "p01");
    ASSERT_EQ(g2.size(), g1.size());
    for (std::size_t k = 0; k < g1.size(); ++k) EXPECT_EQ(detail::read_file(g2[k]), detail::read_file(g1[k]));
    EXPECT_EQ(detail::read_file(again.enhance(img, EnhanceMethod::Maxim, dir / "enh2")), detail::read_file(m1));

    // an output file edited after recording is caught
    detail::write_file(g1[0], "tampered");
    ModelGateway third;
    third.attach(BackendKind::Generate, std::make_shared<ReplayTransport>(dir / "live.jsonl"));
    EXPECT_THROW(third.generate(req, dir / "gen3", "p01"), ProtocolError);
}

TEST(Recording, WritesFixtureLayout) {
    TempDir dir("record");
    const auto img = write_face(dir.path(), "face.pgm");
    ModelGateway g;
    g.attach(BackendKind::Embed, std::make_shared<RecordingTransport>(std::make_shared<mt::SyntheticBackend>(), dir / "fx"));
    const auto e = g.embed(img, "p", Provenance::Original);
    ModelGateway replayed;
    attach_fixtures(replayed, dir / "fx");
    EXPECT_EQ(replayed.embed(img, "p", Provenance::Original).vector, e.vector);
}

TEST(Concurrency, ParallelCallsOneRecordEach) {
    TempDir dir("conc");
    std::vector<std::string> imgs;
    for (std::size_t k = 0; k < 12; ++k) imgs.push_back(write_face(dir / "in", "f" + std::to_string(k) + ".pgm", k % 4, k));
    ModelGateway g(journal_at(dir / "j.jsonl"));
    g.attach(BackendKind::Embed, std::make_shared<mt::SyntheticBackend>(), 2);
    std::vector<Embedding> out(imgs.size());
    detail::parallel_for(imgs.size(), 4, [&](std::size_t i) { out[i] = g.embed(imgs[i], "p", Provenance::Original); });
    EXPECT_EQ(RunJournal::read(dir / "j.jsonl").size(), imgs.size());
    for (const auto& e : out) EXPECT_EQ(e.vector.size(), 16u);
}
