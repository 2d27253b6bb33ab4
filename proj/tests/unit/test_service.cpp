#include <gtest/gtest.h>

#include <chrono>
#include <thread>

#include "mogan/service.hpp"
#include "support.hpp"

// After Eigen: <resolv.h> defines a _res macro.
#include <httplib.h>

using namespace mogan;
using mogan::testing::pattern_image;
using mogan::testing::TempDir;
using mogan::testing::tiny_config;
using json = nlohmann::json;

namespace {

std::string png_bytes(const Image& img) {
  const auto v = encode_png(img);
  return {v.begin(), v.end()};
}

Image decode(const std::string& body) { return decode_image({body.begin(), body.end()}); }

class ServiceTest : public ::testing::Test {
 protected:
  TempDir dir;
  ProjectStore store{dir.path()};
  Service service{store};
  std::unique_ptr<httplib::Client> client;

  void SetUp() override {
    const int port = service.start("127.0.0.1", 0);
    client = std::make_unique<httplib::Client>("127.0.0.1", port);
    client->set_read_timeout(120, 0);
  }

  void TearDown() override {
    service.wait_for_jobs();
    service.stop();
  }

  std::string create_project() {
    httplib::MultipartFormDataItems items{{"image", png_bytes(pattern_image(40, 40)), "src.png", "image/png"}};
    auto res = client->Post("/projects", items);
    EXPECT_TRUE(res);
    EXPECT_EQ(res->status, 201);
    return json::parse(res->body)["id"].get<std::string>();
  }

  json get_json(const std::string& path, int expected = 200) {
    auto res = client->Get(path);
    EXPECT_TRUE(res) << path;
    EXPECT_EQ(res->status, expected) << path << " " << res->body;
    return json::parse(res->body);
  }

  json post_json(const std::string& path, const json& body, int expected) {
    auto res = client->Post(path, body.dump(), "application/json");
    EXPECT_TRUE(res) << path;
    EXPECT_EQ(res->status, expected) << path << " " << res->body;
    return json::parse(res->body);
  }

  void wait_trained(const std::string& id) {
    for (int i = 0; i < 600; ++i) {
      const auto s = get_json("/projects/" + id + "/status");
      if (!s["running"].get<bool>() && s["status"] != "training") return;
      std::this_thread::sleep_for(std::chrono::milliseconds(100));
    }
    FAIL() << "training did not finish";
  }
};

}  // namespace

TEST_F(ServiceTest, FullLifecycle) {
  const auto id = create_project();
  EXPECT_EQ(get_json("/projects/" + id)["status"], "created");

  auto roi = client->Put("/projects/" + id + "/roi", R"({"boxes": [[3, 3, 37, 37]]})", "application/json");
  ASSERT_TRUE(roi);
  EXPECT_EQ(roi->status, 200);

  auto cfg = json(tiny_config(20));
  const auto started = post_json("/projects/" + id + "/train", cfg, 202);
  EXPECT_TRUE(started.contains("job_id"));
  // A second request while the first is still active (or already done) conflicts.
  post_json("/projects/" + id + "/train", cfg, 409);

  // Progress arrives coarse-to-fine within each branch.
  std::map<std::string, std::pair<int, long>> last;
  std::size_t since = 0;
  for (int i = 0; i < 600; ++i) {
    const auto p = get_json("/projects/" + id + "/progress?since=" + std::to_string(since));
    for (const auto& r : p["records"]) {
      const std::pair<int, long> key{r["coarsest"].get<int>() - r["scale"].get<int>(), r["step"].get<long>()};
      const auto branch = r["branch"].get<std::string>();
      if (last.count(branch)) EXPECT_LT(last[branch], key) << branch;
      last[branch] = key;
    }
    since = p["next"].get<std::size_t>();
    const auto s = get_json("/projects/" + id + "/status");
    if (!s["running"].get<bool>()) break;
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
  }
  wait_trained(id);
  EXPECT_EQ(last.size(), 2u);
  const auto status = get_json("/projects/" + id + "/status");
  EXPECT_EQ(status["status"], "trained");
  EXPECT_TRUE(status["losses"].contains("l2"));

  const auto gen = post_json("/projects/" + id + "/generate", {{"count", 2}, {"seed", 5}}, 200);
  ASSERT_EQ(gen["samples"].size(), 2u);
  const auto sample_id = gen["samples"][0]["id"].get<std::string>();
  auto png = client->Get("/samples/" + sample_id);
  ASSERT_TRUE(png);
  EXPECT_EQ(png->status, 200);
  EXPECT_EQ(png->get_header_value("Content-Type"), "image/png");
  EXPECT_NO_THROW(decode(png->body));
  EXPECT_EQ(get_json("/samples/" + sample_id + "/record")["seed"], 5);

  const auto again = post_json("/projects/" + id + "/generate", {{"count", 1}, {"seed", 5}}, 200);
  auto png2 = client->Get("/samples/" + again["samples"][0]["id"].get<std::string>());
  EXPECT_EQ(png2->body, png->body);

  httplib::MultipartFormDataItems edit{{"image", png_bytes(store.source(id)), "e.png", "image/png"},
                                       {"seed", "3", "", ""}};
  auto edited = client->Post("/projects/" + id + "/edit", edit);
  ASSERT_TRUE(edited);
  EXPECT_EQ(edited->status, 200) << edited->body;
  EXPECT_EQ(json::parse(edited->body)["kind"], "edit");

  const auto anim = post_json("/projects/" + id + "/animate", {{"kind", "rotation"}, {"frames", 3}, {"fps", 6}}, 200);
  EXPECT_EQ(anim["frames"].size(), 3u);
  EXPECT_EQ(anim["fps"], 6.0);

  const auto metrics = get_json("/projects/" + id + "/metrics?samples=2&seed=1");
  EXPECT_EQ(metrics["reports"].size(), 3u);
  EXPECT_NE(metrics["markdown"].get<std::string>().find("GQI"), std::string::npos);
}

TEST_F(ServiceTest, ErrorCodes) {
  get_json("/projects/doesnotexist", 404);
  get_json("/samples/doesnotexist-000001/record", 404);
  post_json("/projects/doesnotexist/generate", {{"count", 1}}, 404);

  const auto id = create_project();
  auto bad = client->Put("/projects/" + id + "/roi", R"({"boxes": [[0, 0, 90, 10]]})", "application/json");
  ASSERT_TRUE(bad);
  EXPECT_EQ(bad->status, 422);
  auto garbage = client->Put("/projects/" + id + "/roi", "not json", "application/json");
  EXPECT_EQ(garbage->status, 422);
  // Untrained projects cannot sample.
  post_json("/projects/" + id + "/generate", {{"count", 1}}, 409);
  // No boxes yet.
  post_json("/projects/" + id + "/train", json::object(), 422);
  auto roi = client->Put("/projects/" + id + "/roi", R"([[3, 3, 37, 37]])", "application/json");
  EXPECT_EQ(roi->status, 200);
  post_json("/projects/" + id + "/train", {{"lr", -1.0}}, 422);
  get_json("/projects/" + id + "/metrics?samples=1", 422);

  httplib::MultipartFormDataItems none{{"other", "x", "", ""}};
  auto missing = client->Post("/projects", none);
  EXPECT_EQ(missing->status, 422);
}
