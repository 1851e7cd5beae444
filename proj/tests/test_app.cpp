#include <doctest.h>
#include <httplib.h>

#include <cstdlib>
#include <sstream>

#include "csrpipe/cli.hpp"
#include "csrpipe/config.hpp"
#include "csrpipe/dialogue_io.hpp"
#include "csrpipe/errors.hpp"
#include "csrpipe/eval.hpp"
#include "csrpipe/rewards.hpp"
#include "csrpipe/service.hpp"
#include "oracles.hpp"

using namespace csrpipe;

namespace {

struct CliRun {
  int code = -1;
  std::string out;
  std::string err;
};

CliRun cli(std::vector<std::string> args, std::function<void(Runtime&)> on_runtime = {}) {
  std::ostringstream out, err;
  CliHooks hooks;
  hooks.out = &out;
  hooks.err = &err;
  hooks.on_runtime = std::move(on_runtime);
  args.insert(args.begin(), {"--log-level", "off"});
  CliRun r;
  r.code = run_cli(args, hooks);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string pipeline_config() { return (testing::fixtures() / "pipeline/config.json").string(); }
std::string pipeline_input() { return (testing::fixtures() / "pipeline/dialogues.jsonl").string(); }

json minimal_config() {
  return {{"endpoints", {{"j", {{"kind", "stub"}, {"stub", "s"}}}}},
          {"stub_scripts", {{"s", {{"default_completion", "[Score] 3"}}}}},
          {"judges", {{"human_likeness", "j"}}}};
}

}  // namespace

TEST_CASE("config validation") {
  CHECK_NOTHROW(parse_config(minimal_config()));

  auto bad = minimal_config();
  bad["wieghts"] = json::object();
  CHECK_THROWS_AS(parse_config(bad), ConfigError);

  bad = minimal_config();
  bad["service"] = {{"port", 80}, {"tls", true}};
  CHECK_THROWS_AS(parse_config(bad), ConfigError);

  bad = minimal_config();
  bad["judges"]["gsb"] = "missing";
  CHECK_THROWS_AS(parse_config(bad), ConfigError);
}

TEST_CASE("env interpolation") {
  ::setenv("CSRPIPE_TEST_TOKEN", "s3cret", 1);
  auto doc = minimal_config();
  doc["service"] = {{"bearer_token", "${CSRPIPE_TEST_TOKEN}"}};
  auto cfg = parse_config(doc);
  CHECK(cfg.service.bearer_token == "s3cret");
  // the hash is over the raw document and the resolved view hides secrets
  CHECK(cfg.resolved().dump().find("s3cret") == std::string::npos);
  ::setenv("CSRPIPE_TEST_TOKEN", "other", 1);
  CHECK(parse_config(doc).hash == cfg.hash);

  ::unsetenv("CSRPIPE_TEST_UNSET");
  doc["service"]["bearer_token"] = "${CSRPIPE_TEST_UNSET}";
  CHECK_THROWS_AS(parse_config(doc), ConfigError);
  CHECK(interpolate_env(json("a ${CSRPIPE_TEST_TOKEN} b")) == "a other b");
}

TEST_CASE("missing or broken config exits 2 naming the path") {
  testing::TempDir tmp;
  auto r = cli({"think", "--config", (tmp / "nope.json").string(), "--input", pipeline_input(),
                "--output", (tmp / "o.jsonl").string(), "--seed", "1"});
  CHECK(r.code == kExitConfigError);
  CHECK(r.err.find("nope.json") != std::string::npos);

  write_text_file(tmp / "broken.json", "{ not json");
  r = cli({"think", "--config", (tmp / "broken.json").string(), "--input", pipeline_input(),
           "--output", (tmp / "o.jsonl").string(), "--seed", "1"});
  CHECK(r.code == kExitConfigError);
  CHECK(r.err.find("broken.json") != std::string::npos);

  // unknown subcommand and missing required flags are usage errors
  CHECK(cli({"frobnicate"}).code == kExitConfigError);
  CHECK(cli({"think", "--config", pipeline_config()}).code == kExitConfigError);
}

TEST_CASE("dry run plans requests and sends none") {
  testing::TempDir tmp;
  std::size_t sent = 99;
  auto r = cli({"--dry-run", "emit-rollouts", "--config", pipeline_config(), "--input",
                pipeline_input(), "--output", (tmp / "r.jsonl").string(), "--seed", "5",
                "--group-size", "4"},
               [&](Runtime& rt) { sent = rt.gateway->request_count(); });
  REQUIRE(r.code == kExitOk);
  CHECK(sent == 0);
  auto j = json::parse(r.out);
  CHECK(j["dry_run"] == true);
  CHECK(j["requests_sent"] == 0);
  CHECK(j["input_records"] == 20);
  // one batched generator request per dialogue
  CHECK(j["planned_requests"]["gen"] == 20);
  CHECK(j["total_planned_requests"].get<std::size_t>() > 20);
  CHECK_FALSE(std::filesystem::exists(tmp / "r.jsonl"));

  for (const auto* cmd : {"think", "reject-sample"}) {
    r = cli({"--dry-run", cmd, "--config", pipeline_config(), "--input", pipeline_input(),
             "--output", (tmp / "x.jsonl").string(), "--seed", "5"});
    CHECK(r.code == kExitOk);
    CHECK(json::parse(r.out)["requests_sent"] == 0);
  }
  CHECK(json::parse(cli({"--dry-run", "reject-sample", "--config", pipeline_config(), "--input",
                         pipeline_input(), "--output", (tmp / "x.jsonl").string(), "--seed",
                         "5"})
                        .out)["planned_requests"]["judge"] == 8 * 20 * 3);  // likeness, GSB, risk
}

TEST_CASE("evaluate matches the golden report") {
  testing::TempDir tmp;
  const auto report = (tmp / "model-a.json").string();
  auto r = cli({"evaluate", "--input", (testing::fixtures() / "eval/eval.jsonl").string(),
                "--judges", (testing::fixtures() / "eval/config.json").string(), "--report",
                report});
  INFO(r.err);
  REQUIRE(r.code == kExitOk);
  const auto got = json::parse(read_text_file(report));
  const auto want = json::parse(read_text_file(testing::fixtures() / "eval/expected_report.json"));
  for (const auto& [key, value] : want.items()) {
    INFO(key);
    if (value.is_number_float()) {
      CHECK(std::abs(got.at(key).get<double>() - value.get<double>()) <= 1e-9);
    } else {
      CHECK(got.at(key) == value);
    }
  }
  const auto table = read_text_file(report + ".txt");
  CHECK(table.find("model-a") != std::string::npos);
  CHECK(table.find("Human-Likeness Score") != std::string::npos);
  CHECK(r.out == table);
  auto manifest = json::parse(read_text_file(report + ".manifest.json"));
  CHECK(manifest["counts"]["judged"] == 6);
  CHECK(manifest["counts"]["failures"] == 0);

  // comparing against itself yields flat deltas
  r = cli({"evaluate", "--input", (testing::fixtures() / "eval/eval.jsonl").string(), "--judges",
           (testing::fixtures() / "eval/config.json").string(), "--report",
           (tmp / "model-b.json").string(), "--compare", report});
  REQUIRE(r.code == kExitOk);
  CHECK(r.out.find("0.00") != std::string::npos);
  CHECK(r.out.find("↑") == std::string::npos);
}

TEST_CASE("evaluate fails above the judge failure threshold") {
  testing::TempDir tmp;
  auto doc = json::parse(read_text_file(testing::fixtures() / "eval/config.json"));
  // every score completion becomes unreadable for one record
  doc["stub_scripts"]["judges"]["rules"].insert(
      doc["stub_scripts"]["judges"]["rules"].begin(),
      json{{"contains", {"[Score]", "Please wait"}}, {"completions", {"no score here"}}});
  doc["reask_limit"] = 0;
  write_text_file(tmp / "c.json", doc.dump());
  const auto input = (testing::fixtures() / "eval/eval.jsonl").string();
  auto r = cli({"evaluate", "--input", input, "--judges", (tmp / "c.json").string(), "--report",
                (tmp / "r.json").string()});
  CHECK(r.code == kExitStageFailure);
  CHECK(r.err.find("threshold") != std::string::npos);
  CHECK(json::parse(read_text_file(tmp / "r.json"))["n"] == 5);

  doc["eval"] = {{"failure_threshold", 0.2}};
  write_text_file(tmp / "c.json", doc.dump());
  r = cli({"evaluate", "--input", input, "--judges", (tmp / "c.json").string(), "--report",
           (tmp / "r.json").string()});
  CHECK(r.code == kExitOk);
}

TEST_CASE("pipeline end to end is deterministic") {
  testing::TempDir tmp;
  auto run = [&](const std::string& tag) {
    auto p = [&](const std::string& name) { return (tmp / (tag + "-" + name)).string(); };
    const std::vector<std::vector<std::string>> steps = {
        {"think", "--input", pipeline_input(), "--output", p("think.jsonl")},
        {"reject-sample", "--input", p("think.jsonl"), "--output", p("reject.jsonl")},
        {"refine", "--input", p("reject.jsonl"), "--output", p("refine.jsonl")},
        {"emit-sft", "--input", p("refine.jsonl"), "--output", p("sft.jsonl"), "--mode",
         "hybrid_cot"},
    };
    for (auto args : steps) {
      args.insert(args.end(), {"--config", pipeline_config(), "--seed", "11"});
      auto r = cli(args);
      INFO(args[0], " ", r.err);
      REQUIRE(r.code == kExitOk);
    }
    return read_text_file(p("sft.jsonl"));
  };
  const auto first = run("a");
  const auto second = run("b");
  CHECK(first == second);

  auto records = read_jsonl(tmp / "a-sft.jsonl");
  CHECK(records.size() == 17);
  for (const auto& rec : records) {
    const auto mode = cot_mode_from_string(rec["cot_mode"].get<std::string>());
    CHECK(compute_format_reward(rec["target"].get<std::string>(), mode) == 1.0);
    CHECK(testing::format_oracle(rec["target"].get<std::string>(), mode));
  }
  auto manifest = json::parse(read_text_file(tmp / "a-reject.jsonl.manifest.json"));
  CHECK(manifest["counts"]["selected"] == 17);
  CHECK(manifest["seed"] == 11);
}

TEST_CASE("rollout emission writes scored groups") {
  testing::TempDir tmp;
  auto r = cli({"emit-rollouts", "--config", pipeline_config(), "--input", pipeline_input(),
                "--output", (tmp / "g.jsonl").string(), "--seed", "5", "--group-size", "4"});
  INFO(r.err);
  REQUIRE(r.code == kExitOk);
  auto groups = read_jsonl(tmp / "g.jsonl");
  CHECK(groups.size() == 20);
  CHECK(cli({"emit-rollouts", "--config", pipeline_config(), "--input", pipeline_input(),
             "--output", (tmp / "g.jsonl").string(), "--seed", "5", "--group-size", "1"})
            .code == kExitConfigError);
}

TEST_CASE("triage commands drive the store") {
  testing::TempDir tmp;
  auto doc = json::parse(read_text_file(testing::fixtures() / "eval/config.json"));
  doc["store_path"] = (tmp / "cases.log").string();
  doc["judges"]["reason_optimizer"] = "judge";
  doc["triage"] = {{"verifiers", {"judge"}}};
  write_text_file(tmp / "c.json", doc.dump());
  // eval records double as triage inputs
  auto r = cli({"triage", "detect", "--config", (tmp / "c.json").string(), "--input",
                (testing::fixtures() / "eval/eval.jsonl").string()});
  INFO(r.err);
  REQUIRE(r.code == kExitOk);
  auto j = json::parse(r.out);
  CHECK(j["counts"]["detected"] == 6);
  CHECK(j["states"]["simple_non_halluc"] == 5);
  CHECK(j["states"]["awaiting_human"] == 1);
  r = cli({"triage", "status", "--config", (tmp / "c.json").string()});
  CHECK(json::parse(r.out)["states"] == j["states"]);
}

TEST_CASE("triage service end to end") {
  testing::TempDir tmp;
  testing::TriageRig rig;
  TriageStore store{tmp / "cases.log"};
  for (int i = 0; i < 2; ++i) {
    rig.detector = HallucinationLabel::ImproperRagUse;
    rig.verifier = HallucinationLabel::NoHallucination;
    TriageEngine engine(store, *rig.suite, rig.endpoints());
    auto c = engine.triage_detect(testing::make_dialogue(), "Response " + std::to_string(i));
    if (c.state == TriageState::AwaitingVerifier) engine.triage_verify(c.case_id);
  }

  ServiceConfig sc;
  sc.port = 0;
  sc.bearer_token = "tok";
  Service service(store, sc);
  const int port = service.bind();
  REQUIRE(port > 0);
  service.start();
  httplib::Client client("127.0.0.1", port);
  httplib::Headers auth = {{"Authorization", "Bearer tok"}};

  auto health = client.Get("/healthz");
  REQUIRE(health);
  CHECK(health->status == 200);
  CHECK(client.Get("/queue/next?annotator=ann")->status == 401);
  CHECK(client.Get("/queue/next?annotator=ann", {{"Authorization", "Bearer nope"}})->status == 401);
  CHECK(client.Get("/queue/next", auth)->status == 400);

  auto leased = client.Get("/queue/next?annotator=ann", auth);
  REQUIRE(leased->status == 200);
  auto item = json::parse(leased->body);
  const std::string id = item["case_id"];
  CHECK(item["state"] == "awaiting_human");
  CHECK(item.contains("lease_expires"));
  CHECK(item["detector_verdict"]["label"] == "improper_rag_use");

  auto stats_before = json::parse(client.Get("/stats")->body);
  CHECK(stats_before["active_leases"] == 1);

  // the lease holder is visible only to the holder
  auto mine = json::parse(client.Get("/cases/" + id + "?annotator=ann", auth)->body);
  CHECK(mine["lease"]["annotator_id"] == "ann");
  auto theirs = json::parse(client.Get("/cases/" + id + "?annotator=other", auth)->body);
  CHECK_FALSE(theirs.contains("lease"));
  CHECK(theirs["leased"] == true);

  // another annotator cannot answer a leased case
  auto conflict = client.Post("/queue/" + id + "/verdict", auth,
                              json{{"is_hallucination", false}, {"annotator_id", "other"}}.dump(),
                              "application/json");
  CHECK(conflict->status == 409);
  CHECK(client.Post("/queue/" + id + "/verdict", auth, "{oops", "application/json")->status == 400);
  CHECK(client.Post("/queue/" + id + "/verdict", auth,
                    json{{"is_hallucination", true}, {"annotator_id", "ann"}}.dump(),
                    "application/json")
            ->status == 400);  // hallucination needs a reason
  CHECK(client.Post("/queue/nope/verdict", auth,
                    json{{"is_hallucination", false}, {"annotator_id", "ann"}}.dump(),
                    "application/json")
            ->status == 404);

  auto ok = client.Post("/queue/" + id + "/verdict", auth,
                        json{{"is_hallucination", false}, {"annotator_id", "ann"}}.dump(),
                        "application/json");
  REQUIRE(ok->status == 200);
  CHECK(json::parse(ok->body)["state"] == "hard_non_halluc");
  CHECK(client.Post("/queue/" + id + "/verdict", auth,
                    json{{"is_hallucination", false}, {"annotator_id", "ann"}}.dump(),
                    "application/json")
            ->status == 409);

  auto stats = json::parse(client.Get("/stats")->body);
  CHECK(stats["counts"]["hard_non_halluc"] == 1);
  CHECK(stats["counts"]["awaiting_human"] == 1);
  CHECK(stats["active_leases"] == 0);

  auto c = client.Get("/cases/" + id, auth);
  CHECK(c->status == 200);
  CHECK(client.Get("/cases/missing", auth)->status == 404);

  // drain the queue, then it is empty
  CHECK(client.Get("/queue/next?annotator=ann", auth)->status == 200);
  CHECK(client.Get("/queue/next?annotator=b", auth)->status == 204);

  auto metrics = client.Get("/metrics");
  REQUIRE(metrics->status == 200);
  CHECK(metrics->body.find("csrpipe_verdicts_total 1") != std::string::npos);
  CHECK(metrics->body.find("csrpipe_triage_cases{state=\"hard_non_halluc\"} 1") !=
        std::string::npos);
  CHECK(client.Get("/")->status == 200);
  service.stop();

  // the CLI refuses a store that is already open
  auto doc = minimal_config();
  doc["store_path"] = (tmp / "cases.log").string();
  write_text_file(tmp / "c.json", doc.dump());
  auto r = cli({"serve", "--config", (tmp / "c.json").string(), "--port", "0"});
  CHECK(r.code == kExitStageFailure);
  CHECK(r.err.rfind("StoreLocked:", 0) == 0);
}
