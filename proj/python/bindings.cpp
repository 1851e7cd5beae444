#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "csrpipe/cli.hpp"
#include "csrpipe/dialogue_io.hpp"
#include "csrpipe/errors.hpp"
#include "csrpipe/eval.hpp"
#include "csrpipe/judges.hpp"
#include "csrpipe/rewards.hpp"
#include "csrpipe/serialization.hpp"
#include "csrpipe/version.hpp"

namespace py = pybind11;
using namespace csrpipe;

namespace {

// Structured values cross the boundary as JSON; cheap at these sizes and it
// keeps the Python side plain dicts.
py::object to_py(const json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

json from_py(const py::handle& o) {
  return json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

CotMode mode_arg(const std::string& s) { return cot_mode_from_string(s); }

py::object parse_verdict(const std::string& kind, const std::string& completion) {
  if (kind == "human_likeness") return to_py(to_json(parse_human_likeness(completion)));
  if (kind == "gsb") return to_py(to_json(parse_gsb(completion)));
  if (kind == "risk") return to_py(to_json(parse_risk(completion)));
  if (kind == "multiturn") return to_py(to_json(parse_multiturn(completion)));
  if (kind == "hallucination") return to_py(to_json(parse_hallucination(completion)));
  if (kind == "mining") return to_py(to_json(parse_mined_thought(completion)));
  if (kind == "reason_optimizer") return py::str(parse_optimized_reason(completion));
  throw InvalidInput("unknown judge kind '" + kind + "'");
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Customer-service response curation: rewards, parsers, evaluation";
  m.attr("__version__") = kVersion;

  auto base = py::register_exception<Error>(m, "Error");
  py::register_exception<MalformedStructure>(m, "MalformedStructure", base);
  py::register_exception<InvalidInput>(m, "InvalidInput", base);
  py::register_exception<GroupTooSmall>(m, "GroupTooSmall", base);
  py::register_exception<EmptySample>(m, "EmptySample", base);
  py::register_exception<ParseFailure>(m, "ParseFailure", base);
  py::register_exception<ConfigError>(m, "ConfigError", base);

  m.def(
      "serialize_candidate",
      [](const std::string& cot, const std::string& answer, const std::string& mode) {
        CandidatePair p;
        p.cot = cot;
        p.answer = answer;
        p.mode = mode_arg(mode);
        return serialize_candidate(p, p.mode);
      },
      py::arg("cot"), py::arg("answer"), py::arg("mode") = "pre_cot");
  m.def(
      "parse_candidate",
      [](const std::string& text, const std::string& mode) {
        auto p = parse_candidate(text, mode_arg(mode));
        return py::make_tuple(p.cot, p.answer);
      },
      py::arg("text"), py::arg("mode") = "pre_cot", "Returns (cot, answer).");

  m.def(
      "format_reward",
      [](const std::string& text, const std::string& mode) {
        return compute_format_reward(text, mode_arg(mode));
      },
      py::arg("text"), py::arg("mode") = "pre_cot");
  m.def("length_reward", &compute_length_reward, py::arg("y_len"), py::arg("l_ref"),
        py::arg("rho") = 0.2);
  m.def(
      "match_reward",
      [](const std::string& answer, const std::vector<std::string>& terms,
         const std::vector<std::string>& patterns) {
        RuleSet rules;
        for (const auto& t : terms) rules.add_term(t);
        for (const auto& p : patterns) rules.add_regex(p, p);
        auto r = compute_match_reward(answer, rules);
        return py::make_tuple(r.value, r.matched);
      },
      py::arg("answer"), py::arg("terms") = std::vector<std::string>{},
      py::arg("patterns") = std::vector<std::string>{}, "Returns (value, matched rules).");
  m.def(
      "aggregate_reward",
      [](const py::dict& components) {
        const auto j = from_py(components);
        auto opt = [&](const char* key) -> std::optional<double> {
          if (!j.contains(key) || j[key].is_null()) return std::nullopt;
          return j[key].get<double>();
        };
        RewardVector v;
        v.r_format = opt("r_format");
        v.r_length = opt("r_length");
        v.r_match = opt("r_match");
        v.r_human = opt("r_human").value_or(0.0);
        v.r_risk = opt("r_risk").value_or(0.0);
        v.r_gsb = opt("r_gsb").value_or(0.0);
        v.r_halluc = opt("r_halluc");
        v.check_ranges();
        return aggregate_reward(v, RewardWeights{});
      },
      py::arg("components"),
      "Weighted total of a component dict (r_format, r_length, ...) with default weights.");
  m.def("group_advantages", &compute_group_advantages, py::arg("rewards"),
        py::arg("epsilon") = 1e-6);
  m.def("gsb_score", &gsb_score, py::arg("good"), py::arg("same"), py::arg("bad"));

  m.def("parse_verdict", &parse_verdict, py::arg("kind"), py::arg("completion"),
        "Parses a judge completion; kind is human_likeness, gsb, risk, multiturn, "
        "hallucination, mining or reason_optimizer.");

  m.def(
      "evaluate",
      [](const py::list& records) {
        std::vector<EvalRecord> rs;
        for (const auto& item : records) {
          const auto j = from_py(item);
          EvalRecord r;
          r.cot = j.value("cot", std::string{});
          r.response = j.at("response").get<std::string>();
          r.human.score = j.at("score").get<int>();
          if (j.contains("gsb") && !j["gsb"].is_null()) {
            r.reference = "";
            r.gsb = GsbVerdict{gsb_from_string(j["gsb"].get<std::string>()), ""};
          }
          r.risk.risky = j.value("risky", false);
          r.hallucination.label = j.value("hallucination", false)
                                      ? HallucinationLabel::ImproperRagUse
                                      : HallucinationLabel::NoHallucination;
          rs.push_back(std::move(r));
        }
        return to_py(to_json(evaluate_set(rs)));
      },
      py::arg("records"),
      "Aggregates judged records: dicts with response, score and optional cot, gsb "
      "(Good/Same/Bad), risky and hallucination.");

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        CliHooks hooks;
        hooks.out = &out;
        hooks.err = &err;
        int code;
        {
          py::gil_scoped_release release;
          code = run_cli(args, hooks);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs a csrpipe command; returns (exit_code, stdout, stderr).");
}
