#include "csrpipe/eval.hpp"

#include <fmt/format.h>

#include "csrpipe/curation.hpp"
#include "csrpipe/dialogue_io.hpp"
#include "csrpipe/errors.hpp"
#include "csrpipe/serialization.hpp"

namespace csrpipe {

double gsb_score(std::size_t n_good, std::size_t n_same, std::size_t n_bad) {
  const auto total = n_good + n_same + n_bad;
  if (total == 0) throw EmptySample("GSB score needs at least one judged sample");
  return (static_cast<double>(n_good) - static_cast<double>(n_bad)) / static_cast<double>(total);
}

EvalReport evaluate_set(const std::vector<EvalRecord>& records, const LengthFn& length) {
  if (records.empty()) throw EmptySample("evaluation set is empty");
  EvalReport r;
  r.n = records.size();
  double score_sum = 0.0;
  double cot_sum = 0.0;
  double resp_sum = 0.0;
  std::size_t risky = 0;
  std::size_t halluc = 0;
  for (const auto& rec : records) {
    if (rec.human.score < 1 || rec.human.score > 5) {
      throw InvalidInput("human-likeness score outside 1..5");
    }
    score_sum += rec.human.score;
    ++r.score_histogram[static_cast<std::size_t>(rec.human.score - 1)];
    if (rec.gsb && rec.reference) {
      switch (rec.gsb->value) {
        case Gsb::Good: ++r.n_good; break;
        case Gsb::Same: ++r.n_same; break;
        case Gsb::Bad: ++r.n_bad; break;
      }
    }
    if (rec.risk.risky) ++risky;
    if (rec.hallucination.hallucinated()) ++halluc;
    cot_sum += static_cast<double>(length(rec.cot));
    resp_sum += static_cast<double>(length(rec.response));
  }
  const auto n = static_cast<double>(r.n);
  r.mean_human_likeness = score_sum / n;
  if (r.n_good + r.n_same + r.n_bad > 0) r.gsb_score = gsb_score(r.n_good, r.n_same, r.n_bad);
  r.risk_rate = static_cast<double>(risky) / n;
  r.hallucination_rate = static_cast<double>(halluc) / n;
  r.cot_length_mean = cot_sum / n;
  r.response_length_mean = resp_sum / n;
  return r;
}

json to_json(const EvalReport& r) {
  return {{"n", r.n},
          {"mean_human_likeness", r.mean_human_likeness},
          {"score_histogram", r.score_histogram},
          {"gsb_score", r.gsb_score ? json(*r.gsb_score) : json(nullptr)},
          {"gsb_counts", {{"good", r.n_good}, {"same", r.n_same}, {"bad", r.n_bad}}},
          {"risk_rate", r.risk_rate},
          {"hallucination_rate", r.hallucination_rate},
          {"cot_length_mean", r.cot_length_mean},
          {"response_length_mean", r.response_length_mean}};
}

EvalReport eval_report_from_json(const json& j) {
  EvalReport r;
  r.n = j.at("n").get<std::size_t>();
  r.mean_human_likeness = j.at("mean_human_likeness").get<double>();
  r.score_histogram = j.at("score_histogram").get<std::array<std::size_t, 5>>();
  if (!j.at("gsb_score").is_null()) r.gsb_score = j.at("gsb_score").get<double>();
  const auto& counts = j.at("gsb_counts");
  r.n_good = counts.at("good").get<std::size_t>();
  r.n_same = counts.at("same").get<std::size_t>();
  r.n_bad = counts.at("bad").get<std::size_t>();
  r.risk_rate = j.at("risk_rate").get<double>();
  r.hallucination_rate = j.at("hallucination_rate").get<double>();
  r.cot_length_mean = j.at("cot_length_mean").get<double>();
  r.response_length_mean = j.at("response_length_mean").get<double>();
  return r;
}

std::string render_report_table(const std::vector<std::pair<std::string, EvalReport>>& rows) {
  std::string out = fmt::format("{:<24} {:>10} {:>15} {:>20} {:>19} {:>27} {:>18}\n", "Model",
                                "CoT Length", "Response Length", "Human-Likeness Score",
                                "Dialogue GSB Score", "Critical Business Risk Rate",
                                "Hallucination Rate");
  for (const auto& [name, r] : rows) {
    auto gsb = r.gsb_score ? fmt::format("{:.1f}%", *r.gsb_score * 100.0) : std::string("-");
    out += fmt::format("{:<24} {:>10.1f} {:>15.1f} {:>20.2f} {:>19} {:>26.1f}% {:>17.1f}%\n", name,
                       r.cot_length_mean, r.response_length_mean, r.mean_human_likeness, gsb,
                       r.risk_rate * 100.0, r.hallucination_rate * 100.0);
  }
  return out;
}

namespace {

MetricDelta make_delta(std::string metric, double a, double b, Direction dir, bool percent,
                       int precision) {
  MetricDelta d;
  d.metric = std::move(metric);
  d.a = a;
  d.b = b;
  d.delta = b - a;
  d.direction = dir;
  const double shown = percent ? d.delta * 100.0 : d.delta;
  auto text = fmt::format("{:+.{}f}", shown, precision);
  // Deltas that round to zero are shown unsigned, without an arrow, and do
  // not count as an improvement.
  const bool flat = text.find_first_not_of("+-0.") == std::string::npos;
  if (flat) {
    d.rendered = fmt::format("{:.{}f}", 0.0, precision) + (percent ? "%" : "");
  } else {
    d.rendered = text + (percent ? "%" : "") + (d.delta > 0 ? "↑" : "↓");
  }
  if (dir != Direction::Neutral) {
    d.improved = !flat && (dir == Direction::HigherBetter ? d.delta > 0 : d.delta < 0);
  }
  return d;
}

}  // namespace

std::vector<MetricDelta> compare_models(const EvalReport& a, const EvalReport& b) {
  if (a.n == 0 || b.n == 0) throw EmptySample("comparison needs two non-empty reports");
  std::vector<MetricDelta> out;
  out.push_back(make_delta("CoT Length", a.cot_length_mean, b.cot_length_mean, Direction::Neutral,
                           false, 1));
  out.push_back(make_delta("Response Length", a.response_length_mean, b.response_length_mean,
                           Direction::Neutral, false, 1));
  out.push_back(make_delta("Human-Likeness Score", a.mean_human_likeness, b.mean_human_likeness,
                           Direction::HigherBetter, false, 2));
  if (a.gsb_score && b.gsb_score) {
    out.push_back(make_delta("Dialogue GSB Score", *a.gsb_score, *b.gsb_score,
                             Direction::HigherBetter, true, 1));
  }
  out.push_back(make_delta("Critical Business Risk Rate", a.risk_rate, b.risk_rate,
                           Direction::LowerBetter, true, 1));
  out.push_back(make_delta("Hallucination Rate", a.hallucination_rate, b.hallucination_rate,
                           Direction::LowerBetter, true, 1));
  return out;
}

std::string render_comparison(const std::vector<MetricDelta>& deltas) {
  std::string out = fmt::format("{:<28} {:>10} {:>10} {:>10}  {}\n", "Metric", "A", "B", "Delta",
                                "Improved");
  for (const auto& d : deltas) {
    out += fmt::format("{:<28} {:>10.4f} {:>10.4f} {:>10}  {}\n", d.metric, d.a, d.b, d.rendered,
                       d.improved ? (*d.improved ? "yes" : "no") : "-");
  }
  return out;
}

EvalInput eval_input_from_json(const json& j) {
  EvalInput in;
  in.dialogue = dialogue_from_json(j.at("dialogue"));
  in.candidate = j.at("candidate").get<std::string>();
  if (trim(in.candidate).empty()) throw InvalidInput("eval candidate is empty");
  if (auto it = j.find("reference"); it != j.end() && !it->is_null()) {
    in.reference = it->get<std::string>();
  } else {
    in.reference = in.dialogue.reference_response;
  }
  return in;
}

JudgedSet judge_eval_set(JudgeSuite& judges, const std::vector<EvalInput>& inputs,
                         const JudgeEndpoints& endpoints, int workers) {
  struct Item {
    std::optional<EvalRecord> record;
    std::string error;
  };
  auto items = parallel_map<Item>(inputs.size(), workers, [&](std::size_t i) {
    const auto& in = inputs[i];
    EvalRecord rec;
    rec.dialogue = in.dialogue;
    rec.reference = in.reference;
    // Candidates may carry think/answer tags; lengths are split accordingly.
    CandidatePair pair{"", in.candidate, CotMode::PreCot, Origin::External};
    for (auto m : {CotMode::PreCot, CotMode::PostCot}) {
      try {
        pair = parse_candidate(in.candidate, m);
        break;
      } catch (const MalformedStructure&) {
      }
    }
    rec.cot = pair.cot;
    rec.response = pair.answer;
    try {
      rec.human = judges.judge_human_likeness(in.dialogue, pair, endpoints.human_likeness);
      if (in.reference && !trim(*in.reference).empty()) {
        rec.gsb = judges.judge_gsb(in.dialogue, pair, *in.reference, endpoints.gsb);
      }
      rec.risk = judges.judge_risk(in.dialogue, pair, endpoints.risk);
      rec.hallucination = judges.judge_hallucination(in.dialogue, pair.answer, endpoints.hallucination);
    } catch (const Error& e) {
      return Item{std::nullopt, in.dialogue.dialogue_id + ": " + e.what()};
    }
    return Item{std::move(rec), ""};
  });
  JudgedSet out;
  for (auto& item : items) {
    if (item.record) {
      out.records.push_back(std::move(*item.record));
    } else {
      ++out.failures;
      out.errors.push_back(std::move(item.error));
    }
  }
  return out;
}

}  // namespace csrpipe
