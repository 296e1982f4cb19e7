#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "stackrev/eval_harness.hpp"
#include "stackrev/game_engine.hpp"
#include "stackrev/game_sim.hpp"
#include "stackrev/llm_gateway.hpp"
#include "stackrev/pipeline.hpp"
#include "stackrev/risk_model.hpp"

namespace py = pybind11;
using namespace stackrev;

namespace {

risk::QScore qscore_from_string(const std::string& grades) {
  if (grades.size() != 4)
    throw Error(Errc::InvalidArgument, "expected 4 grades like \"ABCC\"");
  auto g = [&grades](std::size_t i) {
    return risk::grade_from_string(std::string(1, grades[i]));
  };
  return risk::QScore{g(0), g(1), g(2), g(3)};
}

py::object json_to_py(const nlohmann::json& doc) {
  const auto loads = py::module_::import("json").attr("loads");
  return loads(doc.dump());
}

py::dict sim_result_dict(const sim::SimResult& r) {
  py::dict out;
  out["iterations"] = r.iterations;
  out["final_gradient_norm"] = r.final_gradient_norm;
  out["x_final"] = r.x_final;
  out["gradient_norms"] = r.gradient_norms;
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Stackelberg contract revision engine (C++ core)";

  py::register_exception<Error>(m, "StackrevError");

  // risk model
  m.def("grade_to_unit", [](const std::string& g) {
    return risk::grade_to_unit(risk::grade_from_string(g));
  });
  m.def(
      "severity",
      [](const std::string& grades, const std::array<double, 4>& weights) {
        return risk::severity(qscore_from_string(grades),
                              risk::SeverityWeights(weights));
      },
      py::arg("grades"), py::arg("weights") = std::array<double, 4>{0.4, 0.2, 0.2, 0.2});
  m.def("softmax_attention", &risk::softmax_attention, py::arg("severities"),
        py::arg("tau") = 1.0);
  m.def(
      "budget_penalty",
      [](std::int64_t serialized_tokens, std::int64_t beta_audit) {
        risk::InstructionVector h;
        h.serialized_tokens = serialized_tokens;
        return risk::budget_penalty(h, beta_audit);
      },
      py::arg("serialized_tokens"), py::arg("beta_audit") = 1500);
  m.def(
      "leader_utility",
      [](const std::vector<double>& severities,
         const std::vector<bool>& resolved, std::int64_t serialized_tokens,
         std::int64_t beta_audit, double lambda) {
        std::vector<risk::ScoredRisk> risks(severities.size());
        for (std::size_t i = 0; i < severities.size(); ++i)
          risks[i].severity = severities[i];
        risk::InstructionVector h;
        h.serialized_tokens = serialized_tokens;
        risk::BudgetConfig cfg;
        cfg.beta_audit = beta_audit;
        cfg.lambda = lambda;
        return risk::leader_utility(risks, resolved, h, cfg);
      },
      py::arg("severities"), py::arg("resolved"),
      py::arg("serialized_tokens") = 0, py::arg("beta_audit") = 1500,
      py::arg("lambda_") = 0.01);

  // gateway
  m.def("token_count", &llm::token_count);
  m.def("extract_json",
        [](const std::string& text) { return json_to_py(llm::extract_json(text)); });
  m.def("render_prompt",
        [](const std::string& id, const llm::PromptContext& ctx) {
          const auto parts = llm::render_prompt(id, ctx);
          return py::make_tuple(parts.system, parts.user);
        });
  m.def("template_ids", &llm::template_ids);

  // pipeline
  m.def("clean_header", &pipeline::clean_header);
  m.def("classify_header",
        py::overload_cast<const std::string&>(&pipeline::classify_header));

  // metrics
  m.def("rrr", [](const std::vector<std::vector<std::pair<bool, double>>>& docs) {
    std::vector<std::vector<eval::JudgeVerdict>> per_doc;
    for (const auto& doc : docs) {
      std::vector<eval::JudgeVerdict> verdicts;
      for (const auto& [y, sigma] : doc) {
        eval::JudgeVerdict v;
        v.resolved = y;
        v.confidence = sigma;
        verdicts.push_back(v);
      }
      per_doc.push_back(std::move(verdicts));
    }
    return eval::rrr(per_doc);
  });
  m.def("cq_mean", [](const std::array<double, 4>& s) { return eval::cq_mean(s); });
  m.def(
      "cq_weighted",
      [](const std::array<double, 4>& s, const std::array<double, 4>& w) {
        return eval::cq_weighted(s, eval::CqWeights(w));
      },
      py::arg("scores"),
      py::arg("weights") = std::array<double, 4>{0.25, 0.30, 0.25, 0.20});
  m.def("tes_raw", &eval::tes_raw);
  m.def("win_rate", &eval::win_rate);
  m.def("hr_ffr",
        [](const std::vector<std::tuple<bool, bool, bool, bool>>& rows) {
          std::vector<eval::EditAnnotation> annotations;
          for (const auto& [m_, r, a, s] : rows)
            annotations.push_back({m_, r, a, s});
          return eval::hr_ffr(annotations);
        });

  // simulator
  m.def(
      "contraction_factor",
      [](const Eigen::MatrixXd& a, double eta, double gamma) {
        const auto landscape = sim::QuadraticLandscape::from_matrix(
            a, Eigen::VectorXd::Zero(a.rows()));
        return sim::contraction_factor(
            landscape, sim::SyntheticHint{Eigen::VectorXd::Zero(a.rows()), gamma},
            eta);
      },
      py::arg("a"), py::arg("eta"), py::arg("gamma") = 0.0);
  m.def(
      "follower_descend",
      [](const Eigen::MatrixXd& a, const Eigen::VectorXd& x_star,
         const Eigen::VectorXd& x0, double eta, int max_steps, double eps,
         double gamma, std::optional<Eigen::VectorXd> target) {
        const auto landscape = sim::QuadraticLandscape::from_matrix(a, x_star);
        sim::SyntheticHint hint{
            target.value_or(Eigen::VectorXd::Zero(a.rows())), gamma};
        return sim_result_dict(
            sim::follower_descend(x0, landscape, hint, eta, max_steps, eps));
      },
      py::arg("a"), py::arg("x_star"), py::arg("x0"), py::arg("eta"),
      py::arg("max_steps") = 10000, py::arg("eps") = 1e-9,
      py::arg("gamma") = 0.0, py::arg("target") = std::nullopt);
  m.def(
      "run_theorem2_suite",
      [](std::uint64_t seed, int instances, double eta_scale) {
        const auto report = sim::run_theorem2_suite(seed, instances, eta_scale);
        py::list rows;
        for (const auto& inst : report.instances) {
          py::dict row;
          row["seed"] = inst.seed;
          row["dimension"] = inst.dimension;
          row["kappa"] = inst.kappa;
          row["steps_used"] = inst.steps_used;
          row["steps_bound"] = inst.steps_bound;
          row["pass"] = inst.pass;
          rows.append(row);
        }
        py::dict out;
        out["instances"] = rows;
        out["boundary_kappa"] = report.boundary_kappa;
        out["all_pass"] = report.all_pass;
        return out;
      },
      py::arg("seed") = 42, py::arg("instances") = 100,
      py::arg("eta_scale") = 1.0);
  m.def(
      "run_theorem1_suite",
      [](std::uint64_t seed, int instances) {
        const auto report = sim::run_theorem1_suite(seed, instances);
        py::list rows;
        for (const auto& inst : report.instances) {
          py::dict row;
          row["seed"] = inst.seed;
          row["v_se"] = inst.v_se;
          row["v_ne"] = inst.v_ne;
          row["strict_v_se"] = inst.strict_v_se;
          row["strict_v_ne"] = inst.strict_v_ne;
          row["pass"] = inst.pass;
          rows.append(row);
        }
        py::dict out;
        out["instances"] = rows;
        out["all_pass"] = report.all_pass;
        return out;
      },
      py::arg("seed") = 42, py::arg("instances") = 100);

  // engine, driven by an in-memory script
  m.def(
      "run_game_scripted",
      [](const std::string& contract,
         const std::vector<std::pair<std::string, std::string>>& script,
         const std::map<std::string, std::string>& config) {
        std::vector<llm::ScriptedBackend::Entry> entries;
        for (const auto& [match, response] : script)
          entries.push_back({match, response});
        llm::ScriptedBackend backend(std::move(entries));
        llm::TokenLedger ledger;
        engine::Transcript transcript;
        engine::GameConfig cfg;
        cfg.apply_kv(config);
        const auto outcome =
            engine::run_game(contract, cfg, backend, ledger, transcript);
        py::dict out;
        out["final_contract"] = outcome.final_contract;
        out["final_j_l"] = outcome.final_j_l;
        out["rounds"] = outcome.state.round;
        out["j_l_trace"] = outcome.state.j_l_trace;
        out["safety"] = outcome.state.last_audit.global_safety_score;
        out["force_rewrites"] = outcome.state.force_rewrites_fired;
        out["aborted"] = outcome.aborted ? py::cast(*outcome.aborted)
                                         : py::object(py::none());
        out["grand_total_tokens"] = ledger.grand_total();
        out["transcript_jsonl"] = transcript.to_jsonl();
        return out;
      },
      py::arg("contract"), py::arg("script"),
      py::arg("config") = std::map<std::string, std::string>{});
}
