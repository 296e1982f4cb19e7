// stackrev: run revision games, build the dataset pipeline, compute metrics,
// and check the convergence/superiority suites numerically.

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "stackrev/eval_harness.hpp"
#include "stackrev/game_engine.hpp"
#include "stackrev/game_sim.hpp"
#include "stackrev/llm_gateway.hpp"
#include "stackrev/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace stackrev;

namespace {

int exit_code_for(const Error& e) {
  switch (e.code()) {
    case Errc::ConfigError:
      return 2;
    case Errc::BackendUnavailable:
    case Errc::ScriptExhausted:
      return 3;
    case Errc::NoJsonFound:
    case Errc::MalformedJson:
    case Errc::SchemaViolation:
    case Errc::UnknownRiskId:
    case Errc::OutOfRange:
    case Errc::EmptyRiskSet:
      return 4;
    default:
      return 1;
  }
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw Error(Errc::ConfigError, "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw Error(Errc::ConfigError, "cannot write " + path.string());
  out << content;
}

void write_json(const fs::path& path, const json& doc) {
  write_file(path, doc.dump(2) + "\n");
}

struct Manifest {
  std::string config_path;
  std::string backend_spec;  // "scripted:<path>" or "http"
  std::uint64_t seed = 42;
  int workers = 1;
  fs::path out_dir = "out";
  std::vector<std::string> overrides;  // key=value, highest precedence
  std::map<std::string, std::string> file_kv;  // raw config file contents

  engine::GameConfig game_config() const;
  std::unique_ptr<llm::ChatBackend> make_backend() const;
  void load();
};

std::map<std::string, std::string> env_overrides() {
  std::map<std::string, std::string> kv;
  for (const auto& key : engine::GameConfig::known_keys()) {
    std::string env_name = "STACKREV_";
    for (char c : key) env_name.push_back(std::toupper(static_cast<unsigned char>(c)));
    if (const char* v = std::getenv(env_name.c_str())) kv[key] = v;
  }
  return kv;
}

void Manifest::load() {
  if (config_path.empty()) return;
  file_kv = engine::parse_kv_file(config_path);
  const auto& known = engine::GameConfig::known_keys();
  for (const auto& [key, value] : file_kv) {
    const bool engine_key =
        std::find(known.begin(), known.end(), key) != known.end();
    const bool backend_key = key == "http_endpoint" || key == "http_model" ||
                             key == "http_api_key_env";
    if (!engine_key && !backend_key)
      throw Error(Errc::ConfigError,
                  "unknown config key \"" + key + "\" in " + config_path);
  }
}

engine::GameConfig Manifest::game_config() const {
  engine::GameConfig cfg;
  // Precedence: --set flag > environment > config file > default.
  std::map<std::string, std::string> kv;
  const auto& known = engine::GameConfig::known_keys();
  for (const auto& [k, v] : file_kv)
    if (std::find(known.begin(), known.end(), k) != known.end()) kv[k] = v;
  for (const auto& [k, v] : env_overrides()) kv[k] = v;
  for (const auto& item : overrides) {
    const auto eq = item.find('=');
    if (eq == std::string::npos)
      throw Error(Errc::ConfigError, "--set expects key=value, got " + item);
    kv[item.substr(0, eq)] = item.substr(eq + 1);
  }
  cfg.apply_kv(kv);
  return cfg;
}

std::unique_ptr<llm::ChatBackend> Manifest::make_backend() const {
  if (backend_spec.rfind("scripted:", 0) == 0)
    return llm::ScriptedBackend::from_file(backend_spec.substr(9));
  if (backend_spec == "http") {
    llm::HttpBackend::Options opts;
    auto at = [this](const char* key) {
      const auto it = file_kv.find(key);
      return it == file_kv.end() ? std::string() : it->second;
    };
    opts.endpoint = at("http_endpoint");
    opts.model = at("http_model");
    opts.api_key_env = at("http_api_key_env");
    if (opts.endpoint.empty())
      throw Error(Errc::ConfigError,
                  "http backend needs http_endpoint in the config file");
    return std::make_unique<llm::HttpBackend>(opts);
  }
  throw Error(Errc::ConfigError,
              "--backend must be scripted:<script.json> or http");
}

void parallel_for(std::size_t count, int workers,
                  const std::function<void(std::size_t)>& fn) {
  workers = std::max(1, workers);
  if (workers == 1 || count <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex err_mu;
  auto worker = [&] {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= count) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(err_mu);
        if (!first_error) first_error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> threads;
  const int n = std::min<std::size_t>(workers, count);
  threads.reserve(n);
  for (int t = 0; t < n; ++t) threads.emplace_back(worker);
  for (auto& t : threads) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

json ledger_json(const llm::TokenLedger& ledger) {
  json out;
  for (const auto& [tag, usage] : ledger.snapshot())
    out[tag] = {{"prompt_tokens", usage.prompt_tokens},
                {"completion_tokens", usage.completion_tokens}};
  out["grand_total"] = ledger.grand_total();
  return out;
}

int cmd_revise(const Manifest& manifest,
               const std::vector<std::string>& contracts) {
  const auto cfg = manifest.game_config();
  fs::create_directories(manifest.out_dir);

  std::vector<int> codes(contracts.size(), 0);
  parallel_for(contracts.size(), manifest.workers, [&](std::size_t i) {
    const fs::path input = contracts[i];
    const std::string stem = input.stem().string();
    const std::string contract = read_file(input);

    // Each document gets a fresh backend so scripted scripts replay
    // per-document and parallel runs stay deterministic.
    auto backend = manifest.make_backend();
    llm::TokenLedger ledger;
    engine::Transcript transcript;
    engine::RunOutcome outcome;
    try {
      outcome = engine::run_game(contract, cfg, *backend, ledger, transcript);
    } catch (const Error& e) {
      transcript.write_jsonl((manifest.out_dir / (stem + ".transcript.jsonl")).string());
      codes[i] = exit_code_for(e);
      std::cerr << stem << ": " << e.what() << "\n";
      return;
    }

    write_file(manifest.out_dir / (stem + ".final.txt"),
               outcome.final_contract + "\n");
    transcript.write_jsonl(
        (manifest.out_dir / (stem + ".transcript.jsonl")).string());

    json summary;
    summary["seed"] = manifest.seed;
    summary["document"] = stem;
    summary["rounds_used"] = outcome.state.round;
    summary["j_l_trace"] = outcome.state.j_l_trace;
    summary["final_j_l"] = outcome.final_j_l;
    summary["safety"] = outcome.state.last_audit.global_safety_score;
    summary["force_rewrites"] = outcome.state.force_rewrites_fired;
    summary["hint_tokens"] = outcome.state.hint.serialized_tokens;
    summary["hint_over_budget"] = outcome.state.hint.over_budget;
    summary["tokens"] = ledger_json(ledger);
    if (outcome.aborted) summary["aborted"] = *outcome.aborted;
    write_json(manifest.out_dir / (stem + ".summary.json"), summary);

    if (outcome.aborted) {
      std::cerr << stem << ": " << *outcome.aborted << "\n";
      codes[i] = 3;
    }
  });

  for (int code : codes)
    if (code != 0) return code;
  return 0;
}

int cmd_pipeline(const Manifest& manifest, const std::string& stage,
                 const std::string& in_dir) {
  const bool want_standardize = stage != "classify";
  const bool want_enrich = stage == "enrich" || stage == "all";
  fs::create_directories(manifest.out_dir);

  std::vector<fs::path> inputs;
  if (fs::exists(in_dir))
    for (const auto& entry : fs::directory_iterator(in_dir))
      if (entry.is_regular_file() && entry.path().extension() == ".txt")
        inputs.push_back(entry.path());
  std::sort(inputs.begin(), inputs.end());

  std::mutex stats_mu;
  std::map<std::string, int> histogram;
  int filtered_total = 0;

  parallel_for(inputs.size(), manifest.workers, [&](std::size_t i) {
    const fs::path& input = inputs[i];
    pipeline::RawDocument raw{input.filename().string(), read_file(input)};

    pipeline::ClassifiedDocument doc;
    doc.clean_header = pipeline::clean_header(raw.source_name);
    doc.category_id = pipeline::classify_header(doc.clean_header);
    doc.body = raw.body;

    json out;
    out["source"] = raw.source_name;
    out["category_id"] = doc.category_id;
    out["clean_header"] = doc.clean_header;

    int filtered_here = 0;
    if (want_standardize) {
      auto backend = manifest.make_backend();
      llm::TokenLedger ledger;
      auto std_result = pipeline::standardize(doc, *backend, ledger);
      if (!std_result.violations.empty())  // single retry on violation
        std_result = pipeline::standardize(doc, *backend, ledger);

      json tmpl;
      for (const auto& [name, body] : std_result.tmpl.sections)
        tmpl[name] = body;
      out["template"] = {{"sections", tmpl},
                         {"word_count", std_result.tmpl.word_count}};
      json violations = json::array();
      for (const auto& v : std_result.violations)
        violations.push_back({{"kind", pipeline::violation_kind_name(v.kind)},
                              {"detail", v.detail}});
      out["template"]["violations"] = violations;

      if (want_enrich && std_result.violations.empty()) {
        const auto enriched =
            pipeline::enrich(std_result.tmpl, *backend, ledger);
        json risks = json::array();
        for (const auto& r : enriched.risks)
          risks.push_back({{"category", r.category},
                           {"issue", r.issue},
                           {"mitigation", r.mitigation}});
        out["golden_risks"] = risks;
        out["filtered_risk_count"] = enriched.filtered_count;
        filtered_here = enriched.filtered_count;
      }
    }

    write_json(manifest.out_dir / (input.stem().string() + ".json"), out);
    std::lock_guard lock(stats_mu);
    histogram[doc.category_id] += 1;
    filtered_total += filtered_here;
  });

  json stats;
  stats["seed"] = manifest.seed;
  stats["documents"] = inputs.size();
  stats["per_category_counts"] = histogram;
  stats["filtered_risk_count"] = filtered_total;
  write_json(manifest.out_dir / "stats.json", stats);
  return 0;
}

int cmd_eval(const Manifest& manifest, const std::string& in_dir) {
  fs::create_directories(manifest.out_dir);

  std::vector<fs::path> inputs;
  for (const auto& entry : fs::directory_iterator(in_dir))
    if (entry.is_regular_file() && entry.path().extension() == ".json" &&
        entry.path().filename() != "wins.json")
      inputs.push_back(entry.path());
  std::sort(inputs.begin(), inputs.end());
  if (inputs.empty())
    throw Error(Errc::ConfigError, "no result documents in " + in_dir);

  struct DocRow {
    std::string name;
    std::vector<eval::JudgeVerdict> verdicts;
    eval::QualityScores quality;
    std::int64_t tokens = 0;
    int resolved = 0;
    int risks = 0;
    int judge_exclusions = 0;
  };
  std::vector<DocRow> rows(inputs.size());
  std::vector<eval::EditAnnotation> annotations;
  std::mutex ann_mu;

  parallel_for(inputs.size(), manifest.workers, [&](std::size_t i) {
    const json doc = json::parse(read_file(inputs[i]));
    DocRow& row = rows[i];
    row.name = inputs[i].stem().string();
    const std::string contract = doc.at("final_contract").get<std::string>();
    row.tokens = doc.value("transcript_tokens", std::int64_t{0});

    auto backend = manifest.make_backend();
    llm::TokenLedger ledger;
    std::size_t k = 0;
    for (const auto& g : doc.value("golden_risks", json::array())) {
      pipeline::GoldenRisk risk{g.at("category").get<std::string>(),
                                g.at("issue").get<std::string>(),
                                g.value("mitigation", "")};
      ++row.risks;
      const std::string seed_id = row.name + "#" + std::to_string(k++);
      try {
        auto verdict =
            eval::judge_resolution(contract, risk, seed_id, *backend, ledger);
        if (verdict.resolved) ++row.resolved;
        row.verdicts.push_back(std::move(verdict));
      } catch (const Error& e) {
        // Unjudgeable risks are excluded from the denominator and counted.
        if (e.code() == Errc::SchemaViolation || e.code() == Errc::NoJsonFound ||
            e.code() == Errc::MalformedJson || e.code() == Errc::OutOfRange)
          ++row.judge_exclusions;
        else
          throw;
      }
    }
    row.quality = eval::judge_quality(contract, *backend, ledger);

    if (doc.contains("edit_annotations")) {
      std::vector<eval::EditAnnotation> local;
      for (const auto& a : doc["edit_annotations"])
        local.push_back({a.value("modified", false), a.value("was_risky", false),
                         a.value("fix_attempted", false),
                         a.value("fix_succeeded", false)});
      std::lock_guard lock(ann_mu);
      annotations.insert(annotations.end(), local.begin(), local.end());
    }
  });

  std::vector<std::vector<eval::JudgeVerdict>> per_doc;
  int excluded_docs = 0, exclusions = 0, resolved_total = 0;
  std::int64_t tokens_total = 0;
  double cq_mean_sum = 0.0, cq_weighted_sum = 0.0;
  const auto weights = eval::CqWeights::defaults();
  for (const auto& row : rows) {
    exclusions += row.judge_exclusions;
    resolved_total += row.resolved;
    tokens_total += row.tokens;
    cq_mean_sum += eval::cq_mean(row.quality);
    cq_weighted_sum += eval::cq_weighted(row.quality, weights);
    if (row.verdicts.empty())
      ++excluded_docs;
    else
      per_doc.push_back(row.verdicts);
  }

  json report;
  report["seed"] = manifest.seed;
  report["documents"] = rows.size();
  report["rrr"] = per_doc.empty() ? json() : json(eval::rrr(per_doc));
  report["cq_mean"] = cq_mean_sum / static_cast<double>(rows.size());
  report["cq_weighted"] = cq_weighted_sum / static_cast<double>(rows.size());
  report["cq_weights"] = weights.values();
  if (tokens_total > 0)
    report["tes_raw"] = eval::tes_raw(resolved_total, tokens_total);
  report["resolved_total"] = resolved_total;
  report["tokens_total"] = tokens_total;
  report["judge_exclusions"] = exclusions;
  report["documents_without_verdicts"] = excluded_docs;

  const fs::path wins_path = fs::path(in_dir) / "wins.json";
  if (fs::exists(wins_path)) {
    const json wins = json::parse(read_file(wins_path));
    report["win_rate"] =
        eval::win_rate(wins.at("n_win").get<int>(), wins.at("n_tie").get<int>(),
                       wins.at("n_total").get<int>());
  }
  if (!annotations.empty()) {
    const auto [hr, ffr] = eval::hr_ffr(annotations);
    report["hr"] = hr;
    report["ffr"] = ffr;
  }
  write_json(manifest.out_dir / "metrics.json", report);

  std::ostringstream csv;
  csv << "doc,risks,resolved,rrr_doc,cq_mean,cq_weighted,tokens,tes_doc\n";
  for (const auto& row : rows) {
    double rrr_doc = 0.0;
    if (!row.verdicts.empty()) rrr_doc = eval::rrr({row.verdicts});
    csv << row.name << "," << row.risks << "," << row.resolved << ","
        << rrr_doc << "," << eval::cq_mean(row.quality) << ","
        << eval::cq_weighted(row.quality, weights) << "," << row.tokens << ","
        << (row.tokens > 0 ? eval::tes_raw(row.resolved, row.tokens) : 0.0)
        << "\n";
  }
  write_file(manifest.out_dir / "metrics.csv", csv.str());
  return 0;
}

int cmd_sim(const Manifest& manifest, const std::string& which, int instances,
            bool write_csv, bool force_eta_boundary) {
  fs::create_directories(manifest.out_dir);
  json report;
  report["which"] = which;
  report["seed"] = manifest.seed;
  report["instances"] = instances;
  bool ok = true;

  if (which == "theorem2") {
    const double eta_scale = force_eta_boundary ? 2.0 : 1.0;
    const auto suite =
        sim::run_theorem2_suite(manifest.seed, instances, eta_scale);
    json rows = json::array();
    for (const auto& inst : suite.instances) {
      rows.push_back({{"seed", inst.seed},
                      {"dimension", inst.dimension},
                      {"kappa", inst.kappa},
                      {"max_step_ratio", inst.max_step_ratio},
                      {"steps_used", inst.steps_used},
                      {"steps_bound", inst.steps_bound},
                      {"final_gradient", inst.final_gradient},
                      {"pass", inst.pass}});
      if (!inst.pass) {
        ok = false;
        std::cerr << "theorem2 violation at instance seed " << inst.seed
                  << " (kappa=" << inst.kappa << ")\n";
      }
    }
    report["results"] = rows;
    report["boundary_kappa"] = suite.boundary_kappa;
    report["boundary_non_contractive"] = suite.boundary_non_contractive;
    ok = ok && suite.all_pass;
  } else if (which == "theorem1") {
    const auto suite = sim::run_theorem1_suite(manifest.seed, instances);
    json rows = json::array();
    for (const auto& inst : suite.instances) {
      rows.push_back({{"seed", inst.seed},
                      {"v_se", inst.v_se},
                      {"v_ne", inst.v_ne},
                      {"strict_v_se", inst.strict_v_se},
                      {"strict_v_ne", inst.strict_v_ne},
                      {"pass", inst.pass}});
      if (!inst.pass) {
        ok = false;
        std::cerr << "theorem1 violation at instance seed " << inst.seed
                  << "\n";
      }
    }
    report["results"] = rows;
    ok = ok && suite.all_pass;
  } else {
    throw Error(Errc::ConfigError, "--which must be theorem1 or theorem2");
  }

  report["all_pass"] = ok;
  write_json(manifest.out_dir / (which + "_report.json"), report);

  if (write_csv && which == "theorem2") {
    // One sample trajectory for offline plotting.
    Rng rng(manifest.seed);
    const auto landscape = sim::random_landscape(rng, 2, 0.5, 4.0);
    Eigen::VectorXd x0 = landscape.x_star;
    x0(0) += 1.0;
    const auto sr = sim::follower_descend(
        x0, landscape, sim::SyntheticHint::null_hint(2),
        1.0 / landscape.l_smooth, 10000, 1e-9);
    std::ostringstream csv;
    csv << "step,x0,x1,gradient_norm\n";
    for (std::size_t t = 0; t < sr.trajectory.size(); ++t)
      csv << t << "," << sr.trajectory[t](0) << "," << sr.trajectory[t](1)
          << "," << sr.gradient_norms[t] << "\n";
    write_file(manifest.out_dir / "theorem2_trajectory.csv", csv.str());
  }

  if (!ok) {
    std::cerr << which << ": invariant FAILED\n";
    return 1;
  }
  std::cout << which << ": all " << instances << " instances pass\n";
  return 0;
}

int cmd_transcript_show(const std::string& path) {
  if (!fs::exists(path))
    throw Error(Errc::ConfigError, "no such transcript: " + path);
  std::ifstream in(path);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json e;
    try {
      e = json::parse(line);
    } catch (const json::exception& err) {
      throw Error(Errc::MalformedJson, path + ":" + std::to_string(lineno) +
                                           ": " + err.what());
    }
    const std::string tag = e.value("tag", "");
    if (tag == "final") {
      std::cout << "final  J_L=" << e.value("final_j_l", 0.0)
                << "  contract_bytes="
                << e.value("final_contract", std::string()).size() << "\n";
    } else if (tag == "warning") {
      std::cout << "round " << e.value("round", 0) << "  [warning] "
                << e.value("message", "") << "\n";
    } else {
      std::cout << "round " << e.value("round", 0) << "  "
                << e.value("agent", "?") << "/" << tag << "  digest "
                << e.value("request_digest", "") << "  response_bytes="
                << e.value("response", std::string()).size() << "\n";
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Stackelberg contract revision engine"};
  app.require_subcommand(1);
  app.footer(
      "Exit codes: 0 success, 1 failure (e.g. a sim invariant), 2 config "
      "error,\n3 backend error, 4 parse/schema error. File formats are "
      "described in FORMATS.md.");

  Manifest manifest;
  app.add_option("--config", manifest.config_path,
                 "key = value config file (see README)");
  app.add_option("--backend", manifest.backend_spec,
                 "scripted:<script.json> or http");
  app.add_option("--seed", manifest.seed, "random seed recorded in outputs");
  app.add_option("--workers", manifest.workers, "parallel documents");
  app.add_option("--out", manifest.out_dir, "output directory");
  app.add_option("--set", manifest.overrides,
                 "config override key=value (repeatable; beats env and file)");

  auto* revise = app.add_subcommand("revise", "run revision games");
  std::vector<std::string> contracts;
  revise->add_option("contracts", contracts, "contract .txt files")
      ->required();

  auto* pipe = app.add_subcommand("pipeline", "dataset construction stages");
  std::string stage = "all", in_dir;
  pipe->add_option("--stage", stage, "classify|standardize|enrich|all");
  pipe->add_option("--in", in_dir, "input directory of .txt documents")
      ->required();

  auto* eval_cmd = app.add_subcommand("eval", "compute metrics from results");
  std::string eval_in;
  eval_cmd->add_option("--in", eval_in, "directory of per-document result JSON")
      ->required();

  auto* sim_cmd = app.add_subcommand("sim", "numeric theorem suites");
  std::string which;
  int instances = 100;
  bool csv = false, force_boundary = false;
  sim_cmd->add_option("--which", which, "theorem1|theorem2")->required();
  sim_cmd->add_option("--instances", instances, "instance count");
  sim_cmd->add_flag("--csv", csv, "write a trajectory CSV");
  sim_cmd->add_flag("--force-eta-boundary", force_boundary,
                    "run theorem2 at eta = 2/L (must fail)");

  auto* tr = app.add_subcommand("transcript", "transcript utilities");
  auto* tr_show = tr->add_subcommand("show", "pretty-print a transcript");
  std::string tr_path;
  tr_show->add_option("path", tr_path, "transcript .jsonl")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    manifest.load();
    if (revise->parsed()) return cmd_revise(manifest, contracts);
    if (pipe->parsed()) {
      if (stage != "classify" && stage != "standardize" && stage != "enrich" &&
          stage != "all")
        throw Error(Errc::ConfigError, "unknown stage " + stage);
      return cmd_pipeline(manifest, stage, in_dir);
    }
    if (eval_cmd->parsed()) return cmd_eval(manifest, eval_in);
    if (sim_cmd->parsed())
      return cmd_sim(manifest, which, instances, csv, force_boundary);
    if (tr->parsed() && tr_show->parsed()) return cmd_transcript_show(tr_path);
    std::cerr << "no subcommand\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  } catch (const json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
