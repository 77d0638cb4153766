#pragma once

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "aib/config.hpp"
#include "aib/diagnostics.hpp"
#include "aib/io.hpp"
#include "aib/ksg.hpp"
#include "aib/metrics.hpp"
#include "aib/sac.hpp"

namespace aib::exp {

namespace fs = std::filesystem;
using nlohmann::json;

inline const char* kSetNames[3] = {"train", "eval_in", "eval_out"};

/// Output root override; the only environment variable the tool reads.
inline std::string resolve_out_dir(const std::string& out_dir) {
  const char* root = std::getenv("AIB_OUT_ROOT");
  if (root && *root && fs::path(out_dir).is_relative())
    return (fs::path(root) / out_dir).string();
  return out_dir;
}

struct RunPaths {
  fs::path dir;
  explicit RunPaths(const std::string& out_dir)
      : dir(resolve_out_dir(out_dir)) {}
  std::string config() const { return (dir / "config.json").string(); }
  std::string manifest() const { return (dir / "manifest.json").string(); }
  std::string metrics() const { return (dir / "metrics.jsonl").string(); }
  std::string eval() const { return (dir / "eval.jsonl").string(); }
  std::string eval_records() const {
    return (dir / "eval_records.jsonl").string();
  }
  std::string checkpoint() const { return (dir / "checkpoint.bin").string(); }
  std::string embeddings(const std::string& set) const {
    return (dir / ("embeddings_" + set + ".csv")).string();
  }
  std::string diagnostics() const {
    return (dir / "diagnostics.json").string();
  }
};

inline json context_to_json(const ContextPoint& c) {
  return {{"continuous", c.continuous}, {"inversion", c.inversion}};
}

inline json context_sets_to_json(const ContextSetTriple& sets) {
  auto dump = [](const std::vector<ContextPoint>& v) {
    json a = json::array();
    for (auto& c : v) a.push_back(context_to_json(c));
    return a;
  };
  return {{"train", dump(sets.train)},
          {"eval_in", dump(sets.eval_in)},
          {"eval_out", dump(sets.eval_out)}};
}

inline std::string iso_now() {
  std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%FT%TZ", std::gmtime(&t));
  return buf;
}

/// Per-run eval seed, fixed by the run seed so repeated evaluations of the
/// same run are byte-identical.
inline std::uint64_t eval_seed_for(std::uint64_t run_seed) {
  return Rng(run_seed).child(tag("eval_seed")).next_u64();
}

inline const std::vector<ContextPoint>& set_by_index(
    const ContextSetTriple& sets, int i) {
  return i == 0 ? sets.train : (i == 1 ? sets.eval_in : sets.eval_out);
}

inline json eval_record(const EnvSpec& spec, long long iteration,
                        const std::string& set, int n_e,
                        const std::vector<double>& returns) {
  double a = aer(returns);
  return {{"iteration", iteration},
          {"set", set},
          {"n_e", n_e},
          {"returns", returns},
          {"aer", a},
          {"aer_norm", normalize_score(a, spec.return_lo, spec.return_hi)}};
}

inline void write_embeddings_csv(
    const std::string& path, const EnvSpec& spec,
    const std::vector<ContextPoint>& ctxs,
    const std::vector<std::pair<int, Vec>>& rows) {
  std::ostringstream out;
  out << "ctx,inversion";
  for (std::size_t j = 0; j < spec.dims.size(); ++j) out << ",c" << j;
  if (!rows.empty())
    for (Eigen::Index j = 0; j < rows.front().second.size(); ++j)
      out << ",z" << j;
  out << "\n";
  out.precision(17);
  for (auto& [ci, z] : rows) {
    const ContextPoint& c = ctxs.at(static_cast<std::size_t>(ci));
    out << ci << "," << c.inversion;
    for (double v : c.continuous) out << "," << v;
    for (Eigen::Index j = 0; j < z.size(); ++j) out << "," << z(j);
    out << "\n";
  }
  io::write_text(path, out.str());
}

struct EmbeddingTable {
  Eigen::MatrixXd Z;  // n x d_z
  Eigen::MatrixXd C;  // n x (continuous dims + inversion-if-present)
  std::vector<int> ctx;
};

inline EmbeddingTable read_embeddings_csv(const std::string& path,
                                          const EnvSpec& spec) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open embeddings file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw IoError("empty embeddings file: " + path);
  std::vector<std::vector<double>> raw;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
    raw.push_back(std::move(row));
  }
  if (raw.empty()) throw IoError("no embedding rows in: " + path);
  const int nd = static_cast<int>(spec.dims.size());
  const int c_cols = nd + (spec.has_inversion ? 1 : 0);
  const int z_cols = static_cast<int>(raw.front().size()) - 2 - nd;
  if (z_cols < 1) throw IoError("malformed embeddings file: " + path);
  EmbeddingTable t;
  t.Z.resize(static_cast<Eigen::Index>(raw.size()), z_cols);
  t.C.resize(static_cast<Eigen::Index>(raw.size()), c_cols);
  for (std::size_t i = 0; i < raw.size(); ++i) {
    auto& r = raw[i];
    t.ctx.push_back(static_cast<int>(r[0]));
    for (int j = 0; j < nd; ++j) t.C(static_cast<Eigen::Index>(i), j) = r[2 + static_cast<std::size_t>(j)];
    if (spec.has_inversion) t.C(static_cast<Eigen::Index>(i), nd) = r[1];
    for (int j = 0; j < z_cols; ++j)
      t.Z(static_cast<Eigen::Index>(i), j) = r[2 + static_cast<std::size_t>(nd + j)];
  }
  return t;
}

/// Deterministically subsamples a table to at most n rows.
inline EmbeddingTable subsample(const EmbeddingTable& t, int n,
                                std::uint64_t seed) {
  const Eigen::Index N = t.Z.rows();
  if (N <= n) return t;
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(N));
  for (Eigen::Index i = 0; i < N; ++i) idx[static_cast<std::size_t>(i)] = i;
  Rng rng = Rng(seed).child(tag("diag_subsample"));
  for (int i = 0; i < n; ++i) {
    auto j = static_cast<std::size_t>(
        i + static_cast<long long>(rng.next_u64() %
                                   static_cast<std::uint64_t>(N - i)));
    std::swap(idx[static_cast<std::size_t>(i)], idx[j]);
  }
  EmbeddingTable o;
  o.Z.resize(n, t.Z.cols());
  o.C.resize(n, t.C.cols());
  for (int i = 0; i < n; ++i) {
    o.Z.row(i) = t.Z.row(idx[static_cast<std::size_t>(i)]);
    o.C.row(i) = t.C.row(idx[static_cast<std::size_t>(i)]);
    o.ctx.push_back(t.ctx[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])]);
  }
  return o;
}

/// Trains one run and writes the full artifact set. Returns the run paths.
/// NanAbort propagates to the caller (the CLI maps it to exit code 3).
inline RunPaths run_train(const RunConfig& cfg, bool progress = true) {
  cfg.validate();
  RunPaths paths(cfg.out_dir);
  fs::create_directories(paths.dir);
  io::write_text(paths.config(), cfg.to_json().dump(2) + "\n");

  EnvSpec spec = cfg.spec();
  ContextSetTriple sets = sample_context_sets(spec, cfg.n_c, cfg.seed);
  Agent<float> agent(cfg.agent_config(), spec, sets.train);
  const std::uint64_t eseed = eval_seed_for(cfg.seed);
  const std::string started = iso_now();

  json manifest = {{"config", cfg.to_json()},
                   {"context_sets", context_sets_to_json(sets)},
                   {"eval_seed", eseed},
                   {"started", started},
                   {"status", "running"},
                   {"iterations_completed", 0}};
  auto flush_manifest = [&](const std::string& status, long long done) {
    manifest["status"] = status;
    manifest["iterations_completed"] = done;
    manifest["finished"] = iso_now();
    json files = json::array();
    for (auto& e : fs::directory_iterator(paths.dir))
      if (e.path().filename() != "manifest.json")
        files.push_back(e.path().filename().string());
    std::sort(files.begin(), files.end());
    manifest["files"] = files;
    io::write_text(paths.manifest(), manifest.dump(2) + "\n");
  };

  io::JsonlWriter metrics(paths.metrics());
  io::JsonlWriter evals(paths.eval());
  long long done = 0;
  try {
    agent.warmup();
    auto run_eval_pass = [&](long long it, bool dump_embeddings) {
      for (int si = 0; si < 3; ++si) {
        std::vector<std::pair<int, Vec>> emb;
        auto returns =
            agent.evaluate(set_by_index(sets, si), cfg.n_e, eseed,
                           dump_embeddings ? &emb : nullptr);
        evals.write(eval_record(spec, it, kSetNames[si], cfg.n_e, returns));
        if (dump_embeddings && !emb.empty())
          write_embeddings_csv(paths.embeddings(kSetNames[si]), spec,
                               set_by_index(sets, si), emb);
      }
      evals.flush();
    };
    for (long long it = 1; it <= cfg.iterations; ++it) {
      IterationLog log = agent.train_iteration(it);
      done = it;
      if (it % cfg.log_interval == 0 || it == cfg.iterations) {
        metrics.write({{"iteration", log.iteration},
                       {"critic_loss", log.critic_loss},
                       {"actor_loss", log.actor_loss},
                       {"alpha_loss", log.alpha_loss},
                       {"dyn_loss", log.dyn_loss},
                       {"alpha", log.alpha},
                       {"mean_episode_return", log.mean_episode_return},
                       {"grad_norm_critic", log.grad_norm_critic},
                       {"grad_norm_actor", log.grad_norm_actor},
                       {"grad_norm_dyn", log.grad_norm_dyn}});
        metrics.flush();
      }
      if (it % cfg.eval_interval == 0 || it == cfg.iterations) {
        run_eval_pass(it, /*dump_embeddings=*/it == cfg.iterations);
        io::save_checkpoint(agent, paths.checkpoint(), it);
        if (progress)
          std::cerr << "[" << cfg.out_dir << "] iteration " << it << "/"
                    << cfg.iterations << "\n";
      }
    }
  } catch (...) {
    flush_manifest("aborted", done);
    throw;
  }
  flush_manifest("completed", cfg.iterations);
  return paths;
}

/// Re-evaluates a finished run from its checkpoint. Idempotent: repeated
/// calls produce byte-identical eval_records.jsonl.
inline void run_eval(const std::string& run_dir, int n_e_override = 0) {
  RunPaths paths(run_dir);
  RunConfig cfg = RunConfig::from_file(paths.config());
  EnvSpec spec = cfg.spec();
  ContextSetTriple sets = sample_context_sets(spec, cfg.n_c, cfg.seed);
  Agent<float> agent(cfg.agent_config(), spec, sets.train);
  long long it = io::load_checkpoint(agent, paths.checkpoint());
  int n_e = n_e_override > 0 ? n_e_override : cfg.n_e;
  const std::uint64_t eseed = eval_seed_for(cfg.seed);
  io::JsonlWriter out(paths.eval_records());
  for (int si = 0; si < 3; ++si) {
    auto returns = agent.evaluate(set_by_index(sets, si), n_e, eseed);
    out.write(eval_record(spec, it, kSetNames[si], n_e, returns));
  }
}

constexpr int kDiagnoseMaxRows = 5000;

/// Computes per-split representation diagnostics from the persisted
/// embedding dumps: informativeness (KSG MI between z and the true context),
/// variability, representation overlap, and the matching returns.
inline json run_diagnose(const std::string& run_dir) {
  RunPaths paths(run_dir);
  RunConfig cfg = RunConfig::from_file(paths.config());
  if (!VariantTraits::of(cfg.variant).has_encoder)
    throw ConfigError(
        "diagnose requires an inferred-context variant (dma family)");
  EnvSpec spec = cfg.spec();
  std::map<std::string, json> last_eval;
  for (auto& row : io::read_jsonl(paths.eval()))
    last_eval[row.at("set")] = row;

  json report = {{"run_dir", run_dir},
                 {"variant", variant_str(cfg.variant)},
                 {"env", env_name_str(spec.name)},
                 {"splits", json::object()}};
  for (auto& set : kSetNames) {
    EmbeddingTable t = read_embeddings_csv(paths.embeddings(set), spec);
    t = subsample(t, kDiagnoseMaxRows, cfg.seed);
    double info = ksg_mi(t.Z, t.C, 3, /*jitter_seed=*/cfg.seed);
    double var = variability(t.Z);
    // per-context mean embeddings for the overlap statistic
    std::map<int, std::pair<Eigen::VectorXd, int>> acc;
    for (Eigen::Index i = 0; i < t.Z.rows(); ++i) {
      auto& [sum, n] = acc[t.ctx[static_cast<std::size_t>(i)]];
      if (n == 0) sum = Eigen::VectorXd::Zero(t.Z.cols());
      sum += t.Z.row(i).transpose();
      ++n;
    }
    std::vector<Eigen::VectorXd> means;
    for (auto& [ci, sn] : acc) means.push_back(sn.first / sn.second);
    double ro = representation_overlap(means);
    json split = {{"informativeness_nats", info},
                  {"variability", var},
                  {"representation_overlap", ro},
                  {"n_rows", t.Z.rows()}};
    if (auto it = last_eval.find(set); it != last_eval.end()) {
      split["aer"] = it->second.at("aer");
      split["aer_norm"] = it->second.at("aer_norm");
    }
    report["splits"][set] = split;
  }
  io::write_text(paths.diagnostics(), report.dump(2) + "\n");
  return report;
}

// ---------------------------------------------------------------------------
// report: aggregation across run directories

struct RunRecord {
  std::string env, variant;
  std::uint64_t seed = 0;
  // set -> (iteration, aer, aer_norm) curve, sorted by iteration
  std::map<std::string, std::vector<std::array<double, 3>>> curves;
  std::optional<json> diagnostics;
};

inline RunRecord load_run_record(const std::string& run_dir) {
  RunPaths paths(run_dir);
  RunConfig cfg = RunConfig::from_file(paths.config());
  RunRecord r;
  r.env = env_name_str(cfg.env);
  r.variant = variant_str(cfg.variant);
  r.seed = cfg.seed;
  for (auto& row : io::read_jsonl(paths.eval()))
    r.curves[row.at("set")].push_back(
        {row.at("iteration").get<double>(), row.at("aer").get<double>(),
         row.at("aer_norm").get<double>()});
  for (auto& [set, curve] : r.curves)
    std::sort(curve.begin(), curve.end());
  if (fs::exists(paths.diagnostics()))
    r.diagnostics = json::parse(std::ifstream(paths.diagnostics()));
  return r;
}

/// PoI threshold for the table's "statistically tied with the best" marking.
constexpr double kPoiTieThreshold = 0.75;

inline void run_report(const std::vector<std::string>& run_dirs,
                       const std::string& out_dir) {
  if (run_dirs.empty()) throw ConfigError("report: no run directories given");
  std::vector<RunRecord> runs;
  for (auto& d : run_dirs) runs.push_back(load_run_record(d));
  bool any = false;
  for (auto& r : runs) any = any || !r.curves.empty();
  if (!any) throw ConfigError("report: no evaluation records found");
  fs::path out = resolve_out_dir(out_dir);
  fs::create_directories(out);

  // (env, set, variant) -> final normalized AER per seed
  std::map<std::string, std::map<std::string, std::map<std::string, std::vector<double>>>> scores;
  std::map<std::string, std::map<std::string, std::map<std::string, std::vector<double>>>> raw;
  for (auto& r : runs)
    for (auto& [set, curve] : r.curves)
      if (!curve.empty()) {
        scores[r.env][set][r.variant].push_back(curve.back()[2]);
        raw[r.env][set][r.variant].push_back(curve.back()[1]);
      }

  std::ostringstream table, poi_csv;
  table << "env,set,variant,n_runs,aer_mean,aer_norm_iqm,ci_lo,ci_hi,best\n";
  poi_csv << "env,set,variant_a,variant_b,poi,ci_lo,ci_hi\n";
  table.precision(10);
  poi_csv.precision(10);
  for (auto& [env, by_set] : scores)
    for (auto& [set, by_var] : by_set) {
      // the best variant by IQM; ties by PoI against it get marked too
      std::string best;
      double best_iqm = -1;
      std::map<std::string, IqmResult> iqms;
      for (auto& [v, s] : by_var) {
        iqms[v] = s.size() >= 2 ? iqm_ci(s) : IqmResult{s[0], s[0], s[0]};
        if (iqms[v].iqm > best_iqm) {
          best_iqm = iqms[v].iqm;
          best = v;
        }
      }
      for (auto& [v, s] : by_var) {
        bool marked =
            v == best ||
            poi_stat(by_var.at(best), s) <= kPoiTieThreshold;
        double mean_raw = aer(raw.at(env).at(set).at(v));
        table << env << "," << set << "," << v << "," << s.size() << ","
              << mean_raw << "," << iqms[v].iqm << "," << iqms[v].ci_lo << ","
              << iqms[v].ci_hi << "," << (marked ? 1 : 0) << "\n";
        for (auto& [v2, s2] : by_var) {
          if (v2 == v) continue;
          PoiResult p = probability_of_improvement(s, s2);
          poi_csv << env << "," << set << "," << v << "," << v2 << "," << p.poi
                  << "," << p.ci_lo << "," << p.ci_hi << "\n";
        }
      }
    }
  io::write_text((out / "aer_table.csv").string(), table.str());
  io::write_text((out / "poi.csv").string(), poi_csv.str());

  // learning curves: per (env, set), one series per variant (seed mean)
  for (auto& [env, by_set] : scores)
    for (auto& [set, by_var] : by_set) {
      std::vector<io::SvgSeries> series;
      for (auto& [v, unused] : by_var) {
        // average the aer_norm curves across seeds at matching iterations
        std::map<double, std::pair<double, int>> acc;
        for (auto& r : runs)
          if (r.env == env && r.variant == v && r.curves.count(set))
            for (auto& pt : r.curves.at(set)) {
              acc[pt[0]].first += pt[2];
              acc[pt[0]].second += 1;
            }
        io::SvgSeries s;
        s.label = v;
        for (auto& [x, sn] : acc) {
          s.x.push_back(x);
          s.y.push_back(sn.first / sn.second);
        }
        series.push_back(std::move(s));
      }
      io::write_text(
          (out / ("learning_curve_" + env + "_" + set + ".svg")).string(),
          io::svg_line_plot("normalized AER, " + env + " (" + set + ")",
                            series));
    }

  // diagnostics summary across runs that have a diagnostics.json
  std::ostringstream diag;
  diag << "env,variant,seed,set,informativeness_nats,variability,"
          "representation_overlap\n";
  diag.precision(10);
  std::map<std::string, std::vector<io::SvgSeries>> diag_series;
  int n_diag = 0;
  for (auto& r : runs) {
    if (!r.diagnostics) continue;
    io::SvgSeries vs;
    vs.label = r.variant + "/s" + std::to_string(r.seed);
    int si = 0;
    for (auto& set : kSetNames) {
      const json& s = (*r.diagnostics)["splits"].at(set);
      diag << r.env << "," << r.variant << "," << r.seed << "," << set << ","
           << s.at("informativeness_nats").get<double>() << ","
           << s.at("variability").get<double>() << ","
           << s.at("representation_overlap").get<double>() << "\n";
      vs.x.push_back(si++);
      vs.y.push_back(s.at("variability").get<double>());
    }
    diag_series[r.env].push_back(std::move(vs));
    ++n_diag;
  }
  if (n_diag > 0) {
    io::write_text((out / "diagnostics.csv").string(), diag.str());
    for (auto& [env, series] : diag_series)
      io::write_text(
          (out / ("diagnostics_variability_" + env + ".svg")).string(),
          io::svg_line_plot("variability by split (0=train,1=in,2=out), " +
                                env,
                            series));
  }
}

// ---------------------------------------------------------------------------
// selftest: fast invariants, one line per check

inline bool selftest(std::ostream& os = std::cout) {
  bool ok = true;
  auto check = [&](const std::string& name, bool pass,
                   const std::string& detail) {
    os << (pass ? "PASS" : "FAIL") << " " << name << ": " << detail << "\n";
    ok = ok && pass;
  };

  {  // bilinear witness reproduces the product on a grid
    double worst = 0;
    for (int i = 0; i <= 40; ++i)
      for (int j = 0; j <= 40; ++j) {
        double s = -2.0 + 4.0 * i / 40.0, z = -2.0 + 4.0 * j / 40.0;
        worst = std::max(worst, std::abs(bilinear_witness(s, z) - s * z));
      }
    check("bilinear_witness", worst < 1e-6,
          "max |witness - s*z| = " + std::to_string(worst));
  }

  {  // variance decomposition identity on a random dataset
    Rng rng(1234);
    std::vector<EmbeddingRow> rows;
    for (int i = 0; i < 400; ++i) {
      EmbeddingRow r;
      r.s = (i % 2 == 0) ? +1 : -1;
      r.cell = (i % 7) * 2 + (r.s > 0 ? 1 : 0);  // cells never mix modes
      r.z = Eigen::VectorXd(3);
      for (int j = 0; j < 3; ++j)
        r.z(j) = rng.normal() + r.s * 0.5 + 0.1 * r.cell;
      rows.push_back(std::move(r));
    }
    DecompositionResult d = variance_decomposition(rows);
    double gap = std::abs(d.variability - (d.term1 + d.term2 + d.term3));
    check("variance_decomposition", gap < 1e-10,
          "identity gap = " + std::to_string(gap));
  }

  {  // detach contract on a small shared-hypernetwork agent
    AgentConfig ac;
    ac.variant = Variant::DMA_STAR_SH;
    ac.n_c = 2;
    ac.seed = 7;
    ac.warmup_steps = 64;
    ac.batch_size = 16;
    EnvSpec spec = EnvSpec::make(EnvName::ODE);
    ContextSetTriple sets = sample_context_sets(spec, ac.n_c, ac.seed);
    Agent<float> a(ac, spec, sets.train);
    a.warmup();
    auto& w = a.workers()[0];
    auto b = a.sample_batch(w, 8);
    auto dyn_norm = [&]() {
      double s = 0;
      for (auto& [n, p] : a.group_dyn().items)
        s += static_cast<double>(p->grad.template cast<double>().squaredNorm());
      return std::sqrt(s);
    };
    a.zero_all_grads();
    {
      Tape<float> t;
      auto cn = a.build_condition(t, w, true);
      t.backward(a.critic_loss(t, b, cn));
      auto [lpi, lal] = a.actor_alpha_losses(t, b, cn);
      t.backward(lpi);
      t.backward(lal);
    }
    double rl_leak = dyn_norm();
    a.zero_all_grads();
    {
      Tape<float> t;
      auto cn = a.build_condition(t, w, true);
      t.backward(dynamics_loss(t, a.predict_dynamics(t, b, cn),
                               t.constant(b.delta)));
    }
    double dyn_grad = dyn_norm();
    check("detach_contract", rl_leak == 0.0 && dyn_grad > 0.0,
          "rl-loss leak into encoder/hypernet = " + std::to_string(rl_leak) +
              ", dynamics grad norm = " + std::to_string(dyn_grad));
  }
  return ok;
}

}  // namespace aib::exp
