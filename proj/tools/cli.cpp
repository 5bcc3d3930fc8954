#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <nlohmann/json.hpp>
#include <sstream>

#include "fuselm/combinator.hpp"
#include "fuselm/core.hpp"
#include "fuselm/dist_cache.hpp"
#include "fuselm/error.hpp"
#include "fuselm/eval.hpp"
#include "fuselm/experiment.hpp"
#include "fuselm/fitting.hpp"
#include "fuselm/ngram.hpp"
#include "fuselm/remote.hpp"

namespace fuselm::cli {
namespace {

using nlohmann::json;

constexpr const char* kSeedEnv = "FUSELM_SEED";

struct CorpusArgs {
  std::string corpus;
  std::string vocab;
  std::size_t seq_len = 1024;
  std::size_t n_fit = 1000;
  std::size_t n_test = 1000;
  std::uint64_t seed = 0;
  std::string part;
};

void add_corpus_options(CLI::App* cmd, CorpusArgs& a, const std::string& default_part) {
  a.part = default_part;
  cmd->add_option("--corpus", a.corpus, "Raw text corpus")->required()->check(CLI::ExistingFile);
  cmd->add_option("--vocab", a.vocab, "Vocabulary file written by `vocab`")->required()->check(CLI::ExistingFile);
  cmd->add_option("--seq-len", a.seq_len, "Tokens per sequence")->capture_default_str();
  cmd->add_option("--n-fit", a.n_fit, "Sequences held out for fitting")->capture_default_str();
  cmd->add_option("--n-test", a.n_test, "Sequences held out for testing")->capture_default_str();
  cmd->add_option("--seed", a.seed, "Split shuffle seed")->envname(kSeedEnv)->capture_default_str();
  cmd->add_option("--part", a.part, "Split part: train, train-fit or test")
      ->check(CLI::IsMember({"train", "train-fit", "test"}))
      ->capture_default_str();
}

std::vector<TokenSequence> load_part(const CorpusArgs& a, const Vocabulary& vocab) {
  auto split = split_fit_test(chunk(tokenize(read_text_file(a.corpus), vocab), a.seq_len), a.n_fit, a.n_test, a.seed);
  return part(split, parse_split_part(a.part));
}

void write_json(const std::string& path, const json& j) {
  std::ofstream f(path);
  if (!f) throw Error(ErrorCode::IoError, "cannot write " + path);
  f << j.dump(2) << '\n';
}

std::string fixed(double v, int precision) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(precision) << v;
  return s.str();
}

// Flat JSON config: {"lr": 0.01, "batch_size": 64, "oracle": true}. Values are spliced in
// ahead of the user's own flags, so the command line wins.
std::vector<std::string> config_args(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw CLI::FileError::Missing(path);
  json j;
  try {
    j = json::parse(f);
  } catch (const json::parse_error& e) {
    throw CLI::ConversionError("config " + path + ": " + e.what());
  }
  if (!j.is_object()) throw CLI::ConversionError("config " + path + " must be a flat JSON object");
  std::vector<std::string> out;
  auto scalar = [&](const std::string& key, const json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_number() || v.is_boolean()) return v.dump();
    throw CLI::ConversionError("config key '" + key + "' must be a scalar or a list of scalars");
  };
  for (const auto& [key, value] : j.items()) {
    std::string flag = "--" + key;
    std::replace(flag.begin(), flag.end(), '_', '-');
    if (value.is_boolean()) {
      if (value.get<bool>()) out.push_back(flag);
    } else if (value.is_array()) {
      out.push_back(flag);
      for (const auto& v : value) out.push_back(scalar(key, v));
    } else {
      out.push_back(flag);
      out.push_back(scalar(key, value));
    }
  }
  return out;
}

std::vector<std::string> expand_config(const std::vector<std::string>& args) {
  std::string path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
  }
  if (path.empty()) return args;
  std::size_t sub = 0;
  while (sub < args.size() && args[sub].rfind("-", 0) == 0) ++sub;
  if (sub == args.size()) return args;
  std::vector<std::string> out(args.begin(), args.begin() + static_cast<std::ptrdiff_t>(sub + 1));
  for (auto& a : config_args(path)) out.push_back(std::move(a));
  out.insert(out.end(), args.begin() + static_cast<std::ptrdiff_t>(sub + 1), args.end());
  return out;
}

class Commands {
 public:
  Commands(std::ostream& out, std::ostream& err) : out_(out), err_(err) {}

  void setup(CLI::App& app) {
    app.require_subcommand(1);
    app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    setup_vocab(app);
    setup_train_lm(app);
    setup_dump(app);
    setup_fit(app);
    setup_eval(app);
    setup_analyze(app);
    setup_experiment(app);
  }

 private:
  static void add_config(CLI::App* cmd) {
    cmd->add_option("--config", "Flat JSON file of flag values; explicit flags override it");
  }

  void setup_vocab(CLI::App& app) {
    auto* cmd = app.add_subcommand("vocab", "Build a byte or word vocabulary");
    add_config(cmd);
    cmd->add_option("--corpus", vocab_.corpora, "Corpus files (word counts are pooled)")
        ->required()
        ->check(CLI::ExistingFile)
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
    cmd->add_option("--mode", vocab_.mode, "byte or word")->check(CLI::IsMember({"byte", "word"}))->capture_default_str();
    cmd->add_option("--max-size", vocab_.max_size, "Most frequent words kept (word mode)")->capture_default_str();
    cmd->add_option("--out", vocab_.out, "Output vocabulary file")->required();
    cmd->callback([this] {
      std::string text;
      for (const auto& c : vocab_.corpora) text += read_text_file(c) + "\n";
      const Vocabulary v = build_vocab(text, parse_vocab_mode(vocab_.mode), vocab_.max_size);
      v.save(vocab_.out);
      out_ << "vocabulary: " << v.size() << " tokens (" << to_string(v.mode()) << ") -> " << vocab_.out << '\n';
    });
  }

  void setup_train_lm(CLI::App& app) {
    auto* cmd = app.add_subcommand("train-lm", "Train an interpolated n-gram model on one split part");
    add_config(cmd);
    add_corpus_options(cmd, train_.data, "train");
    cmd->add_option("--order", train_.order, "n-gram order")->capture_default_str();
    cmd->add_option("--alpha", train_.alpha, "Add-alpha smoothing")->capture_default_str();
    cmd->add_option("--interp", train_.interp, "Interpolation weights, lowest order first (default: proportional to order)")
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
    cmd->add_option("--fraction", train_.fraction, "Leading fraction of the part used for counting")
        ->check(CLI::Range(0.0, 1.0))
        ->capture_default_str();
    cmd->add_option("--out", train_.out, "Output model file")->required();
    cmd->callback([this] {
      const Vocabulary vocab = Vocabulary::load(train_.data.vocab);
      auto seqs = load_part(train_.data, vocab);
      const auto keep = static_cast<std::size_t>(std::ceil(train_.fraction * static_cast<double>(seqs.size())));
      seqs.resize(std::min(seqs.size(), std::max<std::size_t>(keep, 1)));
      const auto lm = NGramLM::train(seqs, vocab.size(), vocab.bos_id(), {train_.order, train_.alpha, train_.interp});
      lm.save(train_.out);
      out_ << "trained " << lm.describe() << " on " << seqs.size() << " sequences -> " << train_.out << '\n';
    });
  }

  void setup_dump(CLI::App& app) {
    auto* cmd = app.add_subcommand("dump-dists", "Score a split part with both models and write a distribution cache");
    add_config(cmd);
    add_corpus_options(cmd, dump_.data, "train-fit");
    auto* small = cmd->add_option("--small", dump_.small, "Small model file")->check(CLI::ExistingFile);
    auto* small_remote = cmd->add_option("--small-remote", dump_.small_remote, "Small model endpoint URL");
    auto* large = cmd->add_option("--large", dump_.large, "Large model file")->check(CLI::ExistingFile);
    auto* large_remote =
        cmd->add_option("--remote,--large-remote", dump_.large_remote, "Large model endpoint URL");
    small->excludes(small_remote);
    large->excludes(large_remote);
    cmd->add_option("--batch-size", dump_.batch_size, "Contexts per model call")->capture_default_str();
    cmd->add_option("--out", dump_.out, "Output cache file")->required();
    cmd->callback([this] {
      if (dump_.small.empty() == dump_.small_remote.empty())
        throw CLI::ValidationError("dump-dists", "exactly one of --small / --small-remote is required");
      if (dump_.large.empty() == dump_.large_remote.empty())
        throw CLI::ValidationError("dump-dists", "exactly one of --large / --remote is required");
      const Vocabulary vocab = Vocabulary::load(dump_.data.vocab);
      const auto seqs = load_part(dump_.data, vocab);
      auto open = [](const std::string& path, const std::string& url) -> std::unique_ptr<LanguageModel> {
        if (!url.empty()) return std::make_unique<RemoteLM>(url);
        return std::make_unique<NGramLM>(NGramLM::load(path));
      };
      const auto s = open(dump_.small, dump_.small_remote);
      const auto l = open(dump_.large, dump_.large_remote);
      DumpOptions opts;
      opts.batch_size = dump_.batch_size;
      opts.provenance = "small=" + s->describe() + "; large=" + l->describe() + "; corpus=" +
                        std::filesystem::path(dump_.data.corpus).filename().string() + "; part=" + dump_.data.part +
                        "; seq_len=" + std::to_string(dump_.data.seq_len) + "; seed=" + std::to_string(dump_.data.seed);
      const DistCache c = dump_cache(*s, *l, seqs, dump_.out, opts);
      out_ << "cached " << c.positions() << " positions (|V|=" << c.vocab_size() << ") -> " << dump_.out << '\n';
    });
  }

  void setup_fit(CLI::App& app) {
    auto* cmd = app.add_subcommand("fit", "Fit combination parameters on a distribution cache");
    add_config(cmd);
    cmd->add_option("--kind", fit_.kind, "Combination kind")
        ->check(CLI::IsMember({"mean", "constant-scalar", "constant-vector", "entropy-scalar", "entropy-vector",
                               "full-scalar", "full-vector"}))
        ->capture_default_str();
    cmd->add_option("--cache", fit_.cache, "Fitting cache")->required()->check(CLI::ExistingFile);
    cmd->add_option("--mixin", fit_.mixin, "Extra cache shuffled into the fitting positions")->check(CLI::ExistingFile);
    cmd->add_option("--out", fit_.out, "Output parameter file; the report goes to <out>.json")->required();
    cmd->add_option("--lr", fit_.lr, "Adam learning rate (default 2e-3, 1e-2 for constant-vector)");
    cmd->add_option("--batch-size", fit_.batch_size, "Positions per step")->capture_default_str();
    cmd->add_option("--epochs", fit_.epochs, "Passes over the fitting positions")->capture_default_str();
    cmd->add_option("--seed", fit_.seed, "Initialization and shuffle seed")->envname(kSeedEnv)->capture_default_str();
    cmd->add_option("--hidden", fit_.hidden, "Hidden layer widths")
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll)
        ->capture_default_str();
    cmd->callback([this] {
      FitConfig cfg;
      cfg.kind = parse_kind(fit_.kind);
      cfg.lr = fit_.lr;
      cfg.batch_size = fit_.batch_size;
      cfg.epochs = fit_.epochs;
      cfg.seed = fit_.seed;
      cfg.hidden = fit_.hidden;
      const DistCache cache = DistCache::load(fit_.cache);
      std::optional<DistCache> mixin;
      if (!fit_.mixin.empty()) mixin = DistCache::load(fit_.mixin);
      const FitReport report = fit(cache, cfg, mixin ? &*mixin : nullptr);
      report.params.save(fit_.out);
      report.write_json(fit_.out + ".json");
      out_ << "kind " << to_string(cfg.kind) << ", lr " << cfg.learning_rate() << ", batch " << cfg.batch_size
           << ", epochs " << cfg.epochs << ", steps " << report.steps;
      if (!report.loss_trace.empty()) out_ << ", final loss " << fixed(report.loss_trace.back(), 4);
      out_ << " -> " << fit_.out << '\n';
    });
  }

  void setup_eval(CLI::App& app) {
    auto* cmd = app.add_subcommand("eval", "Perplexity of one model, a fitted combination or the oracle");
    add_config(cmd);
    cmd->add_option("--cache", eval_.cache, "Evaluation cache")->required()->check(CLI::ExistingFile);
    auto* oracle = cmd->add_flag("--oracle", eval_.oracle, "Per-token max-probability oracle");
    auto* params = cmd->add_option("--params", eval_.params, "Fitted parameter file")->check(CLI::ExistingFile);
    auto* model = cmd->add_option("--model", eval_.model, "small or large")->check(CLI::IsMember({"small", "large"}));
    oracle->excludes(params)->excludes(model);
    params->excludes(model);
    cmd->add_option("--threads", eval_.threads, "Worker threads (0 = hardware)")->capture_default_str();
    cmd->add_option("--json", eval_.json, "Machine-readable result file (default <cache>.eval.json)");
    cmd->callback([this] {
      if (!eval_.oracle && eval_.params.empty() && eval_.model.empty())
        throw CLI::ValidationError("eval", "one of --oracle, --params, --model is required");
      const DistCache cache = DistCache::load(eval_.cache);
      EvalOptions opts;
      opts.threads = eval_.threads;
      EvalResult r;
      std::string what;
      if (eval_.oracle) {
        r = oracle_perplexity(cache, opts);
        what = "oracle";
      } else if (!eval_.params.empty()) {
        const auto p = CombinationParams::load(eval_.params);
        r = perplexity(cache, p, opts);
        what = std::string(to_string(p.kind));
      } else {
        r = perplexity(cache, eval_.model == "small" ? ModelSide::Small : ModelSide::Large, opts);
        what = eval_.model;
      }
      out_ << r.perplexity << '\n';
      const std::string path = eval_.json.empty() ? eval_.cache + ".eval.json" : eval_.json;
      write_json(path, {{"evaluated", what},
                        {"cache", eval_.cache},
                        {"perplexity", r.perplexity},
                        {"tokens", r.token_count},
                        {"total_nll", r.total_nll}});
    });
  }

  void setup_analyze(CLI::App& app) {
    auto* cmd = app.add_subcommand("analyze", "Spearman correlation of lambda with ln P_S - ln P_L, plus a heatmap");
    add_config(cmd);
    cmd->add_option("--cache", an_.cache, "Evaluation cache")->required()->check(CLI::ExistingFile);
    cmd->add_option("--params", an_.params, "entropy-scalar or full-scalar parameters")
        ->required()
        ->check(CLI::ExistingFile);
    cmd->add_option("--vocab", an_.vocab, "Vocabulary used to render tokens")->required()->check(CLI::ExistingFile);
    cmd->add_option("--html", an_.html, "Heatmap output")->required();
    cmd->add_option("--json", an_.json, "Result file (default <html>.json)");
    cmd->add_option("--max-tokens", an_.max_tokens, "Tokens shown in the heatmap")->capture_default_str();
    cmd->callback([this] {
      const DistCache cache = DistCache::load(an_.cache);
      const auto params = CombinationParams::load(an_.params);
      const Vocabulary vocab = Vocabulary::load(an_.vocab);
      const TokenAnalysis a = analyze(cache, params);
      const std::size_t n = std::min(an_.max_tokens, a.targets.size());
      std::vector<std::string> tokens;
      tokens.reserve(n);
      for (std::size_t i = 0; i < n; ++i)
        tokens.push_back(display_token(a.targets[i], vocab) + (vocab.mode() == VocabMode::Word ? " " : ""));
      write_heatmap(tokens, std::span(a.diff).first(n), std::span(a.lambda).first(n), an_.html);
      out_ << "spearman rho " << fixed(a.rho, 4) << " over " << a.targets.size() << " tokens -> " << an_.html << '\n';
      write_json(an_.json.empty() ? an_.html + ".json" : an_.json,
                 {{"kind", to_string(params.kind)}, {"rho", a.rho}, {"tokens", a.targets.size()}});
    });
  }

  void setup_experiment(CLI::App& app) {
    auto* cmd = app.add_subcommand("experiment", "Run the sweeps listed in an experiment spec");
    add_config(cmd);
    cmd->add_option("--spec", exp_.spec, "Experiment spec (JSON)")->required()->check(CLI::ExistingFile);
    cmd->add_option("--out-dir", exp_.out_dir, "Directory for results.json and results.txt")->required();
    cmd->add_option("--seed", exp_.seed, "Overrides the spec seed")->envname(kSeedEnv);
    cmd->add_option("--threads", exp_.threads, "Evaluation threads (overrides the spec)");
    cmd->add_flag("--quiet", exp_.quiet, "No progress log on stderr");
    cmd->callback([this] {
      ExperimentSpec spec = ExperimentSpec::load(exp_.spec);
      if (exp_.seed) {
        spec.seed = *exp_.seed;
        spec.fit.seed = *exp_.seed;
      }
      if (exp_.threads) spec.threads = *exp_.threads;
      const ExperimentResults r = run_experiment(spec, exp_.quiet ? nullptr : &err_);
      r.write(exp_.out_dir);
      out_ << r.text();
    });
  }

  std::ostream& out_;
  std::ostream& err_;

  struct {
    std::vector<std::string> corpora;
    std::string mode = "byte";
    std::size_t max_size = 50000;
    std::string out;
  } vocab_;
  struct {
    CorpusArgs data;
    std::size_t order = 3;
    double alpha = 0.01;
    std::vector<double> interp;
    double fraction = 1.0;
    std::string out;
  } train_;
  struct {
    CorpusArgs data;
    std::string small, small_remote, large, large_remote, out;
    std::size_t batch_size = 256;
  } dump_;
  struct {
    std::string kind = "entropy-scalar";
    std::string cache, mixin, out;
    std::optional<double> lr;
    std::size_t batch_size = 1024;
    std::size_t epochs = 1;
    std::uint64_t seed = 0;
    std::vector<std::size_t> hidden{512, 512};
  } fit_;
  struct {
    std::string cache, params, model, json;
    bool oracle = false;
    std::size_t threads = 0;
  } eval_;
  struct {
    std::string cache, params, vocab, html, json;
    std::size_t max_tokens = 2000;
  } an_;
  struct {
    std::string spec, out_dir;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> threads;
    bool quiet = false;
  } exp_;
};

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Fuse a black-box language model with a small domain expert"};
  app.name("fuselm");
  Commands commands(out, err);
  commands.setup(app);
  try {
    std::vector<std::string> argv = expand_config(args);
    std::reverse(argv.begin(), argv.end());
    app.parse(argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << "run with --help for usage\n";
    return 1;
  } catch (const Error& e) {
    err << "error [" << to_string(e.code()) << "]: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace fuselm::cli
