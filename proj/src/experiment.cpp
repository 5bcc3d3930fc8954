#include "fuselm/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>

#include "fuselm/dist_cache.hpp"
#include "fuselm/error.hpp"
#include "fuselm/eval.hpp"

namespace fuselm {
namespace {

using nlohmann::json;

constexpr const char* kExpert = "expert";
constexpr const char* kGeneralist = "generalist";
constexpr const char* kSmallGeneralist = "small-generalist";
constexpr const char* kOracle = "oracle";

enum class Corpus { Domain, General };

template <typename T>
T get_key(const json& j, const char* key, T fallback) {
  if (!j.contains(key) || j.at(key).is_null()) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::FormatError, std::string("spec key '") + key + "': " + e.what());
  }
}

NGramSpec parse_ngram(const json& j, const char* key, NGramSpec base) {
  if (!j.contains(key)) return base;
  const json& m = j.at(key);
  if (!m.is_object()) throw Error(ErrorCode::FormatError, std::string("spec key '") + key + "' must be an object");
  base.config.order = get_key<std::size_t>(m, "order", base.config.order);
  base.config.alpha = get_key<double>(m, "alpha", base.config.alpha);
  base.config.interp = get_key<std::vector<double>>(m, "interp", {});
  base.train_fraction = get_key<double>(m, "train_fraction", base.train_fraction);
  if (!(base.train_fraction > 0.0 && base.train_fraction <= 1.0))
    throw Error(ErrorCode::InvalidArgument, std::string("spec key '") + key + ".train_fraction' must be in (0, 1]");
  return base;
}

std::string fmt(double v, int precision = 3) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(precision) << v;
  return ss.str();
}

/// Aligned plain-text table: first column labels, the rest values.
std::string render_table(const std::string& title, const std::vector<std::string>& header,
                         const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width(header.size(), 0);
  for (std::size_t c = 0; c < header.size(); ++c) width[c] = header[c].size();
  for (const auto& r : rows)
    for (std::size_t c = 0; c < r.size() && c < width.size(); ++c) width[c] = std::max(width[c], r[c].size());
  std::ostringstream out;
  out << title << '\n';
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t c = 0; c < cells.size(); ++c) {
      if (c == 0)
        out << std::left << std::setw(static_cast<int>(width[c])) << cells[c];
      else
        out << "  " << std::right << std::setw(static_cast<int>(width[c])) << cells[c];
    }
    out << '\n';
  };
  line(header);
  std::size_t total = 0;
  for (std::size_t w : width) total += w + 2;
  out << std::string(total - 2, '-') << '\n';
  for (const auto& r : rows) line(r);
  return out.str();
}

class Runner {
 public:
  Runner(const ExperimentSpec& spec, std::ostream* log) : spec_(spec), log_(log) {}

  ExperimentResults run() {
    const auto start = std::chrono::steady_clock::now();
    prepare_data();
    for (const auto& name : spec_.experiments) {
      note("experiment " + name);
      if (name == "main")
        main_table();
      else if (name == "fit_size")
        fit_size_table();
      else if (name == "expert_vs_generalist")
        expert_vs_generalist_table();
      else if (name == "mixin")
        mixin_table();
      else if (name == "expert_quality")
        expert_quality_table();
      else if (name == "spearman")
        spearman_table();
      else
        throw Error(ErrorCode::InvalidArgument, "spec key 'experiments': unknown experiment '" + name + "'");
    }
    results_.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return std::move(results_);
  }

 private:
  void note(const std::string& msg) {
    if (log_) *log_ << "[experiment] " << msg << std::endl;
  }

  static std::string load_corpus(const std::filesystem::path& path, const char* key) {
    if (path.empty()) throw Error(ErrorCode::InvalidArgument, std::string("spec key '") + key + "' is required");
    if (!std::filesystem::exists(path))
      throw Error(ErrorCode::IoError, std::string("spec key '") + key + "': file not found: " + path.string());
    return read_text_file(path);
  }

  void prepare_data() {
    const std::string domain_text = load_corpus(spec_.domain_corpus, "domain_corpus");
    const std::string general_text = load_corpus(spec_.general_corpus, "general_corpus");
    vocab_ = spec_.vocab_mode == VocabMode::Byte
                 ? Vocabulary::bytes()
                 : build_vocab(domain_text + "\n" + general_text, VocabMode::Word, spec_.vocab_max_size);
    auto split = [&](const std::string& text, std::uint64_t seed, const char* key) {
      try {
        return split_fit_test(chunk(tokenize(text, vocab_), spec_.seq_len), spec_.n_fit, spec_.n_test, seed);
      } catch (const Error& e) {
        throw Error(e.code(), std::string("spec key '") + key + "': " + e.what());
      }
    };
    domain_ = split(domain_text, spec_.seed, "domain_corpus");
    general_ = split(general_text, spec_.seed + 1, "general_corpus");
    note("domain split " + std::to_string(domain_.train.size()) + "/" + std::to_string(domain_.train_fit.size()) +
         "/" + std::to_string(domain_.test.size()) + ", general split " + std::to_string(general_.train.size()) +
         "/" + std::to_string(general_.train_fit.size()) + "/" + std::to_string(general_.test.size()));
  }

  static std::vector<TokenSequence> leading(const std::vector<TokenSequence>& seqs, double fraction) {
    const auto n = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(seqs.size()))));
    return {seqs.begin(), seqs.begin() + static_cast<std::ptrdiff_t>(std::min(n, seqs.size()))};
  }

  const NGramLM& model(const std::string& id) {
    if (auto it = models_.find(id); it != models_.end()) return it->second;
    NGramSpec ms;
    const std::vector<TokenSequence>* train = &domain_.train;
    if (id == kGeneralist) {
      ms = spec_.generalist;
      train = &general_.train;
    } else if (id == kSmallGeneralist) {
      ms = spec_.small_generalist;
      train = &general_.train;
    } else if (id == kExpert) {
      ms = spec_.expert;
    } else if (id.rfind("expert@", 0) == 0) {
      ms = spec_.expert;
      ms.train_fraction = std::stod(id.substr(7));
    } else {
      throw Error(ErrorCode::InvalidArgument, "unknown model id " + id);
    }
    note("training " + id);
    auto lm = NGramLM::train(leading(*train, ms.train_fraction), vocab_.size(), vocab_.bos_id(), ms.config);
    return models_.emplace(id, std::move(lm)).first->second;
  }

  const DistCache& cache(const std::string& small, Corpus corpus, SplitPart which) {
    const std::string key = small + "|" + (corpus == Corpus::Domain ? "domain" : "general") + "|" +
                            (which == SplitPart::TrainFit ? "fit" : "test");
    if (auto it = caches_.find(key); it != caches_.end()) return it->second;
    const auto& seqs = part(corpus == Corpus::Domain ? domain_ : general_, which);
    note("scoring " + key);
    DumpOptions opts;
    opts.batch_size = 1024;
    auto c = dump_cache(model(small), model(kGeneralist), seqs, {}, opts);
    return caches_.emplace(key, std::move(c)).first->second;
  }

  void release_caches() { caches_.clear(); }

  // condition: "domain:<n>" or "mixin:<n>"
  const CombinationParams& fitted(const std::string& small, bool mixin, std::size_t n_seqs, CombinationKind kind) {
    const std::string key =
        small + "|" + (mixin ? "mixin:" : "domain:") + std::to_string(n_seqs) + "|" + std::string(to_string(kind));
    if (auto it = fitted_.find(key); it != fitted_.end()) return it->second;
    const DistCache& full = cache(small, Corpus::Domain, SplitPart::TrainFit);
    const std::size_t per_seq = spec_.seq_len - 1;
    FitConfig cfg = spec_.fit;
    cfg.kind = kind;
    FitReport report;
    if (n_seqs == domain_.train_fit.size()) {
      report = mixin ? fit(full, cfg, &cache(small, Corpus::General, SplitPart::TrainFit)) : fit(full, cfg);
    } else {
      const DistCache sub = slice(full, 0, n_seqs * per_seq);
      if (mixin) {
        const DistCache& gen = cache(small, Corpus::General, SplitPart::TrainFit);
        const DistCache gen_sub = slice(gen, 0, std::min(gen.positions(), n_seqs * per_seq));
        report = fit(sub, cfg, &gen_sub);
      } else {
        report = fit(sub, cfg);
      }
    }
    note("fitted " + key + " in " + fmt(report.wall_seconds, 1) + "s (" + std::to_string(report.steps) + " steps)");
    return fitted_.emplace(key, std::move(report.params)).first->second;
  }

  EvalOptions eval_options() const {
    EvalOptions o;
    o.threads = spec_.threads;
    return o;
  }

  double side_ppl(const std::string& small, Corpus corpus, ModelSide side) {
    return perplexity(cache(small, corpus, SplitPart::Test), side, eval_options()).perplexity;
  }

  double combo_ppl(const std::string& small, Corpus corpus, const CombinationParams& params) {
    return perplexity(cache(small, corpus, SplitPart::Test), params, eval_options()).perplexity;
  }

  void add(const std::string& table, const std::string& row, const std::string& condition, double dom, double gen) {
    results_.records.push_back({table, row, condition, dom, gen, std::nullopt, std::nullopt});
  }

  // One block of rows (small, large, kinds) for a given small model and fitting condition.
  void standard_rows(const std::string& table, const std::string& condition, const std::string& small, bool mixin,
                     std::size_t n_seqs, bool include_oracle) {
    add(table, small == kExpert ? kExpert : small, condition, side_ppl(small, Corpus::Domain, ModelSide::Small),
        side_ppl(small, Corpus::General, ModelSide::Small));
    add(table, kGeneralist, condition, side_ppl(small, Corpus::Domain, ModelSide::Large),
        side_ppl(small, Corpus::General, ModelSide::Large));
    for (CombinationKind kind : spec_.kinds) {
      const CombinationParams& p = fitted(small, mixin, n_seqs, kind);
      add(table, std::string(to_string(kind)), condition, combo_ppl(small, Corpus::Domain, p),
          combo_ppl(small, Corpus::General, p));
    }
    if (include_oracle) {
      add(table, kOracle, condition,
          oracle_perplexity(cache(small, Corpus::Domain, SplitPart::Test), eval_options()).perplexity,
          oracle_perplexity(cache(small, Corpus::General, SplitPart::Test), eval_options()).perplexity);
    }
  }

  std::vector<std::string> row_order(const std::string& small_label) const {
    std::vector<std::string> rows{small_label, kGeneralist};
    for (CombinationKind k : spec_.kinds) rows.emplace_back(to_string(k));
    return rows;
  }

  // Renders the records of `table` with one column per (condition, metric).
  void render(const std::string& table, const std::string& title, const std::vector<std::string>& conditions,
              bool with_general, const std::vector<std::string>& rows) {
    std::vector<std::string> header{""};
    for (const auto& c : conditions) {
      header.push_back(with_general ? c + " dom" : c);
      if (with_general) header.push_back(c + " gen");
    }
    std::vector<std::vector<std::string>> body;
    for (const auto& r : rows) {
      std::vector<std::string> line{r};
      bool any = false;
      for (const auto& c : conditions) {
        const ResultRecord* rec = results_.find(table, r, c);
        any = any || rec;
        line.push_back(rec && rec->domain_ppl ? fmt(*rec->domain_ppl) : "-");
        if (with_general) line.push_back(rec && rec->general_ppl ? fmt(*rec->general_ppl) : "-");
      }
      if (any) body.push_back(std::move(line));
    }
    results_.tables.push_back(render_table(title, header, body));
  }

  void main_table() {
    standard_rows("main", "domain-fit", kExpert, false, domain_.train_fit.size(), true);
    auto rows = row_order(kExpert);
    rows.emplace_back(kOracle);
    render("main", "Perplexity of expert, generalist and fitted combinations (dom = domain test, gen = general test)",
           {"domain-fit"}, true, rows);
  }

  void fit_size_table() {
    std::vector<std::string> conditions;
    for (std::size_t n : spec_.fit_sizes) {
      if (n == 0 || n > domain_.train_fit.size())
        throw Error(ErrorCode::InvalidArgument, "spec key 'fit_sizes': " + std::to_string(n) +
                                                    " is outside 1.." + std::to_string(domain_.train_fit.size()));
      const std::string cond = "fit=" + std::to_string(n);
      conditions.push_back(cond);
      standard_rows("fit_size", cond, kExpert, false, n, false);
    }
    render("fit_size", "Domain-test perplexity by number of fitting sequences", conditions, false,
           row_order(kExpert));
  }

  void expert_vs_generalist_table() {
    release_caches();
    const std::string orig = std::string("small=") + kSmallGeneralist;
    const std::string ft = std::string("small=") + kExpert;
    standard_rows("expert_vs_generalist", orig, kSmallGeneralist, false, domain_.train_fit.size(), false);
    release_caches();
    standard_rows("expert_vs_generalist", ft, kExpert, false, domain_.train_fit.size(), false);
    std::vector<std::string> rows{kSmallGeneralist, kExpert, kGeneralist};
    for (CombinationKind k : spec_.kinds) rows.emplace_back(to_string(k));
    render("expert_vs_generalist", "Domain-test perplexity with a small generalist vs. the domain expert as small model",
           {orig, ft}, false, rows);
  }

  void mixin_table() {
    standard_rows("mixin", "domain-fit", kExpert, false, domain_.train_fit.size(), false);
    standard_rows("mixin", "mixin-fit", kExpert, true, domain_.train_fit.size(), false);
    render("mixin", "Perplexity when fitting on the domain set vs. the domain+general mixin set",
           {"domain-fit", "mixin-fit"}, true, row_order(kExpert));
  }

  void expert_quality_table() {
    std::vector<std::string> conditions;
    for (double f : spec_.expert_fractions) {
      release_caches();
      const std::string id = f >= 1.0 ? std::string(kExpert) : "expert@" + fmt(f, 4);
      const std::string cond = "expert-data=" + fmt(f, 4);
      conditions.push_back(cond);
      standard_rows("expert_quality", cond, id, false, domain_.train_fit.size(), false);
      // Rename the small-model row so every column shares one label.
      for (auto& rec : results_.records)
        if (rec.table == "expert_quality" && rec.condition == cond && rec.row == id) rec.row = kExpert;
    }
    render("expert_quality", "Domain-test perplexity as the expert sees more domain training data", conditions, false,
           row_order(kExpert));
  }

  void spearman_table() {
    std::vector<std::vector<std::string>> body;
    for (CombinationKind kind : spec_.kinds) {
      if (kind != CombinationKind::EntropyScalar && kind != CombinationKind::FullScalar) continue;
      const CombinationParams& p = fitted(kExpert, false, domain_.train_fit.size(), kind);
      ResultRecord rec{"spearman", std::string(to_string(kind)), "domain-fit", {}, {}, {}, {}};
      auto rho = [&](Corpus c) -> std::optional<double> {
        try {
          return analyze(cache(kExpert, c, SplitPart::Test), p).rho;
        } catch (const Error& e) {
          if (e.code() != ErrorCode::UndefinedCorrelation) throw;
          return std::nullopt;
        }
      };
      rec.rho_domain = rho(Corpus::Domain);
      rec.rho_general = rho(Corpus::General);
      body.push_back({rec.row, rec.rho_domain ? fmt(*rec.rho_domain) : "undef",
                      rec.rho_general ? fmt(*rec.rho_general) : "undef"});
      results_.records.push_back(std::move(rec));
    }
    results_.tables.push_back(
        render_table("Spearman correlation between lambda and ln P_S - ln P_L", {"", "domain", "general"}, body));
  }

  const ExperimentSpec& spec_;
  std::ostream* log_;
  Vocabulary vocab_ = Vocabulary::bytes();
  DatasetSplit domain_, general_;
  std::map<std::string, NGramLM> models_;
  std::map<std::string, DistCache> caches_;
  std::map<std::string, CombinationParams> fitted_;
  ExperimentResults results_;
};

}  // namespace

ExperimentSpec ExperimentSpec::from_json(const json& j, const std::filesystem::path& base_dir) {
  if (!j.is_object()) throw Error(ErrorCode::FormatError, "experiment spec must be a JSON object");
  ExperimentSpec s;
  auto path_key = [&](const char* key) -> std::filesystem::path {
    const auto p = get_key<std::string>(j, key, "");
    if (p.empty()) return {};
    std::filesystem::path path(p);
    return path.is_absolute() || base_dir.empty() ? path : base_dir / path;
  };
  s.domain_corpus = path_key("domain_corpus");
  s.general_corpus = path_key("general_corpus");
  s.vocab_mode = parse_vocab_mode(get_key<std::string>(j, "vocab", "byte"));
  s.vocab_max_size = get_key<std::size_t>(j, "vocab_max_size", s.vocab_max_size);
  s.seq_len = get_key<std::size_t>(j, "seq_len", s.seq_len);
  s.n_fit = get_key<std::size_t>(j, "n_fit", s.n_fit);
  s.n_test = get_key<std::size_t>(j, "n_test", s.n_test);
  s.seed = get_key<std::uint64_t>(j, "seed", s.seed);
  s.expert = parse_ngram(j, "expert", s.expert);
  s.generalist = parse_ngram(j, "generalist", s.generalist);
  s.small_generalist = parse_ngram(j, "small_generalist", s.small_generalist);
  if (j.contains("kinds")) {
    s.kinds.clear();
    for (const auto& k : get_key<std::vector<std::string>>(j, "kinds", {})) s.kinds.push_back(parse_kind(k));
  }
  FitConfig fit_base;
  fit_base.seed = s.seed;
  s.fit = j.contains("fit") ? FitConfig::from_json(j.at("fit"), fit_base) : fit_base;
  s.experiments = get_key<std::vector<std::string>>(j, "experiments", s.experiments);
  for (const auto& e : s.experiments)
    if (std::find(std::begin(kExperimentNames), std::end(kExperimentNames), e) == std::end(kExperimentNames))
      throw Error(ErrorCode::InvalidArgument, "spec key 'experiments': unknown experiment '" + e + "'");
  s.fit_sizes = get_key<std::vector<std::size_t>>(j, "fit_sizes", s.fit_sizes);
  s.expert_fractions = get_key<std::vector<double>>(j, "expert_fractions", s.expert_fractions);
  s.threads = get_key<std::size_t>(j, "threads", s.threads);
  if (s.seq_len < 2) throw Error(ErrorCode::InvalidArgument, "spec key 'seq_len' must be at least 2");
  return s;
}

ExperimentSpec ExperimentSpec::load(const std::filesystem::path& path) {
  const std::string text = read_text_file(path);
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::FormatError, path.string() + ": " + e.what());
  }
  return from_json(j, path.parent_path());
}

const ResultRecord* ExperimentResults::find(const std::string& table, const std::string& row,
                                            const std::string& condition) const {
  for (const auto& r : records)
    if (r.table == table && r.row == row && r.condition == condition) return &r;
  return nullptr;
}

nlohmann::json ExperimentResults::to_json() const {
  json recs = json::array();
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  for (const auto& r : records) {
    recs.push_back({{"table", r.table},
                    {"row", r.row},
                    {"condition", r.condition},
                    {"domain_ppl", opt(r.domain_ppl)},
                    {"general_ppl", opt(r.general_ppl)},
                    {"rho_domain", opt(r.rho_domain)},
                    {"rho_general", opt(r.rho_general)}});
  }
  return {{"records", recs}};
}

std::string ExperimentResults::text() const {
  std::string out;
  for (const auto& t : tables) out += t + "\n";
  return out;
}

void ExperimentResults::write(const std::filesystem::path& out_dir) const {
  std::filesystem::create_directories(out_dir);
  {
    std::ofstream f(out_dir / "results.json");
    if (!f) throw Error(ErrorCode::IoError, "cannot write " + (out_dir / "results.json").string());
    f << to_json().dump(2) << '\n';
  }
  std::ofstream f(out_dir / "results.txt");
  if (!f) throw Error(ErrorCode::IoError, "cannot write " + (out_dir / "results.txt").string());
  f << text();
}

ExperimentResults run_experiment(const ExperimentSpec& spec, std::ostream* log) {
  Runner runner(spec, log);
  return runner.run();
}

}  // namespace fuselm
