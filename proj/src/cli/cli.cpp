#include <algorithm>
#include <chrono>
#include <fstream>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "refuseg/cli/cli.hpp"
#include "refuseg/errors.hpp"

namespace refuseg::cli {

namespace {

namespace fs = std::filesystem;

std::array<int64_t, 3> parse_size(const std::string& text) {
  std::array<int64_t, 3> out{};
  std::stringstream ss(text);
  std::string item;
  size_t n = 0;
  while (std::getline(ss, item, ',')) {
    require(n < 3, ErrorKind::configuration, "--size expects X,Y,Z");
    try {
      size_t used = 0;
      out[n] = std::stoll(item, &used);
      require(used == item.size(), ErrorKind::configuration, "--size expects integers, got '" + item + "'");
    } catch (const std::logic_error&) {
      throw Error(ErrorKind::configuration, "--size expects integers, got '" + item + "'");
    }
    ++n;
  }
  require(n == 3, ErrorKind::configuration, "--size expects X,Y,Z");
  return out;
}

std::set<Modality> parse_drop(const std::string& text) {
  std::set<Modality> out;
  if (text.empty()) return out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto m = parse_modality(item);
    require(m.has_value(), ErrorKind::configuration, "unknown modality '" + item + "' (expected t1, t1c, t2, flair)");
    out.insert(*m);
  }
  return out;
}

std::string drop_text(const std::set<Modality>& drop) {
  std::string out;
  for (auto m : drop) out += (out.empty() ? "" : ",") + std::string(name_of(m));
  return out.empty() ? "none" : out;
}

void print_means(std::ostream& out, const trainer::MatrixResult& r) {
  char line[200];
  std::snprintf(line, sizeof line, "%-10s %8s %8s %8s %9s %9s %9s\n", "dropped", "Dice ET", "Dice TC", "Dice WT",
                "HD95 ET", "HD95 TC", "HD95 WT");
  out << line;
  for (const auto& m : r.means) {
    const auto& s = m.scores;
    std::snprintf(line, sizeof line, "%-10s %8.4f %8.4f %8.4f %9.3f %9.3f %9.3f\n",
                  m.dropped_modality ? std::string(name_of(*m.dropped_modality)).c_str() : "none", s.dice[0],
                  s.dice[1], s.dice[2], s.hd95[0], s.hd95[1], s.hd95[2]);
    out << line;
  }
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-encoder brain tumour segmentation with max fusion and contrastive regularization", "refuseg"};
  app.require_subcommand(1);

  std::string gen_out, gen_size = "32,32,16";
  int gen_cases = 16;
  uint64_t gen_seed = 0;
  auto* gen = app.add_subcommand("gen-data", "Write a synthetic phantom dataset");
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--cases", gen_cases, "Number of cases")->capture_default_str();
  gen->add_option("--size", gen_size, "Volume extents X,Y,Z")->capture_default_str();
  gen->add_option("--seed", gen_seed, "Dataset seed")->capture_default_str();

  std::string train_data, train_out, train_config, train_resume;
  std::vector<std::string> train_sets;
  auto* tr = app.add_subcommand("train", "Train a model");
  tr->add_option("--data", train_data, "Dataset directory")->required();
  tr->add_option("--out", train_out, "Output directory for checkpoints and the ledger")->required();
  tr->add_option("--config", train_config, "Config file of key = value lines");
  tr->add_option("--set", train_sets, "Override one config entry, KEY=VALUE (repeatable)");
  tr->add_option("--resume", train_resume, "Continue from this checkpoint");

  std::string inf_ckpt, inf_case, inf_drop, inf_out;
  auto* inf = app.add_subcommand("infer", "Predict labels for one case");
  inf->add_option("--ckpt", inf_ckpt, "Checkpoint file")->required();
  inf->add_option("--case", inf_case, "Case directory")->required();
  inf->add_option("--drop", inf_drop, "Comma-separated modalities to treat as missing");
  inf->add_option("--out", inf_out, "Output label volume (.nii)")->required();

  std::string ev_pred, ev_gt, ev_report, ev_case, ev_dropped;
  double ev_beta = 0.0;
  auto* ev = app.add_subcommand("eval", "Score a predicted label volume against ground truth");
  ev->add_option("--pred", ev_pred, "Predicted label volume")->required();
  ev->add_option("--gt", ev_gt, "Ground-truth label volume")->required();
  ev->add_option("--report", ev_report, "Output report (one JSON line)")->required();
  ev->add_option("--case-id", ev_case, "Case id recorded in the report");
  ev->add_option("--dropped", ev_dropped, "Dropped modality recorded in the report");
  ev->add_option("--beta", ev_beta, "Beta recorded in the report");

  std::string mx_ckpt, mx_data, mx_report, mx_compare;
  auto* mx = app.add_subcommand("matrix", "Evaluate full and drop-one-modality inference over a dataset");
  mx->add_option("--ckpt", mx_ckpt, "Checkpoint file")->required();
  mx->add_option("--data", mx_data, "Dataset directory")->required();
  mx->add_option("--report", mx_report, "Output report (JSON lines)")->required();
  mx->add_option("--compare", mx_compare, "Another matrix report to print side by side");

  std::vector<std::string> argv_store{"refuseg"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : argv_store) argv.push_back(a.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n";
    const CLI::App* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    err << sub->help();
    return 2;
  }

  try {
    if (*gen) {
      const auto size = parse_size(gen_size);
      out << "verb = gen-data\nout = " << gen_out << "\ncases = " << gen_cases << "\nsize = " << size[0] << ","
          << size[1] << "," << size[2] << "\nseed = " << gen_seed << "\n";
      data::generate_dataset(gen_out, gen_cases, size, gen_seed);
      out << "wrote " << gen_cases << " cases to " << gen_out << "\n";
    } else if (*tr) {
      trainer::RunConfig cfg;
      if (!train_config.empty()) cfg = read_config_file(train_config, cfg);
      for (const auto& s : train_sets) {
        const auto eq = s.find('=');
        require(eq != std::string::npos, ErrorKind::configuration, "--set expects KEY=VALUE, got '" + s + "'");
        apply_setting(cfg, s.substr(0, eq), s.substr(eq + 1));
      }
      cfg.validate();
      out << "# resolved configuration\n" << format_config(cfg) << std::flush;
      const auto start = std::chrono::steady_clock::now();
      const auto result = trainer::train(train_data, cfg, train_out,
                                         train_resume.empty() ? std::nullopt : std::optional<fs::path>(train_resume),
                                         &out);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      out << "trained " << result.state.step << " steps in " << secs << " s; checkpoint "
          << result.final_checkpoint.string() << "\n";
    } else if (*inf) {
      const auto drop = parse_drop(inf_drop);
      out << "verb = infer\nckpt = " << inf_ckpt << "\ncase = " << inf_case << "\ndrop = " << drop_text(drop)
          << "\nout = " << inf_out << "\n";
      const auto labels = trainer::infer(fs::path(inf_ckpt), inf_case, drop);
      trainer::write_labels(inf_out, labels);
      out << "wrote " << labels.size() << " label slices to " << inf_out << "\n";
    } else if (*ev) {
      out << "verb = eval\npred = " << ev_pred << "\ngt = " << ev_gt << "\nreport = " << ev_report << "\n";
      metrics::MetricsReport r;
      r.case_id = ev_case.empty() ? fs::path(ev_gt).parent_path().filename().string() : ev_case;
      if (!ev_dropped.empty()) {
        const auto m = parse_modality(ev_dropped);
        require(m.has_value(), ErrorKind::configuration, "unknown modality '" + ev_dropped + "'");
        r.dropped_modality = *m;
      }
      r.beta = ev_beta;
      r.scores = metrics::evaluate_case(trainer::read_labels(ev_pred), trainer::read_labels(ev_gt));
      std::ofstream f(ev_report, std::ios::trunc);
      require(f.good(), ErrorKind::io, "cannot open " + ev_report + " for writing");
      f << r.to_json() << "\n";
      out << r.to_json() << "\n";
    } else if (*mx) {
      out << "verb = matrix\nckpt = " << mx_ckpt << "\ndata = " << mx_data << "\nreport = " << mx_report << "\n";
      const auto result = trainer::drop_modality_matrix(fs::path(mx_ckpt), fs::path(mx_data));
      trainer::write_report(mx_report, result);
      print_means(out, result);
      if (!mx_compare.empty()) {
        const auto other = trainer::read_report(mx_compare);
        out << (other.beta <= result.beta ? trainer::comparison_table(other, result)
                                          : trainer::comparison_table(result, other));
      }
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace refuseg::cli
