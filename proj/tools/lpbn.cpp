// Experiment driver: transfer curves, fidelity tables, width sweeps,
// training runs, scheme retrofit, memory reports, and graph validation.
// Every command is pure given its flags, input files, and seed; outputs are
// written atomically under --out-dir (or $LPBN_OUT when set).

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "lpbn/dataset.hpp"
#include "lpbn/fused.hpp"
#include "lpbn/train.hpp"

using namespace lpbn;
namespace fs = std::filesystem;

namespace {

std::string g_out_dir = ".";
std::string g_tag;

std::string out_path(const std::string& name) {
  std::string dir = g_out_dir;
  if (const char* env = std::getenv("LPBN_OUT"); env != nullptr && *env != '\0') dir = env;
  fs::create_directories(dir);
  return (fs::path(dir) / (g_tag + name)).string();
}

void write_text(const std::string& path, const std::string& content) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + tmp);
    f << content;
    if (!f.good()) throw std::runtime_error("short write to " + tmp);
  }
  fs::rename(tmp, path);
  std::cout << "wrote " << path << "\n";
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    std::size_t stop = s.find(sep, start);
    if (stop == std::string::npos) stop = s.size();
    out.push_back(s.substr(start, stop - start));
    start = stop + 1;
  }
  return out;
}

std::uint64_t parse_u64(const std::string& s, const char* what) {
  try {
    std::size_t used = 0;
    std::uint64_t v = std::stoull(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw std::runtime_error(std::string(what) + ": expected an unsigned integer, got '" + s + "'");
  }
}

// ---------------------------------------------------------------------------
// Shared data-source flags. Priority: --fixture, then --synthetic, then files.

struct DataFlags {
  std::vector<std::string> train_files, test_files;
  std::size_t train_subset = 0, test_subset = 0;  // 0 keeps everything
  std::uint64_t subset_seed = 1;
  bool flatten = true;
  std::string synthetic;       // classes:dim:n:seed
  std::string synthetic_test;  // classes:dim:n:seed
  std::string fixture;         // ntrain:ntest:seed
};

void add_data_flags(CLI::App* cmd, DataFlags& f) {
  cmd->add_option("--train-files", f.train_files,
                  "CIFAR-10 binary batch files for the training split")
      ->delimiter(',');
  cmd->add_option("--test-files", f.test_files,
                  "CIFAR-10 binary batch files for the test split")
      ->delimiter(',');
  cmd->add_option("--train-subset", f.train_subset, "keep this many training examples (0 = all)");
  cmd->add_option("--test-subset", f.test_subset, "keep this many test examples (0 = all)");
  cmd->add_option("--subset-seed", f.subset_seed, "seed for subset selection");
  cmd->add_flag("--flatten,!--no-flatten", f.flatten,
                "load records as flat 3072-vectors (default) or 3x32x32 tensors");
  cmd->add_option("--synthetic", f.synthetic,
                  "training split from Gaussian blobs, as classes:dim:n:seed");
  cmd->add_option("--synthetic-test", f.synthetic_test,
                  "test split from Gaussian blobs, as classes:dim:n:seed");
  cmd->add_option("--fixture", f.fixture,
                  "built-in collision fixture for both splits, as ntrain:ntest:seed");
}

void reject_out_of_scope(const std::vector<std::string>& paths) {
  for (const std::string& p : paths) {
    std::string lower = p;
    for (char& c : lower) c = char(std::tolower(static_cast<unsigned char>(c)));
    if (lower.find("imagenet") != std::string::npos)
      throw std::runtime_error(p + ": ImageNet is out of scope; CIFAR-10 binary batches are "
                               "the only external dataset");
  }
}

Dataset blobs_from_spec(const std::string& spec, const char* what) {
  std::vector<std::string> parts = split(spec, ':');
  if (parts.size() != 4)
    throw std::runtime_error(std::string(what) + ": expected classes:dim:n:seed, got '" + spec +
                             "'");
  return gen_synthetic(parse_u64(parts[0], what), parse_u64(parts[1], what),
                       parse_u64(parts[2], what), parse_u64(parts[3], what));
}

std::pair<Dataset, Dataset> load_splits(const DataFlags& f) {
  Dataset train, test;
  if (!f.fixture.empty()) {
    std::vector<std::string> parts = split(f.fixture, ':');
    if (parts.size() != 3)
      throw std::runtime_error("--fixture: expected ntrain:ntest:seed, got '" + f.fixture + "'");
    CollisionFixture fx =
        make_collision_fixture(parse_u64(parts[0], "--fixture"), parse_u64(parts[1], "--fixture"),
                               parse_u64(parts[2], "--fixture"));
    train = dataset_from_raw(fx.train, f.flatten);
    test = dataset_from_raw(fx.test, f.flatten);
  } else if (!f.synthetic.empty() || !f.synthetic_test.empty()) {
    if (!f.synthetic.empty()) train = blobs_from_spec(f.synthetic, "--synthetic");
    if (!f.synthetic_test.empty()) test = blobs_from_spec(f.synthetic_test, "--synthetic-test");
  } else {
    reject_out_of_scope(f.train_files);
    reject_out_of_scope(f.test_files);
    if (!f.train_files.empty()) train = load_cifar(f.train_files, f.flatten);
    if (!f.test_files.empty()) test = load_cifar(f.test_files, f.flatten);
  }
  if (f.train_subset > 0) train = take_subset(train, f.train_subset, f.subset_seed);
  if (f.test_subset > 0) test = take_subset(test, f.test_subset, f.subset_seed + 1);
  return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// Shared training-config flags.

void add_train_flags(CLI::App* cmd, TrainConfig& cfg, std::string& lr_schedule) {
  cmd->add_option("--lr", cfg.learning_rate, "learning rate");
  cmd->add_option("--momentum", cfg.momentum, "Nesterov momentum, in [0, 1)");
  cmd->add_option("--weight-decay", cfg.weight_decay, "decay on learnt weights and biases");
  cmd->add_option("--batch", cfg.batch_size, "batch size");
  cmd->add_option("--epochs", cfg.epochs, "training epochs");
  cmd->add_option("--seed", cfg.seed, "run seed (init and shuffling)");
  cmd->add_option("--lr-schedule", lr_schedule,
                  "piecewise multipliers as epoch:mult;epoch:mult (0-based epochs)");
}

void parse_lr_schedule(const std::string& text, TrainConfig& cfg) {
  if (text.empty()) return;
  for (const std::string& item : split(text, ';')) {
    std::vector<std::string> kv = split(item, ':');
    if (kv.size() != 2)
      throw std::runtime_error("--lr-schedule: expected epoch:mult, got '" + item + "'");
    cfg.lr_schedule.emplace_back(parse_u64(kv[0], "--lr-schedule"), std::stod(kv[1]));
  }
}

Graph graph_from_arch(const std::string& arch, QuantScheme scheme) {
  std::vector<std::string> parts = split(arch, ':');
  if (parts[0] == "fc" && parts.size() == 2)
    return build_fc_stack(int(parse_u64(parts[1], "--arch")), scheme);
  if (parts[0] == "conv" && parts.size() == 2)
    return build_small_convnet(parse_u64(parts[1], "--arch"), scheme);
  if (parts[0] == "res" && parts.size() == 3)
    return build_residual_block(parse_u64(parts[1], "--arch"), parse_u64(parts[2], "--arch"),
                                scheme);
  throw std::runtime_error("--arch: expected fc:EXP, conv:WIDTH, or res:CHANNELS:BLOCKS, got '" +
                           arch + "'");
}

Graph graph_from_flags(const std::string& checkpoint, const std::string& arch,
                       QuantScheme scheme) {
  if (!checkpoint.empty()) return load_checkpoint<float>(checkpoint);
  return graph_from_arch(arch, scheme);
}

std::vector<QuantScheme> parse_schemes(const std::vector<std::string>& names) {
  std::vector<QuantScheme> out;
  for (const std::string& n : names) out.push_back(scheme_from_name(n));
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"low-precision normalized-activation toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  app.add_option("--out-dir", g_out_dir, "output directory (overridden by $LPBN_OUT)");
  app.add_option("--tag", g_tag, "prefix for output file names");
  int rc = 0;

  // curve -----------------------------------------------------------------
  auto* curve = app.add_subcommand("curve", "transfer curve of a scheme over an input grid");
  {
    static std::string scheme_name_flag;
    static double lo = -6.0, hi = 6.0, step = 0.01;
    curve->add_option("--scheme", scheme_name_flag, "scheme name (L2..O4, GRAD8)")->required();
    curve->add_option("--min", lo, "grid start");
    curve->add_option("--max", hi, "grid end");
    curve->add_option("--step", step, "grid step");
    curve->callback([&] {
      QuantScheme s = scheme_from_name(scheme_name_flag);
      if (!(step > 0)) throw std::runtime_error("--step must be positive");
      std::vector<double> grid;
      for (std::size_t i = 0;; ++i) {
        double x = lo + double(i) * step;
        if (x > hi + step * 0.5) break;
        grid.push_back(x);
      }
      auto pts = transfer_curve(s, grid);
      std::string csv = "x,y\n";
      for (auto [x, y] : pts) csv += format_double(x) + "," + format_double(y) + "\n";
      write_text(out_path("curve_" + scheme_name_flag + ".csv"), csv);
    });
  }

  // table2 ----------------------------------------------------------------
  auto* table2 = app.add_subcommand("table2", "correlation and SD of quantized standard samples");
  {
    static std::vector<std::string> schemes;
    static std::vector<std::string> dists;
    static std::size_t n = 1000000;
    static std::uint64_t seed = 1;
    table2->add_option("--scheme", schemes, "scheme names")->required()->delimiter(',');
    table2->add_option("--dist", dists, "distributions (gaussian, student_t3)")
        ->required()
        ->delimiter(',');
    table2->add_option("--n", n, "sample count");
    table2->add_option("--seed", seed, "sampling seed");
    table2->callback([&] {
      std::vector<FidelityRow> rows;
      for (const std::string& sn : schemes)
        for (const std::string& dn : dists)
          rows.push_back(
              fidelity_row(scheme_from_name(sn), distribution_from_name(dn), n, seed));
      std::string csv = fidelity_csv(rows);
      std::cout << csv;
      write_text(out_path("table2.csv"), csv);
    });
  }

  // quantsweep ------------------------------------------------------------
  auto* sweep = app.add_subcommand("quantsweep",
                                   "accuracy deltas against a same-seed full-precision baseline");
  {
    static std::vector<int> widths;
    static std::vector<std::string> schemes;
    static TrainConfig cfg;
    static std::string lr_schedule;
    static DataFlags data;
    sweep->add_option("--widths", widths, "width exponents (width = 2^n)")
        ->required()
        ->delimiter(',');
    sweep->add_option("--schemes", schemes, "schemes to sweep")->required()->delimiter(',');
    add_train_flags(sweep, cfg, lr_schedule);
    add_data_flags(sweep, data);
    sweep->callback([&] {
      parse_lr_schedule(lr_schedule, cfg);
      auto [train_data, test_data] = load_splits(data);
      auto rows = quantsweep(widths, parse_schemes(schemes), cfg, train_data, test_data);
      write_text(out_path("quantsweep.csv"), quantsweep_csv(rows));
      write_text(out_path("quantsweep_manifest.txt"),
                 run_manifest(cfg, train_data.size(), test_data.size()));
    });
  }

  // train -----------------------------------------------------------------
  auto* tr = app.add_subcommand("train", "train a graph and write history plus a checkpoint");
  {
    static std::string arch = "fc:7";
    static std::string scheme_flag = "fp32";
    static std::string grad_flag = "float";
    static TrainConfig cfg;
    static std::string lr_schedule;
    static DataFlags data;
    tr->add_option("--arch", arch, "fc:EXP | conv:WIDTH | res:CHANNELS:BLOCKS");
    tr->add_option("--scheme", scheme_flag, "storage scheme for normalized activations");
    tr->add_option("--grad-mode", grad_flag, "float | quantize_at_input | quantize_partial_sums");
    add_train_flags(tr, cfg, lr_schedule);
    add_data_flags(tr, data);
    tr->callback([&] {
      parse_lr_schedule(lr_schedule, cfg);
      cfg.scheme = scheme_from_name(scheme_flag);
      cfg.grad_mode = grad_mode_from_name(grad_flag);
      auto [train_data, test_data] = load_splits(data);
      Graph g = graph_from_arch(arch, cfg.scheme);
      init_params(g, cfg.seed);
      auto history = train(g, train_data, test_data, cfg);
      write_text(out_path("history.csv"), history_csv(history));
      write_text(out_path("manifest.txt"),
                 run_manifest(cfg, train_data.size(), test_data.size()));
      save_checkpoint(g, out_path("checkpoint.json"));
      std::cout << "wrote " << out_path("checkpoint.json") << "\n";
      if (!history.empty()) {
        std::cout << "final train accuracy " << format_double(history.back().train_accuracy)
                  << "\n";
        if (test_data.size() > 0)
          std::cout << "final test accuracy " << format_double(history.back().test_accuracy)
                    << "\n";
      }
    });
  }

  // retrofit --------------------------------------------------------------
  auto* retro = app.add_subcommand("retrofit",
                                   "pin a storage scheme onto a trained checkpoint's norms");
  {
    static std::string checkpoint;
    static std::string scheme_flag;
    static std::string policy_flag = "all";
    static std::vector<std::size_t> indices;
    static std::size_t fine_tune_epochs = 0;
    static TrainConfig cfg;
    static std::string lr_schedule;
    static DataFlags data;
    retro->add_option("--checkpoint", checkpoint, "trained graph to retrofit")->required();
    retro->add_option("--scheme", scheme_flag, "replacement storage scheme")->required();
    retro->add_option("--policy", policy_flag, "all | all_but_first | subset");
    retro->add_option("--indices", indices, "norm indices for policy=subset")->delimiter(',');
    retro->add_option("--fine-tune-epochs", fine_tune_epochs,
                      "fine-tune for this many epochs after substitution (0 = none)");
    add_train_flags(retro, cfg, lr_schedule);
    add_data_flags(retro, data);
    retro->callback([&] {
      parse_lr_schedule(lr_schedule, cfg);
      QuantScheme scheme = scheme_from_name(scheme_flag);
      RetrofitPolicy policy = retrofit_policy_from_name(policy_flag);
      auto [train_data, test_data] = load_splits(data);
      if (test_data.size() == 0)
        throw std::runtime_error("retrofit: an evaluation split is required "
                                 "(--test-files, --synthetic-test, or --fixture)");
      Graph g = load_checkpoint<float>(checkpoint);
      RetrofitReport rep;
      if (fine_tune_epochs > 0) {
        TrainConfig ft = cfg;
        ft.epochs = fine_tune_epochs;
        rep = retrofit(g, test_data, scheme, policy, indices, &ft, &train_data,
                       cfg.batch_size);
      } else {
        rep = retrofit(g, test_data, scheme, policy, indices, nullptr, nullptr,
                       cfg.batch_size);
      }
      std::string text = retrofit_report_text(rep, scheme, policy);
      std::cout << text;
      write_text(out_path("retrofit.txt"), text);
      save_checkpoint(g, out_path("retrofit_checkpoint.json"));
      std::cout << "wrote " << out_path("retrofit_checkpoint.json") << "\n";
    });
  }

  // memreport ---------------------------------------------------------------
  auto* mem = app.add_subcommand("memreport", "training-time activation storage per norm node");
  {
    static std::string arch = "fc:7";
    static std::string checkpoint;
    static std::string scheme_flag = "L4";
    static std::size_t batch = 100;
    mem->add_option("--arch", arch, "fc:EXP | conv:WIDTH | res:CHANNELS:BLOCKS");
    mem->add_option("--checkpoint", checkpoint, "report a saved graph instead of --arch");
    mem->add_option("--scheme", scheme_flag, "storage scheme to cost");
    mem->add_option("--batch", batch, "batch size");
    mem->callback([&] {
      QuantScheme scheme = scheme_from_name(scheme_flag);
      Graph g = graph_from_flags(checkpoint, arch, scheme);
      MemoryReport rep = memory_report(g, batch, scheme);
      std::string csv = "node,what,bytes_fp32,bytes_quantized\n";
      for (const MemoryLine& l : rep.per_node)
        csv += l.name + "," + l.what + "," + std::to_string(l.bytes_fp32) + "," +
               std::to_string(l.bytes_quantized) + "\n";
      csv += "(total),," + std::to_string(rep.bytes_fp32) + "," +
             std::to_string(rep.bytes_quantized) + "\n";
      write_text(out_path("memreport.csv"), csv);
      std::cout << "bytes_fp32 " << rep.bytes_fp32 << "\n"
                << "bytes_quantized " << rep.bytes_quantized << "\n"
                << "ratio " << format_double(rep.ratio) << "\n";
      if (rep.counts_pool_indices) std::cout << "includes pooling argmax indices\n";
    });
  }

  // validate ----------------------------------------------------------------
  auto* val = app.add_subcommand("validate", "check a graph against the composition grammar");
  {
    static std::string arch;
    static std::string checkpoint;
    val->add_option("--arch", arch, "fc:EXP | conv:WIDTH | res:CHANNELS:BLOCKS");
    val->add_option("--checkpoint", checkpoint, "graph file to validate");
    val->callback([&] {
      if (checkpoint.empty() && arch.empty())
        throw std::runtime_error("validate: provide --checkpoint or --arch");
      Graph g = graph_from_flags(checkpoint, arch, QuantScheme::L4);
      CromulenceReport rep = validate_cromulent(g);
      if (rep.ok) {
        std::cout << "cromulent\n";
      } else {
        for (const std::string& v : rep.violations) std::cout << v << "\n";
        rc = 1;
      }
    });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return rc;
}
