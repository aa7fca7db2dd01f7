// hknas: search, train, eval, derive and synth commands.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "hknas/hknas.hpp"

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kData = 3, kNumeric = 4 };

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string arch;
  std::string checkpoint;
  std::string alpha_mode;
  bool two_tier = false;
};

hknas::RunConfig resolve(const Flags& f) {
  hknas::RunConfig c = f.config.empty() ? hknas::make_config({}) : hknas::load_config(f.config);
  if (f.seed) c.seed = *f.seed;
  if (!f.out.empty()) c.out = f.out;
  if (!f.alpha_mode.empty()) {
    try {
      c.net.alpha_mode = hknas::parse_alpha_mode(f.alpha_mode);
    } catch (const std::invalid_argument& e) {
      throw hknas::ConfigError(e.what());
    }
  }
  if (f.two_tier) c.two_tier = true;
  return c;
}

std::filesystem::path or_default(const std::string& flag, const std::filesystem::path& dir, const char* name) {
  return flag.empty() ? dir / name : std::filesystem::path(flag);
}

int run(const std::string& cmd, const Flags& f) {
  hknas::RunConfig c = resolve(f);
  if (cmd == "search") {
    std::cout << hknas::encode_text(hknas::cmd_search(c));
  } else if (cmd == "train") {
    const auto log = hknas::cmd_train(c, or_default(f.arch, c.out, "arch.txt"));
    const auto& last = log.epochs.back();
    std::cout << "trained " << log.epochs.size() << " epochs, final train loss " << last.train_loss << "\n";
  } else if (cmd == "eval") {
    std::cout << hknas::format_report(hknas::cmd_eval(c, or_default(f.checkpoint, c.out, "model.ckpt")));
  } else if (cmd == "derive") {
    std::cout << hknas::encode_text(hknas::cmd_derive(c, or_default(f.checkpoint, c.out, "search.ckpt")));
  } else if (cmd == "synth") {
    const auto s = hknas::cmd_synth(c);
    std::cout << "wrote " << s.cube.height << "x" << s.cube.width << "x" << s.cube.bands << " scene with "
              << s.signatures.size() << " classes to " << c.out.string() << "\n";
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hyper-kernel architecture search for hyperspectral image classification"};
  app.require_subcommand(1);
  Flags f;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", f.config, "run configuration (key = value)");
    sub->add_option("--seed", f.seed, "run seed");
    sub->add_option("--out", f.out, "output directory");
  };

  auto* search = app.add_subcommand("search", "search an architecture; writes arch.txt, search_log.tsv, search.ckpt");
  common(search);
  search->add_option("--alpha-mode", f.alpha_mode, "structural parameters: hyper or free")->check(CLI::IsMember({"hyper", "free"}));
  search->add_flag("--two-tier", f.two_tier, "alternate weight and alpha updates on training halves");

  auto* train = app.add_subcommand("train", "train a derived architecture from scratch; writes model.ckpt, train_log.tsv");
  common(train);
  train->add_option("--arch", f.arch, "architecture matrix (default OUT/arch.txt)");

  auto* eval = app.add_subcommand("eval", "evaluate a trained checkpoint on the test set; writes metrics.txt");
  common(eval);
  eval->add_option("--checkpoint", f.checkpoint, "trained checkpoint (default OUT/model.ckpt)");

  auto* derive = app.add_subcommand("derive", "derive arch.txt from a search checkpoint");
  common(derive);
  derive->add_option("--checkpoint", f.checkpoint, "search checkpoint (default OUT/search.ckpt)");

  auto* synth = app.add_subcommand("synth", "write a synthetic scene (cube.hsi, labels.lbl)");
  common(synth);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    return run(cmd, f);
  } catch (const hknas::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const hknas::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const hknas::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
}
