#include <filesystem>
#include <iostream>

#include "CLI11.hpp"
#include "cfmult/cfmult.hpp"
#include "cfmult/http.hpp"

namespace fs = std::filesystem;
using namespace cfmult;

namespace {

constexpr int kConfigError = 2;
constexpr int kDomainError = 3;

ExperimentConfig resolve_config(const std::string& path, const std::string& out, std::optional<std::uint64_t> seed) {
  ExperimentConfig cfg = path.empty() ? ExperimentConfig{} : load_config(path);
  if (seed) cfg.seeds = {*seed};
  if (!out.empty()) cfg.output = out;
  cfg.validate();
  return cfg;
}

std::string read_all(const std::string& path) {
  if (path == "-") return {std::istreambuf_iterator<char>(std::cin), {}};
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::invalid_argument("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), {}};
}

int serve(const std::string& bundle_dir, int port) {
  const auto bundle = load_bundle(bundle_dir);
  httplib::Server server;
  mount_routes(server, bundle);
  std::cerr << "listening on 127.0.0.1:" << port << "\n";
  if (!server.listen("127.0.0.1", port)) {
    std::cerr << "error: cannot bind port " << port << "\n";
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Counterfactual recourse under predictive multiplicity"};
  app.require_subcommand(1);

  std::string config_path, out_dir, bundle_dir, request_path = "-";
  std::optional<std::uint64_t> seed;
  int port = 8080;

  std::vector<CLI::App*> runs;
  for (const char* name : {"transfer", "costs", "bounds", "semantics", "bundle"}) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "ExperimentConfig JSON");
    sub->add_option("--out", out_dir, "output directory");
    sub->add_option("--seed", seed, "run a single seed");
    runs.push_back(sub);
  }
  runs[0]->description("invariance of counterfactuals across the level set");
  runs[1]->description("percentile costs per method");
  runs[2]->description("cost bounds, oracle manifold table and negative surprise");
  runs[3]->description("histograms and principal components");
  runs[4]->description("write the service bundle only");

  auto* srv = app.add_subcommand("serve", "HTTP service over a bundle");
  srv->add_option("--bundle", bundle_dir)->required();
  srv->add_option("--port", port);

  auto* rec = app.add_subcommand("recourse", "answer one /recourse request body offline");
  rec->add_option("--bundle", bundle_dir)->required();
  rec->add_option("--request", request_path, "request JSON file ('-' for stdin)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (srv->parsed()) return serve(bundle_dir, port);
    if (rec->parsed()) {
      const auto bundle = load_bundle(bundle_dir);
      const auto r = handle_recourse(bundle, read_all(request_path));
      std::cout << r.body.dump() << "\n";
      return r.status == 200 ? 0 : r.status == 422 ? kDomainError : kConfigError;
    }
    const auto cfg = resolve_config(config_path, out_dir, seed);
    const fs::path out = cfg.output;
    fs::create_directories(out);
    if (runs[0]->parsed()) write_text(out / "transfer.json", run_transfer(cfg).dump(2) + "\n");
    if (runs[1]->parsed()) {
      const auto c = run_costs(cfg);
      write_text(out / "costs.json", c.report.dump(2) + "\n");
      write_text(out / "costs.csv", c.csv);
    }
    if (runs[2]->parsed()) {
      const auto b = run_bounds(cfg);
      write_text(out / "bounds.json", b.report.dump(2) + "\n");
      write_text(out / "manifold.csv", b.manifold_csv);
    }
    if (runs[3]->parsed()) {
      const auto s = run_semantics(cfg);
      write_text(out / "semantics.json", s.report.dump(2) + "\n");
      write_text(out / "pca.csv", s.pca_csv);
    }
    write_bundle(cfg, out / "bundle");
    std::cerr << "wrote " << out.string() << "\n";
    return 0;
  } catch (const DomainError& e) {
    std::cerr << "domain error: " << e.what() << "\n";
    return kDomainError;
  } catch (const TrainingError& e) {
    std::cerr << "training error: " << e.what() << "\n";
    return kDomainError;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
