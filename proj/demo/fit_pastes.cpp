// Fits the paste-strength data (casks nested in batches) and tests whether
// the cask-within-batch and batch components are equal.

#include <iostream>
#include <string>

#include "varcomp/cli.hpp"
#include "varcomp/varcomp.hpp"

int main(int argc, char** argv) {
  using namespace varcomp;
  const std::string path = argc > 1 ? argv[1] : std::string(VARCOMP_DATA_DIR) + "/pastes.csv";

  cli::ModelSpec spec;
  spec.response = "strength";
  spec.random = cli::nested_terms("batch/cask");
  const auto model = cli::build_model(cli::read_csv(path), spec);

  const FitResult fit = fit_unconstrained(model.design, model.y);
  for (Index j = 0; j < model.design.d(); ++j)
    std::cout << model.design.names()[static_cast<std::size_t>(j)] << ": " << fit.tau_hat(j) << "\n";
  std::cout << "iterations: " << fit.iterations << "\n";

  // tau = (batch, batch:cask); the alternative is batch:cask > batch.
  ContrastSpec contrast(Matrix{{1.0, -1.0}}, std::vector<Side>{Side::Less});
  BootstrapOptions opts;
  opts.b = 500;
  opts.seed = 2024;
  opts.workers = default_workers();
  const TestResult tr = bootstrap_test(model.design, model.y, contrast, opts);
  std::cout << "lambda: " << tr.lr_obs << "\n"
            << "two-sided p: " << tr.p_two << " +/- " << tr.mc_se_two << "\n"
            << "one-sided p: " << *tr.p_one << " +/- " << *tr.mc_se_one << "\n";
}
