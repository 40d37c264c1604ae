// Copyright 2026 The mmfed Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Trains a small model in memory and prints validation WT dice per round,
// then the test report of the final model.

#include <iostream>

#include "mmfed/experiment.hpp"

int main() {
  using namespace mmfed;
  exp::ExperimentConfig cfg;
  cfg.seed = 7;
  cfg.data.count = 60;
  cfg.data.size = 16;
  cfg.data.clients = 3;
  cfg.model.stem_levels = 1;
  cfg.model.stages = 2;
  cfg.model.base_channels = 4;
  cfg.server.rounds = 5;
  cfg.server.q = 1.0;
  cfg.server.sigma = 0.0;

  const exp::RunResult res = exp::run_experiment(cfg);
  for (std::size_t t = 0; t < res.validation.size(); ++t) {
    std::cout << "round " << t << "  val WT dice "
              << res.validation[t].at(data::Region::kWT, metrics::Metric::kDice).mean << "\n";
  }

  const model::MUnet net(cfg.resolved_model());
  const auto report = exp::evaluate_indices(net, res.final_model, res.dataset.samples, res.dataset.split.test,
                                            cfg.threshold);
  std::cout << metrics::report_csv(report);
}
