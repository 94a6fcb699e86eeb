#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fovit/attack.hpp"
#include "fovit/dataset.hpp"
#include "fovit/episode.hpp"
#include "fovit/model.hpp"

namespace fovit {

// Every tunable of a run, resolved from defaults + config file + command-line
// overrides. The echoed form (resolve_config's `echo`) contains all of these
// plus the derived layout numbers, and feeding it back reproduces the run.
struct RunConfig {
  ModelConfig model;
  std::string precision = "float";  // float | double

  std::string dataset_kind = "synthetic";  // synthetic | folder
  std::string dataset_root;
  int first_k_classes = 0;  // folder mode: keep only the first K class dirs
  SyntheticSpec synthetic;

  int n_fixations = 5;
  std::string policy = "guided";  // guided | random
  double stop_threshold = -1;     // < 0: none

  int epochs = 30;
  int batch_size = 64;
  double lr_init = 3e-4;
  double lr_min = 3e-5;
  double weight_decay = 1e-8;
  std::string objective = "episode";  // episode | full_sequence
  int threads = 1;

  double tau = -1;  // ensemble threshold; < 0: compute from the train split

  double attack_epsilon = 0.1;
  std::vector<double> attack_epsilons = {0.0, 0.05, 0.1, 0.2, 0.4};
  int pgd_steps = 10;
  double pgd_step_size = 0;  // 0: epsilon / 4
  bool pgd_random_start = true;

  std::string out_dir = "out";
  std::string checkpoint;
  std::string unfoveated_checkpoint;
  std::string image = "0";  // trace target: test-split index or file path
  uint64_t seed = 0;

  void validate() const;

  FixationPolicy fixation_policy() const;
  TrainConfig train_config() const;
  AttackConfig attack_config() const;
};

RunConfig default_run_config();

// Resolves defaults <- config-file text <- dotted key=value overrides.
// Unknown keys, type mismatches, and malformed overrides throw
// std::runtime_error. `text` may be empty (defaults only). When echo is
// non-null it receives the full resolved configuration as pretty-printed
// JSON, including a read-only "derived" section; that echo is itself a valid
// config file. The FOVIT_OUT_DIR environment variable, when set, overrides
// io.out_dir.
RunConfig resolve_config(const std::string& text,
                         const std::vector<std::string>& overrides,
                         std::string* echo);

}  // namespace fovit
