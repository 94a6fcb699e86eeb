#include "fovit/config.hpp"

#include <json.hpp>

#include <cstdlib>
#include <stdexcept>

namespace fovit {

using nlohmann::json;

namespace {

json to_json(const RunConfig& c) {
  json j;
  j["model"] = {{"image_side", c.model.image_side},
                {"patch_side", c.model.patch_side},
                {"channels", c.model.channels},
                {"dim", c.model.dim},
                {"heads", c.model.heads},
                {"depth", c.model.depth},
                {"mlp_ratio", c.model.mlp_ratio},
                {"classes", c.model.num_classes},
                {"precision", c.precision}};
  j["dataset"] = {{"kind", c.dataset_kind},
                  {"root", c.dataset_root},
                  {"first_k_classes", c.first_k_classes},
                  {"classes", c.synthetic.classes},
                  {"train_per_class", c.synthetic.train_per_class},
                  {"val_per_class", c.synthetic.val_per_class},
                  {"test_per_class", c.synthetic.test_per_class},
                  {"seed", c.synthetic.seed},
                  {"min_pattern_distance", c.synthetic.min_pattern_distance}};
  j["episode"] = {{"n_fixations", c.n_fixations},
                  {"policy", c.policy},
                  {"stop_threshold", c.stop_threshold}};
  j["training"] = {{"epochs", c.epochs},
                   {"batch_size", c.batch_size},
                   {"lr_init", c.lr_init},
                   {"lr_min", c.lr_min},
                   {"weight_decay", c.weight_decay},
                   {"objective", c.objective},
                   {"threads", c.threads}};
  j["ensemble"] = {{"tau", c.tau}};
  j["attack"] = {{"epsilon", c.attack_epsilon},
                 {"epsilons", c.attack_epsilons},
                 {"pgd_steps", c.pgd_steps},
                 {"pgd_step_size", c.pgd_step_size},
                 {"random_start", c.pgd_random_start}};
  j["io"] = {{"out_dir", c.out_dir},
             {"checkpoint", c.checkpoint},
             {"unfoveated_checkpoint", c.unfoveated_checkpoint},
             {"image", c.image},
             {"seed", c.seed}};
  return j;
}

RunConfig from_json(const json& j) {
  RunConfig c;
  const json& m = j.at("model");
  c.model.image_side = m.at("image_side").get<int>();
  c.model.patch_side = m.at("patch_side").get<int>();
  c.model.channels = m.at("channels").get<int>();
  c.model.dim = m.at("dim").get<int>();
  c.model.heads = m.at("heads").get<int>();
  c.model.depth = m.at("depth").get<int>();
  c.model.mlp_ratio = m.at("mlp_ratio").get<int>();
  c.model.num_classes = m.at("classes").get<int>();
  c.precision = m.at("precision").get<std::string>();

  const json& d = j.at("dataset");
  c.dataset_kind = d.at("kind").get<std::string>();
  c.dataset_root = d.at("root").get<std::string>();
  c.first_k_classes = d.at("first_k_classes").get<int>();
  c.synthetic.classes = d.at("classes").get<int>();
  c.synthetic.train_per_class = d.at("train_per_class").get<int>();
  c.synthetic.val_per_class = d.at("val_per_class").get<int>();
  c.synthetic.test_per_class = d.at("test_per_class").get<int>();
  c.synthetic.seed = d.at("seed").get<uint64_t>();
  c.synthetic.min_pattern_distance =
      d.at("min_pattern_distance").get<int>();

  const json& e = j.at("episode");
  c.n_fixations = e.at("n_fixations").get<int>();
  c.policy = e.at("policy").get<std::string>();
  c.stop_threshold = e.at("stop_threshold").get<double>();

  const json& t = j.at("training");
  c.epochs = t.at("epochs").get<int>();
  c.batch_size = t.at("batch_size").get<int>();
  c.lr_init = t.at("lr_init").get<double>();
  c.lr_min = t.at("lr_min").get<double>();
  c.weight_decay = t.at("weight_decay").get<double>();
  c.objective = t.at("objective").get<std::string>();
  c.threads = t.at("threads").get<int>();

  c.tau = j.at("ensemble").at("tau").get<double>();

  const json& a = j.at("attack");
  c.attack_epsilon = a.at("epsilon").get<double>();
  c.attack_epsilons = a.at("epsilons").get<std::vector<double>>();
  c.pgd_steps = a.at("pgd_steps").get<int>();
  c.pgd_step_size = a.at("pgd_step_size").get<double>();
  c.pgd_random_start = a.at("random_start").get<bool>();

  const json& io = j.at("io");
  c.out_dir = io.at("out_dir").get<std::string>();
  c.checkpoint = io.at("checkpoint").get<std::string>();
  c.unfoveated_checkpoint = io.at("unfoveated_checkpoint").get<std::string>();
  c.image = io.at("image").get<std::string>();
  c.seed = io.at("seed").get<uint64_t>();
  return c;
}

bool types_compatible(const json& base, const json& incoming) {
  if (base.is_number() && incoming.is_number()) return true;
  return base.type() == incoming.type();
}

// every incoming key must already exist in base with a compatible type
void merge_strict(json& base, const json& incoming, const std::string& path) {
  if (!incoming.is_object())
    throw std::runtime_error("config: expected an object at '" +
                             (path.empty() ? "<top>" : path) + "'");
  for (const auto& [key, value] : incoming.items()) {
    const std::string here = path.empty() ? key : path + "." + key;
    if (key == "derived" && path.empty()) continue;  // echo round-trip
    if (!base.contains(key))
      throw std::runtime_error("config: unknown key '" + here + "'");
    json& slot = base[key];
    if (slot.is_object()) {
      merge_strict(slot, value, here);
    } else {
      if (!types_compatible(slot, value))
        throw std::runtime_error("config: wrong type for '" + here +
                                 "' (expected " + std::string(slot.type_name()) +
                                 ")");
      slot = value;
    }
  }
}

void apply_override(json& base, const std::string& spec) {
  const size_t eq = spec.find('=');
  if (eq == std::string::npos || eq == 0)
    throw std::runtime_error("override must look like section.key=value: '" +
                             spec + "'");
  const std::string path = spec.substr(0, eq);
  const std::string text = spec.substr(eq + 1);

  json* slot = &base;
  size_t start = 0;
  std::string walked;
  while (true) {
    const size_t dot = path.find('.', start);
    const std::string key = path.substr(
        start, dot == std::string::npos ? std::string::npos : dot - start);
    walked = walked.empty() ? key : walked + "." + key;
    if (!slot->contains(key))
      throw std::runtime_error("config: unknown key '" + walked + "'");
    slot = &(*slot)[key];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  if (slot->is_object())
    throw std::runtime_error("config: '" + path + "' is a section, not a key");

  json value;
  if (slot->is_string()) {
    value = text;  // strings are taken verbatim, quotes optional
  } else {
    value = json::parse(text, nullptr, false);
    if (value.is_discarded() || !types_compatible(*slot, value))
      throw std::runtime_error("config: cannot parse '" + text + "' for '" +
                               path + "'");
  }
  *slot = value;
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  if (precision != "float" && precision != "double")
    throw std::runtime_error("config: precision must be float or double");
  if (dataset_kind != "synthetic" && dataset_kind != "folder")
    throw std::runtime_error("config: dataset.kind must be synthetic or folder");
  if (dataset_kind == "folder" && dataset_root.empty())
    throw std::runtime_error("config: dataset.root required for folder data");
  if (dataset_kind == "synthetic" && synthetic.classes != model.num_classes)
    throw std::runtime_error(
        "config: dataset.classes must equal model.classes for synthetic data");
  if (policy != "guided" && policy != "random")
    throw std::runtime_error("config: episode.policy must be guided or random");
  if (objective != "episode" && objective != "full_sequence")
    throw std::runtime_error(
        "config: training.objective must be episode or full_sequence");
  if (n_fixations < 1)
    throw std::runtime_error("config: episode.n_fixations must be >= 1");
  if (epochs < 1 || batch_size < 1 || threads < 1)
    throw std::runtime_error("config: training schedule values must be >= 1");
  attack_config().validate();
}

FixationPolicy RunConfig::fixation_policy() const {
  return policy == "random" ? FixationPolicy::random : FixationPolicy::guided;
}

TrainConfig RunConfig::train_config() const {
  TrainConfig t;
  t.epochs = epochs;
  t.batch_size = batch_size;
  t.lr_init = lr_init;
  t.lr_min = lr_min;
  t.weight_decay = weight_decay;
  t.n_fixations = n_fixations;
  t.objective = objective == "full_sequence" ? TrainObjective::full_sequence
                                             : TrainObjective::episode;
  t.seed = seed;
  t.threads = threads;
  return t;
}

AttackConfig RunConfig::attack_config() const {
  AttackConfig a;
  a.epsilon = attack_epsilon;
  a.pgd_steps = pgd_steps;
  a.pgd_step_size = pgd_step_size;
  a.random_start = pgd_random_start;
  a.seed = seed;
  return a;
}

RunConfig default_run_config() { return RunConfig{}; }

RunConfig resolve_config(const std::string& text,
                         const std::vector<std::string>& overrides,
                         std::string* echo) {
  json resolved = to_json(RunConfig{});
  if (!text.empty()) {
    json file = json::parse(text, nullptr, false);
    if (file.is_discarded())
      throw std::runtime_error("config: file is not valid JSON");
    merge_strict(resolved, file, "");
  }
  for (const std::string& spec : overrides) apply_override(resolved, spec);

  if (const char* env = std::getenv("FOVIT_OUT_DIR"); env && *env)
    resolved["io"]["out_dir"] = std::string(env);

  RunConfig cfg = from_json(resolved);
  cfg.validate();
  if (echo) {
    const FoveaLayout layout = FoveaLayout::canonical();
    resolved["derived"] = {{"capacity", layout.capacity()},
                           {"fixation_cost", fixation_cost(layout)},
                           {"full_pass_cost", kFullPassCost},
                           {"total_blocks", cfg.model.total_blocks()},
                           {"patch_dim", cfg.model.patch_dim()}};
    *echo = resolved.dump(2) + "\n";
  }
  return cfg;
}

}  // namespace fovit
