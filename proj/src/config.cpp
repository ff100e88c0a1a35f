// SPDX-License-Identifier: Apache-2.0
#include "sparsedet/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "sparsedet/errors.hpp"
#include "sparsedet/random.hpp"

namespace sparsedet {

namespace {

constexpr std::uint64_t kTrainStream = 0x7a1;
constexpr std::uint64_t kEvalStream = 0xe7a1;

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_int(const std::string& key, const std::string& v) {
  T out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw InputError("setting " + key + ": expected an integer, got '" + v + "'");
  }
  return out;
}

double parse_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double out = std::stod(v, &used);
    if (used == v.size() && std::isfinite(out)) return out;
  } catch (const std::exception&) {
  }
  throw InputError("setting " + key + ": expected a number, got '" + v + "'");
}

bool parse_switch(const std::string& key, const std::string& v) {
  if (v == "on" || v == "true" || v == "1") return true;
  if (v == "off" || v == "false" || v == "0") return false;
  throw InputError("setting " + key + ": expected on|off, got '" + v + "'");
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

struct Field {
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define SD_SIZE(name, member)                                                  \
  {name,                                                                       \
   {[](RunConfig& c, const std::string& k, const std::string& v) {            \
      c.member = parse_int<std::size_t>(k, v);                                 \
    },                                                                         \
    [](const RunConfig& c) { return std::to_string(c.member); }}}
#define SD_INT(name, member)                                                   \
  {name,                                                                       \
   {[](RunConfig& c, const std::string& k, const std::string& v) {            \
      c.member = parse_int<int>(k, v);                                         \
    },                                                                         \
    [](const RunConfig& c) { return std::to_string(c.member); }}}
#define SD_REAL(name, member)                                                  \
  {name,                                                                       \
   {[](RunConfig& c, const std::string& k, const std::string& v) {            \
      c.member = parse_real(k, v);                                             \
    },                                                                         \
    [](const RunConfig& c) { return fmt(c.member); }}}

const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = {
      {"seed",
       {[](RunConfig& c, const std::string& k, const std::string& v) {
          c.seed = parse_int<std::uint64_t>(k, v);
        },
        [](const RunConfig& c) { return std::to_string(c.seed); }}},
      SD_SIZE("steps", steps),
      SD_SIZE("log_interval", log_interval),
      SD_SIZE("eval_scenes", eval_scenes),
      {"eval_seed",
       {[](RunConfig& c, const std::string& k, const std::string& v) {
          c.eval_seed = parse_int<std::uint64_t>(k, v);
        },
        [](const RunConfig& c) { return std::to_string(c.eval_seed); }}},
      SD_SIZE("num_queries", detector.num_queries),
      SD_SIZE("d_model", detector.d_model),
      SD_SIZE("heads", detector.heads),
      SD_SIZE("num_stages", detector.num_stages),
      SD_SIZE("num_classes", detector.num_classes),
      SD_SIZE("pooled", detector.pooled),
      SD_SIZE("samples_per_bin", detector.samples_per_bin),
      {"attn_mode",
       {[](RunConfig& c, const std::string&, const std::string& v) {
          c.detector.attn_mode = parse_attn_mode(v);
        },
        [](const RunConfig& c) {
          return std::string(attn_mode_name(c.detector.attn_mode));
        }}},
      {"dcw",
       {[](RunConfig& c, const std::string& k, const std::string& v) {
          c.detector.set_dcw(parse_switch(k, v));
        },
        [](const RunConfig& c) {
          return std::string(c.detector.dcw_enabled ? "on" : "off");
        }}},
      {"disentangle",
       {[](RunConfig& c, const std::string&, const std::string& v) {
          c.detector.disentangle = parse_disentangle(v);
          c.detector.dcw_enabled = c.detector.disentangle == DisentangleMode::kDcw;
        },
        [](const RunConfig& c) {
          return std::string(disentangle_name(c.detector.disentangle));
        }}},
      SD_REAL("lambda_cls", detector.cost.lambda_cls),
      SD_REAL("lambda_l1", detector.cost.lambda_l1),
      SD_REAL("lambda_giou", detector.cost.lambda_giou),
      SD_REAL("focal_alpha", detector.cost.focal_alpha),
      SD_REAL("focal_gamma", detector.cost.focal_gamma),
      {"proposal_layout",
       {[](RunConfig& c, const std::string&, const std::string& v) {
          c.detector.proposal_layout = parse_layout(v);
        },
        [](const RunConfig& c) {
          return std::string(layout_name(c.detector.proposal_layout));
        }}},
      SD_REAL("init_box_fraction", detector.init_box_fraction),
      SD_REAL("min_box_size", detector.min_box_size),
      SD_REAL("lr", optim.lr),
      SD_REAL("momentum", optim.momentum),
      SD_REAL("weight_decay", optim.weight_decay),
      SD_REAL("clip_norm", optim.clip_norm),
      SD_SIZE("warmup_steps", optim.warmup_steps),
      SD_REAL("lr_drop_fraction", optim.drop_fraction),
      SD_REAL("lr_drop_factor", optim.drop_factor),
      SD_INT("image_w", scene.image_w),
      SD_INT("image_h", scene.image_h),
      SD_INT("min_objects", scene.min_objects),
      SD_INT("max_objects", scene.max_objects),
      SD_REAL("overlap_bias", scene.overlap_bias),
      SD_INT("min_size", scene.min_size),
      SD_INT("max_size", scene.max_size),
      SD_REAL("stride", scene.stride),
      SD_REAL("noise_sigma", scene.noise_sigma),
  };
  return table;
}

#undef SD_SIZE
#undef SD_INT
#undef SD_REAL

}  // namespace

void RunConfig::finalize() {
  detector.image_w = scene.image_w;
  detector.image_h = scene.image_h;
  scene.channels = detector.d_model;
  optim.total_steps = steps;
  detector.validate();
  scene.validate();
  if (static_cast<std::size_t>(scene.max_objects) > detector.num_queries) {
    throw InputError("max_objects exceeds num_queries");
  }
  if (log_interval == 0) throw InputError("log_interval must be positive");
  if (!(optim.lr >= 0) || !(optim.momentum >= 0 && optim.momentum < 1) ||
      !(optim.weight_decay >= 0) || !(optim.clip_norm >= 0)) {
    throw InputError("optimizer settings out of range");
  }
}

void apply_setting(RunConfig& cfg, const std::string& key,
                   const std::string& value) {
  for (const auto& [name, field] : fields()) {
    if (name == key) {
      field.set(cfg, key, trim(value));
      return;
    }
  }
  throw InputError("unknown setting '" + key + "'");
}

void load_config_file(RunConfig& cfg, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot read config file " + path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) {
      line.erase(hash);
    }
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw InputError(path.string() + ":" + std::to_string(lineno) +
                       ": expected key = value");
    }
    apply_setting(cfg, trim(line.substr(0, eq)), line.substr(eq + 1));
  }
}

std::vector<std::pair<std::string, std::string>> config_entries(
    const RunConfig& cfg) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& [name, field] : fields()) {
    // Implied by disentangle.
    if (name != "dcw") out.emplace_back(name, field.get(cfg));
  }
  return out;
}

std::uint64_t train_scene_seed(const RunConfig& cfg, std::size_t step) {
  return Rng({cfg.seed, kTrainStream, step}).next_u64();
}

std::uint64_t eval_scene_seed(const RunConfig& cfg, std::size_t index) {
  return Rng({cfg.eval_seed, kEvalStream, index}).next_u64();
}

SceneSpec train_scene_spec(const RunConfig& cfg, std::size_t step) {
  SceneSpec s = cfg.scene;
  s.seed = train_scene_seed(cfg, step);
  return s;
}

SceneSpec eval_scene_spec(const RunConfig& cfg, std::size_t index) {
  SceneSpec s = cfg.scene;
  s.seed = eval_scene_seed(cfg, index);
  return s;
}

}  // namespace sparsedet
