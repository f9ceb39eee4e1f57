#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "pptrn/hash.hpp"
#include "pptrn/training.hpp"

namespace pptrn {

namespace {

std::string fmt(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

struct Reader {
  std::string origin;
  std::string key;

  [[noreturn]] void fail(const std::string& value, const char* what) const {
    throw ParseError(origin + ": " + key + " = '" + value + "' is not " + what);
  }
  std::uint64_t u64(const std::string& v) const {
    std::uint64_t out = 0;
    const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
    if (r.ec != std::errc() || r.ptr != v.data() + v.size()) fail(v, "a non-negative integer");
    return out;
  }
  std::size_t size(const std::string& v) const { return std::size_t(u64(v)); }
  double real(const std::string& v) const {
    double out = 0;
    const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
    if (r.ec != std::errc() || r.ptr != v.data() + v.size()) fail(v, "a number");
    return out;
  }
  bool flag(const std::string& v) const {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    fail(v, "a boolean");
  }
};

const char* attention_name(AttentionKind k) { return k == AttentionKind::kPpda ? "ppda" : "channel_self"; }

std::string widths_text(const std::array<std::size_t, 4>& w) {
  return std::to_string(w[0]) + "," + std::to_string(w[1]) + "," + std::to_string(w[2]) + "," + std::to_string(w[3]);
}

std::string model_text(const TrainConfig& c) {
  std::ostringstream o;
  o << "in_channels = " << c.in_channels << '\n'
    << "d = " << c.d << '\n'
    << "levels = " << c.levels << '\n'
    << "m = " << c.m << '\n'
    << "d_k = " << c.d_k << '\n'
    << "d_z = " << c.d_z << '\n'
    << "ffn_expansion = " << fmt(c.ffn_expansion) << '\n'
    << "depthwise_qkv = " << (c.depthwise_qkv ? "true" : "false") << '\n'
    << "attention = " << attention_name(c.attention) << '\n'
    << "encoder_widths = " << widths_text(c.encoder_widths) << '\n'
    << "estimator_hidden = " << c.estimator_hidden << '\n'
    << "estimator_skip = " << (c.estimator_skip ? "true" : "false") << '\n'
    << "estimator_layers = " << c.estimator_layers << '\n'
    << "time_dim = " << c.time_dim << '\n'
    << "diffusion_steps = " << c.diffusion_steps << '\n'
    << "prior_clamp = " << fmt(c.prior_clamp) << '\n';
  return o.str();
}

}  // namespace

void TrainConfig::validate() const {
  if (stage != 1 && stage != 2) throw ConfigError("config: stage must be 1 or 2");
  if (!(lr > 0.0)) throw ConfigError("config: lr must be positive");
  if (lr_schedule != "constant" && lr_schedule != "cosine") {
    throw ConfigError("config: lr_schedule must be constant or cosine");
  }
  if (batch_size < 1) throw ConfigError("config: batch_size must be >= 1");
  if (!(lambda_rec >= 0.0) || !(lambda_diff >= 0.0)) throw ConfigError("config: loss weights must be >= 0");
  if (!(prior_clamp > 0.0)) throw ConfigError("config: prior_clamp must be positive");
  if (val_sampling_steps < 1 || val_sampling_steps > diffusion_steps) {
    throw ConfigError("config: val_sampling_steps must lie in [1, diffusion_steps]");
  }
  if (diffusion_steps < 2) throw ConfigError("config: diffusion_steps must be >= 2");
  if (time_dim < 2 || time_dim % 2 != 0) throw ConfigError("config: time_dim must be even and >= 2");
  for (std::size_t w : encoder_widths) {
    if (w == 0) throw ConfigError("config: encoder widths must be positive");
  }
  if (estimator_hidden == 0 || estimator_layers == 0) throw ConfigError("config: estimator must be non-empty");
  backbone().validate();
  AdamW<float> check(optimizer());
}

BackboneConfig TrainConfig::backbone() const {
  BackboneConfig b;
  b.in_channels = in_channels;
  b.d = d;
  b.levels = levels;
  b.m = m;
  b.d_k = d_k;
  b.d_z = d_z;
  b.ffn_expansion = ffn_expansion;
  b.depthwise_qkv = depthwise_qkv;
  b.attention = attention;
  return b;
}

EncoderConfig TrainConfig::encoder() const { return {in_channels, encoder_widths, d_z}; }

EstimatorConfig TrainConfig::estimator() const {
  return {d_z, time_dim, estimator_hidden, estimator_layers, estimator_skip ? diffusion_steps : 0};
}

AdamWConfig TrainConfig::optimizer() const { return {lr, beta1, beta2, adam_eps, weight_decay}; }

std::string TrainConfig::to_text() const {
  std::ostringstream o;
  o << "stage = " << stage << '\n'
    << "lr = " << fmt(lr) << '\n'
    << "lr_schedule = " << lr_schedule << '\n'
    << "augment = " << (augment ? "true" : "false") << '\n'
    << "batch_size = " << batch_size << '\n'
    << "steps = " << steps << '\n'
    << "seed = " << seed << '\n'
    << "beta1 = " << fmt(beta1) << '\n'
    << "beta2 = " << fmt(beta2) << '\n'
    << "adam_eps = " << fmt(adam_eps) << '\n'
    << "weight_decay = " << fmt(weight_decay) << '\n'
    << "lambda_rec = " << fmt(lambda_rec) << '\n'
    << "lambda_diff = " << fmt(lambda_diff) << '\n'
    << "joint = " << (joint ? "true" : "false") << '\n'
    << "eval_every = " << eval_every << '\n'
    << "patience = " << patience << '\n'
    << "val_sampling_steps = " << val_sampling_steps << '\n'
    << model_text(*this);
  return o.str();
}

TrainConfig TrainConfig::parse(const std::string& text, const std::string& origin) {
  TrainConfig c;
  Reader r{origin, {}};
  using Setter = std::function<void(const std::string&)>;
  const std::map<std::string, Setter> setters{
      {"stage", [&](const std::string& v) { c.stage = int(r.u64(v)); }},
      {"lr", [&](const std::string& v) { c.lr = r.real(v); }},
      {"lr_schedule",
       [&](const std::string& v) {
         if (v != "constant" && v != "cosine") r.fail(v, "one of constant, cosine");
         c.lr_schedule = v;
       }},
      {"batch_size", [&](const std::string& v) { c.batch_size = r.size(v); }},
      {"steps", [&](const std::string& v) { c.steps = r.size(v); }},
      {"seed", [&](const std::string& v) { c.seed = r.u64(v); }},
      {"beta1", [&](const std::string& v) { c.beta1 = r.real(v); }},
      {"beta2", [&](const std::string& v) { c.beta2 = r.real(v); }},
      {"adam_eps", [&](const std::string& v) { c.adam_eps = r.real(v); }},
      {"weight_decay", [&](const std::string& v) { c.weight_decay = r.real(v); }},
      {"lambda_rec", [&](const std::string& v) { c.lambda_rec = r.real(v); }},
      {"lambda_diff", [&](const std::string& v) { c.lambda_diff = r.real(v); }},
      {"joint", [&](const std::string& v) { c.joint = r.flag(v); }},
      {"augment", [&](const std::string& v) { c.augment = r.flag(v); }},
      {"eval_every", [&](const std::string& v) { c.eval_every = r.size(v); }},
      {"patience", [&](const std::string& v) { c.patience = r.size(v); }},
      {"val_sampling_steps", [&](const std::string& v) { c.val_sampling_steps = r.size(v); }},
      {"in_channels", [&](const std::string& v) { c.in_channels = r.size(v); }},
      {"d", [&](const std::string& v) { c.d = r.size(v); }},
      {"levels", [&](const std::string& v) { c.levels = r.size(v); }},
      {"m", [&](const std::string& v) { c.m = r.size(v); }},
      {"d_k", [&](const std::string& v) { c.d_k = r.size(v); }},
      {"d_z", [&](const std::string& v) { c.d_z = r.size(v); }},
      {"ffn_expansion", [&](const std::string& v) { c.ffn_expansion = r.real(v); }},
      {"depthwise_qkv", [&](const std::string& v) { c.depthwise_qkv = r.flag(v); }},
      {"attention",
       [&](const std::string& v) {
         if (v == "ppda") {
           c.attention = AttentionKind::kPpda;
         } else if (v == "channel_self") {
           c.attention = AttentionKind::kChannelSelf;
         } else {
           r.fail(v, "one of ppda, channel_self");
         }
       }},
      {"encoder_widths",
       [&](const std::string& v) {
         std::istringstream in(v);
         std::string part;
         std::size_t i = 0;
         while (std::getline(in, part, ',')) {
           if (i == 4) r.fail(v, "four comma-separated widths");
           c.encoder_widths[i++] = r.size(trim(part));
         }
         if (i != 4) r.fail(v, "four comma-separated widths");
       }},
      {"estimator_hidden", [&](const std::string& v) { c.estimator_hidden = r.size(v); }},
      {"estimator_skip", [&](const std::string& v) { c.estimator_skip = r.flag(v); }},
      {"estimator_layers", [&](const std::string& v) { c.estimator_layers = r.size(v); }},
      {"time_dim", [&](const std::string& v) { c.time_dim = r.size(v); }},
      {"diffusion_steps", [&](const std::string& v) { c.diffusion_steps = r.size(v); }},
      {"prior_clamp", [&](const std::string& v) { c.prior_clamp = r.real(v); }},
  };
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(origin + ":" + std::to_string(lineno) + ": expected key = value");
    r.key = trim(line.substr(0, eq));
    const auto it = setters.find(r.key);
    if (it == setters.end()) throw ParseError(origin + ":" + std::to_string(lineno) + ": unknown key '" + r.key + "'");
    it->second(trim(line.substr(eq + 1)));
  }
  c.validate();
  return c;
}

TrainConfig TrainConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

void TrainConfig::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << to_text();
  if (!out) throw IoError("write failed for " + path.string());
}

std::uint64_t TrainConfig::model_hash() const {
  Fnv1a64 h;
  h.update(model_text(*this));
  return h.value();
}

}  // namespace pptrn
