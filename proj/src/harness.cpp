#include "octo/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace octo {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

int to_int(const std::string& s, const std::string& key) {
  try {
    return std::stoi(s);
  } catch (const std::exception&) {
    throw std::invalid_argument("config key '" + key + "' is not an integer: " + s);
  }
}

bool to_bool(const std::string& s, const std::string& key) {
  if (s == "1" || s == "true" || s == "on" || s == "yes") return true;
  if (s == "0" || s == "false" || s == "off" || s == "no") return false;
  throw std::invalid_argument("config key '" + key + "' is not a boolean: " + s);
}

}  // namespace

std::map<std::string, std::string> parse_kv_text(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(lineno) +
                                  " is not key=value: " + t);
    kv[trim(t.substr(0, eq))] = trim(t.substr(eq + 1));
  }
  return kv;
}

std::map<std::string, std::string> parse_kv_file(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config file " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_kv_text(ss.str());
}

ModelConfig model_config_from_kv(const std::map<std::string, std::string>& kv) {
  ModelConfig cfg;
  for (const auto& [key, value] : kv) {
    if (key == "stages") {
      cfg.stages.clear();
      std::istringstream ss(value);
      std::string item;
      while (std::getline(ss, item, ',')) {
        const auto x = item.find('x');
        if (x == std::string::npos)
          throw std::invalid_argument("stage entry must be BLOCKSxCHANNELS: " + item);
        cfg.stages.push_back({to_int(trim(item.substr(0, x)), key),
                              to_int(trim(item.substr(x + 1)), key)});
      }
      if (cfg.stages.empty()) throw std::invalid_argument("stages list is empty");
    } else if (key == "in_channels") {
      cfg.in_channels = to_int(value, key);
    } else if (key == "d_state") {
      cfg.d_state = to_int(value, key);
    } else if (key == "gate") {
      if (value == "constant")
        cfg.gate = GateParams::Mode::ConstantOne;
      else if (value == "affine_sigmoid")
        cfg.gate = GateParams::Mode::AffineSigmoid;
      else
        throw std::invalid_argument("gate must be 'constant' or 'affine_sigmoid'");
    } else if (key == "per_direction_params") {
      cfg.per_direction_params = to_bool(value, key);
    } else if (key == "directions") {
      cfg.directions = to_int(value, key);
    } else if (key == "tsm") {
      cfg.tsm = to_bool(value, key);
    } else if (key == "ffn_ratio") {
      cfg.ffn_ratio = to_int(value, key);
    } else if (key == "classes") {
      cfg.classes = to_int(value, key);
    } else if (key == "seed") {
      cfg.seed = std::stoull(value);
    } else {
      throw std::invalid_argument("unknown config key: " + key);
    }
  }
  return cfg;
}

std::string model_config_to_text(const ModelConfig& cfg) {
  std::ostringstream out;
  out << "stages=";
  for (std::size_t i = 0; i < cfg.stages.size(); ++i) {
    if (i) out << ",";
    out << cfg.stages[i].blocks << "x" << cfg.stages[i].channels;
  }
  out << "\n";
  out << "in_channels=" << cfg.in_channels << "\n";
  out << "d_state=" << cfg.d_state << "\n";
  out << "gate=" << (cfg.gate == GateParams::Mode::ConstantOne ? "constant" : "affine_sigmoid")
      << "\n";
  out << "per_direction_params=" << (cfg.per_direction_params ? "true" : "false") << "\n";
  out << "directions=" << cfg.directions << "\n";
  out << "tsm=" << (cfg.tsm ? "on" : "off") << "\n";
  out << "ffn_ratio=" << cfg.ffn_ratio << "\n";
  out << "classes=" << cfg.classes << "\n";
  out << "seed=" << cfg.seed << "\n";
  return out.str();
}

Ss2dOptions options_from_config(const ModelConfig& cfg) {
  Ss2dOptions opt;
  opt.dirs = direction_subset(cfg.directions);
  opt.norm = KernelNorm::ContinuousA;
  opt.weights = cfg.tsm ? WeightSpec::learned() : WeightSpec::uniform();
  return opt;
}

ModelParams init_model(const ModelConfig& cfg) {
  Rng rng(cfg.seed);
  ModelParams p;
  p.encoder = init_encoder_params(cfg.in_channels, cfg.stages, cfg.d_state, cfg.gate,
                                  cfg.per_direction_params, cfg.directions, cfg.ffn_ratio,
                                  rng);
  const int c_last = cfg.stages.back().channels;
  p.head_w = Tensor({static_cast<std::size_t>(cfg.classes), static_cast<std::size_t>(c_last)});
  p.head_b = Tensor({static_cast<std::size_t>(cfg.classes)});
  const double scale = 1.0 / std::sqrt(static_cast<double>(c_last));
  for (std::size_t i = 0; i < p.head_w.size(); ++i) p.head_w[i] = rng.normal() * scale;
  return p;
}

ModelParams zeros_like(const ModelParams& p) {
  ModelParams g;
  g.encoder = zeros_like(p.encoder);
  g.head_w = Tensor(p.head_w.shape());
  g.head_b = Tensor(p.head_b.shape());
  return g;
}

namespace {

struct ModelCache {
  EncoderCache encoder;
  Tensor features;  // (B, C) pooled
  Tensor enc_out_shape_probe;
  std::size_t out_h = 0, out_w = 0;
};

Tensor model_logits_cached(const FeatureMap& x, const ModelParams& p, const Ss2dOptions& opt,
                           IndexSetCache& index_sets, ModelCache* cache) {
  const FeatureMap enc =
      encoder_forward(x, p.encoder, opt, index_sets, cache ? &cache->encoder : nullptr);
  const std::size_t nb = enc.batch(), nc = enc.channels();
  const std::size_t hw = enc.height() * enc.width();

  Tensor feat({nb, nc});
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t c = 0; c < nc; ++c) {
      const double* src = enc.tensor.data() + (b * nc + c) * hw;
      double s = 0.0;
      for (std::size_t q = 0; q < hw; ++q) s += src[q];
      feat.at(b, c) = s / static_cast<double>(hw);
    }

  const std::size_t classes = p.head_b.size();
  Tensor logits({nb, classes});
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t k = 0; k < classes; ++k) {
      double s = p.head_b[k];
      const double* wrow = p.head_w.data() + k * nc;
      for (std::size_t c = 0; c < nc; ++c) s += wrow[c] * feat.at(b, c);
      logits.at(b, k) = s;
    }
  if (cache) {
    cache->features = std::move(feat);
    cache->out_h = enc.height();
    cache->out_w = enc.width();
  }
  return logits;
}

// returns mean loss over the batch; fills grads scaled by 1/B when requested
double model_loss_impl(const FeatureMap& x, const std::vector<int>& labels,
                       const ModelParams& p, const Ss2dOptions& opt,
                       IndexSetCache& index_sets, ModelParams* grads, int* correct_out) {
  ModelCache cache;
  const Tensor logits = model_logits_cached(x, p, opt, index_sets, grads ? &cache : nullptr);
  const std::size_t nb = logits.dim(0), classes = logits.dim(1);
  const double inv_b = 1.0 / static_cast<double>(nb);

  Tensor dlogits(logits.shape());
  double loss = 0.0;
  int correct = 0;
  for (std::size_t b = 0; b < nb; ++b) {
    double m = logits.at(b, static_cast<std::size_t>(0));
    for (std::size_t k = 1; k < classes; ++k) m = std::max(m, logits.at(b, k));
    double z = 0.0;
    for (std::size_t k = 0; k < classes; ++k) z += std::exp(logits.at(b, k) - m);
    const int label = labels[b];
    loss += -(logits.at(b, static_cast<std::size_t>(label)) - m - std::log(z));
    std::size_t argmax = 0;
    for (std::size_t k = 1; k < classes; ++k)
      if (logits.at(b, k) > logits.at(b, argmax)) argmax = k;
    if (static_cast<int>(argmax) == label) ++correct;
    for (std::size_t k = 0; k < classes; ++k) {
      const double prob = std::exp(logits.at(b, k) - m) / z;
      dlogits.at(b, k) = (prob - (static_cast<int>(k) == label ? 1.0 : 0.0)) * inv_b;
    }
  }
  loss *= inv_b;
  if (correct_out) *correct_out = correct;
  if (!grads) return loss;

  // head backward
  const std::size_t nc = cache.features.dim(1);
  Tensor dfeat({nb, nc});
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t k = 0; k < classes; ++k) {
      const double g = dlogits.at(b, k);
      const double* wrow = p.head_w.data() + k * nc;
      double* gwrow = grads->head_w.data() + k * nc;
      grads->head_b[k] += g;
      for (std::size_t c = 0; c < nc; ++c) {
        gwrow[c] += g * cache.features.at(b, c);
        dfeat.at(b, c) += g * wrow[c];
      }
    }

  // mean-pool backward into the encoder output grid
  const std::size_t hw = cache.out_h * cache.out_w;
  Tensor g_enc({nb, nc, cache.out_h, cache.out_w});
  const double inv_hw = 1.0 / static_cast<double>(hw);
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t c = 0; c < nc; ++c) {
      double* dst = g_enc.data() + (b * nc + c) * hw;
      const double g = dfeat.at(b, c) * inv_hw;
      for (std::size_t q = 0; q < hw; ++q) dst[q] = g;
    }
  encoder_backward(g_enc, cache.encoder, p.encoder, opt, index_sets, grads->encoder);
  return loss;
}

FeatureMap assemble_batch(const ToyDataset& data, const std::vector<int>& ids,
                          std::size_t from, std::size_t to) {
  const std::size_t nb = to - from;
  const Tensor& first = data.samples[ids[from]];
  const std::size_t nc = first.dim(1), nh = first.dim(2), nw = first.dim(3);
  Tensor batch({nb, nc, nh, nw});
  for (std::size_t b = 0; b < nb; ++b) {
    const Tensor& s = data.samples[ids[from + b]];
    std::copy(s.data(), s.data() + s.size(), batch.data() + b * nc * nh * nw);
  }
  return FeatureMap(std::move(batch));
}

}  // namespace

Tensor model_logits(const FeatureMap& x, const ModelParams& p, const Ss2dOptions& opt,
                    IndexSetCache& index_sets) {
  return model_logits_cached(x, p, opt, index_sets, nullptr);
}

void save_model(const std::filesystem::path& dir, const ModelParams& params,
                const ModelConfig& cfg) {
  std::filesystem::create_directories(dir);
  std::ostringstream manifest;
  visit_params(const_cast<ModelParams&>(params), "model",
               [&](const std::string& name, Tensor& t) {
                 manifest << name;
                 for (std::size_t d = 0; d < t.rank(); ++d) manifest << " " << t.dim(d);
                 manifest << "\n";
                 tensor_save(t, dir / (name + ".oten"));
               });
  std::ofstream mf(dir / "manifest.txt", std::ios::trunc);
  if (!mf) throw std::runtime_error("cannot write manifest in " + dir.string());
  mf << manifest.str();
  std::ofstream cf(dir / "config.txt", std::ios::trunc);
  if (!cf) throw std::runtime_error("cannot write config in " + dir.string());
  cf << model_config_to_text(cfg);
}

ModelParams load_model(const std::filesystem::path& dir, ModelConfig* cfg_out) {
  const ModelConfig cfg = model_config_from_kv(parse_kv_file(dir / "config.txt"));
  ModelParams params = init_model(cfg);

  std::ifstream mf(dir / "manifest.txt");
  if (!mf) throw std::runtime_error("cannot open manifest in " + dir.string());
  std::map<std::string, std::vector<std::size_t>> listed;
  std::string line;
  while (std::getline(mf, line)) {
    std::istringstream ss(line);
    std::string name;
    if (!(ss >> name)) continue;
    std::vector<std::size_t> dims;
    std::size_t d;
    while (ss >> d) dims.push_back(d);
    listed[name] = dims;
  }

  visit_params(params, "model", [&](const std::string& name, Tensor& t) {
    const auto it = listed.find(name);
    if (it == listed.end())
      throw std::runtime_error("manifest is missing tensor " + name);
    Tensor loaded = tensor_load(dir / (name + ".oten"));
    if (loaded.shape() != t.shape() || loaded.shape() != it->second)
      throw std::runtime_error("tensor " + name + " has unexpected shape");
    t = std::move(loaded);
  });
  if (cfg_out) *cfg_out = cfg;
  return params;
}

TrainResult toy_train(const TrainConfig& cfg, const ToyDataset& train,
                      const ToyDataset& eval) {
  if (cfg.epochs < 1 || cfg.batch_size < 1 || train.samples.empty())
    throw std::invalid_argument("invalid training configuration");

  ModelConfig mc;
  mc.stages = {{cfg.blocks, cfg.channels}};
  mc.in_channels = 1;
  mc.d_state = cfg.d_state;
  mc.gate = cfg.gate;
  mc.per_direction_params = cfg.per_direction_params;
  mc.directions = cfg.directions;
  mc.tsm = cfg.tsm;
  mc.ffn_ratio = cfg.ffn_ratio;
  mc.seed = cfg.seed;
  const Ss2dOptions opt = options_from_config(mc);

  ModelParams params = init_model(mc);
  IndexSetCache index_sets;
  Rng shuffle_rng(cfg.seed ^ 0x5bd1e995u);

  std::vector<Tensor*> param_tensors;
  visit_params(params, "model",
               [&](const std::string&, Tensor& t) { param_tensors.push_back(&t); });

  const int ckpt_every =
      cfg.checkpoint_every > 0 ? cfg.checkpoint_every : std::max(1, cfg.epochs / 6);

  TrainResult result;
  result.model_config = mc;
  std::vector<int> order(train.samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    // Fisher-Yates with the run's generator
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[shuffle_rng.uniform_int(0, static_cast<int>(i) - 1)]);

    double loss_sum = 0.0;
    int correct = 0;
    std::size_t seen = 0;
    for (std::size_t from = 0; from < order.size(); from += cfg.batch_size) {
      const std::size_t to = std::min(order.size(), from + cfg.batch_size);
      const FeatureMap batch = assemble_batch(train, order, from, to);
      std::vector<int> labels(to - from);
      for (std::size_t b = 0; b < labels.size(); ++b) labels[b] = train.labels[order[from + b]];

      ModelParams grads = zeros_like(params);
      int batch_correct = 0;
      const double loss = model_loss_and_backward(batch, labels, params, opt, index_sets,
                                                  grads, &batch_correct);
      if (!std::isfinite(loss))
        throw std::runtime_error("training diverged (non-finite loss) at epoch " +
                                 std::to_string(epoch));
      loss_sum += loss * static_cast<double>(to - from);
      correct += batch_correct;
      seen += to - from;

      std::vector<Tensor*> grad_tensors;
      visit_params(grads, "model",
                   [&](const std::string&, Tensor& t) { grad_tensors.push_back(&t); });
      for (std::size_t i = 0; i < param_tensors.size(); ++i) {
        Tensor& p = *param_tensors[i];
        const Tensor& g = *grad_tensors[i];
        for (std::size_t j = 0; j < p.size(); ++j) p[j] -= cfg.learning_rate * g[j];
      }
    }

    const double eval_acc = eval_accuracy(params, opt, eval, index_sets);
    const auto t1 = std::chrono::steady_clock::now();
    TrainLogRow row;
    row.epoch = epoch;
    row.train_loss = loss_sum / static_cast<double>(seen);
    row.train_acc = static_cast<double>(correct) / static_cast<double>(seen);
    row.eval_acc = eval_acc;
    row.seconds = std::chrono::duration<double>(t1 - t0).count();
    result.log.push_back(row);

    if (!cfg.checkpoint_dir.empty() && (epoch % ckpt_every == 0 || epoch == cfg.epochs))
      save_model(cfg.checkpoint_dir / ("epoch_" + std::to_string(epoch)), params, mc);
  }

  result.params = std::move(params);
  return result;
}

double eval_accuracy(const ModelParams& p, const Ss2dOptions& opt, const ToyDataset& data,
                     IndexSetCache& index_sets) {
  if (data.samples.empty()) return 0.0;
  std::vector<int> ids(data.samples.size());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int>(i);
  int correct = 0;
  const std::size_t chunk = 50;
  for (std::size_t from = 0; from < ids.size(); from += chunk) {
    const std::size_t to = std::min(ids.size(), from + chunk);
    const FeatureMap batch = assemble_batch(data, ids, from, to);
    const Tensor logits = model_logits(batch, p, opt, index_sets);
    for (std::size_t b = 0; b < to - from; ++b) {
      std::size_t argmax = 0;
      for (std::size_t k = 1; k < logits.dim(1); ++k)
        if (logits.at(b, k) > logits.at(b, argmax)) argmax = k;
      if (static_cast<int>(argmax) == data.labels[from + b]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(ids.size());
}

double max_weight_divergence(const ModelParams& p, const Ss2dOptions& opt,
                             const ToyDataset& data, int max_samples,
                             IndexSetCache& index_sets) {
  const std::size_t n = std::min<std::size_t>(max_samples, data.samples.size());
  double worst = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    EncoderCache cache;
    encoder_forward(FeatureMap(data.samples[i]), p.encoder, opt, index_sets, &cache);
    for (const auto& stage : cache.stages)
      for (const BlockCache& bc : stage.blocks) {
        const Tensor& w = bc.ss2d.weights;
        const double uniform = 1.0 / static_cast<double>(w.dim(1));
        for (std::size_t j = 0; j < w.size(); ++j)
          worst = std::max(worst, std::fabs(w[j] - uniform));
      }
  }
  return worst;
}

void write_train_log_csv(const std::filesystem::path& path,
                         const std::vector<TrainLogRow>& rows) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << "epoch,train_loss,train_acc,eval_acc,seconds\n";
  for (const TrainLogRow& r : rows)
    f << r.epoch << "," << format_double(r.train_loss) << "," << format_double(r.train_acc)
      << "," << format_double(r.eval_acc) << "," << format_double(r.seconds) << "\n";
}

std::vector<BenchRow> bench_scaling(const std::vector<int>& sizes, int reps, int channels,
                                    int d_state, uint64_t seed) {
  for (std::size_t i = 1; i < sizes.size(); ++i)
    if (sizes[i] <= sizes[i - 1])
      throw std::invalid_argument("bench sizes must be strictly ascending");

  std::vector<BenchRow> rows;
  Rng rng(seed);
  for (const int side : sizes) {
    const ScanIndexSet s = build_index_set(side, side);
    Rng prng(seed ^ static_cast<uint64_t>(side));
    const Ss2dParams params = init_ss2d_params(channels, d_state,
                                               GateParams::Mode::AffineSigmoid, false,
                                               kNumDirections, prng);
    Ss2dOptions opt;
    Tensor x({1, static_cast<std::size_t>(channels), static_cast<std::size_t>(side),
              static_cast<std::size_t>(side)});
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.normal();
    const FeatureMap fm(x);

    o_ss2d(fm, params, opt, s);  // warm-up
    std::vector<double> times(reps);
    for (int r = 0; r < reps; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      const FeatureMap out = o_ss2d(fm, params, opt, s);
      const auto t1 = std::chrono::steady_clock::now();
      times[r] = std::chrono::duration<double>(t1 - t0).count() + 0.0 * out.tensor[0];
    }
    std::sort(times.begin(), times.end());
    const double median = (reps % 2 == 1) ? times[reps / 2]
                                          : 0.5 * (times[reps / 2 - 1] + times[reps / 2]);
    rows.push_back({side * side, median});
  }
  return rows;
}

void write_bench_csv(const std::filesystem::path& path, const std::vector<BenchRow>& rows) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << "hw,median_seconds\n";
  for (const BenchRow& r : rows) f << r.hw << "," << format_double(r.median_seconds) << "\n";
}

std::vector<BenchRow> read_bench_csv(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::vector<BenchRow> rows;
  std::string line;
  if (!std::getline(f, line) || line != "hw,median_seconds")
    throw std::runtime_error("bad bench csv header in " + path.string());
  while (std::getline(f, line)) {
    if (trim(line).empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw std::runtime_error("bad bench csv row: " + line);
    rows.push_back({std::stoi(line.substr(0, comma)), std::stod(line.substr(comma + 1))});
  }
  return rows;
}

PairOperatorOutputs emit_pair_operator_heatmaps(int height, int width,
                                                const std::filesystem::path& out_dir,
                                                uint64_t seed) {
  if (height * width > 400)
    throw std::invalid_argument("dense operators are capped at H*W <= 400");
  std::filesystem::create_directories(out_dir);

  Rng rng(seed);
  Ss2dParams params = init_ss2d_params(1, 2, GateParams::Mode::ConstantOne, false,
                                       kNumDirections, rng);
  const ScanIndexSet s = build_index_set(height, width);
  const std::size_t hw = static_cast<std::size_t>(height) * width;

  const auto materialize_with = [&](const WeightSpec& spec) {
    Ss2dOptions opt;
    opt.weights = spec;
    const MapFn model = [&](const FeatureMap& in) { return o_ss2d(in, params, opt, s); };
    return materialize_operator(model, 1, height, width, seed ^ 0xabcd);
  };

  const std::pair<const char*, std::pair<int, int>> pairs[] = {
      {"row", {0, 1}}, {"col", {2, 3}}, {"diag_main", {4, 5}}, {"diag_anti", {6, 7}}};

  PairOperatorOutputs out;
  const auto emit = [&](const std::string& name, const Tensor& m) {
    Tensor mag(m.shape());
    for (std::size_t i = 0; i < m.size(); ++i) mag[i] = std::fabs(m[i]);
    const auto pgm = out_dir / (name + ".pgm");
    const auto oten = out_dir / (name + ".oten");
    heatmap_save_pgm(mag, pgm);
    tensor_save(m, oten);
    out.pgm_files.push_back(pgm);
    out.oten_files.push_back(oten);
  };

  for (const auto& [name, dirs] : pairs) {
    Tensor w({8, hw});
    for (std::size_t p = 0; p < hw; ++p) {
      w.at(static_cast<std::size_t>(dirs.first), p) = 0.5;
      w.at(static_cast<std::size_t>(dirs.second), p) = 0.5;
    }
    const EffectiveOperator op = materialize_with(WeightSpec::fixed_weights(w));
    emit(name, op.per_channel[0]);
  }
  const EffectiveOperator agg = materialize_with(WeightSpec::uniform());
  emit("aggregate", agg.per_channel[0]);
  return out;
}

}  // namespace octo
