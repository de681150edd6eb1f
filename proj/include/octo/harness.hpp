#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "octo/analysis.hpp"
#include "octo/dataset.hpp"
#include "octo/omodule.hpp"

namespace octo {

// ---------------------------------------------------------------------------
// Flat key=value text config ('#' comments, blank lines ignored).

std::map<std::string, std::string> parse_kv_file(const std::filesystem::path& path);
std::map<std::string, std::string> parse_kv_text(const std::string& text);

/// Architecture description shared by the CLI and the training harness.
struct ModelConfig {
  std::vector<StageSpec> stages = {{1, 8}};  // "BxC" entries in config text
  int in_channels = 1;
  int d_state = 4;
  GateParams::Mode gate = GateParams::Mode::AffineSigmoid;
  bool per_direction_params = false;
  int directions = 8;
  bool tsm = true;
  int ffn_ratio = 2;
  int classes = 4;
  uint64_t seed = 1;
};

ModelConfig model_config_from_kv(const std::map<std::string, std::string>& kv);
std::string model_config_to_text(const ModelConfig& cfg);

Ss2dOptions options_from_config(const ModelConfig& cfg);

// ---------------------------------------------------------------------------
// Toy classifier: encoder, global mean pool, linear head.

struct ModelParams {
  EncoderParams encoder;
  Tensor head_w;  // (classes, C_last)
  Tensor head_b;  // (classes)
};

ModelParams init_model(const ModelConfig& cfg);
ModelParams zeros_like(const ModelParams& p);

template <typename Fn>
void visit_params(ModelParams& p, const std::string& prefix, Fn&& fn) {
  visit_params(p.encoder, prefix + ".encoder", fn);
  fn(prefix + ".head_w", p.head_w);
  fn(prefix + ".head_b", p.head_b);
}

/// Class logits for a batch, shape (B, classes).
Tensor model_logits(const FeatureMap& x, const ModelParams& p, const Ss2dOptions& opt,
                    IndexSetCache& index_sets);

/// Mean softmax cross-entropy over the batch. When `grads` is non-null the
/// full backward pass accumulates 1/B-scaled gradients into it.
double model_loss(const FeatureMap& x, const std::vector<int>& labels,
                  const ModelParams& p, const Ss2dOptions& opt, IndexSetCache& index_sets,
                  ModelParams* grads = nullptr, int* correct = nullptr);

/// Model directory layout: manifest.txt with "name dim dim ..." lines,
/// config.txt, and one <name>.oten per parameter tensor.
void save_model(const std::filesystem::path& dir, const ModelParams& params,
                const ModelConfig& cfg);
ModelParams load_model(const std::filesystem::path& dir, ModelConfig* cfg_out = nullptr);

// ---------------------------------------------------------------------------
// Training.

struct TrainConfig {
  int directions = 8;
  bool tsm = true;
  int epochs = 30;
  double learning_rate = 0.05;
  int batch_size = 16;
  uint64_t seed = 1;
  int channels = 8;
  int d_state = 4;
  int blocks = 1;
  GateParams::Mode gate = GateParams::Mode::AffineSigmoid;
  bool per_direction_params = false;
  int ffn_ratio = 2;
  int checkpoint_every = 0;             // 0 picks max(1, epochs / 6)
  std::filesystem::path checkpoint_dir; // empty disables checkpoints
};

struct TrainLogRow {
  int epoch;
  double train_loss;
  double train_acc;
  double eval_acc;
  double seconds;
};

struct TrainResult {
  ModelParams params;
  ModelConfig model_config;
  std::vector<TrainLogRow> log;
};

/// Plain SGD on softmax cross-entropy. Throws if the loss leaves the reals,
/// naming the epoch.
TrainResult toy_train(const TrainConfig& cfg, const ToyDataset& train,
                      const ToyDataset& eval);

double eval_accuracy(const ModelParams& p, const Ss2dOptions& opt, const ToyDataset& data,
                     IndexSetCache& index_sets);

/// Largest |w - 1/K| over the fusion weights observed on up to `max_samples`
/// inputs; zero when the weights are frozen uniform.
double max_weight_divergence(const ModelParams& p, const Ss2dOptions& opt,
                             const ToyDataset& data, int max_samples,
                             IndexSetCache& index_sets);

void write_train_log_csv(const std::filesystem::path& path,
                         const std::vector<TrainLogRow>& rows);

// ---------------------------------------------------------------------------
// Wall-clock scaling of the o_ss2d forward pass.

struct BenchRow {
  int hw;
  double median_seconds;
};

std::vector<BenchRow> bench_scaling(const std::vector<int>& sizes, int reps, int channels,
                                    int d_state, uint64_t seed);
void write_bench_csv(const std::filesystem::path& path, const std::vector<BenchRow>& rows);
std::vector<BenchRow> read_bench_csv(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Per-direction-pair operator heatmaps plus the aggregate, rendered as |M|.

struct PairOperatorOutputs {
  std::vector<std::filesystem::path> pgm_files;
  std::vector<std::filesystem::path> oten_files;
};

/// Emits row/col/two-diagonal bidirectional-pair operators and their
/// aggregate for a gate-free single-channel scan. Dense matrices, so the
/// grid is capped at H*W <= 400.
PairOperatorOutputs emit_pair_operator_heatmaps(int height, int width,
                                                const std::filesystem::path& out_dir,
                                                uint64_t seed);

}  // namespace octo
