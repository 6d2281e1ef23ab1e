#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "refuseg/data/data.hpp"
#include "refuseg/gradcore/adam.hpp"
#include "refuseg/losses/losses.hpp"
#include "refuseg/metrics/metrics.hpp"
#include "refuseg/model/model.hpp"

namespace refuseg::trainer {

namespace fs = std::filesystem;

struct TrainConfig {
  int epochs = 40;
  int batch_size = 4;
  double lr = 1e-4;
  double beta = 0.0;
  uint64_t seed = 0;
  // Steps between intermediate checkpoints; 0 writes only the final one.
  int checkpoint_every = 0;
  // Epochs between validation passes; 0 disables them.
  int eval_every = 0;
  double modality_dropout_p = 0.0;
  // Trailing cases of the dataset held out for validation.
  int val_cases = 0;
  // Stop after this many optimizer steps in total; 0 means no limit.
  int64_t max_steps = 0;
  bool augment = true;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

// Everything a run needs. Augmentation crop_size/final_size of 0 are resolved
// from the data: final = slice extent, crop = round(extent * 224 / 240).
// Model input extents of 0 likewise come from the data.
struct RunConfig {
  TrainConfig train;
  model::ModelConfig model{.input_height = 0, .input_width = 0};
  loss::LossWeights loss;
  loss::FocalParams focal;
  data::AugmentConfig augment{.crop_size = 0, .final_size = 0};

  void validate() const;
  bool operator==(const RunConfig&) const;
  loss::LossWeights weights() const;
  data::AugmentConfig augment_for(int64_t height, int64_t width) const;
};

struct StepRecord {
  int64_t step = 0;
  int64_t epoch = 0;
  double final_loss = 0.0;
  double dice = 0.0;
  double focal = 0.0;
  double contrastive = 0.0;
  double beta = 0.0;
  PresenceMask presence;

  std::string to_json() const;
};

struct EvalRecord {
  int64_t epoch = 0;
  std::string split;
  metrics::MetricsReport report;

  std::string to_json() const;
};

// Line-delimited run log; kept in memory and, when a path is set, appended to disk.
class RunLedger {
 public:
  RunLedger() = default;
  explicit RunLedger(const fs::path& path);

  void log_step(const StepRecord& r);
  void log_eval(const EvalRecord& r);
  void log_abort(const StepRecord& r, const std::string& reason);

  const std::vector<StepRecord>& steps() const { return steps_; }
  const std::vector<EvalRecord>& evals() const { return evals_; }

  static RunLedger read(const fs::path& path);

 private:
  void append(const std::string& line);

  std::optional<fs::path> path_;
  std::vector<StepRecord> steps_;
  std::vector<EvalRecord> evals_;
};

struct TrainState {
  model::Model model;
  grad::AdamState adam;
  int64_t step = 0;
  double beta = 0.0;
};

TrainState init_state(const RunConfig& cfg, int64_t height, int64_t width);

// Model tensors plus adam/m/*, adam/v/*, adam/step and meta/* entries.
grad::TensorMap checkpoint_entries(const TrainState& state);
TrainState state_from_entries(const grad::TensorMap& entries);
void save_checkpoint(const fs::path& path, const TrainState& state);
TrainState load_checkpoint(const fs::path& path);

// A case ready for the network: normalized slices in z order.
struct PreparedCase {
  std::string case_id;
  std::vector<data::ModalityStack> slices;
};

PreparedCase prepare_case(const fs::path& case_dir, const PresenceMask& presence, bool with_label = true);

// Modalities dropped for one training step (none unless modality_dropout_p > 0).
PresenceMask step_presence(const TrainConfig& cfg, int64_t step);

struct TrainResult {
  TrainState state;
  RunLedger ledger;
  fs::path final_checkpoint;
};

// Trains on every case under data_dir except the trailing val_cases. With
// `resume`, training continues from that checkpoint's step.
TrainResult train(const fs::path& data_dir, const RunConfig& cfg, const fs::path& out_dir,
                  const std::optional<fs::path>& resume = std::nullopt, std::ostream* log = nullptr);

// Eval-mode argmax labels per slice; ties go to the lower class.
std::vector<data::LabelMap> predict(model::Model& model, const std::vector<data::ModalityStack>& slices,
                                    const PresenceMask& presence);

PresenceMask presence_without(const std::set<Modality>& drop);

std::vector<data::LabelMap> infer(model::Model& model, const fs::path& case_dir, const std::set<Modality>& drop);
std::vector<data::LabelMap> infer(const fs::path& checkpoint, const fs::path& case_dir,
                                  const std::set<Modality>& drop);

// Label stacks on disk: a uint8-valued float NIfTI volume, slices along z.
void write_labels(const fs::path& path, const std::vector<data::LabelMap>& labels);
std::vector<data::LabelMap> read_labels(const fs::path& path);

// Configurations in table order: full, then without t1, t1c, t2, flair.
std::vector<std::optional<Modality>> matrix_configurations();

struct MatrixResult {
  double beta = 0.0;
  std::vector<metrics::MetricsReport> cases;  // configuration-major, cases in order
  std::vector<metrics::MetricsReport> means;  // one per configuration, case_id "mean"
};

MatrixResult drop_modality_matrix(model::Model& model, double beta, const std::vector<fs::path>& case_dirs);
MatrixResult drop_modality_matrix(const fs::path& checkpoint, const fs::path& data_dir);

void write_report(const fs::path& path, const MatrixResult& result);
MatrixResult read_report(const fs::path& path);

// Side-by-side Dice / HD95 rows for the five configurations of two runs
// (typically beta = 0 and beta = 1), followed by the mean drop in WT Dice.
std::string comparison_table(const MatrixResult& without, const MatrixResult& with);

}  // namespace refuseg::trainer
