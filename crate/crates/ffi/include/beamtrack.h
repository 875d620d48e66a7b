#ifndef BEAMTRACK_H
#define BEAMTRACK_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum BtStatus {
  BT_STATUS_OK = 0,
  BT_STATUS_NULL_POINTER = 1,
  BT_STATUS_INVALID_ARGUMENT = 2,
  BT_STATUS_CONFIG = 3,
  BT_STATUS_IO = 4,
  BT_STATUS_NUMERICAL = 5,
  BT_STATUS_PANIC = 6,
} BtStatus;

typedef enum BtPreset {
  BT_PRESET_HIGHWAY = 0,
  BT_PRESET_T_SHAPED = 1,
} BtPreset;

typedef enum BtPolicy {
  BT_POLICY_PBVI = 0,
  BT_POLICY_MDP = 1,
  BT_POLICY_ER_MDP = 2,
  BT_POLICY_EXOS = 3,
  BT_POLICY_STSS = 4,
  BT_POLICY_GENIE = 5,
} BtPolicy;

typedef struct BtExperiment BtExperiment;

typedef struct BtFeedbackModel BtFeedbackModel;

typedef struct BtMdpPolicy BtMdpPolicy;

// Per-size feedback probabilities.
typedef struct BtFeedbackEntry {
  double eta;
  double p_corr;
  double p_md;
  double p_fa;
} BtFeedbackEntry;

// Campaign summary.
typedef struct BtMetrics {
  size_t episodes;
  double mean_se;
  double se_ci95;
  double bt_overhead;
  uint64_t total_bits;
  double episode_duration_s;
} BtMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the calling thread's last error message into `buf` (NUL
// terminated, truncated to `len`). Returns the full message length.
//
// # Safety
// `buf` must be null or valid for `len` bytes.
size_t bt_last_error_message(char *buf, size_t len);

// Calibrates detection thresholds for set sizes `1..=max_size`.
//
// # Safety
// `out` must be valid for writing one pointer.
enum BtStatus bt_feedback_calibrate(double snr_db,
                                    double rho_db,
                                    double l_sy,
                                    size_t max_size,
                                    struct BtFeedbackModel **out);

// Probabilities for scans of `size` beams.
//
// # Safety
// `model` must come from [`bt_feedback_calibrate`]; `out` must be writable.
enum BtStatus bt_feedback_entry(const struct BtFeedbackModel *model,
                                size_t size,
                                struct BtFeedbackEntry *out);

// # Safety
// `model` must be null or come from [`bt_feedback_calibrate`], freed once.
void bt_feedback_free(struct BtFeedbackModel *model);

// Builds a preset experiment with `episodes` episodes and `seed`.
//
// # Safety
// `out` must be valid for writing one pointer.
enum BtStatus bt_experiment_new(enum BtPreset preset,
                                size_t episodes,
                                uint64_t seed,
                                struct BtExperiment **out);

// Builds an experiment from a TOML config string.
//
// # Safety
// `toml` must be a NUL-terminated string; `out` must be writable.
enum BtStatus bt_experiment_from_toml(const char *toml, struct BtExperiment **out);

// # Safety
// `exp` must come from a `bt_experiment_*` constructor; `out` writable.
enum BtStatus bt_experiment_n_states(const struct BtExperiment *exp, size_t *out);

// Runs the configured number of episodes of `policy` on the ground-truth
// model. Optimizes the policy on first use.
//
// # Safety
// `exp` must come from a `bt_experiment_*` constructor and not be shared
// across threads during the call; `out` writable.
enum BtStatus bt_experiment_run(struct BtExperiment *exp,
                                enum BtPolicy policy,
                                struct BtMetrics *out);

// # Safety
// `exp` must be null or come from a `bt_experiment_*` constructor, freed once.
void bt_experiment_free(struct BtExperiment *exp);

// Error-free value iteration for one frame prior of `n` states.
//
// # Safety
// `prior` must point to `n` doubles; `out` must be writable.
enum BtStatus bt_mdp_solve(const double *prior,
                           size_t n,
                           double se_ba,
                           size_t slots,
                           struct BtMdpPolicy **out);

// Expected frame SE of the policy under error-free feedback.
//
// # Safety
// `policy` must come from [`bt_mdp_solve`]; `out` writable.
enum BtStatus bt_mdp_value(const struct BtMdpPolicy *policy, double *out);

// # Safety
// `policy` must be null or come from [`bt_mdp_solve`], freed once.
void bt_mdp_free(struct BtMdpPolicy *policy);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BEAMTRACK_H */
