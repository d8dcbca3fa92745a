#ifndef REACHSAFE_H
#define REACHSAFE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RsStatus {
  RS_STATUS_OK = 0,
  RS_STATUS_NULL_POINTER = 1,
  RS_STATUS_INVALID_INPUT = 2,
  RS_STATUS_DATA = 3,
  RS_STATUS_DIVERGENCE = 4,
  RS_STATUS_IO = 5,
  RS_STATUS_PANIC = 6,
} RsStatus;

typedef struct RsCriticBank RsCriticBank;

typedef struct RsDataset RsDataset;

typedef struct RsEnvConfig RsEnvConfig;

typedef struct RsPolicy RsPolicy;

typedef struct RsState {
  double x;
  double y;
  double v;
  double theta;
} RsState;

typedef struct RsStepOutcome {
  struct RsState next;
  double reward;
  double cost;
  double h;
  bool done;
  bool reached_goal;
} RsStepOutcome;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *rs_last_error(void);

/**
 * Observation width of the toy environment.
 */
uintptr_t rs_obs_dim(void);

/**
 * Default environment configuration. Never null.
 */
struct RsEnvConfig *rs_env_config_default(void);

/**
 * # Safety
 * `json` must be a nul-terminated string and `out` writable.
 */
enum RsStatus rs_env_config_from_json(const char *json, struct RsEnvConfig **out);

/**
 * # Safety
 * `cfg` must come from this library and not be used afterwards.
 */
void rs_env_config_free(struct RsEnvConfig *cfg);

/**
 * Advances the environment by one step.
 *
 * # Safety
 * Pointers must be valid.
 */
enum RsStatus rs_env_step(const struct RsEnvConfig *cfg,
                          const struct RsState *state,
                          double accel,
                          double turn,
                          struct RsStepOutcome *out);

/**
 * Ground-truth feasibility of a state under the braking-and-turning-away
 * policy.
 *
 * # Safety
 * Pointers must be valid.
 */
enum RsStatus rs_oracle_feasible(const struct RsEnvConfig *cfg,
                                 const struct RsState *state,
                                 bool *out);

/**
 * Generates a behavior dataset with the scripted and random policies.
 *
 * # Safety
 * Pointers must be valid.
 */
enum RsStatus rs_dataset_generate(const struct RsEnvConfig *cfg,
                                  uintptr_t n_scripted,
                                  uintptr_t n_random,
                                  uint64_t seed,
                                  struct RsDataset **out);

/**
 * # Safety
 * `path` must be a nul-terminated string and `out` writable.
 */
enum RsStatus rs_dataset_load(const char *path, struct RsDataset **out);

/**
 * Writes the dataset and its manifest.
 *
 * # Safety
 * Pointers must be valid.
 */
enum RsStatus rs_dataset_save(const struct RsDataset *data, const char *path);

/**
 * Number of transitions; 0 for a null handle.
 *
 * # Safety
 * `data` must be null or valid.
 */
uintptr_t rs_dataset_len(const struct RsDataset *data);

/**
 * # Safety
 * `data` must come from this library and not be used afterwards.
 */
void rs_dataset_free(struct RsDataset *data);

/**
 * Loads critics from a checkpoint written by the training pipeline.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` writable.
 */
enum RsStatus rs_critic_bank_load(const char *path, struct RsCriticBank **out);

/**
 * Feasible value `V_h` for `n` row-major observations of width
 * `rs_obs_dim()`, written to `out[0..n]`.
 *
 * # Safety
 * `obs` must hold `n * rs_obs_dim()` values and `out` room for `n`.
 */
enum RsStatus rs_critic_bank_feasible_value(const struct RsCriticBank *bank,
                                            const double *obs,
                                            uintptr_t n,
                                            double *out);

/**
 * # Safety
 * `bank` must come from this library and not be used afterwards.
 */
void rs_critic_bank_free(struct RsCriticBank *bank);

/**
 * Loads a policy checkpoint written by the training pipeline.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` writable.
 */
enum RsStatus rs_policy_load(const char *path, struct RsPolicy **out);

/**
 * Samples `candidates` actions at `state`, keeps the one with the lowest
 * feasible `Q`, and writes `(accel, turn)` to `out[0..2]`. The same
 * `(seed, stream_id)` always yields the same action.
 *
 * # Safety
 * Pointers must be valid and `out` must have room for two values.
 */
enum RsStatus rs_policy_select_action(const struct RsPolicy *policy,
                                      const struct RsCriticBank *bank,
                                      const struct RsState *state,
                                      uintptr_t candidates,
                                      uint64_t seed,
                                      uint64_t stream_id,
                                      double *out);

/**
 * # Safety
 * `policy` must come from this library and not be used afterwards.
 */
void rs_policy_free(struct RsPolicy *policy);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* REACHSAFE_H */
