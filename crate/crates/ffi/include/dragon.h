#ifndef DRAGON_H
#define DRAGON_H

#pragma once

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DragonSide {
  DRAGON_SIDE_DEVICE = 0,
  DRAGON_SIDE_CLOUD = 1,
} DragonSide;

typedef enum DragonStatus {
  DRAGON_STATUS_OK = 0,
  DRAGON_STATUS_NULL_POINTER = 1,
  DRAGON_STATUS_INVALID_ARGUMENT = 2,
  DRAGON_STATUS_DISTRIBUTION = 3,
  DRAGON_STATUS_AGGREGATION = 4,
  DRAGON_STATUS_DECODER = 5,
  DRAGON_STATUS_TRANSPORT = 6,
  DRAGON_STATUS_SIMULATION = 7,
  DRAGON_STATUS_RUNTIME = 8,
  DRAGON_STATUS_IO = 9,
  DRAGON_STATUS_BUFFER_TOO_SMALL = 10,
  DRAGON_STATUS_PANIC = 11,
} DragonStatus;

typedef enum DragonStrategy {
  DRAGON_STRATEGY_DEVICE = 0,
  DRAGON_STRATEGY_CLOUD = 1,
  DRAGON_STRATEGY_RANDOM = 2,
  DRAGON_STRATEGY_DRAGON = 3,
} DragonStrategy;

// Opaque token distribution.
typedef struct DragonDist DragonDist;

// Opaque acceptance trace.
typedef struct DragonTrace DragonTrace;

typedef struct DragonOutcome {
  uint32_t target;
  bool accept_l;
  bool accept_r;
} DragonOutcome;

// Decode and one-way transmission costs in ms; `l` is the local side.
typedef struct DragonCosts {
  double c_dec_l;
  double c_dec_r;
  double c_trans_l;
  double c_trans_r;
} DragonCosts;

typedef struct DragonNet {
  double base_latency;
  double extra_latency;
  double jitter_amplitude;
  double jitter_period;
  // bytes per ms; zero or negative means unlimited.
  double bandwidth;
} DragonNet;

typedef struct DragonSimSummary {
  double total_time;
  size_t tokens;
  uint32_t switches;
} DragonSimSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the calling thread's last error message into `buf` (NUL
// terminated, truncated to `len`). Returns the full message length, or 0
// when there is none.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t dragon_last_error(char *buf, size_t len);

// Library version as a static NUL-terminated string.
const char *dragon_version(void);

// Builds a distribution from `len` non-negative weights.
//
// # Safety
// `weights` must point to `len` doubles and `out` must be writable.
enum DragonStatus dragon_dist_new(const double *weights, size_t len, struct DragonDist **out_dist);

// # Safety
// `dist` must be null or a handle from [`dragon_dist_new`] not yet freed.
void dragon_dist_free(struct DragonDist *dist);

// Probability of `token`.
//
// # Safety
// `dist` must be a live handle and `out_p` writable.
enum DragonStatus dragon_dist_prob(const struct DragonDist *dist, uint32_t token, double *out_p);

// Interpolation weights `(η^l, η^r)` from the two sides' corrected log weights.
//
// # Safety
// Output pointers must be writable.
enum DragonStatus dragon_eta(double h_l, double h_r, double *out_eta_l, double *out_eta_r);

// Aggregates drafts `x_l ~ p_l` and `x_r ~ p_r` with the step's seeded draws.
//
// # Safety
// Handles must be live and `out_outcome` writable.
enum DragonStatus dragon_aggregate(uint32_t x_l,
                                   const struct DragonDist *p_l,
                                   uint32_t x_r,
                                   const struct DragonDist *p_r,
                                   double eta_l,
                                   uint64_t seed,
                                   uint32_t step,
                                   struct DragonOutcome *out_outcome);

// Expected acceptance rate of side-l drafts.
//
// # Safety
// Handles must be live and `out_rate` writable.
enum DragonStatus dragon_expected_acceptance(const struct DragonDist *p_l,
                                             const struct DragonDist *p_r,
                                             double eta_r,
                                             double gamma_l,
                                             double *out_rate);

// Latency difference between aggregating locally and remotely; positive
// favours moving aggregation.
//
// # Safety
// `costs` must be readable and `out_dz` writable.
enum DragonStatus dragon_delta_z(const struct DragonCosts *costs,
                                 double alpha_l,
                                 double alpha_r,
                                 double *out_dz);

// Side that should aggregate next, given the current one.
//
// # Safety
// `costs` must be readable and `out_side` writable.
enum DragonStatus dragon_choose_side(enum DragonSide current,
                                     const struct DragonCosts *costs,
                                     double alpha_l,
                                     double alpha_r,
                                     enum DragonSide *out_side);

// Closed-form speedup over the token-wise synchronized baseline.
//
// # Safety
// `costs` must be readable and `out_s` writable.
enum DragonStatus dragon_theoretical_speedup(const struct DragonCosts *costs,
                                             double alpha_r,
                                             double *out_s);

// A trace of independent acceptances.
//
// # Safety
// `out_trace` must be writable.
enum DragonStatus dragon_trace_bernoulli(size_t tokens,
                                         double alpha_l,
                                         double alpha_r,
                                         uint64_t seed,
                                         struct DragonTrace **out_trace);

// A trace from per-step device and cloud acceptance flags.
//
// # Safety
// Both arrays must hold `tokens` entries and `out_trace` must be writable.
enum DragonStatus dragon_trace_from_flags(const bool *accept_l,
                                          const bool *accept_r,
                                          size_t tokens,
                                          struct DragonTrace **out_trace);

// # Safety
// `trace` must be null or a live trace handle.
void dragon_trace_free(struct DragonTrace *trace);

// Replays `trace`; `costs` are read with `l` = device, `r` = cloud. A null
// `net` means no extra latency.
//
// # Safety
// Pointers must be valid; `net` may be null.
enum DragonStatus dragon_simulate(const struct DragonTrace *trace,
                                  const struct DragonCosts *costs,
                                  const struct DragonNet *net,
                                  enum DragonStrategy strategy,
                                  uint64_t seed,
                                  struct DragonSimSummary *out_summary);

// Sequential generation over a synthetic corpus. Writes up to `capacity`
// tokens into `out_tokens` and the number generated into `out_len`.
//
// # Safety
// `out_tokens` must hold `capacity` entries; `out_len` must be writable.
enum DragonStatus dragon_generate_synthetic(size_t vocab,
                                            size_t docs,
                                            size_t topics,
                                            size_t prompt_len,
                                            size_t max_new_tokens,
                                            uint64_t seed,
                                            uint32_t *out_tokens,
                                            size_t capacity,
                                            size_t *out_len);

// Message type byte of the frame in `bytes`, after full validation.
//
// # Safety
// `bytes` must point to `len` readable bytes; `out_type` must be writable.
enum DragonStatus dragon_frame_type(const uint8_t *bytes, size_t len, uint8_t *out_type);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DRAGON_H */
