#ifndef HFRES_H
#define HFRES_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum HfresStatus {
  HFRES_STATUS_OK = 0,
  /**
   * Null pointer, bad size or malformed text argument.
   */
  HFRES_STATUS_INVALID_ARGUMENT = 1,
  /**
   * Invalid configuration or network specification.
   */
  HFRES_STATUS_CONFIG = 2,
  /**
   * Unreadable or corrupt input file.
   */
  HFRES_STATUS_IO = 3,
  /**
   * Checkpoint written for a different network.
   */
  HFRES_STATUS_SPEC_MISMATCH = 4,
  /**
   * Any other engine error.
   */
  HFRES_STATUS_ENGINE = 5,
  /**
   * A Rust panic was caught at the boundary.
   */
  HFRES_STATUS_PANIC = 6,
} HfresStatus;

/**
 * Opaque two-scale network with the normalization of its checkpoint.
 */
typedef struct HfresNetwork HfresNetwork;

/**
 * Fractions of images correct under both heads (a), only the low head (b),
 * only the high head (c) and neither (d).
 */
typedef struct HfresRegions {
  double a;
  double b;
  double c;
  double d;
  double upper_bound;
} HfresRegions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after successes
 * that followed no failure. Valid until the next failing call.
 */
const char *hfres_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *hfres_version(void);

/**
 * Builds an untrained network from a JSON experiment configuration.
 *
 * # Safety
 * `config_json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum HfresStatus hfres_network_new(const char *config_json, struct HfresNetwork **out);

/**
 * Releases a handle from [`hfres_network_new`]; null is ignored.
 *
 * # Safety
 * `net` must be null or a handle not yet freed.
 */
void hfres_network_free(struct HfresNetwork *net);

/**
 * Loads parameters and normalization statistics from a checkpoint file.
 *
 * # Safety
 * `net` must be a live handle and `path` a NUL-terminated string.
 */
enum HfresStatus hfres_network_load_checkpoint(struct HfresNetwork *net, const char *path);

/**
 * Input geometry: channels and the high (full) resolution. The low branch
 * runs on the 2×2 average-pooled input.
 *
 * # Safety
 * `net` must be a live handle; output pointers must be valid.
 */
enum HfresStatus hfres_network_input_shape(const struct HfresNetwork *net,
                                           size_t *channels,
                                           size_t *resolution);

/**
 * Per-image MACs of the low branch and the additional high branch.
 *
 * # Safety
 * `net` must be a live handle; output pointers must be valid.
 */
enum HfresStatus hfres_network_costs(const struct HfresNetwork *net,
                                     uint64_t *f_low,
                                     uint64_t *f_high);

/**
 * Early-exit classification of `n` images laid out `[n, C, H, W]` with
 * pixel values in `[0, 1]`. Images whose low-branch confidence is at least
 * `threshold` stop there; a negative `threshold` sends every image through
 * the high branch. `used_high` and `scores` may be null.
 *
 * # Safety
 * `images` must hold `n·C·H·W` floats and `classes` room for `n` entries
 * (likewise `used_high` and `scores` when non-null).
 */
enum HfresStatus hfres_network_predict(const struct HfresNetwork *net,
                                       const float *images,
                                       size_t n,
                                       double threshold,
                                       uint32_t *classes,
                                       uint8_t *used_high,
                                       double *scores);

/**
 * Region decomposition of `n` evaluation records.
 *
 * # Safety
 * `pred_low`, `pred_high` and `labels` must hold `n` entries; `out` must be
 * valid.
 */
enum HfresStatus hfres_regions(const uint32_t *pred_low,
                               const uint32_t *pred_high,
                               const uint32_t *labels,
                               size_t n,
                               struct HfresRegions *out);

/**
 * Share of spectral energy outside the central band of a `[C, H, W]`
 * feature map.
 *
 * # Safety
 * `features` must hold `c·h·w` doubles and `out` must be valid.
 */
enum HfresStatus hfres_spectrum_hf_ratio(const double *features,
                                         size_t c,
                                         size_t h,
                                         size_t w,
                                         double band_radius,
                                         double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HFRES_H */
