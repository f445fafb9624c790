#ifndef EBKIT_H
#define EBKIT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum EbkStatus {
  EBK_STATUS_OK = 0,
  EBK_STATUS_NULL_POINTER = 1,
  EBK_STATUS_INVALID_ARGUMENT = 2,
  EBK_STATUS_SHAPE = 3,
  EBK_STATUS_MASK = 4,
  EBK_STATUS_SEQUENCING = 5,
  EBK_STATUS_CONFIG = 6,
  EBK_STATUS_IO = 7,
  EBK_STATUS_FORMAT = 8,
  EBK_STATUS_DIVERGED = 9,
  EBK_STATUS_PANIC = 10,
} EbkStatus;

typedef struct EbkDetector EbkDetector;

typedef struct EbkMask EbkMask;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. The pointer is
 * valid until the next call into the library on this thread.
 */
const char *ebk_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ebk_version(void);

/**
 * Frees a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void ebk_string_free(char *s);

/**
 * Number of elements pruned from `n` at ratio `p`.
 */
size_t ebk_pruned_count(double p, size_t n);

/**
 * `(pruned - dense) / dense * 100`.
 */
double ebk_memory_percent_change(double dense_bytes, double pruned_bytes);

/**
 * Writes keep-bits for one weight buffer: the `floor(p·len)` smallest
 * magnitudes get 0, ties broken by position.
 *
 * # Safety
 * `values` and `keep_out` must each point to `len` elements.
 */
enum EbkStatus ebk_magnitude_keep_f32(double p, const float *values, size_t len, uint8_t *keep_out);

/**
 * Creates an empty mask at ratio `p` recorded at `epoch`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum EbkStatus ebk_mask_new(double p, size_t epoch, bool global, struct EbkMask **out);

/**
 * Appends a named tensor's keep-bits (0 or 1, row-major, `numel(shape)` bytes).
 *
 * # Safety
 * `shape` must hold `rank` extents and `keep` the product of them.
 */
enum EbkStatus ebk_mask_add_entry(struct EbkMask *mask,
                                  const char *name,
                                  const size_t *shape,
                                  size_t rank,
                                  const uint8_t *keep);

/**
 * Loads a mask saved as `<stem>.ebkt` plus `<stem>.json`.
 *
 * # Safety
 * `stem` must be a NUL-terminated path and `out` valid.
 */
enum EbkStatus ebk_mask_load(const char *stem, struct EbkMask **out);

/**
 * Saves `mask` as `<stem>.ebkt` plus `<stem>.json`.
 *
 * # Safety
 * `mask` must be a live handle and `stem` a NUL-terminated path.
 */
enum EbkStatus ebk_mask_save(const struct EbkMask *mask, const char *stem);

/**
 * Total and pruned element counts.
 *
 * # Safety
 * `mask` must be a live handle; the out pointers valid.
 */
enum EbkStatus ebk_mask_counts(const struct EbkMask *mask, size_t *total, size_t *pruned);

/**
 * Normalized Hamming distance between two masks of equal layout and ratio.
 *
 * # Safety
 * Both handles must be live and `out` valid.
 */
enum EbkStatus ebk_mask_distance(const struct EbkMask *a, const struct EbkMask *b, double *out);

/**
 * # Safety
 * `mask` must be null or a handle not yet freed.
 */
void ebk_mask_free(struct EbkMask *mask);

/**
 * Creates a streaming detector.
 *
 * # Safety
 * `out` must be valid.
 */
enum EbkStatus ebk_detector_new(double epsilon,
                                size_t window,
                                size_t max_epochs,
                                struct EbkDetector **out);

/**
 * Feeds the mask for `epoch` (1, 2, ... in order). The mask is copied.
 * `found` is set once the detector has fired.
 *
 * # Safety
 * Handles must be live; `found` may be null.
 */
enum EbkStatus ebk_detector_observe(struct EbkDetector *detector,
                                    size_t epoch,
                                    const struct EbkMask *mask,
                                    bool *found);

/**
 * Ticket epoch, or 0 while still searching.
 *
 * # Safety
 * `detector` must be a live handle.
 */
size_t ebk_detector_ticket_epoch(const struct EbkDetector *detector);

/**
 * Copies up to `cap` recorded distances (index `i` is epoch `i + 2`) and
 * stores the total count in `len`.
 *
 * # Safety
 * `buf` must hold `cap` doubles (may be null when `cap` is 0).
 */
enum EbkStatus ebk_detector_distances(const struct EbkDetector *detector,
                                      double *buf,
                                      size_t cap,
                                      size_t *len);

/**
 * # Safety
 * `detector` must be null or a handle not yet freed.
 */
void ebk_detector_free(struct EbkDetector *detector);

/**
 * Offline detection over a distance series (`distances[i]` is epoch `i + 2`).
 * Writes the ticket epoch, or 0 if the rule never fires.
 *
 * # Safety
 * `distances` must hold `len` doubles; `ticket_epoch` must be valid.
 */
enum EbkStatus ebk_detect_offline(const double *distances,
                                  size_t len,
                                  double epsilon,
                                  size_t window,
                                  size_t max_epochs,
                                  size_t *ticket_epoch);

/**
 * Runs search, retrain and baseline for a TOML experiment config and
 * returns the report as JSON. A diverged run still yields a report (its
 * `status` says so) together with `EBK_DIVERGED`.
 *
 * # Safety
 * `config_toml` must be NUL-terminated; `report_json` valid. Free the
 * returned string with [`ebk_string_free`].
 */
enum EbkStatus ebk_run_pipeline(const char *config_toml, char **report_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EBKIT_H */
