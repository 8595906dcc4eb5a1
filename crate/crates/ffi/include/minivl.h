#ifndef MINIVL_H
#define MINIVL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MvStatus {
  MV_STATUS_OK = 0,
  MV_STATUS_NULL_POINTER = 1,
  MV_STATUS_INVALID_UTF8 = 2,
  MV_STATUS_INVALID_ARGUMENT = 3,
  MV_STATUS_CONFIG = 4,
  MV_STATUS_SCHEDULE = 5,
  MV_STATUS_PARSE = 6,
  MV_STATUS_IO = 7,
  MV_STATUS_BUFFER_TOO_SMALL = 8,
  MV_STATUS_INTERNAL = 9,
} MvStatus;

/**
 * Stage verdict as an integer: 0 OK, 1 gradient vanish, 2 non-finite.
 */
typedef enum MvOutcome {
  MV_OUTCOME_OK = 0,
  MV_OUTCOME_GRADIENT_VANISH = 1,
  MV_OUTCOME_NON_FINITE = 2,
} MvOutcome;

/**
 * Learning-rate curve of one stage.
 */
typedef struct MvSchedule MvSchedule;

/**
 * A validated run configuration and the reports of its last run.
 */
typedef struct MvTrainer MvTrainer;

/**
 * Byte-level vocabulary with special tokens.
 */
typedef struct MvVocab MvVocab;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *mv_last_error(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void mv_string_free(char *s);

/**
 * Learning-rate schedule of `stage` (1 to 4) with step counts divided by
 * `scale_divisor`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum MvStatus mv_schedule_for_stage(size_t stage, size_t scale_divisor, struct MvSchedule **out);

/**
 * # Safety
 * `s` must be a live schedule handle and `out` a valid pointer.
 */
enum MvStatus mv_schedule_total_steps(const struct MvSchedule *s, size_t *out);

/**
 * Learning rate at `step`, defined on `0..=total_steps`.
 *
 * # Safety
 * `s` must be a live schedule handle and `out` a valid pointer.
 */
enum MvStatus mv_schedule_lr(const struct MvSchedule *s, size_t step, double *out);

/**
 * # Safety
 * `s` must be null or a live schedule handle; it is invalid afterwards.
 */
void mv_schedule_free(struct MvSchedule *s);

/**
 * # Safety
 * `out` must be a valid pointer.
 */
enum MvStatus mv_vocab_new(struct MvVocab **out);

/**
 * # Safety
 * `v` must be a live vocab handle and `out` a valid pointer.
 */
enum MvStatus mv_vocab_size(const struct MvVocab *v, size_t *out);

/**
 * Encodes `text`. `*out_len` receives the id count; ids are written to
 * `ids` only when `capacity` is large enough, otherwise the call returns
 * `BufferTooSmall`. Pass `ids = NULL, capacity = 0` to query the length.
 *
 * # Safety
 * `v` must be live, `text` a nul-terminated string, `ids` valid for
 * `capacity` writes, `out_len` a valid pointer.
 */
enum MvStatus mv_vocab_encode(const struct MvVocab *v,
                              const char *text,
                              uint32_t *ids,
                              size_t capacity,
                              size_t *out_len);

/**
 * Decodes `len` ids into a newly allocated string.
 *
 * # Safety
 * `v` must be live, `ids` valid for `len` reads, `out` a valid pointer.
 */
enum MvStatus mv_vocab_decode(const struct MvVocab *v, const uint32_t *ids, size_t len, char **out);

/**
 * # Safety
 * `v` must be null or a live vocab handle; it is invalid afterwards.
 */
void mv_vocab_free(struct MvVocab *v);

/**
 * Renders one JSON-encoded sample as training text. `multitask` selects
 * whether the task token is included.
 *
 * # Safety
 * `sample_json` must be a nul-terminated string and `out` a valid pointer.
 */
enum MvStatus mv_render_sample(const char *sample_json, bool multitask, char **out);

/**
 * Scales a pixel box in a `width`×`height` frame to integers in
 * `[0, 100]`, written to `out[0..4]`.
 *
 * # Safety
 * `out` must be valid for four writes.
 */
enum MvStatus mv_normalize_box(double x1,
                               double y1,
                               double x2,
                               double y2,
                               double width,
                               double height,
                               uint32_t *out);

/**
 * Runs the finite-difference battery; `*out_max_rel_error` receives the
 * largest relative error over all components.
 *
 * # Safety
 * `out_max_rel_error` must be a valid pointer.
 */
enum MvStatus mv_gradcheck(double *out_max_rel_error);

/**
 * Parses and validates a TOML run configuration.
 *
 * # Safety
 * `toml` must be a nul-terminated string and `out` a valid pointer.
 */
enum MvStatus mv_trainer_from_toml(const char *toml, struct MvTrainer **out);

/**
 * Trains a fresh model through the configured stages. One JSON record
 * per step goes to `metrics_path` when it is not null. `*out_outcome`
 * receives the worst stage verdict.
 *
 * # Safety
 * `t` must be live, `metrics_path` null or a nul-terminated string,
 * `out_outcome` a valid pointer.
 */
enum MvStatus mv_trainer_run(struct MvTrainer *t,
                             const char *metrics_path,
                             enum MvOutcome *out_outcome);

/**
 * Number of stages reported by the last run.
 *
 * # Safety
 * `t` must be live and `out` a valid pointer.
 */
enum MvStatus mv_trainer_stage_count(const struct MvTrainer *t, size_t *out);

/**
 * Verdict, steps run and final loss of stage `index` of the last run.
 *
 * # Safety
 * `t` must be live and every out pointer valid.
 */
enum MvStatus mv_trainer_stage_result(const struct MvTrainer *t,
                                      size_t index,
                                      enum MvOutcome *out_outcome,
                                      size_t *out_steps,
                                      double *out_final_loss);

/**
 * # Safety
 * `t` must be null or a live trainer handle; it is invalid afterwards.
 */
void mv_trainer_free(struct MvTrainer *t);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MINIVL_H */
