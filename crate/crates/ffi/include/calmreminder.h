#ifndef CALMREMINDER_H
#define CALMREMINDER_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every `cr_*` call.
typedef enum CrStatus {
  CR_STATUS_OK = 0,
  // A required pointer argument was null.
  CR_STATUS_NULL_ARGUMENT = 1,
  // A string argument was not valid UTF-8 or JSON.
  CR_STATUS_BAD_ENCODING = 2,
  // An argument was rejected by validation.
  CR_STATUS_INVALID_ARGUMENT = 3,
  CR_STATUS_NOT_FOUND = 4,
  // The request conflicts with stored state (duplicate, already answered, inactive).
  CR_STATUS_CONFLICT = 5,
  // The prompt was answered after its expiry time.
  CR_STATUS_EXPIRED = 6,
  // Too few points to fit a model.
  CR_STATUS_NO_FIT = 7,
  // The lookback feature does not have enough windows to predict from.
  CR_STATUS_INSUFFICIENT_COVERAGE = 8,
  CR_STATUS_PERMISSION_DENIED = 9,
  CR_STATUS_IO = 10,
  // A panic was caught at the boundary. The handle involved should be freed.
  CR_STATUS_INTERNAL = 11,
} CrStatus;

// A fitted calibration line.
typedef struct CrModel CrModel;

// An embedded service instance driven by a caller-controlled clock.
typedef struct CrService CrService;

// One accelerometer reading in g.
typedef struct CrSample {
  int64_t t_ms;
  double ax;
  double ay;
  double az;
} CrSample;

// Work done by one `cr_service_set_time` call.
typedef struct CrTickReport {
  uint64_t prompts_sent;
  uint64_t expired;
  uint64_t models_fitted;
} CrTickReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message describing the most recent failure on this thread, or an empty
// string. The pointer stays valid until the next `cr_*` call on this thread.
const char *cr_last_error(void);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must be null or a string returned through an out-parameter of this
// library that has not been freed yet.
void cr_string_free(char *s);

// RMS energy of the samples in the 5-minute window starting at
// `window_start_ms`. An empty window yields NaN energy and a count of 0.
//
// # Safety
// `samples` must point to `n` readable samples (or may be null when `n` is 0).
// The out-pointers must be valid for writes.
enum CrStatus cr_compute_energy(int64_t window_start_ms,
                                const struct CrSample *samples,
                                size_t n,
                                double *out_energy,
                                uint32_t *out_sample_count);

// Fits `rating = slope * energy + intercept` by least squares.
//
// # Safety
// `energy` and `rating` must each point to `n` readable values and
// `out_model` must be valid for writes.
enum CrStatus cr_model_fit(const double *energy,
                           const double *rating,
                           size_t n,
                           struct CrModel **out_model);

// Predicted rating clamped to 1..=5 for a lookback mean built from
// `windows_present` windows. Fails with `InsufficientCoverage` when fewer
// than `min_coverage` windows were present.
//
// # Safety
// `model` must be a live handle from `cr_model_fit`; `out_rating` must be
// valid for writes.
enum CrStatus cr_model_predict(const struct CrModel *model,
                               double mean_energy,
                               uint32_t windows_present,
                               uint32_t min_coverage,
                               double *out_rating);

// # Safety
// `model` must be a live handle; the out-pointers must be valid for writes.
enum CrStatus cr_model_params(const struct CrModel *model,
                              double *out_slope,
                              double *out_intercept);

// # Safety
// `model` must be null or a handle from `cr_model_fit` not freed before.
void cr_model_free(struct CrModel *model);

// Opens a service whose clock starts at `start_ms`. With a null `log_path`
// the service keeps its state in memory only; otherwise every change is
// appended to the file and an existing file is replayed first.
//
// # Safety
// `log_path` must be null or a NUL-terminated string; `out_service` must be
// valid for writes.
enum CrStatus cr_service_open(const char *log_path,
                              int64_t start_ms,
                              uint64_t study_seed,
                              struct CrService **out_service);

// Moves the service clock forward to `now_ms` and runs every scheduled
// action up to it. The clock cannot move backwards. `out_report` may be null.
//
// # Safety
// `service` must be a live handle; `out_report` must be null or valid for writes.
enum CrStatus cr_service_set_time(const struct CrService *service,
                                  int64_t now_ms,
                                  struct CrTickReport *out_report);

// Enrolls a participant and returns the assigned id.
//
// # Safety
// `service` must be a live handle, `alias` a NUL-terminated string and
// `out_participant` valid for writes.
enum CrStatus cr_service_register(const struct CrService *service,
                                  const char *alias,
                                  int32_t utc_offset_minutes,
                                  uint32_t *out_participant);

// Stores one energy window. Pass NaN energy with a count of 0 for an absent
// window. `out_duplicate` (may be null) is set to 1 when an identical window
// was already stored.
//
// # Safety
// `service` must be a live handle; `out_duplicate` must be null or valid for writes.
enum CrStatus cr_service_ingest(const struct CrService *service,
                                uint32_t participant,
                                int64_t window_start_ms,
                                double energy,
                                uint32_t sample_count,
                                uint8_t *out_duplicate);

// Pending prompts of a participant as a JSON array, oldest first.
//
// # Safety
// `service` must be a live handle and `out_json` valid for writes.
enum CrStatus cr_service_pending_json(const struct CrService *service,
                                      uint32_t participant,
                                      char **out_json);

// Submits a survey answer given as `{"event_id": ..., "items": {...}}` and
// returns the resulting transition as JSON. `out_json` may be null.
//
// # Safety
// `service` must be a live handle, `response_json` a NUL-terminated string
// and `out_json` null or valid for writes.
enum CrStatus cr_service_respond_json(const struct CrService *service,
                                      const char *response_json,
                                      char **out_json);

// Prompt metrics per condition as JSON. `participant` 0 summarizes everyone.
//
// # Safety
// `service` must be a live handle and `out_json` valid for writes.
enum CrStatus cr_service_metrics_json(const struct CrService *service,
                                      uint32_t participant,
                                      char **out_json);

// # Safety
// `service` must be null or a handle from `cr_service_open` not freed before.
void cr_service_free(struct CrService *service);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CALMREMINDER_H */
