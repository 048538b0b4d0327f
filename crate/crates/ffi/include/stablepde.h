#ifndef STABLEPDE_H
#define STABLEPDE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes.
typedef enum SpdStatus {
  SPD_STATUS_OK = 0,
  SPD_STATUS_NULL_POINTER = 1,
  SPD_STATUS_INVALID_ARGUMENT = 2,
  SPD_STATUS_IO = 3,
  SPD_STATUS_SHAPE = 4,
  SPD_STATUS_RUNTIME = 5,
  SPD_STATUS_PANIC = 6,
} SpdStatus;

// Trained or freshly initialized DeepONet.
typedef struct SpdModel SpdModel;

// Problem definition with its input sampler.
typedef struct SpdProblem SpdProblem;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failure on this thread, or null. Valid until the
// next failing call on the same thread.
const char *spd_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *spd_version(void);

// New model with the standard architecture for `problem_kind`.
//
// # Safety
// `problem_kind` must be a NUL-terminated string; `out` must be writable.
enum SpdStatus spd_model_init(const char *problem_kind, uint64_t seed, struct SpdModel **out);

// Loads a JSON checkpoint.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum SpdStatus spd_model_load(const char *path, struct SpdModel **out);

// Writes the model as a JSON checkpoint.
//
// # Safety
// `model` must come from this library; `path` must be NUL-terminated.
enum SpdStatus spd_model_save(const struct SpdModel *model, const char *path);

// Releases a model; null is ignored.
//
// # Safety
// `model` must come from this library and not be used afterwards.
void spd_model_free(struct SpdModel *model);

// Number of sensor values the model reads.
//
// # Safety
// `model` must come from this library; `out` must be writable.
enum SpdStatus spd_model_sensor_count(const struct SpdModel *model, size_t *out);

// Coordinate dimension of the trunk input.
//
// # Safety
// `model` must come from this library; `out` must be writable.
enum SpdStatus spd_model_coord_dim(const struct SpdModel *model, size_t *out);

// `out[i] = G(f)(coords[i])` for `n_points` coordinates of dimension `dim`.
//
// # Safety
// `f` holds `m` doubles, `coords` holds `n_points·dim`, `out` has room for
// `n_points`.
enum SpdStatus spd_model_predict(const struct SpdModel *model,
                                 const double *f,
                                 size_t m,
                                 const double *coords_ptr,
                                 size_t n_points,
                                 size_t dim,
                                 double *out);

// Largest singular value of `∂G(f)(coords)/∂f` by power iteration.
//
// # Safety
// As [`spd_model_predict`]; `out` must be writable.
enum SpdStatus spd_model_spectral_norm(const struct SpdModel *model,
                                       const double *f,
                                       size_t m,
                                       const double *coords_ptr,
                                       size_t n_points,
                                       size_t dim,
                                       double tol,
                                       size_t max_iter,
                                       double *out);

// PGD attack on `‖G(f̃)(coords) − u_true‖²` within `‖f̃ − f‖∞ ≤ ε·max|f|`,
// with `α = ε/4` and no random start. Writes `f̃` into `out` (`m` doubles).
//
// # Safety
// `f` and `out` hold `m` doubles, `u_true` holds `n_points`, `coords`
// holds `n_points·dim`.
enum SpdStatus spd_attack_evaluation(const struct SpdModel *model,
                                     const double *f,
                                     size_t m,
                                     const double *u_true,
                                     const double *coords_ptr,
                                     size_t n_points,
                                     size_t dim,
                                     double epsilon,
                                     size_t n_iter,
                                     double *out);

// Problem with default settings for `problem_kind`.
//
// # Safety
// `problem_kind` must be NUL-terminated; `out` must be writable.
enum SpdStatus spd_problem_new(const char *problem_kind, struct SpdProblem **out);

// Releases a problem; null is ignored.
//
// # Safety
// `problem` must come from this library and not be used afterwards.
void spd_problem_free(struct SpdProblem *problem);

// Number of sensor values of the problem's inputs.
//
// # Safety
// `problem` must come from this library; `out` must be writable.
enum SpdStatus spd_problem_sensor_count(const struct SpdProblem *problem, size_t *out);

// Draws one input function into `out` (`len` must equal the sensor count).
//
// # Safety
// `out` has room for `len` doubles.
enum SpdStatus spd_problem_sample_input(const struct SpdProblem *problem,
                                        uint64_t seed,
                                        double *out,
                                        size_t len);

// Reference solution for input `f` at `n_points` coordinates.
//
// # Safety
// `f` holds `m` doubles, `coords` holds `n_points·dim`, `out` has room for
// `n_points`.
enum SpdStatus spd_problem_reference_solution(const struct SpdProblem *problem,
                                              const double *f,
                                              size_t m,
                                              const double *coords_ptr,
                                              size_t n_points,
                                              size_t dim,
                                              double *out);

// Parses and validates a run configuration given as TOML text.
//
// # Safety
// `toml_text` must be NUL-terminated.
enum SpdStatus spd_config_validate(const char *toml_text);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STABLEPDE_H */
