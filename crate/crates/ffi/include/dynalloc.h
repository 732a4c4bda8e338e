#ifndef DYNALLOC_H
#define DYNALLOC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every call.
 */
typedef enum {
  DYNALLOC_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  DYNALLOC_STATUS_NULL_POINTER = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  DYNALLOC_STATUS_INVALID_UTF8 = 2,
  /**
   * Malformed input or an instance that fails validation.
   */
  DYNALLOC_STATUS_INVALID_INPUT = 3,
  /**
   * The solver failed on a valid instance.
   */
  DYNALLOC_STATUS_SOLVER_ERROR = 4,
  /**
   * A period or entity index is out of range, or a buffer is too short.
   */
  DYNALLOC_STATUS_OUT_OF_RANGE = 5,
  /**
   * An internal panic was caught at the boundary.
   */
  DYNALLOC_STATUS_PANIC = 6,
} DynallocStatus;

/**
 * Solver selection for [`dynalloc_solve`].
 */
typedef enum {
  DYNALLOC_MODE_AUTO = 0,
  DYNALLOC_MODE_RECURSION = 1,
  DYNALLOC_MODE_SCENARIO_EXACT = 2,
} DynallocMode;

/**
 * A validated problem instance.
 */
typedef struct DynallocProblem DynallocProblem;

/**
 * A solved problem: the report plus the instance it belongs to.
 */
typedef struct DynallocSolution DynallocSolution;

typedef struct {
  DynallocMode mode;
  /**
   * Nonzero to use the literal coefficient formulas (uniform multiplier shift).
   */
  uint8_t literal;
  /**
   * Nonzero to forbid negative allocations.
   */
  uint8_t nonneg;
} DynallocSolveOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next call into this library on the same thread.
 */
const char *dynalloc_last_error(void);

/**
 * Static name of a status code.
 */
const char *dynalloc_status_name(DynallocStatus status);

/**
 * Default options: automatic solver choice, exact formulas, shorting allowed.
 */
DynallocSolveOptions dynalloc_default_options(void);

/**
 * Parses and validates a problem from JSON text.
 *
 * # Safety
 * `json` must be a nul-terminated string and `out` a valid pointer.
 */
DynallocStatus dynalloc_problem_from_json(const char *json, DynallocProblem **out);

/**
 * # Safety
 * `problem` must come from [`dynalloc_problem_from_json`] or be null.
 */
void dynalloc_problem_free(DynallocProblem *problem);

/**
 * Number of periods and of risky entities.
 *
 * # Safety
 * `problem` must be a live handle; `horizon` and `n` valid pointers.
 */
DynallocStatus dynalloc_problem_shape(const DynallocProblem *problem, size_t *horizon, size_t *n);

/**
 * Solves `problem`. `options` may be null for the defaults.
 *
 * # Safety
 * `problem` must be a live handle, `options` null or valid, `out` valid.
 */
DynallocStatus dynalloc_solve(const DynallocProblem *problem,
                              const DynallocSolveOptions *options,
                              DynallocSolution **out);

/**
 * # Safety
 * `solution` must come from [`dynalloc_solve`] or be null.
 */
void dynalloc_solution_free(DynallocSolution *solution);

/**
 * The problem's objective under the optimal policy (NaN when the moments
 * could not be evaluated exactly).
 *
 * # Safety
 * `solution` must be a live handle and `out` a valid pointer.
 */
DynallocStatus dynalloc_solution_objective(const DynallocSolution *solution, double *out);

/**
 * Value from period `t` (0-based) onward at resource `x`, in the solved
 * separable objective.
 *
 * # Safety
 * `solution` must be a live handle and `out` a valid pointer.
 */
DynallocStatus dynalloc_solution_value(const DynallocSolution *solution,
                                       size_t t,
                                       double x,
                                       double *out);

/**
 * Optimal allocation in period `t` (0-based) at resource `x`, written to
 * `out[0..n]`. `len` is the capacity of `out`.
 *
 * # Safety
 * `solution` must be a live handle and `out` valid for `len` writes.
 */
DynallocStatus dynalloc_solution_allocate(const DynallocSolution *solution,
                                          size_t t,
                                          double x,
                                          double *out,
                                          size_t len);

/**
 * The full solve report as JSON.
 *
 * # Safety
 * `solution` must be a live handle and `out` a valid pointer.
 */
DynallocStatus dynalloc_solution_report_json(const DynallocSolution *solution, char **out);

/**
 * Monte Carlo summary of the optimal policy as JSON.
 *
 * # Safety
 * `solution` must be a live handle and `out` a valid pointer.
 */
DynallocStatus dynalloc_simulate(const DynallocSolution *solution,
                                 size_t paths,
                                 uint64_t seed,
                                 char **out);

/**
 * # Safety
 * `s` must come from this library or be null.
 */
void dynalloc_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DYNALLOC_H */
