/* C interface to the gnpm deformation-model library.
 *
 * All functions return GNPM_OK (0) on success or a nonzero error code; on
 * failure gnpm_last_error() holds a message valid until the next failing
 * call on the same thread. Buffers cross the boundary as doubles regardless
 * of the model's internal precision.
 */

#ifndef GNPM_H
#define GNPM_H

#include <stddef.h>

#ifdef __cplusplus
extern "C" {
#endif

#define GNPM_OK 0
#define GNPM_ERR_NULL_ARG 1
#define GNPM_ERR_INVALID_ARG 2
#define GNPM_ERR_IO 3
#define GNPM_ERR_RUNTIME 4
#define GNPM_ERR_PANIC 5

/* Opaque handle over a trained model plus its latent code bank. */
typedef struct GnpmModelHandle GnpmModelHandle;

const char *gnpm_version(void);

/* Message for the most recent failure on the calling thread. */
const char *gnpm_last_error(void);

/* Load a trained checkpoint. On success writes a handle through `out`;
 * release it with gnpm_model_free. */
int gnpm_model_load(const char *path, GnpmModelHandle **out);

void gnpm_model_free(GnpmModelHandle *h);

/* Writes 4 values through `dims`: shape code dim, pose code dim, identity
 * count, trained frame count. */
int gnpm_model_dims(const GnpmModelHandle *h, size_t *dims);

/* Copy a trained latent code. `which` is 0 for a shape code (indexed by
 * identity, length = shape dim) or 1 for a pose code (indexed by training
 * frame, length = pose dim). */
int gnpm_model_code(const GnpmModelHandle *h, int which, size_t index,
                    double *out);

/* Re-pose a canonical cloud of n 3-D points under the given codes. `points`
 * and `out` hold n*3 doubles; the codes have the model's code dims. n must
 * exceed the model's neighborhood size k. */
int gnpm_model_transfer(const GnpmModelHandle *h, const double *points,
                        size_t n, const double *shape_code,
                        const double *pose_code, double *out);

/* Exact k nearest neighbors over n points of dimension d (self excluded,
 * squared distances, ties broken toward the lower index). `out_idx` and
 * `out_dist2` receive n*k entries each. */
int gnpm_knn(const double *points, size_t n, size_t d, size_t k,
             size_t *out_idx, double *out_dist2);

/* Symmetric Chamfer distance (squared-distance form) between clouds of na
 * and nb 3-D points. */
int gnpm_chamfer(const double *a, size_t na, const double *b, size_t nb,
                 double *out);

#ifdef __cplusplus
}
#endif

#endif /* GNPM_H */
