#ifndef MPF_H
#define MPF_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes. Zero is success.
typedef enum MpfStatus {
  MPF_OK = 0,
  // A required pointer argument was null.
  MPF_ERR_NULL = 1,
  // A string argument was not valid UTF-8, or another argument was out
  // of range.
  MPF_ERR_ARGUMENT = 2,
  // File could not be read or written.
  MPF_ERR_IO = 3,
  // Input file or JSON was malformed.
  MPF_ERR_PARSE = 4,
  // Configuration rejected.
  MPF_ERR_CONFIG = 5,
  // Empty or degenerate geometry.
  MPF_ERR_GEOMETRY = 6,
  // Training failed (non-finite loss, sampler starvation, ...).
  MPF_ERR_TRAIN = 7,
  // Internal panic; the handle arguments should be considered poisoned.
  MPF_ERR_INTERNAL = 8,
} MpfStatus;

// A point cloud in its original coordinates.
typedef struct MpfCloud MpfCloud;

// A trained field together with the normalization it was trained under
// and, after reconstruction, the extracted mesh.
typedef struct MpfModel MpfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null if none. The
// pointer stays valid until the next failing call on the same thread.
const char *mpf_last_error(void);

// Library version as a static NUL-terminated string.
const char *mpf_version(void);

// Loads an `.xyz`/`.txt` or `.ply` point file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum MpfStatus mpf_cloud_load(const char *path, struct MpfCloud **out);

// Builds a cloud from `n` interleaved `x y z` triples. `normals` may be
// null; otherwise it holds `n` interleaved normal triples.
//
// # Safety
// `xyz` (and `normals` when non-null) must point to `3 * n` doubles.
enum MpfStatus mpf_cloud_from_points(const double *xyz,
                                     const double *normals,
                                     size_t n,
                                     struct MpfCloud **out);

// Number of points, or 0 for a null handle.
//
// # Safety
// `cloud` must be null or a live handle.
size_t mpf_cloud_len(const struct MpfCloud *cloud);

// Writes the scale and translation that map the cloud into the training
// cube: `normalized = scale * p + translation`.
//
// # Safety
// `cloud` must be a live handle; `scale` and `translation` (3 doubles) must
// be writable.
enum MpfStatus mpf_cloud_normalization(const struct MpfCloud *cloud,
                                       double *scale,
                                       double *translation);

// # Safety
// `cloud` must be null or a handle not yet freed.
void mpf_cloud_free(struct MpfCloud *cloud);

// Trains a field on the cloud and extracts its zero level set. `config_json`
// may be null for the defaults; otherwise it uses the same schema as the
// `--config` file of the command-line tool.
//
// # Safety
// `cloud` must be a live handle, `config_json` null or NUL-terminated, and
// `out` writable.
enum MpfStatus mpf_reconstruct(const struct MpfCloud *cloud,
                               const char *config_json,
                               struct MpfModel **out);

// Loads parameters from a checkpoint. The model works in the normalized
// cube (identity normalization) and carries no mesh until
// [`mpf_model_extract`] is called.
//
// # Safety
// `path` must be NUL-terminated and `out` writable.
enum MpfStatus mpf_model_load(const char *path, struct MpfModel **out);

// Saves the model parameters as a checkpoint without optimizer state.
//
// # Safety
// `model` must be a live handle and `path` NUL-terminated.
enum MpfStatus mpf_model_save(const struct MpfModel *model, const char *path);

// Evaluates `r`, `theta` and `phi` at `n` points given in the model's
// input coordinates. Any of the output arrays (length `n`) may be null.
//
// # Safety
// `xyz` must hold `3 * n` doubles; non-null outputs must hold `n`.
enum MpfStatus mpf_model_evaluate(const struct MpfModel *model,
                                  const double *xyz,
                                  size_t n,
                                  double *r,
                                  double *theta,
                                  double *phi);

// Re-extracts the zero level set of `phi` on a `resolution^3` grid,
// replacing any mesh the model holds.
//
// # Safety
// `model` must be a live handle.
enum MpfStatus mpf_model_extract(struct MpfModel *model, size_t resolution);

// Vertex and triangle counts of the current mesh.
//
// # Safety
// `model` must be a live handle; the outputs must be writable.
enum MpfStatus mpf_model_mesh_size(const struct MpfModel *model,
                                   size_t *vertices,
                                   size_t *triangles);

// Copies the mesh into caller buffers sized from [`mpf_model_mesh_size`]:
// `3 * vertices` doubles and `3 * triangles` indices.
//
// # Safety
// The buffers must have the sizes above.
enum MpfStatus mpf_model_mesh_copy(const struct MpfModel *model,
                                   double *vertices,
                                   uint32_t *indices);

// Writes the mesh as `.ply` or `.obj`, chosen by extension.
//
// # Safety
// `model` must be a live handle and `path` NUL-terminated.
enum MpfStatus mpf_model_write_mesh(const struct MpfModel *model, const char *path);

// # Safety
// `model` must be null or a handle not yet freed.
void mpf_model_free(struct MpfModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MPF_H */
