#ifndef AUTOCOMPRESS_H
#define AUTOCOMPRESS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes of every fallible call.
 */
typedef enum AcStatus {
  AC_STATUS_OK = 0,
  AC_STATUS_NULL_ARGUMENT = 1,
  AC_STATUS_INVALID_UTF8 = 2,
  AC_STATUS_SHAPE = 3,
  AC_STATUS_CONTRACT = 4,
  AC_STATUS_CONFIG = 5,
  AC_STATUS_FORMAT = 6,
  AC_STATUS_TRAINING = 7,
  AC_STATUS_INFEASIBLE = 8,
  AC_STATUS_BELOW_FLOOR = 9,
  AC_STATUS_IO = 10,
  AC_STATUS_PANIC = 11,
} AcStatus;

/**
 * A labelled image set.
 */
typedef struct AcDataset AcDataset;

/**
 * A network together with its structure masks.
 */
typedef struct AcNetwork AcNetwork;

/**
 * Parameter and FLOP counts under the network's masks.
 */
typedef struct AcCounts {
  uint64_t conv_params;
  uint64_t total_params;
  uint64_t conv_flops;
  uint64_t total_flops;
} AcCounts;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread. Valid until the next
 * failing call on the same thread; never null.
 */
const char *ac_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ac_version(void);

/**
 * Builds a freshly initialized network (`arch` is e.g. `"convnet-s"`).
 *
 * # Safety
 * `arch` must be a valid C string and `out` a valid pointer.
 */
enum AcStatus ac_network_build(const char *arch,
                               uint32_t channels,
                               uint32_t height,
                               uint32_t width,
                               uint32_t classes,
                               uint64_t seed,
                               struct AcNetwork **out);

/**
 * Releases a network; null is ignored.
 *
 * # Safety
 * `net` must come from this library and not be used afterwards.
 */
void ac_network_free(struct AcNetwork *net);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a valid C string and `out` a valid pointer.
 */
enum AcStatus ac_network_load(const char *path, struct AcNetwork **out);

/**
 * Saves a network and its masks as a checkpoint file.
 *
 * # Safety
 * `net` must be a live handle and `path` a valid C string.
 */
enum AcStatus ac_network_save(const struct AcNetwork *net, const char *path);

/**
 * Writes the input shape (channels, height, width) and class count.
 *
 * # Safety
 * `net` must be a live handle; `shape` must hold 3 values.
 */
enum AcStatus ac_network_shape(const struct AcNetwork *net, uint32_t *shape, uint32_t *classes);

/**
 * Forward pass on `batch` images laid out as `batch x C x H x W` doubles;
 * writes `batch x classes` logits into `logits` (capacity `logits_len`).
 *
 * # Safety
 * `input` must hold `batch * C * H * W` doubles and `logits` `logits_len`.
 */
enum AcStatus ac_network_forward(const struct AcNetwork *net,
                                 const double *input,
                                 size_t batch,
                                 double *logits,
                                 size_t logits_len);

/**
 * Counts under the network's masks.
 *
 * # Safety
 * `net` must be a live handle and `out` a valid pointer.
 */
enum AcStatus ac_network_counts(const struct AcNetwork *net, struct AcCounts *out);

/**
 * Synthetic single-channel `size x size` class-blob images.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum AcStatus ac_dataset_synth(uint64_t seed,
                               size_t n,
                               uint32_t classes,
                               uint32_t size,
                               struct AcDataset **out);

/**
 * Loads an IDX image file and its label file.
 *
 * # Safety
 * Paths must be valid C strings and `out` a valid pointer.
 */
enum AcStatus ac_dataset_load_idx(const char *images,
                                  const char *labels,
                                  uint32_t classes,
                                  struct AcDataset **out);

/**
 * Number of samples; 0 for null.
 *
 * # Safety
 * `data` must be null or a live handle.
 */
size_t ac_dataset_len(const struct AcDataset *data);

/**
 * Releases a dataset; null is ignored.
 *
 * # Safety
 * `data` must come from this library and not be used afterwards.
 */
void ac_dataset_free(struct AcDataset *data);

/**
 * Trains with Adam, keeping masked weights at zero.
 *
 * # Safety
 * `net` and `data` must be live handles.
 */
enum AcStatus ac_train(struct AcNetwork *net,
                       const struct AcDataset *data,
                       uint32_t epochs,
                       double lr,
                       uint32_t batch,
                       uint64_t seed);

/**
 * Top-1 accuracy in `[0, 1]`.
 *
 * # Safety
 * `net` and `data` must be live handles and `accuracy` a valid pointer.
 */
enum AcStatus ac_evaluate(const struct AcNetwork *net,
                          const struct AcDataset *data,
                          double *accuracy);

/**
 * Runs a full compression described by `config_text` (the run
 * configuration file format). `pretrained` may be null to train a
 * baseline; `out_dir` may be null to skip writing files. On success the
 * final network is stored in `out` and the cumulative conv-parameter
 * reduction and final accuracy are written when the pointers are non-null.
 *
 * # Safety
 * Strings must be valid C strings or null where allowed; handles live.
 */
enum AcStatus ac_compress(const char *config_text,
                          const struct AcNetwork *pretrained,
                          const char *out_dir,
                          struct AcNetwork **out,
                          double *params_rate,
                          double *accuracy);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* AUTOCOMPRESS_H */
