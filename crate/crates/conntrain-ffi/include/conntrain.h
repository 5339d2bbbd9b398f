/* C interface to the connectivity-training library.
 *
 * Every fallible call returns a CtStatus; on failure, ct_last_error()
 * describes what went wrong (thread-local, valid until the next call on
 * the same thread). Handles are opaque; free them with the matching
 * ct_*_free. Strings returned through char** out-parameters are owned by
 * the caller and must be released with ct_string_free. */

#ifndef CONNTRAIN_H
#define CONNTRAIN_H

/* Generated with cbindgen:0.26.0 */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Whether a network trains weights (`Dense`) or connectivity (`Prune`,
// `Flip`).
typedef enum CtMode {
  CT_MODE_DENSE = 0,
  CT_MODE_PRUNE = 1,
  CT_MODE_FLIP = 2,
} CtMode;

// Result of every fallible call. Anything but `Ok` leaves a message in
// `ct_last_error()`.
typedef enum CtStatus {
  CT_STATUS_OK = 0,
  // A required pointer argument was null.
  CT_STATUS_NULL_POINTER = 1,
  // A string argument was not valid UTF-8.
  CT_STATUS_INVALID_UTF8 = 2,
  // The arguments were readable but invalid (bad JSON, unknown preset,
  // shape mismatch, out-of-range hyperparameter, ...).
  CT_STATUS_BAD_ARGUMENT = 3,
  // The filesystem said no.
  CT_STATUS_IO_ERROR = 4,
  // Training or inference failed after validation.
  CT_STATUS_TRAIN_ERROR = 5,
  // A bug: the library panicked. The process is still sound, but the
  // operation did nothing.
  CT_STATUS_PANIC = 6,
} CtStatus;

typedef struct CtDataset CtDataset;

typedef struct CtNetwork CtNetwork;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static string; never fails, never freed.
const char *ct_version(void);

// Message for the most recent failure on this thread. The pointer stays
// valid until the next failing call on the same thread; never free it.
const char *ct_last_error(void);

// Frees a string returned through a `char**` out-parameter. Null is a no-op.
void ct_string_free(char *s);

// Loads the four MNIST IDX files from `dir` into a dataset handle.
enum CtStatus ct_dataset_load_mnist(const char *dir, struct CtDataset **out);

// Loads the six CIFAR-10 binary batches from `dir` into a dataset handle.
enum CtStatus ct_dataset_load_cifar10(const char *dir, struct CtDataset **out);

// Releases a dataset handle. Null is a no-op.
void ct_dataset_free(struct CtDataset *ds);

// Number of training samples, or 0 for a null handle.
size_t ct_dataset_train_len(const struct CtDataset *ds);

// Number of test samples, or 0 for a null handle.
size_t ct_dataset_test_len(const struct CtDataset *ds);

// Writes the reference configuration for a named preset (for example
// "lenet-mnist-free-prune") as a JSON document the caller can edit and
// pass to `ct_train`. `full` disables the reduced regime the CIFAR
// presets otherwise default to.
enum CtStatus ct_preset_config(const char *name, bool full, char **out_json);

// Trains `config_json` (the schema `ct_preset_config` emits) on a loaded
// dataset and returns an aggregate summary as JSON in `*out_summary_json`.
// `checkpoint_dir` may be null; when set and the config's
// `checkpoint_every` is nonzero, checkpoints land there as
// `run_{r}_epoch_{e}.ckpt`, loadable with `ct_network_load`.
enum CtStatus ct_train(const char *config_json,
                       const struct CtDataset *data,
                       const char *checkpoint_dir,
                       char **out_summary_json);

// Loads a checkpoint written during training into a network handle.
enum CtStatus ct_network_load(const char *path, struct CtNetwork **out);

// Releases a network handle. Null is a no-op.
void ct_network_free(struct CtNetwork *net);

// Total weight count across layers, or 0 for a null handle.
size_t ct_network_param_count(const struct CtNetwork *net);

// Floats per input sample (channels * height * width), or 0 for null.
size_t ct_network_input_len(const struct CtNetwork *net);

// Logits per sample (the last dense layer's width), or 0 for null.
size_t ct_network_output_len(const struct CtNetwork *net);

// What the handle trains; `Dense` for a null handle.
enum CtMode ct_network_mode(const struct CtNetwork *net);

// Fraction of connections currently pruned or flipped (0 in dense mode).
enum CtStatus ct_network_changed_fraction(const struct CtNetwork *net, double *out);

// Runs the network on `batch` samples laid out channel-major. `input` must
// hold exactly `batch * ct_network_input_len` floats and `out_logits`
// exactly `batch * ct_network_output_len`.
enum CtStatus ct_network_forward(const struct CtNetwork *net,
                                 size_t batch,
                                 const float *input,
                                 size_t input_len,
                                 float *out_logits,
                                 size_t out_len);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* CONNTRAIN_H */
