/* C interface to the report generator: load a text checkpoint plus its
 * vocabulary, decode feature matrices into report text, and run the
 * gradient verification suite.
 *
 * Conventions:
 *   - functions return REMRG_OK (0) or a nonzero error code; call
 *     remrg_last_error() for the per-thread failure message
 *   - strings written through out-parameters are heap-allocated and must
 *     be released with remrg_string_free()
 *   - a RemrgModel handle is confined to one thread at a time
 */

#ifndef REMRG_H
#define REMRG_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#define REMRG_OK 0
#define REMRG_ERR_USAGE 1
#define REMRG_ERR_DATA 2
#define REMRG_ERR_VERIFY 3

#define REMRG_MODE_GREEDY 0
#define REMRG_MODE_BEAM 1
#define REMRG_MODE_SAMPLE 2

/* Opaque handle over a loaded checkpoint and its vocabulary. */
typedef struct RemrgModel RemrgModel;

/* Library version as a static string. */
const char *remrg_version(void);

/* Message of the most recent failure on this thread; the pointer stays
 * valid until the next failing call on the same thread. */
const char *remrg_last_error(void);

/* Load a checkpoint and vocabulary file. On success writes a fresh handle
 * to *out_model; release it with remrg_model_free(). */
int remrg_model_load(const char *ckpt_path,
                     const char *vocab_path,
                     RemrgModel **out_model);

/* Release a handle. Null is a no-op. */
void remrg_model_free(RemrgModel *model);

/* Vocabulary size of a loaded model; 0 for a null handle. */
size_t remrg_model_vocab_size(const RemrgModel *model);

/* Total scalar parameter count; 0 for a null handle. */
size_t remrg_model_param_count(const RemrgModel *model);

/* Decode a feature file (header "N D", then N rows of D decimals) into
 * report text. max_len 0 means the model's configured maximum. The string
 * written to *out_text must be released with remrg_string_free(). */
int remrg_generate_file(const RemrgModel *model,
                        const char *features_path,
                        int mode,
                        size_t beam,
                        double alpha,
                        size_t max_len,
                        uint64_t seed,
                        char **out_text);

/* Decode an in-memory row-major n_regions x dim feature matrix. */
int remrg_generate_buffer(const RemrgModel *model,
                          const double *features,
                          size_t n_regions,
                          size_t dim,
                          int mode,
                          size_t beam,
                          double alpha,
                          size_t max_len,
                          uint64_t seed,
                          char **out_text);

/* Release a string produced by a generate call. Null is a no-op. */
void remrg_string_free(char *s);

/* Run the finite-difference gradient suite: REMRG_OK when every component
 * is within tolerance, REMRG_ERR_VERIFY otherwise. */
int remrg_gradcheck(uint64_t seed);

#ifdef __cplusplus
}
#endif

#endif /* REMRG_H */
