/* C interface to the mmreid person re-identification encoder.
 *
 * Typical use:
 *
 *   MmreidModel *m = NULL;
 *   if (mmreid_model_load("reid.ckpt", &m) != MMREID_OK) {
 *       fprintf(stderr, "%s\n", mmreid_last_error());
 *       return 1;
 *   }
 *   size_t dim = mmreid_embedding_dim(m);
 *   double *emb = malloc(dim * sizeof(double));
 *   mmreid_embed_ppm(m, "person.ppm", emb, dim);
 *   mmreid_model_free(m);
 *
 * All functions may be called from any thread. Error messages are
 * thread-local and stay valid until the next failing call on the same
 * thread.
 */

#ifndef MMREID_H
#define MMREID_H

#include <stddef.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum MmreidStatus {
    MMREID_OK = 0,
    /* A required pointer argument was null. */
    MMREID_NULL_ARG = 1,
    /* A string argument was not valid UTF-8. */
    MMREID_INVALID_UTF8 = 2,
    /* The checkpoint could not be read or parsed. */
    MMREID_LOAD_FAILED = 3,
    /* Pixel data had the wrong length, wrong geometry, or non-finite values. */
    MMREID_BAD_IMAGE = 4,
    /* The forward pass itself failed. */
    MMREID_EMBED_FAILED = 5,
    /* The output buffer is smaller than the embedding dimension. */
    MMREID_BUFFER_TOO_SMALL = 6,
    /* A panic was caught at the FFI boundary. */
    MMREID_PANIC = 7,
} MmreidStatus;

/* Opaque handle to a loaded checkpoint. */
typedef struct MmreidModel MmreidModel;

/* Library version as a static NUL-terminated string. */
const char *mmreid_version(void);

/* Message for the most recent failure on the calling thread. Never null;
 * empty string when nothing has failed yet. */
const char *mmreid_last_error(void);

/* Load a checkpoint into a newly allocated handle written to *out. The
 * checkpoint must carry encoder weights, which every training stage in
 * this project writes. */
MmreidStatus mmreid_model_load(const char *path, MmreidModel **out);

/* Free a handle. Null is a no-op. */
void mmreid_model_free(MmreidModel *model);

/* Geometry queries; each returns 0 if model is null. */
size_t mmreid_embedding_dim(const MmreidModel *model);
size_t mmreid_image_height(const MmreidModel *model);
size_t mmreid_image_width(const MmreidModel *model);
size_t mmreid_image_channels(const MmreidModel *model);

/* Embed one image. pixels is row-major height x width x channels in
 * [0, 1], len its element count. Writes mmreid_embedding_dim(model)
 * doubles to out; out_cap is out's capacity in doubles. */
MmreidStatus mmreid_embed_image(const MmreidModel *model,
                                const double *pixels,
                                size_t len,
                                double *out,
                                size_t out_cap);

/* Embed a binary PPM (P6) file whose geometry matches the model. */
MmreidStatus mmreid_embed_ppm(const MmreidModel *model,
                              const char *path,
                              double *out,
                              size_t out_cap);

#ifdef __cplusplus
}
#endif

#endif /* MMREID_H */
