#ifndef SKETCH_CONCEPT_H
#define SKETCH_CONCEPT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  SKC_STATUS_OK = 0,
  SKC_STATUS_NULL_POINTER = 1,
  SKC_STATUS_INVALID_ARGUMENT = 2,
  SKC_STATUS_SHAPE = 3,
  SKC_STATUS_UNKNOWN_WORD = 4,
  SKC_STATUS_PLACEHOLDER = 5,
  SKC_STATUS_DEGENERATE_MASK = 6,
  SKC_STATUS_DIVERGED = 7,
  SKC_STATUS_BASE_MISMATCH = 8,
  SKC_STATUS_INTEGRITY = 9,
  SKC_STATUS_NOT_FOUND = 10,
  SKC_STATUS_CONFLICT = 11,
  SKC_STATUS_CONFIG = 12,
  SKC_STATUS_IO = 13,
  SKC_STATUS_BUFFER_TOO_SMALL = 14,
  SKC_STATUS_PANIC = 15,
} SkcStatus;

/**
 * Pretrained base model.
 */
typedef struct SkcBase SkcBase;

/**
 * Learned concept bound to the base it was loaded against.
 */
typedef struct SkcConcept SkcConcept;

/**
 * RGB image with components in `[0, 1]`.
 */
typedef struct SkcImage SkcImage;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *skc_version(void);

/**
 * Message of the last failed call on this thread; empty after a success.
 * Valid until the next call on this thread.
 */
const char *skc_last_error(void);

/**
 * Load a base archive from a file path.
 *
 * # Safety
 * `path` is a NUL-terminated string; `out` is writable.
 */
SkcStatus skc_base_load(const char *path, SkcBase **out);

/**
 * Working image size of the base in pixels (images are size × size).
 *
 * # Safety
 * `base` is a live handle or null (returns 0).
 */
size_t skc_base_size(const SkcBase *base);

/**
 * Write the base's 64-char hex hash plus NUL into `buf`.
 *
 * # Safety
 * `base` is a live handle; `buf` has `len` writable bytes.
 */
SkcStatus skc_base_hash(const SkcBase *base, char *buf, size_t len);

/**
 * # Safety
 * `base` is null or a handle from [`skc_base_load`], freed at most once,
 * after every concept loaded against it has been freed or is no longer used.
 */
void skc_base_free(SkcBase *base);

/**
 * Load a concept archive file and check that it belongs to `base`.
 *
 * # Safety
 * `path` is a NUL-terminated string; `base` is live; `out` is writable.
 */
SkcStatus skc_concept_load_file(const char *path, const SkcBase *base, SkcConcept **out);

/**
 * Load the head version of `concept_id` from a store directory.
 *
 * # Safety
 * `store` and `concept_id` are NUL-terminated strings; `base` is live;
 * `out` is writable.
 */
SkcStatus skc_concept_load(const char *store,
                           const char *concept_id,
                           const SkcBase *base,
                           SkcConcept **out);

/**
 * # Safety
 * `concept` is null or a handle from a concept loader, freed at most once.
 */
void skc_concept_free(SkcConcept *concept);

/**
 * Image from `width * height * 3` interleaved RGB bytes.
 *
 * # Safety
 * `rgb` has `len` readable bytes; `out` is writable.
 */
SkcStatus skc_image_from_rgb8(size_t width,
                              size_t height,
                              const uint8_t *rgb,
                              size_t len,
                              SkcImage **out);

/**
 * # Safety
 * `img` is a live handle or null (returns 0).
 */
size_t skc_image_width(const SkcImage *img);

/**
 * # Safety
 * `img` is a live handle or null (returns 0).
 */
size_t skc_image_height(const SkcImage *img);

/**
 * Copy the image as interleaved RGB bytes; `len` must be at least
 * `width * height * 3`.
 *
 * # Safety
 * `img` is live; `buf` has `len` writable bytes.
 */
SkcStatus skc_image_copy_rgb8(const SkcImage *img, uint8_t *buf, size_t len);

/**
 * # Safety
 * `img` is null or a handle from this library, freed at most once.
 */
void skc_image_free(SkcImage *img);

/**
 * Rasterise stroke JSON at `size` and write the contour, detail and
 * automatic-mask channels as `size * size` bytes of 0 or 1. Any output may
 * be null. The mask is all zeros when the contour encloses nothing.
 *
 * # Safety
 * `strokes_json` is a NUL-terminated string; each non-null output has
 * `len` writable bytes.
 */
SkcStatus skc_rasterize(const char *strokes_json,
                        size_t size,
                        uint8_t *contour,
                        uint8_t *detail,
                        uint8_t *mask,
                        size_t len);

/**
 * Generate `concept` following the strokes. `prompt` must contain `[v]`.
 * `mask` is `mask_len` bytes (size × size, nonzero inside) or null for the
 * automatic mask.
 *
 * # Safety
 * Handles are live; strings are NUL-terminated; `mask` has `mask_len`
 * readable bytes when non-null; `out` is writable.
 */
SkcStatus skc_generate(const SkcBase *base,
                       const SkcConcept *concept,
                       const char *strokes_json,
                       const uint8_t *mask,
                       size_t mask_len,
                       const char *prompt,
                       size_t steps,
                       uint64_t seed,
                       SkcImage **out);

/**
 * Regenerate the region `blend_mask` of `image` (the sketch mask when
 * null) so it follows the strokes; pixels outside keep their values.
 *
 * # Safety
 * As for [`skc_generate`]; `image` is live and `blend_mask` has
 * `blend_len` readable bytes when non-null.
 */
SkcStatus skc_edit(const SkcBase *base,
                   const SkcConcept *concept,
                   const SkcImage *image,
                   const char *strokes_json,
                   const uint8_t *blend_mask,
                   size_t blend_len,
                   const char *prompt,
                   size_t steps,
                   uint64_t seed,
                   SkcImage **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SKETCH_CONCEPT_H */
