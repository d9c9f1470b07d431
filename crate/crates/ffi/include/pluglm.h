/* C interface to a finished pluglm run directory.
 *
 * Link against the pluglm_ffi cdylib or staticlib.  Every function returns
 * 0 (PLM_OK) on success and a PLM_ERR_* code otherwise; call
 * plm_last_error_message for the calling thread's most recent failure
 * reason.  All strings are NUL-terminated UTF-8.
 *
 * This header is maintained by hand to match crates/ffi/src/lib.rs.
 */

#ifndef PLUGLM_H
#define PLUGLM_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

enum {
    PLM_OK = 0,
    PLM_ERR_INTERNAL = 1,         /* unexpected library failure            */
    PLM_ERR_CONFIG = 2,           /* inconsistent or unusable artifacts    */
    PLM_ERR_MISSING_ARTIFACT = 3, /* a required file is absent             */
    PLM_ERR_NUMERIC = 4,          /* non-finite values inside the model    */
    PLM_ERR_BAD_ARGUMENT = 5,     /* NULL pointer or invalid UTF-8         */
    PLM_ERR_BUFFER_TOO_SMALL = 6  /* output did not fit the caller buffer  */
};

/* Opaque; create with plm_open, release with plm_close. */
typedef struct PlmHandle PlmHandle;

/* Library version as a static string; do not free. */
const char *plm_version(void);

/* Load a run directory (base.ckpt plus the newest update checkpoint, if
 * any).  On success *out owns the handle. */
int32_t plm_open(const char *run_dir, PlmHandle **out);

/* Release a handle.  NULL is tolerated. */
void plm_close(PlmHandle *handle);

/* Answer a question through the loaded system.  Writes the NUL-terminated
 * answer into buf (buf_len bytes available). */
int32_t plm_answer(const PlmHandle *handle, const char *question, char *buf,
                   size_t buf_len);

/* Report the selector's decision for a question: *s_q receives the best
 * cosine score, *phase the routed phase number or -1 when the gate stays
 * closed.  Fails with PLM_ERR_CONFIG on runs without gated memories. */
int32_t plm_route(const PlmHandle *handle, const char *question, double *s_q,
                  int64_t *phase);

/* Copy the calling thread's most recent error message into buf. */
int32_t plm_last_error_message(char *buf, size_t buf_len);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* PLUGLM_H */
