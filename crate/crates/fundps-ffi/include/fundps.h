/* C interface to the fundps core library.
 *
 * All functions return an error code (FUNDPS_OK on success). On failure,
 * fundps_last_error_message() returns a human-readable message that stays
 * valid until the next failing call on the same thread.
 */

#ifndef FUNDPS_H
#define FUNDPS_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

enum {
    FUNDPS_OK = 0,
    FUNDPS_ERR_INVALID_ARGUMENT = 1,
    FUNDPS_ERR_SHAPE_MISMATCH = 2,
    FUNDPS_ERR_IO = 3,
    FUNDPS_ERR_CHECKPOINT = 4,
    FUNDPS_ERR_NUMERIC = 5,
    FUNDPS_ERR_CONFIG = 6,
    FUNDPS_ERR_NULL_POINTER = 7,
};

/* Opaque handles. */
typedef struct FundpsGrf FundpsGrf;
typedef struct FundpsModel FundpsModel;

const char *fundps_last_error_message(void);

/* Gaussian random field samplers. Fields are row-major [ny][nx] doubles. */
int fundps_grf_new_rbf(size_t nx, size_t ny, double length_scale,
                       FundpsGrf **out);
int fundps_grf_new_matern(size_t nx, size_t ny, double tau, double alpha,
                          double scale, FundpsGrf **out);
int fundps_grf_sample(const FundpsGrf *grf, uint64_t seed, double sigma,
                      double *out, size_t out_len);
void fundps_grf_free(FundpsGrf *grf);

/* Karras noise schedule: writes n + 1 values (the last is 0). */
int fundps_karras_schedule(size_t n, double sigma_min, double sigma_max,
                           double rho, double *out, size_t out_len);

/* Trained denoiser checkpoints. Buffers are [channels][ny][nx] doubles. */
int fundps_model_load(const char *path, FundpsModel **out);
int fundps_model_denoise(const FundpsModel *model, const double *data,
                         size_t channels, size_t ny, size_t nx, double sigma,
                         double *out);
void fundps_model_free(FundpsModel *model);

#ifdef __cplusplus
}
#endif

#endif /* FUNDPS_H */
