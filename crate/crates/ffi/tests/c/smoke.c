#include <stdio.h>
#include <stdlib.h>

#include "maskinv.h"

int main(int argc, char **argv) {
    if (argc != 3) {
        fprintf(stderr, "usage: smoke WEIGHTS CONFIG\n");
        return 2;
    }
    MaskinvModel *model = NULL;
    if (maskinv_model_load(argv[1], argv[2], 0, &model) != MASKINV_STATUS_OK) {
        fprintf(stderr, "%s\n", maskinv_last_error_message());
        return 1;
    }
    size_t s = maskinv_model_image_size(model), d = maskinv_model_joint_dim(model);
    float *px = calloc(3 * s * s, sizeof(float));
    for (size_t i = 0; i < 3 * s * s; i++) px[i] = (float)(i % 7) / 7.0f - 0.5f;
    MaskinvActivations *acts = NULL;
    if (maskinv_encode(model, px, 3 * s * s, &acts) != MASKINV_STATUS_OK) return 1;

    unsigned char *mask = calloc(s * s, 1);
    for (size_t y = 0; y < s / 2; y++)
        for (size_t x = 0; x < s / 2; x++) mask[y * s + x] = 1;
    MaskinvInversionConfig cfg = maskinv_inversion_config_default();
    float *emb = calloc(d, sizeof(float));
    if (maskinv_invert(model, acts, mask, 1, &cfg, emb, d) != MASKINV_STATUS_OK) return 1;

    if (maskinv_invert(model, acts, mask, 1, &cfg, emb, 1) != MASKINV_STATUS_INVALID_ARGUMENT) return 1;
    printf("error: %s\n", maskinv_last_error_message());
    printf("dim %zu first %.6f\n", d, emb[0]);

    free(emb);
    free(mask);
    free(px);
    maskinv_activations_free(acts);
    maskinv_model_free(model);
    return 0;
}
