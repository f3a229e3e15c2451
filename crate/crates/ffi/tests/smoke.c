#include <stdio.h>
#include <string.h>
#include "mlca.h"

int main(void) {
    uint8_t y[24 * 3];
    int64_t groups[24];
    for (int i = 0; i < 24; i++) {
        int high = (i / 3) % 2 == 0;
        for (int h = 0; h < 3; h++) y[i * 3 + h] = (uint8_t)(high ^ (i % 7 == h));
        groups[i] = i % 4;
    }
    MlcaDataset *data = NULL;
    if (mlca_dataset_new(y, groups, NULL, 24, 3, 0, &data) != MLCA_STATUS_OK) {
        fprintf(stderr, "dataset: %s\n", mlca_last_error());
        return 1;
    }
    MlcaOptions opts = mlca_options_default();
    opts.n_starts = 0;
    MlcaFit *fit = NULL;
    if (mlca_fit(data, 2, 1, MLCA_METHOD_ONE_STEP, &opts, &fit) != MLCA_STATUS_OK) {
        fprintf(stderr, "fit: %s\n", mlca_last_error());
        return 1;
    }
    size_t n = mlca_fit_n_structural(fit);
    double est[8], se[8];
    if (n != 1 || mlca_fit_structural(fit, est, se, n) != MLCA_STATUS_OK) return 1;
    printf("version %s loglik %.6f estimate %.6f\n", mlca_version(), mlca_fit_loglik(fit), est[0]);
    mlca_fit_free(fit);
    MlcaFit *none = NULL;
    if (mlca_fit(NULL, 2, 1, MLCA_METHOD_ONE_STEP, NULL, &none) != MLCA_STATUS_NULL_POINTER || none != NULL) return 1;
    mlca_dataset_free(data);
    return 0;
}
