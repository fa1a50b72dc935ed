#include <stdio.h>
#include <stdlib.h>
#include <math.h>
#include "ageformer.h"

#define CHECK(expr)                                                        \
    do {                                                                   \
        AgStatus st_ = (expr);                                             \
        if (st_ != AG_STATUS_OK) {                                         \
            fprintf(stderr, "%s -> %d: %s\n", #expr, (int)st_,             \
                    ag_last_error() ? ag_last_error() : "(none)");         \
            return 1;                                                      \
        }                                                                  \
    } while (0)

int main(void) {
    AgModel *model = NULL;
    CHECK(ag_model_new(AG_PRESET_DESK, 7, &model));

    AgClipShape shape;
    CHECK(ag_model_clip_shape(model, &shape));
    size_t n = shape.frames * shape.height * shape.width * 3;
    float *frames = malloc(n * sizeof(float));
    for (size_t i = 0; i < n; i++) frames[i] = (float)(i % 255) / 255.0f;

    AgPrediction pred;
    CHECK(ag_model_predict(model, frames, shape.frames, shape.height, shape.width, NULL, shape.face_size, &pred));
    double sum = 0.0;
    for (int c = 0; c < AG_NUM_CLASSES; c++) sum += pred.probs[c];
    if (fabs(sum - 1.0) > 1e-9 || pred.class_index >= AG_NUM_CLASSES) {
        fprintf(stderr, "bad prediction: sum %f class %u\n", sum, pred.class_index);
        return 1;
    }

    if (ag_model_predict(NULL, frames, 1, 1, 1, NULL, 0, &pred) != AG_STATUS_NULL_POINTER) return 1;
    if (ag_last_error() == NULL) return 1;

    uint32_t p[3] = {0, 1, 1}, l[3] = {0, 1, 2};
    AgMetrics m;
    CHECK(ag_metrics(p, l, 3, &m));
    if (m.confusion[2][1] != 1) return 1;

    free(frames);
    ag_model_free(model);
    printf("ok\n");
    return 0;
}
