#include <stdio.h>
#include <string.h>

#include "hiertask.h"

#define CHECK(cond)                                                  \
    do {                                                             \
        if (!(cond)) {                                               \
            fprintf(stderr, "check failed line %d: %s\n", __LINE__, #cond); \
            return 1;                                                \
        }                                                            \
    } while (0)

int main(void) {
    double score = 0.0;
    CHECK(ht_text_similarity("pick up object", "pick up object", &score) == HT_STATUS_OK);
    CHECK(score == 1.0);
    CHECK(ht_text_similarity(NULL, "x", &score) == HT_STATUS_NULL_POINTER);
    CHECK(ht_last_error_message() != NULL);

    HtRegistry *reg = ht_registry_bundled();
    CHECK(ht_registry_len(reg) == 10);
    char *json = NULL;
    CHECK(ht_registry_align(reg, "drone", "take off\nland the drone", 0.6, &json) == HT_STATUS_OK);
    CHECK(strstr(json, "\"takeoff\"") != NULL);
    ht_string_free(json);
    ht_registry_free(reg);

    HtEngine *engine = NULL;
    CHECK(ht_engine_new(NULL, &engine) == HT_STATUS_OK);
    CHECK(ht_engine_run_scenario(engine, "survey_and_fetch", &json) == HT_STATUS_OK);
    CHECK(strstr(json, "\"done\"") != NULL);
    ht_string_free(json);
    CHECK(ht_engine_run_scenario(engine, "unmatched_task", &json) == HT_STATUS_TASK_FAILED);
    ht_string_free(json);
    CHECK(ht_engine_run_scenario(engine, "missing", &json) == HT_STATUS_NOT_FOUND);
    ht_engine_free(engine);
    printf("ok %s\n", ht_version());
    return 0;
}
