#include <math.h>
#include <stdio.h>
#include <string.h>

#include "minivl.h"

#define CHECK(cond)                                              \
    do {                                                         \
        if (!(cond)) {                                           \
            fprintf(stderr, "%s:%d: %s\n", __FILE__, __LINE__, #cond); \
            return 1;                                            \
        }                                                        \
    } while (0)

int main(void) {
    MvSchedule *s = NULL;
    CHECK(mv_schedule_for_stage(2, 1, &s) == MV_STATUS_OK);
    double lr = 0.0;
    CHECK(mv_schedule_lr(s, 5000, &lr) == MV_STATUS_OK && lr == 1e-4);
    size_t total = 0;
    CHECK(mv_schedule_total_steps(s, &total) == MV_STATUS_OK && total == 20000);
    CHECK(mv_schedule_lr(s, 20000, &lr) == MV_STATUS_OK && lr == 8e-5);
    CHECK(mv_schedule_lr(s, 20001, &lr) == MV_STATUS_SCHEDULE);
    CHECK(mv_last_error() != NULL);
    mv_schedule_free(s);

    CHECK(mv_schedule_for_stage(1, 7, &s) == MV_STATUS_SCHEDULE);
    CHECK(strstr(mv_last_error(), "does not divide") != NULL);

    MvVocab *v = NULL;
    CHECK(mv_vocab_new(&v) == MV_STATUS_OK);
    const char *text = "<Img><ImageHere></Img> [vqa] hi";
    size_t n = 0;
    CHECK(mv_vocab_encode(v, text, NULL, 0, &n) == MV_STATUS_BUFFER_TOO_SMALL);
    uint32_t ids[64];
    CHECK(mv_vocab_encode(v, text, ids, 64, &n) == MV_STATUS_OK && n == 8);
    char *back = NULL;
    CHECK(mv_vocab_decode(v, ids, n, &back) == MV_STATUS_OK && strcmp(back, text) == 0);
    mv_string_free(back);
    mv_vocab_free(v);

    uint32_t box[4];
    CHECK(mv_normalize_box(10, 20, 50, 60, 200, 100, box) == MV_STATUS_OK);
    CHECK(box[0] == 5 && box[1] == 20 && box[2] == 25 && box[3] == 60);
    CHECK(mv_normalize_box(0, 0, 300, 10, 200, 100, box) == MV_STATUS_INVALID_ARGUMENT);

    char *rendered = NULL;
    CHECK(mv_render_sample("{\"task\":\"vqa\",\"image_seed\":1,\"instruction\":\"What is it?\",\"target\":\"red\"}",
                           true, &rendered) == MV_STATUS_OK);
    CHECK(strcmp(rendered, "###Human: <Img><ImageHere></Img> [vqa] What is it?###Assistant: red") == 0);
    mv_string_free(rendered);

    MvTrainer *t = NULL;
    CHECK(mv_trainer_from_toml("seed = 1\nbogus = 2\n", &t) == MV_STATUS_CONFIG);
    CHECK(t == NULL);
    CHECK(mv_schedule_lr(NULL, 0, &lr) == MV_STATUS_NULL_POINTER);

    double err = 1.0;
    CHECK(mv_gradcheck(&err) == MV_STATUS_OK && err <= 1e-4);
    puts("ok");
    return 0;
}
