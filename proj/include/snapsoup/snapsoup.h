/* SPDX-License-Identifier: Apache-2.0 */
/*
 * snapsoup C API.
 *
 * Every fallible call returns an ss_status; on failure ss_last_error() holds a
 * message for the calling thread until its next API call. Strings returned
 * through char** out-parameters are owned by the caller and released with
 * ss_free_string(). Structured arguments and results are JSON text.
 */
#ifndef SNAPSOUP_H
#define SNAPSOUP_H

#include <stddef.h>

#if defined(SNAPSOUP_BUILDING)
#define SS_API __attribute__((visibility("default")))
#else
#define SS_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum ss_status {
    SS_OK = 0,
    SS_ERR_USAGE = 1,    /* invalid arguments or option combination */
    SS_ERR_DATA = 2,     /* malformed or inconsistent input data */
    SS_ERR_EXTERNAL = 3, /* external evaluator failed */
    SS_ERR_IO = 4,       /* file system failure */
    SS_ERR_INTERNAL = 5
} ss_status;

typedef struct ss_tensormap ss_tensormap;
typedef struct ss_pool ss_pool;
typedef struct ss_evaluator ss_evaluator;

SS_API const char* ss_version(void);
SS_API const char* ss_last_error(void);
SS_API void ss_free_string(char* s);

/* --- tensor maps (TPAK) --- */
SS_API ss_status ss_tensormap_load(const char* path, int allow_nonfinite, ss_tensormap** out);
SS_API ss_status ss_tensormap_save(const ss_tensormap* tm, const char* path);
/* {"tensors":{name:{"shape":[..],"numel":n}},"meta":{..},"total_elements":n} */
SS_API ss_status ss_tensormap_describe(const ss_tensormap* tm, char** json_out);
/* {"compatible":bool,"missing_in_a":[..],"missing_in_b":[..],"shape_mismatches":[..],"summary":".."} */
SS_API ss_status ss_tensormap_compat(const ss_tensormap* a, const ss_tensormap* b, char** json_out);
SS_API ss_status ss_tensormap_bit_equal(const ss_tensormap* a, const ss_tensormap* b, int* equal_out);
SS_API ss_status ss_tensormap_average(const ss_tensormap* const* maps, size_t n, unsigned jobs, ss_tensormap** out);
SS_API void ss_tensormap_free(ss_tensormap* tm);

/* --- run pools --- */
/* Merges one or more manifest fragments. */
SS_API ss_status ss_pool_load(const char* const* manifest_paths, size_t n, ss_pool** out);
/* CSV or JSONL score records. */
SS_API ss_status ss_pool_ingest_scores(ss_pool* pool, const char* path);
/* {"runs","snapshots","configs","scores","metrics","warnings"} */
SS_API ss_status ss_pool_summary(const ss_pool* pool, char** json_out);
/* Loads every referenced TPAK and checks names/shapes against the first one. */
SS_API ss_status ss_pool_check_weights(const ss_pool* pool, char** json_out);
SS_API ss_status ss_pool_write_manifest(const ss_pool* pool, const char* path);
SS_API void ss_pool_free(ss_pool* pool);

/*
 * Evaluators. config_json:
 *   {"backend":"table"}
 *   {"backend":"synthetic","truth":"truth.json"}
 *   {"backend":"external","command":"eval {model} {split}","timeout_secs":3600,
 *    "max_parallel":1,"scratch_dir":".."}
 * The pool must outlive the evaluator.
 */
SS_API ss_status ss_evaluator_create(const ss_pool* pool, const char* config_json, ss_evaluator** out);
SS_API void ss_evaluator_free(ss_evaluator* ev);

/*
 * Workflows. A NULL evaluator means the pool's score records. Requests:
 *   soup:     {"k":5,"metric":"..","runs":[..]}            -> members JSON, weights in *out
 *   select:   {"run":"id","variant":"src-dev","metric":"..","out":"model.tpak"}
 *   best:     {"variant":"ca","by":"src-dev"|"trg-dev","metric":"..","runs":[..]}
 *   protocol: {"r_max","repetitions","seed","variants","strategies","metric",
 *              "languages","soup_k","fresh_per_r","sample_all_runs","baseline","jobs"}
 *   grid:     {"variants":[..],"metric":".."}
 *   synth:    {"dim","configs","seeds","snapshots","sigma_noise","sigma_bias",
 *              "config_bias_ratio","init_scale","decay","delta_src_trg",
 *              "languages","lang_spread","s0","curvature","seed","metric","jobs"}
 */
SS_API ss_status ss_soup(const ss_pool* pool, const char* request_json, ss_tensormap** out, char** members_json);
SS_API ss_status ss_select(const ss_pool* pool, const ss_evaluator* ev, const char* request_json, char** json_out);
SS_API ss_status ss_best(const ss_pool* pool, const ss_evaluator* ev, const char* request_json, char** json_out);
SS_API ss_status ss_protocol_run(const ss_pool* pool, const ss_evaluator* ev, const char* config_json,
                                 char** table_json);
SS_API ss_status ss_grid_build(const ss_pool* pool, const ss_evaluator* ev, const char* request_json,
                               char** grid_json);
SS_API ss_status ss_synth_generate(const char* config_json, const char* out_dir, char** summary_json);

/* format: "markdown" | "csv" | "json"; baseline: NULL or "row" | "global" | "variant". */
SS_API ss_status ss_report_render(const char* doc_json, const char* format, const char* baseline, char** text_out);

#ifdef __cplusplus
}
#endif

#endif /* SNAPSOUP_H */
