#ifndef LOCOV_H
#define LOCOV_H

/* C interface to the detection-experiment toolkit: dataset synthesis, the
 * two training stages, evaluation, gradient checking, and ablation sweeps.
 *
 * Conventions:
 *   - Every function returns a locov_status; on failure the calling thread's
 *     locov_last_error() / locov_last_error_code() describe what went wrong.
 *   - Strings returned through char** are heap-allocated JSON documents;
 *     release them with locov_string_free(). Passing NULL skips the output.
 *   - locov_config is an opaque handle; release with locov_config_free().
 */

#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum locov_status {
  LOCOV_OK = 0,
  LOCOV_ERR_RUNTIME = 1,
  LOCOV_ERR_CONFIG = 2
} locov_status;

typedef struct locov_config locov_config;

const char* locov_version(void);

/* Last error of the calling thread; reset by the next API call. The code is
 * a stable kebab-case identifier ("invalid-config", "shape-mismatch", ...),
 * the message is human-readable. Both are empty when the last call passed. */
const char* locov_last_error(void);
const char* locov_last_error_code(void);

void locov_string_free(char* s);

/* Configuration handles. `load` reads a JSON file, `parse` a JSON string;
 * both fill unset fields with defaults and reject unknown keys. */
locov_status locov_config_default(locov_config** out);
locov_status locov_config_load(const char* path, locov_config** out);
locov_status locov_config_parse(const char* json_text, locov_config** out);
locov_status locov_config_from_checkpoint(const char* checkpoint_path, locov_config** out);
locov_status locov_config_dump(const locov_config* cfg, char** json_out);
locov_status locov_config_output_dir(const locov_config* cfg, char** dir_out);
locov_status locov_config_set_seed(locov_config* cfg, uint64_t seed);
locov_status locov_config_set_world_seed(locov_config* cfg, uint64_t seed);
void locov_config_free(locov_config* cfg);

/* Generate the configured synthetic world under out_dir. stats_json receives
 * the dataset statistics. */
locov_status locov_synth(const locov_config* cfg, const char* out_dir, char** stats_json);

/* First training stage (matching losses over image-caption batches). Writes
 * lsm_metrics.jsonl and lsm.ckpt under out_dir. */
locov_status locov_train_lsm(const locov_config* cfg, const char* dataset_dir,
                             const char* out_dir, char** summary_json);

/* Second training stage, starting from a first-stage checkpoint. cfg may be
 * NULL to reuse the checkpoint's config snapshot. Writes stt_metrics.jsonl
 * and stt.ckpt under out_dir. */
locov_status locov_train_stt(const locov_config* cfg, const char* dataset_dir,
                             const char* checkpoint_path, const char* out_dir,
                             char** summary_json);

/* Detection metrics of a tuned checkpoint on one dataset split. split NULL
 * means "test". setups is a comma-separated subset of
 * novel,known,generalized (or "all"); NULL means all three. out_dir may be
 * NULL; otherwise eval.json and eval.csv are written there. */
locov_status locov_evaluate(const locov_config* cfg, const char* checkpoint_path,
                            const char* dataset_dir, const char* split, const char* setups,
                            const char* out_dir, char** report_json);

/* Finite-difference audit of the enabled losses. pass receives 1/0. out_dir
 * may be NULL; otherwise gradcheck.json is written there. */
locov_status locov_gradcheck(const locov_config* cfg, const char* out_dir, int* pass,
                             char** report_json);

/* Region-mode x consistency x stage sweep, scored on the test split. Failing
 * cells are recorded in the output instead of aborting the sweep. out_dir may
 * be NULL; otherwise ablation.csv is written there. */
locov_status locov_ablate(const locov_config* cfg, const char* dataset_dir, const char* out_dir,
                          char** rows_json);

/* Stage, step, tensor inventory, and config snapshot of a checkpoint file. */
locov_status locov_checkpoint_info(const char* path, char** info_json);

#ifdef __cplusplus
}
#endif

#endif /* LOCOV_H */
