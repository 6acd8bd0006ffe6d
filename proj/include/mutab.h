/* C interface to the table recognition pipeline.
 *
 * All functionality is reached through an opaque run handle: create one, set
 * string key/value settings (or merge a config file), then invoke a command.
 * Functions return MUTAB_OK on success; on failure, mutab_last_error() holds
 * a message for the calling thread.
 */
#ifndef MUTAB_H
#define MUTAB_H

#ifdef __cplusplus
extern "C" {
#endif

typedef enum mutab_status {
  MUTAB_OK = 0,
  MUTAB_ERR_INVALID_ARGUMENT = 1,
  MUTAB_ERR_IO = 2,
  MUTAB_ERR_RUNTIME = 3,
  /* the command finished but some inputs failed (e.g. unreadable images) */
  MUTAB_PARTIAL = 4
} mutab_status;

typedef struct mutab_run mutab_run;

const char* mutab_version(void);

/* Thread-local message describing the most recent failure. */
const char* mutab_last_error(void);

mutab_status mutab_run_create(mutab_run** out);
void mutab_run_destroy(mutab_run* run);

/* Settings use dotted keys, e.g. "run.seed", "train.epochs", "synth.rows". */
mutab_status mutab_run_set(mutab_run* run, const char* key, const char* value);

/* Merges a sectioned key=value config file; explicit mutab_run_set calls win. */
mutab_status mutab_run_load_config(mutab_run* run, const char* path);

/* Commands. See the project README for the settings each one consumes. */
mutab_status mutab_run_synth(mutab_run* run);
mutab_status mutab_run_train(mutab_run* run);
mutab_status mutab_run_infer(mutab_run* run);
mutab_status mutab_run_eval(mutab_run* run);

/* JSON report from the last eval (or train's final validation); owned by the
 * run handle, valid until the next command or destroy. May be empty. */
const char* mutab_run_report_json(mutab_run* run);

/* One-shot scoring of two HTML documents; structural nonzero drops cell
 * contents before comparison. */
mutab_status mutab_teds(const char* pred_html, const char* gt_html, int structural, double* out);

#ifdef __cplusplus
}
#endif

#endif /* MUTAB_H */
