#ifndef XLEARNER_H
#define XLEARNER_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef int32_t XlStatus;

#define XL_OK 0
#define XL_ERR_VALIDATION 1
#define XL_ERR_TRAINING 2
#define XL_ERR_IO 3
#define XL_ERR_NULL_ARGUMENT 4
#define XL_ERR_BUFFER_TOO_SMALL 5
#define XL_ERR_PANIC 6

#define XL_CMD_PRETRAIN 0
#define XL_CMD_SQUEEZE 1
#define XL_CMD_EVALUATE 2
#define XL_CMD_COMPARE 3
#define XL_CMD_REPORT 4

typedef struct XlConfig XlConfig;
typedef struct XlCheckpoint XlCheckpoint;

/* Message of the last failed call on this thread; "" after a success. */
const char *xl_last_error(void);

XlStatus xl_config_load(const char *path, XlConfig **out);
void xl_config_free(XlConfig *cfg);
XlStatus xl_config_validate(const XlConfig *cfg, size_t *issues);
XlStatus xl_config_hash(const XlConfig *cfg, char *buf, size_t len, size_t *needed);
XlStatus xl_config_num_tasks(const XlConfig *cfg, size_t *out);
XlStatus xl_lr_at(const XlConfig *cfg, size_t step, double *out);
XlStatus xl_config_parameter_counts(const XlConfig *cfg, size_t *backbone, size_t *sub_backbone, size_t *student);

XlStatus xl_scale_channels(const size_t *widths, size_t n, double factor, size_t multiple, size_t *out);

XlStatus xl_checkpoint_load(const char *path, XlCheckpoint **out);
void xl_checkpoint_free(XlCheckpoint *ckpt);
const char *xl_checkpoint_stage(const XlCheckpoint *ckpt);
XlStatus xl_checkpoint_info(const XlCheckpoint *ckpt, size_t *step, size_t *tensors);
XlStatus xl_checkpoint_matches(const XlCheckpoint *ckpt, const XlConfig *cfg, int32_t *out);

XlStatus xl_run_pipeline(const char *config_path, int32_t command, const char *output_dir);

#ifdef __cplusplus
}
#endif

#endif
