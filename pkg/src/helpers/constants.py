EXIT_OK = 0
EXIT_PROPERTY_FAILURE = 1
EXIT_INPUT_ERROR = 2
EXIT_GUARD = 3
EXIT_CORRUPTION = 4

PHASE_COMPLETED_EVENT = "phase_completed"
BATCH_COMPLETED_EVENT = "batch_completed"
EPOCH_COMPLETED_EVENT = "epoch_completed"
CHECKPOINT_SAVED_EVENT = "checkpoint_saved"

METRICS_CSV = "metrics.csv"
LAYER_STATS_CSV = "layer_stats.csv"
ENERGY_TRACES_CSV = "energy_traces.csv"
ENERGY_SUMMARY_CSV = "energy_summary.csv"
COMPARISONS_CSV = "comparisons.csv"
BETA_SWEEP_CSV = "beta_sweep.csv"
MANIFEST_JSON = "manifest.json"
CHECKPOINT_DIR = "checkpoints"
LAST_CHECKPOINT = "last.ckpt"
BEST_CHECKPOINT = "best.ckpt"

CHECKPOINT_MAGIC = b"CRNNCKPT"
CHECKPOINT_VERSION = 1
TEACHER_LOGITS_MAGIC = b"CRNNTLOG"
TEACHER_LOGITS_VERSION = 1
OUTPUT_LOGITS_KEY = -1

CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)
CIFAR100_MEAN = (0.5071, 0.4865, 0.4409)
CIFAR100_STD = (0.2673, 0.2564, 0.2762)

DTYPES = {"f32": "float32", "f64": "float64"}

TEACHER_LOGITS_FILE = "teacher_logits.{split}.bin"
RUN_LOG = "run.log"

GRADCHECK_COSINE = 0.95
GRADCHECK_LAYER_COSINE = 0.90
GRADCHECK_BETAS = (0.2, 0.1, 0.05, 0.025)
GRADCHECK_FD_EPS = 1e-4
BIAS_ORDER_SLOPE = (1.6, 2.4)
BIAS_ORDER_RATIO = (2.5, 6.0)
