"""Constants for the fedlsi simulator."""

# Neural core
DEFAULT_BN_MOMENTUM = 0.1
DEFAULT_BN_EPS = 1e-5
DEFAULT_LAYER_NORM_EPS = 1e-5
LEAKY_RELU_SLOPE = 0.2
GRAD_CHECK_STEP = 1e-5
GRAD_CHECK_FLOOR = 1e-3

# Local training (stages 1 and 4)
DEFAULT_LR = 0.001
DEFAULT_MOMENTUM = 0.9
DEFAULT_WEIGHT_DECAY = 5e-4
DEFAULT_BATCH_SIZE = 32
DEFAULT_LOCAL_EPOCHS = 10
DEFAULT_ROUNDS = 20
DEFAULT_LAMBDA_DI = 1.0
LAMBDA_DI_GRID = (10.0, 1.0, 0.1, 0.01, 0.001, 0.0001)

# Model dimensions
DEFAULT_HIDDEN = (32,)
DEFAULT_LATENT_DIM = 16

# Latent space inversion (stage 2)
DEFAULT_LAMBDA_CLS = 1.0
DEFAULT_LAMBDA_BN = 0.001
DEFAULT_LAMBDA_NORM = 0.0001
DEFAULT_SYNTH_LR = 0.0001
DEFAULT_SYNTH_STEPS = 2000
DEFAULT_SYNTH_SAMPLES = 200

# Representation translator (stage 3)
DEFAULT_LAMBDA_CLSG = 1.0
DEFAULT_LAMBDA_REC = 10.0
DEFAULT_LAMBDA_CLSD = 1.0
DEFAULT_GAN_LR = 0.0001
DEFAULT_GAN_STEPS = 2000
DEFAULT_GAN_HIDDEN = 64
DEFAULT_DROPOUT = 0.5
LOG_CLAMP = 1e-12

# Aggregation (stage 5)
IMPORTANCE_FLOOR = 1e-12

# Synthetic data
PROTOTYPE_RADIUS = 3.0
DEFAULT_CLASSES = 4
DEFAULT_ANGLES = (0.0, 30.0, 60.0, 90.0)
DEFAULT_NOISE = 0.5
DEFAULT_SAMPLES_PER_DOMAIN = 300
DEFAULT_AMBIENT_DIM = 20
DEFAULT_VAL_FRACTION = 0.1

# Wire protocol
FRAME_MAGIC = b"FLSI"
FRAME_VERSION = 0x01
MSG_PARAM_UPLOAD = 0x01
MSG_PARAM_BROADCAST = 0x02
MSG_GENERATOR_DELIVERY = 0x03
MSG_ACK = 0x04
SERVER_ID = 0xFFFF

# Experiment outputs
METRICS_FILE = "metrics.csv"
COMMS_FILE = "comms.csv"
PROJECTIONS_FILE = "projections.csv"
REPORT_FILE = "report.json"
METRIC_DECIMALS = 6

# Seed stream purposes, combined with (seed, client id)
STREAM_TRAIN = 0
STREAM_LABELS = 1
STREAM_INVARIANCE = 2
STREAM_SERVER = 3
