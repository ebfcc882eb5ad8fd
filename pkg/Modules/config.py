"""
Method registry and shared constants.
"""

METHODS = {
    "Naive": {
        "description": "Classification loss only (fine-tuning)",
        "pred_kd": False,
        "feat_kd": False,
        "param_reg": None,
    },
    "PredKD": {
        "description": "Prediction distillation over old heads (LwF.MC with BCE heads)",
        "pred_kd": True,
        "feat_kd": False,
        "param_reg": None,
    },
    "PredKD+FeatKD": {
        "description": "Prediction distillation plus squared-error feature distillation",
        "pred_kd": True,
        "feat_kd": True,
        "param_reg": None,
    },
    "PredKD+EWC": {
        "description": "Prediction distillation plus Fisher-weighted parameter drift",
        "pred_kd": True,
        "feat_kd": False,
        "param_reg": "ewc",
    },
    "PredKD+L2": {
        "description": "Prediction distillation plus unweighted parameter drift",
        "pred_kd": True,
        "feat_kd": False,
        "param_reg": "l2",
    },
    "EWC": {
        "description": "Fisher-weighted parameter drift only",
        "pred_kd": False,
        "feat_kd": False,
        "param_reg": "ewc",
    },
    "L2": {
        "description": "Unweighted parameter drift only",
        "pred_kd": False,
        "feat_kd": False,
        "param_reg": "l2",
    },
    "FeatKD": {
        "description": "Feature distillation only",
        "pred_kd": False,
        "feat_kd": True,
        "param_reg": None,
    },
    "UpperBound": {
        "description": "Joint training on every class seen so far (oracle, not rehearsal-free)",
        "pred_kd": False,
        "feat_kd": False,
        "param_reg": None,
    },
}

HEAD_MODES = ("softmax", "sigmoid")

# Loss weights tuned on a short task sequence: EWC, L2, PredKD, FeatKD.
TUNED_LOSS_WEIGHTS = {
    "ewc": 1e1,
    "l2": 5e-1,
    "pred_kd": 1.0,
    "feat_kd": 5.0,
}

# Desk-scale schedule; a shape-preserving shrink of 250 epochs with /10 at 100/150/200.
DEFAULT_EPOCHS = 40
DEFAULT_LR_DECAY_EPOCHS = [20, 30]
DEFAULT_LR_DECAY_FACTOR = 0.1
DEFAULT_BATCH_SIZE = 64
DEFAULT_LEARNING_RATE = 1e-3
DEFAULT_WEIGHT_DECAY = 2e-4

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8

DEFAULT_HIDDEN_DIMS = [256, 128, 128, 64]
DEFAULT_CKA_TAPS = ["L-4", "L-3", "L-2", "pen", "linear"]
DEFAULT_PROBE_SIZE = 256
DEFAULT_FEAT_TAPS = ["pen"]

TRAIN_FRACTION = 0.8

CIFAR_VARIANTS = {
    "cifar10": {"label_bytes": 1, "num_classes": 10},
    "cifar100_fine": {"label_bytes": 2, "num_classes": 100},
}
CIFAR_PIXEL_BYTES = 3072

CHECKPOINT_MAGIC = b"DBCKPT01"

OUTPUT_ROOT_ENV = "CONTINUAL_OUTPUT_ROOT"
LOG_LEVEL_ENV = "CONTINUAL_LOG_LEVEL"
DEBUG_NUMERICS_ENV = "CONTINUAL_DEBUG_NUMERICS"
DEFAULT_OUTPUT_DIR = "runs"
