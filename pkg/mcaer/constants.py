from enum import IntEnum

CLASS_NAMES = ("angry", "disgust", "fear", "happy", "sad", "surprise", "neutral")
NUM_CLASSES = len(CLASS_NAMES)
STREAMS = ("face", "context", "body")
REQUIRED_STREAMS = ("face", "context")

# training regime
LR0 = 4e-3
LR_DECAY = 0.4
LR_STEP_EPOCHS = 40
BATCH_SIZE = 32
EPOCHS = 200
SPLIT_FRACTIONS = (0.7, 0.1, 0.2)

RMSPROP_ALPHA = 0.99
RMSPROP_EPS = 1e-8

# input geometry
FACE_SIZE = 96
CONTEXT_PAD = (400, 712)
CONTEXT_SCALE = 3
CROP_PAD = 5
BODY_SIZE = 256

MASK_THRESHOLD = 128
MASK_OVERLAP_MIN = 0.1

# synthetic skeleton: head, neck, shoulders, elbows, wrists, hip, knees, ankles
KEYPOINT_NAMES = (
    "head",
    "neck",
    "l_shoulder",
    "r_shoulder",
    "l_elbow",
    "r_elbow",
    "l_wrist",
    "r_wrist",
    "hip",
    "l_knee",
    "r_knee",
    "l_ankle",
    "r_ankle",
)


class ExitCode(IntEnum):
    OK = 0
    USAGE = 1
    IO = 2
    CACHE_STRICT = 3
    TRAIN_ABORT = 4
    MISSING_CUE = 5
