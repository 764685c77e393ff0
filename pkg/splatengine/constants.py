"""Mainly reconstruction presets and defaults."""

# Presets: partial RunConfig overrides applied over the defaults.
PRESETS = {
    "default": {},
    "human1": {
        "weights": {"depth": 1.5},
        "freeze_background": False,
    },
}

DEFAULT_PRESET = "default"

# Environment variables consulted, in order, when no thread count is given.
THREADS_ENV_VARS = ("HOLIGS_THREADS", "SPLATENGINE_THREADS")

CHECKPOINT_MAGIC = b"HGSC"
CHECKPOINT_VERSION = 1

TENSOR_MAGIC = b"HGST"
DATASET_VERSION = 1
MANIFEST_NAME = "manifest.json"
GROUND_TRUTH_NAME = "ground_truth.hgsc"

STAGES = ("init", "proxy", "component", "joint")
# Stage recorded in the checkpoint of a synthetic scene's true model.
TRUTH_STAGE = "truth"
