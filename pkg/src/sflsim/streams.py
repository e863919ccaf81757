"""Fixed stream ids so every RNG in the simulator is seeded from a distinct,
collision-free (seed, stream, ...) tuple."""

MODEL_INIT = 11
DATASET = 12
PARTITION = 13
PROFILES = 14
MODE_SCHEDULE = 15
OBSERVATION = 16
BANDWIDTH = 17
CONTROLLER = 18
WORKER_SAMPLING = 19
EVAL_SPLIT = 20

MODE_IDS = {"mergesfl": 0, "sfl_t": 1, "fixed_batch": 2}
