import os
import pathlib

MODULE_PATH = pathlib.Path(__file__).parent.resolve()

OUTPUT_ROOT = pathlib.Path(
    os.environ.get("MISALIGNMENT_LAB_OUTPUT", "lab_output")
)
WORKERS = int(os.environ.get("MISALIGNMENT_LAB_WORKERS", "1"))
VERBOSE = os.environ.get("VERBOSE", "").lower().startswith("y")
RUN_SLOW = os.environ.get("MISALIGNMENT_LAB_SLOW", "").lower().startswith("y")

# Monte Carlo trials are drawn in chunks of this size; each chunk owns an RNG
# stream, so changing it changes every estimate.
CHUNK_TRIALS = 1024

LEMMA1_SLACK = 1e-9
LEMMA2_TOLERANCE = 0.03
GAMMA_TOLERANCE = 0.05
CROSSING_TOLERANCE = 0.05

# Real-valued CSV cells: 17 significant digits round-trip a float64.
CSV_FLOAT_FORMAT = "{:.17g}"

CHECKPOINT_MAGIC = "misalignment-lab-checkpoint"
CHECKPOINT_VERSION = 1

PAD_TOKEN = 10
