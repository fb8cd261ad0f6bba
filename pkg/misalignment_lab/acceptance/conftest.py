"""
Fixtures for the long-running acceptance checks.

Every test module here is marked ``slow`` and skipped unless
MISALIGNMENT_LAB_SLOW=y.  MISALIGNMENT_LAB_TASKS (space-separated) limits
the training checks to some tasks.
"""
import logging
import os

import pytest

from ..attention import Variant
from ..models import MODEL_VARIANTS, PROFILES, ModelSpec
from ..tasks import Dataset, DatasetSpec, Task
from ..training import TrainConfig, TrainJob, run_jobs

logger = logging.getLogger(__name__)

ENV_VAR = "MISALIGNMENT_LAB_TASKS"
TRIALS = 100_000
FAST_EPOCHS = 100
SEEDS = (0, 1, 2)

try:
    tasks = [Task(name.lower()) for name in os.environ[ENV_VAR].split()]
except KeyError:
    tasks = list(Task)
except ValueError:
    tasks = []
    logger.error(f"Issues with env variable {ENV_VAR}")


def train_variants(task: Task, seed: int) -> dict[Variant, float]:
    """Final test accuracy of every variant on the fast profile."""
    dataset = Dataset.generate(DatasetSpec(task, seed=0))
    jobs = [
        TrainJob(
            spec=ModelSpec(variant=variant, task=task, **PROFILES["fast"]),
            cfg=TrainConfig(epochs=FAST_EPOCHS, seed=seed),
            dataset=dataset,
            model_seed=seed,
        )
        for variant in MODEL_VARIANTS
    ]
    return {
        result.job.spec.variant: result.log.final.test_accuracy
        for result in run_jobs(jobs)
    }


@pytest.fixture(scope="session", params=tasks, ids=[task.value for task in tasks])
def fast_accuracies(request) -> tuple[Task, dict[int, dict[Variant, float]]]:
    task = request.param
    results = {seed: train_variants(task, seed) for seed in SEEDS}
    for seed, finals in results.items():
        logger.info(
            "%s seed %d: %s", task.value, seed,
            ", ".join(f"{variant.value}={acc:.4f}" for variant, acc in finals.items()),
        )
    return task, results
