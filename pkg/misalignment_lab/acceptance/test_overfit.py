import pytest

from .. import conftest
from ..models import MODEL_VARIANTS, PROFILES, ModelSpec, build_model
from ..tasks import Dataset, DatasetSpec, Task
from ..training import TrainConfig, evaluate, train

pytestmark = conftest.slow

SUBSET = 16
EPOCHS = 500


@pytest.mark.parametrize("task", [pytest.param(task, id=task.value) for task in Task])
@pytest.mark.parametrize(
    "variant", [pytest.param(variant, id=variant.value) for variant in MODEL_VARIANTS]
)
def test_memorizes_small_subset(task, variant):
    """Every variant fits 16 training instances within 500 epochs."""
    dataset = Dataset.generate(DatasetSpec(task, seed=0))
    subset = dataset.train[:SUBSET]
    model = build_model(ModelSpec(variant=variant, task=task, **PROFILES["fast"]))
    # Score the subset itself after every epoch.
    log = train(
        model,
        Dataset(task, dataset.train, subset),
        TrainConfig(lr=1e-3, epochs=EPOCHS, batch_size=SUBSET),
        train_instances=subset,
    )
    best = max(row.test_accuracy for row in log.rows)
    assert best >= 0.99, (task.value, variant.value, best)
    assert evaluate(model, subset).n_instances == SUBSET
