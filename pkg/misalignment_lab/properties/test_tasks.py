import logging

import numpy as np
import pytest
import scipy.stats

from .. import tasks
from ..tasks import (ALPHABET_SIZE, DatasetFormatError, DatasetSpec,
                     RetrievalInstance, SortingInstance, Task)

IDENTITY = tuple(range(10))
REVERSED = tuple(reversed(IDENTITY))


@pytest.mark.parametrize(
    "target, ordering, expected",
    [
        pytest.param((3, 1, 1), IDENTITY, (2, 0, 1), id="stable-ties"),
        pytest.param((7, ) * 10, IDENTITY, tuple(range(10)), id="all-identical"),
        pytest.param((0, 9, 5), REVERSED, (2, 0, 1), id="reversed"),
        pytest.param((4, 2, 8, 2), (8, 2, 4, 0, 1, 3, 5, 6, 7, 9), (3, 1, 0, 2), id="custom"),
    ],
)
def test_sorting_labels_examples(target, ordering, expected):
    assert tasks.sorting_labels(target, ordering) == expected


def test_reversed_ordering_mirrors_labels(rng):
    target = tuple(int(token) for token in rng.permutation(10))
    forward = tasks.sorting_labels(target, IDENTITY)
    backward = tasks.sorting_labels(target, REVERSED)
    assert backward == tuple(9 - label for label in forward)


@pytest.mark.parametrize(
    "target, ordering",
    [
        pytest.param((1, 10), IDENTITY, id="token-out-of-range"),
        pytest.param((1, 2), (0, ) * 10, id="not-a-permutation"),
    ],
)
def test_sorting_labels_reject(target, ordering):
    with pytest.raises(ValueError):
        tasks.sorting_labels(target, ordering)


def test_consistent_sort_accepts_any_tie_order():
    target = (3, 1, 1)
    assert tasks.is_consistent_sort(target, IDENTITY, (2, 0, 1))
    assert tasks.is_consistent_sort(target, IDENTITY, (2, 1, 0))
    assert not tasks.is_consistent_sort(target, IDENTITY, (0, 1, 2))
    assert not tasks.is_consistent_sort(target, IDENTITY, (2, 2, 0))


def test_ordering_pool():
    pool = tasks.ordering_pool(seed=0)
    assert len(pool) == tasks.POOL_SIZE
    assert len(set(pool)) == tasks.POOL_SIZE
    for ordering in pool:
        assert sorted(ordering) == list(range(ALPHABET_SIZE))
    assert tasks.ordering_pool(seed=0) == pool
    assert tasks.ordering_pool(seed=1) != pool


def test_sorting_dataset_invariants(sorting_dataset):
    assert len(sorting_dataset.train) == 64
    assert len(sorting_dataset.test) == 32
    pool = tasks.ordering_pool(seed=3)
    for instance in sorting_dataset.train + sorting_dataset.test:
        assert len(instance.target) == tasks.SEQUENCE_LENGTH
        assert instance.ordering == pool[instance.ordering_id]
        assert sorted(instance.labels) == list(range(10))
        placed = tasks.scatter(instance.target, instance.labels)
        ranks = tasks.ordering_ranks(instance.ordering)
        assert [ranks[token] for token in placed] == sorted(ranks[token] for token in placed)


def test_retrieval_dataset_invariants(retrieval_dataset):
    for instance in retrieval_dataset.train + retrieval_dataset.test:
        assert len(instance.query) == tasks.QUERY_LENGTH
        assert len(instance.reference) == tasks.SEQUENCE_LENGTH
        assert 0 <= instance.start < tasks.N_STARTS
        window = instance.reference[instance.start:instance.start + tasks.QUERY_LENGTH]
        assert window == instance.query
        assert tasks.find_first(instance.reference, instance.query) == instance.start


def test_retrieval_relabel_is_logged(caplog):
    with caplog.at_level(logging.DEBUG, logger=tasks.__name__):
        instances = tasks.gen_retrieval(DatasetSpec(Task.RETRIEVAL, seed=0, n_train=3000, n_test=1))
    relabeled = [record for record in caplog.records if "also occurs" in record.getMessage()]
    warnings = [record for record in caplog.records if record.levelno == logging.WARNING]
    assert relabeled, "expected at least one duplicated query in 3001 draws"
    assert len(warnings) == 1
    assert str(len(relabeled)) in warnings[0].getMessage()
    assert len(instances) == 3001


def test_generation_is_deterministic():
    spec = DatasetSpec(Task.SORTING, seed=42, n_train=20, n_test=5)
    assert tasks.Dataset.generate(spec) == tasks.Dataset.generate(spec)
    other = tasks.Dataset.generate(DatasetSpec(Task.SORTING, seed=43, n_train=20, n_test=5))
    assert other.train != tasks.Dataset.generate(spec).train


def test_dataset_spec_rejects_empty_split():
    with pytest.raises(ValueError):
        DatasetSpec(Task.SORTING, n_train=0)


def test_token_frequencies_are_uniform():
    dataset = tasks.Dataset.generate(DatasetSpec(Task.SORTING, seed=7, n_train=2000, n_test=1))
    counts = tasks.token_counts(dataset.train)
    assert counts.sum() == 2000 * tasks.SEQUENCE_LENGTH
    assert scipy.stats.chisquare(counts).pvalue > 0.01

    dataset = tasks.Dataset.generate(DatasetSpec(Task.RETRIEVAL, seed=7, n_train=2000, n_test=1))
    references = np.concatenate([instance.reference for instance in dataset.train])
    counts = np.bincount(references, minlength=ALPHABET_SIZE)
    assert scipy.stats.chisquare(counts).pvalue > 0.01

    ordering_ids = np.bincount(
        [instance.ordering_id for instance in tasks.gen_sorting(DatasetSpec(Task.SORTING, seed=7, n_train=2000, n_test=1))],
        minlength=tasks.POOL_SIZE,
    )
    assert scipy.stats.chisquare(ordering_ids).pvalue > 0.01


@pytest.mark.parametrize("task", [Task.SORTING, Task.RETRIEVAL])
def test_save_and_load_dataset(tmp_path, task):
    dataset = tasks.Dataset.generate(DatasetSpec(task, seed=1, n_train=10, n_test=4))
    paths = tasks.save_dataset(dataset, tmp_path)
    assert [path.name for path in paths] == [f"{task.value}_train.txt", f"{task.value}_test.txt"]
    assert tasks.load_dataset(tmp_path, task) == dataset
    assert tasks.load(paths[0]) == dataset.train


def test_record_formats():
    sorting = SortingInstance(
        target=(3, 1, 1, 0, 0, 0, 0, 0, 0, 0),
        ordering_id=2,
        ordering=IDENTITY,
        labels=tasks.sorting_labels((3, 1, 1, 0, 0, 0, 0, 0, 0, 0), IDENTITY),
    )
    assert tasks.format_record(sorting) == (
        "2 0,1,2,3,4,5,6,7,8,9 3,1,1,0,0,0,0,0,0,0 9,7,8,0,1,2,3,4,5,6"
    )
    retrieval = RetrievalInstance(query=(1, 2, 3), reference=(0, 1, 2, 3, 0, 0, 0, 0, 0, 0), start=1)
    assert tasks.format_record(retrieval) == "1,2,3 0,1,2,3,0,0,0,0,0,0 1"
    assert tasks.detect_task(tasks.format_record(sorting)) is Task.SORTING
    assert tasks.detect_task(tasks.format_record(retrieval)) is Task.RETRIEVAL


@pytest.mark.parametrize(
    "line, message",
    [
        pytest.param("1,2,3 0,1,2,3,0,0,0,0,0,0 2", "first occurrence", id="wrong-start"),
        pytest.param("1,2,3 0,1,2,3,0,0,0,0,0 1", "expected 10", id="short-reference"),
        pytest.param("1,2,x 0,1,2,3,0,0,0,0,0,0 1", "comma-separated", id="bad-token"),
        pytest.param("1,2,3 0,1,2,3,0,0,0,0,0,11 1", "alphabet", id="out-of-alphabet"),
        pytest.param("1,2,3 0,1,2,3,0,0,0,0,0,0 -1", "nonnegative", id="negative-start"),
    ],
)
def test_retrieval_format_errors(line, message):
    good = "1,2,3 0,1,2,3,0,0,0,0,0,0 1"
    with pytest.raises(DatasetFormatError) as ex:
        tasks.loads(f"{good}\n{line}\n", task=Task.RETRIEVAL, source="data.txt")
    assert str(ex.value).startswith("data.txt:2:")
    assert message in str(ex.value)


def test_sorting_format_errors():
    line = "2 0,1,2,3,4,5,6,7,8,9 3,1,1,0,0,0,0,0,0,0 9,7,8,0,1,2,3,4,5,6"
    assert len(tasks.loads(line, task=Task.SORTING)) == 1
    for bad, message in [
        (line.replace("9,7,8", "9,8,7"), "stable sort"),
        ("7" + line[1:], "ordering id"),
        (line + " extra", "expected 4 fields"),
    ]:
        with pytest.raises(DatasetFormatError, match=message):
            tasks.loads(bad, task=Task.SORTING)
