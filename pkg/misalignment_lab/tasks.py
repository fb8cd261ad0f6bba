"""
Synthetic sorting and retrieval datasets.

Sorting: given a 10-token target over the alphabet {0..9} and a reference
ordering of that alphabet, predict each token's position in the sorted
sequence.  Retrieval: given a 3-token query and a 10-token reference that
contains it, predict where the query starts.
"""
from __future__ import annotations

import dataclasses
import enum
import logging
import os
import pathlib
from typing import Optional, Sequence, Union

import numpy as np

from .util import atomic_write_text, make_rng

logger = logging.getLogger(__name__)

ALPHABET_SIZE = 10
SEQUENCE_LENGTH = 10
QUERY_LENGTH = 3
N_STARTS = SEQUENCE_LENGTH - QUERY_LENGTH + 1
POOL_SIZE = 5


class DatasetFormatError(ValueError):
    ...


class Task(str, enum.Enum):
    SORTING = "sorting"
    RETRIEVAL = "retrieval"


@dataclasses.dataclass(frozen=True)
class SortingInstance:
    target: tuple[int, ...]
    ordering_id: int
    ordering: tuple[int, ...]
    labels: tuple[int, ...]


@dataclasses.dataclass(frozen=True)
class RetrievalInstance:
    query: tuple[int, ...]
    reference: tuple[int, ...]
    start: int


Instance = Union[SortingInstance, RetrievalInstance]


@dataclasses.dataclass(frozen=True)
class DatasetSpec:
    task: Task
    seed: int = 0
    n_train: int = 1000
    n_test: int = 200

    def __post_init__(self):
        object.__setattr__(self, "task", Task(self.task))
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError(
                f"Dataset counts must be positive: n_train={self.n_train}, "
                f"n_test={self.n_test}"
            )


@dataclasses.dataclass
class Dataset:
    task: Task
    train: list
    test: list

    @classmethod
    def generate(cls, spec: DatasetSpec) -> Dataset:
        generator = gen_sorting if spec.task is Task.SORTING else gen_retrieval
        instances = generator(spec)
        return cls(task=spec.task, train=instances[:spec.n_train], test=instances[spec.n_train:])


def _check_tokens(tokens: Sequence[int], what: str) -> None:
    for token in tokens:
        if not 0 <= token < ALPHABET_SIZE:
            raise ValueError(f"{what} token {token} is outside the alphabet 0..{ALPHABET_SIZE - 1}")


def _check_ordering(ordering: Sequence[int]) -> None:
    if sorted(ordering) != list(range(ALPHABET_SIZE)):
        raise ValueError(f"Ordering {list(ordering)} is not a permutation of 0..{ALPHABET_SIZE - 1}")


def ordering_ranks(ordering: Sequence[int]) -> list[int]:
    """``rank[token]`` = position of ``token`` in the ordering."""
    _check_ordering(ordering)
    ranks = [0] * ALPHABET_SIZE
    for position, token in enumerate(ordering):
        ranks[token] = position
    return ranks


def sorting_labels(target: Sequence[int], ordering: Sequence[int]) -> tuple[int, ...]:
    """
    Sorted-position index of every token, ties broken by original position.

    Parameters
    ----------
    target : sequence of int
        Tokens to sort.
    ordering : sequence of int
        A permutation of the alphabet; earlier tokens sort first.

    Returns
    -------
    labels : tuple of int
        ``labels[i]`` is where ``target[i]`` lands in the sorted sequence.

    Raises
    ------
    ValueError
        If a token is outside the alphabet or ``ordering`` is not a
        permutation.
    """
    _check_tokens(target, "Target")
    ranks = ordering_ranks(ordering)
    order = sorted(range(len(target)), key=lambda idx: ranks[target[idx]])
    labels = [0] * len(target)
    for position, idx in enumerate(order):
        labels[idx] = position
    return tuple(labels)


def scatter(target: Sequence[int], labels: Sequence[int]) -> list[int]:
    """Place ``target[i]`` at ``labels[i]``."""
    placed = [0] * len(target)
    for token, label in zip(target, labels):
        placed[label] = token
    return placed


def is_consistent_sort(
    target: Sequence[int], ordering: Sequence[int], labels: Sequence[int]
) -> bool:
    """Whether ``labels`` is a permutation that sorts ``target`` under ``ordering``."""
    if sorted(labels) != list(range(len(target))):
        return False
    ranks = ordering_ranks(ordering)
    placed = [ranks[token] for token in scatter(target, labels)]
    return all(a <= b for a, b in zip(placed, placed[1:]))


def ordering_pool(seed: int, size: int = POOL_SIZE) -> list[tuple[int, ...]]:
    """``size`` distinct permutations of the alphabet, shared by train and test."""
    rng = make_rng(seed, "ordering-pool")
    pool: list[tuple[int, ...]] = []
    while len(pool) < size:
        candidate = tuple(int(token) for token in rng.permutation(ALPHABET_SIZE))
        if candidate not in pool:
            pool.append(candidate)
    return pool


def gen_sorting(spec: DatasetSpec) -> list[SortingInstance]:
    """``n_train + n_test`` sorting instances, training instances first."""
    pool = ordering_pool(spec.seed)
    rng = make_rng(spec.seed, Task.SORTING.value)
    instances = []
    for _ in range(spec.n_train + spec.n_test):
        target = tuple(int(token) for token in rng.integers(0, ALPHABET_SIZE, SEQUENCE_LENGTH))
        ordering_id = int(rng.integers(0, len(pool)))
        ordering = pool[ordering_id]
        instances.append(
            SortingInstance(
                target=target,
                ordering_id=ordering_id,
                ordering=ordering,
                labels=sorting_labels(target, ordering),
            )
        )
    logger.info("Generated %d sorting instances (seed=%d)", len(instances), spec.seed)
    return instances


def find_first(reference: Sequence[int], query: Sequence[int]) -> Optional[int]:
    width = len(query)
    for start in range(len(reference) - width + 1):
        if tuple(reference[start:start + width]) == tuple(query):
            return start
    return None


def gen_retrieval(spec: DatasetSpec) -> list[RetrievalInstance]:
    """
    ``n_train + n_test`` retrieval instances, training instances first.

    The query is inserted among 7 random fillers.  When the fillers happen
    to form an earlier copy of the query, the label is the first occurrence.
    """
    rng = make_rng(spec.seed, Task.RETRIEVAL.value)
    instances = []
    relabeled = 0
    for _ in range(spec.n_train + spec.n_test):
        query = [int(token) for token in rng.integers(0, ALPHABET_SIZE, QUERY_LENGTH)]
        fillers = [
            int(token)
            for token in rng.integers(0, ALPHABET_SIZE, SEQUENCE_LENGTH - QUERY_LENGTH)
        ]
        inserted_at = int(rng.integers(0, N_STARTS))
        reference = fillers[:inserted_at] + query + fillers[inserted_at:]
        start = find_first(reference, query)
        if start != inserted_at:
            relabeled += 1
            logger.debug(
                "Query %s inserted at %d also occurs at %d", query, inserted_at, start
            )
        instances.append(
            RetrievalInstance(query=tuple(query), reference=tuple(reference), start=start)
        )
    if relabeled:
        logger.warning(
            "%d of %d retrieval instances relabeled to the first query occurrence",
            relabeled, len(instances),
        )
    logger.info("Generated %d retrieval instances (seed=%d)", len(instances), spec.seed)
    return instances


def _join(tokens: Sequence[int]) -> str:
    return ",".join(str(token) for token in tokens)


def format_record(instance: Instance) -> str:
    if isinstance(instance, SortingInstance):
        return " ".join(
            (
                str(instance.ordering_id),
                _join(instance.ordering),
                _join(instance.target),
                _join(instance.labels),
            )
        )
    return " ".join((_join(instance.query), _join(instance.reference), str(instance.start)))


def dumps(instances: Sequence[Instance]) -> str:
    return "".join(format_record(instance) + "\n" for instance in instances)


def serialize(instances: Sequence[Instance], path: Union[str, os.PathLike]) -> pathlib.Path:
    """Write one record per line; see ``format_record``."""
    return atomic_write_text(path, dumps(instances))


def _tokens(field: str, length: int, what: str) -> tuple[int, ...]:
    try:
        tokens = tuple(int(token) for token in field.split(","))
    except ValueError:
        raise ValueError(f"{what} {field!r} is not a comma-separated list of integers") from None
    if len(tokens) != length:
        raise ValueError(f"{what} has {len(tokens)} tokens, expected {length}")
    _check_tokens(tokens, what)
    return tokens


def parse_sorting(line: str) -> SortingInstance:
    fields = line.split(" ")
    if len(fields) != 4:
        raise ValueError(f"expected 4 fields, found {len(fields)}")
    ordering_id, ordering, target, labels = fields
    if not ordering_id.isdigit() or int(ordering_id) >= POOL_SIZE:
        raise ValueError(f"ordering id {ordering_id!r} is not in 0..{POOL_SIZE - 1}")
    instance = SortingInstance(
        ordering_id=int(ordering_id),
        ordering=_tokens(ordering, ALPHABET_SIZE, "Ordering"),
        target=_tokens(target, SEQUENCE_LENGTH, "Target"),
        labels=_tokens(labels, SEQUENCE_LENGTH, "Labels"),
    )
    if instance.labels != sorting_labels(instance.target, instance.ordering):
        raise ValueError("labels do not match the stable sort of the target")
    return instance


def parse_retrieval(line: str) -> RetrievalInstance:
    fields = line.split(" ")
    if len(fields) != 3:
        raise ValueError(f"expected 3 fields, found {len(fields)}")
    query, reference, start = fields
    if not start.isdigit():
        raise ValueError(f"start {start!r} is not a nonnegative integer")
    instance = RetrievalInstance(
        query=_tokens(query, QUERY_LENGTH, "Query"),
        reference=_tokens(reference, SEQUENCE_LENGTH, "Reference"),
        start=int(start),
    )
    if instance.start != find_first(instance.reference, instance.query):
        raise ValueError(
            f"start {instance.start} is not the first occurrence of the query"
        )
    return instance


def detect_task(line: str) -> Task:
    return Task.SORTING if len(line.split(" ")) == 4 else Task.RETRIEVAL


def loads(text: str, task: Optional[Task] = None, source: str = "<string>") -> list:
    """
    Parse records; ``task`` is inferred from the first line when omitted.

    Raises
    ------
    DatasetFormatError
        Naming the source and 1-based line number of the first bad record.
    """
    instances = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if task is None:
            task = detect_task(line)
        parser = parse_sorting if Task(task) is Task.SORTING else parse_retrieval
        try:
            instances.append(parser(line))
        except ValueError as ex:
            raise DatasetFormatError(f"{source}:{lineno}: {ex}") from None
    return instances


def load(path: Union[str, os.PathLike], task: Optional[Task] = None) -> list:
    path = pathlib.Path(path)
    return loads(path.read_text(encoding="utf-8"), task=task, source=str(path))


def split_paths(directory: pathlib.Path, task: Task) -> tuple[pathlib.Path, pathlib.Path]:
    task = Task(task)
    return directory / f"{task.value}_train.txt", directory / f"{task.value}_test.txt"


def save_dataset(dataset: Dataset, directory: pathlib.Path) -> list[pathlib.Path]:
    train_path, test_path = split_paths(directory, dataset.task)
    return [serialize(dataset.train, train_path), serialize(dataset.test, test_path)]


def load_dataset(directory: pathlib.Path, task: Task) -> Dataset:
    train_path, test_path = split_paths(directory, task)
    return Dataset(task=Task(task), train=load(train_path, task), test=load(test_path, task))


def token_counts(instances: Sequence[Instance]) -> np.ndarray:
    """Histogram of generated tokens (targets or queries and references)."""
    counts = np.zeros(ALPHABET_SIZE, dtype=np.int64)
    for instance in instances:
        tokens = (
            instance.target if isinstance(instance, SortingInstance)
            else instance.query + instance.reference
        )
        counts += np.bincount(tokens, minlength=ALPHABET_SIZE)
    return counts
