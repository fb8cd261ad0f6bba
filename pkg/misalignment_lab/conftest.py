"""
misalignment-lab test configuration.


Environment variables used:

    MISALIGNMENT_LAB_SLOW
    MISALIGNMENT_LAB_TASKS
    MISALIGNMENT_LAB_WORKERS
    VERBOSE

"""
from __future__ import annotations

import dataclasses
import logging
import math
from typing import Any, Callable, Generator, Optional, Sequence

import numpy as np
import pytest

from . import tensor as T
from .constants import RUN_SLOW
from .tasks import Dataset, DatasetSpec, Task
from .tensor import Tensor
from .util import make_rng

logger = logging.getLogger(__name__)

FD_STEP = 1e-5
FD_TOLERANCE = 1e-4


def numeric_gradient(
    loss_fn: Callable[[], Tensor], param: Tensor, step: float = FD_STEP
) -> np.ndarray:
    """Central finite differences of ``loss_fn()`` with respect to ``param``."""
    grad = np.zeros(param.shape)
    flat = param.data.reshape(-1)
    grad_flat = grad.reshape(-1)
    with T.no_grad():
        for idx in range(flat.size):
            original = flat[idx]
            flat[idx] = original + step
            plus = loss_fn().item()
            flat[idx] = original - step
            minus = loss_fn().item()
            flat[idx] = original
            grad_flat[idx] = (plus - minus) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error; zero when both gradients vanish."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def gradient_errors(
    loss_fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = FD_STEP
) -> dict[str, float]:
    """
    Compare backward() against central differences for every parameter.

    Parameters
    ----------
    loss_fn : callable
        Builds a scalar loss from ``params``; called once on a tape and twice
        per parameter entry without one.
    params : sequence of Tensor
        Tensors with ``requires_grad`` set.

    Returns
    -------
    errors : dict
        Parameter name (or index) to relative error.
    """
    for param in params:
        param.zero_grad()
    with T.Tape():
        loss = loss_fn()
        T.backward(loss)

    errors = {}
    for idx, param in enumerate(params):
        analytic = param.grad if param.grad is not None else np.zeros(param.shape)
        numeric = numeric_gradient(loss_fn, param, step)
        errors[param.name or str(idx)] = relative_error(analytic, numeric)
    return errors


def assert_gradients_match(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    tolerance: float = FD_TOLERANCE,
) -> None:
    errors = gradient_errors(loss_fn, params)
    bad = {name: err for name, err in errors.items() if not err < tolerance}
    assert not bad, f"Finite-difference mismatch (tolerance {tolerance}): {bad}"


def loop_softmax(row: Sequence[float]) -> list[float]:
    peak = max(row)
    exps = [math.exp(value - peak) for value in row]
    total = sum(exps)
    return [value / total for value in exps]


def loop_attention(
    queries: np.ndarray,
    keys: np.ndarray,
    values: np.ndarray,
    bias: Optional[Callable[[int, int], float]] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Scalar re-derivation of ``softmax((q.k + bias) / sqrt(d_k)) @ v``.

    ``queries``, ``keys`` and ``values`` are already projected.
    """
    m, d_k = queries.shape
    n = keys.shape[0]
    weights = np.zeros((m, n))
    output = np.zeros((m, values.shape[1]))
    for i in range(m):
        scores = []
        for j in range(n):
            dot = 0.0
            for c in range(d_k):
                dot += queries[i, c] * keys[j, c]
            if bias is not None:
                dot += bias(i, j)
            scores.append(dot / math.sqrt(d_k))
        row = loop_softmax(scores)
        for j in range(n):
            weights[i, j] = row[j]
            for c in range(values.shape[1]):
                output[i, c] += row[j] * values[j, c]
    return output, weights


def loop_bias(w1: np.ndarray, b1: np.ndarray, w2: np.ndarray, offset: float) -> float:
    """The bias MLP on one scalar offset, unit by unit."""
    total = 0.0
    for unit in range(w1.shape[1]):
        hidden = max(0.0, offset * w1[0, unit] + b1[unit])
        total += hidden * w2[unit, 0]
    return total


def find_differences(
    struct1: dict, struct2: dict, skip_keys: Optional[list[str]] = None
) -> Generator[tuple[str, Any, Any], None, None]:
    """
    Compare two "structures" and yield keys and values which differ.

    Parameters
    ----------
    struct1 : dict
        The first structure to compare, e.g. ``dataclasses.asdict`` of an
        estimate or a metrics record.

    struct2 : dict
        The second structure to compare.

    skip_keys : list of str, optional
        List of keys to skip when comparing.  Defaults to ['wall_ms'].

    Yields
    ------
    key : str
        The key that differs.

    value1 :
        The value from struct1.

    value2 :
        The value from struct2.
    """
    if skip_keys is None:
        skip_keys = ['wall_ms']

    for key in sorted(set(struct1).union(struct2)):
        if key in skip_keys:
            continue
        try:
            value1 = struct1[key]
        except KeyError:
            raise RuntimeError(f"Missing key {key} in first struct") from None

        try:
            value2 = struct2[key]
        except KeyError:
            raise RuntimeError(f"Missing key {key} in second struct") from None

        if hasattr(value2, "tolist"):
            value2 = value2.tolist()
        if hasattr(value1, "tolist"):
            value1 = value1.tolist()

        try:
            if math.isnan(value1) and math.isnan(value2):
                # nan != nan
                continue
        except TypeError:
            ...

        if value2 != value1:
            yield key, value1, value2


def compare_structures(struct1, struct2, desc1="first", desc2="second") -> str:
    """
    Compare two dataclass instances (or dicts) and return a human-friendly
    message showing the difference.

    Identical structures will return an empty string.
    """
    if dataclasses.is_dataclass(struct1):
        struct1 = dataclasses.asdict(struct1)
    if dataclasses.is_dataclass(struct2):
        struct2 = dataclasses.asdict(struct2)
    differences = []
    for key, value1, value2 in find_differences(struct1, struct2):
        differences.append(
            f"Element '{key}' : {desc1} has '{value1}', but "
            f"{desc2} has '{value2}'"
        )
    return "\n\t".join(differences)


def random_tensor(rng: np.random.Generator, *shape: int, name: Optional[str] = None) -> Tensor:
    """A trainable tensor with entries uniform in [-2, 2]."""
    return Tensor.parameter(rng.uniform(-2.0, 2.0, size=shape), name=name)


@pytest.fixture
def rng() -> np.random.Generator:
    return make_rng(1234, "tests")


@pytest.fixture(scope="session")
def sorting_dataset() -> Dataset:
    return Dataset.generate(DatasetSpec(Task.SORTING, seed=3, n_train=64, n_test=32))


@pytest.fixture(scope="session")
def retrieval_dataset() -> Dataset:
    return Dataset.generate(DatasetSpec(Task.RETRIEVAL, seed=3, n_train=64, n_test=32))


@pytest.fixture
def output_root(tmp_path, monkeypatch):
    """Point the default output root at a temporary directory."""
    from . import constants
    monkeypatch.setattr(constants, "OUTPUT_ROOT", tmp_path / "lab_output")
    return tmp_path / "lab_output"


slow = pytest.mark.skipif(
    not RUN_SLOW, reason="Set MISALIGNMENT_LAB_SLOW=y to run acceptance tests"
)
