"""
Standard, cross, naive misaligned and indirect attention.

Row-vector convention throughout: ``Q = X @ W_q`` with ``W_q`` of shape
``(d_model, d_k)``.  Every function accepts optional leading batch axes.
"""
from __future__ import annotations

import dataclasses
import enum
import logging
import math
from typing import Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor
from .util import orthogonal_matrix

logger = logging.getLogger(__name__)

BIAS_HIDDEN = 32


class Variant(str, enum.Enum):
    STANDARD = "standard"
    CROSS = "cross"
    NAIVE_MISALIGNED = "naive_misaligned"
    INDIRECT = "indirect"


class InitMode(str, enum.Enum):
    ORTHOGONAL = "orthogonal"
    GAUSSIAN = "gaussian"


@dataclasses.dataclass(frozen=True)
class AttentionConfig:
    d_model: int
    n_heads: int = 1
    n_keys: int = 1
    n_queries: Optional[int] = None

    def __post_init__(self):
        for name in ("d_model", "n_heads", "n_keys"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ValueError(
                f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}"
            )
        if self.n_queries is None:
            object.__setattr__(self, "n_queries", self.n_keys)
        if not 1 <= self.n_queries <= self.n_keys:
            raise ValueError(
                f"n_queries={self.n_queries} must be in [1, n_keys={self.n_keys}]"
            )

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads


def _init_matrix(
    rows: int, cols: int, rng: np.random.Generator, init_mode: InitMode
) -> np.ndarray:
    if InitMode(init_mode) is InitMode.ORTHOGONAL:
        return orthogonal_matrix(rows, cols, rng)
    return rng.standard_normal((rows, cols)) / math.sqrt(rows)


@dataclasses.dataclass
class ProjectionSet:
    """Query, key and value projections of one attention block."""
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    init_mode: InitMode = InitMode.ORTHOGONAL

    @classmethod
    def initialize(
        cls,
        d_model: int,
        rng: np.random.Generator,
        init_mode: InitMode = InitMode.ORTHOGONAL,
        prefix: str = "",
    ) -> ProjectionSet:
        return cls(
            *(
                Tensor.parameter(
                    _init_matrix(d_model, d_model, rng, init_mode),
                    name=f"{prefix}w_{which}",
                )
                for which in "qkv"
            ),
            init_mode=InitMode(init_mode),
        )

    @classmethod
    def identity(cls, d_model: int) -> ProjectionSet:
        eye = np.eye(d_model)
        return cls(Tensor(eye), Tensor(eye), Tensor(eye))

    @property
    def d_k(self) -> int:
        return self.w_q.shape[-1]

    def head(self, index: int, n_heads: int) -> ProjectionSet:
        """Column slice ``index`` of ``n_heads``; gradients reach the full set."""
        d_model = self.w_q.shape[-1]
        if d_model % n_heads:
            raise ShapeError(f"n_heads={n_heads} does not divide d={d_model}")
        width = d_model // n_heads
        start, stop = index * width, (index + 1) * width
        return ProjectionSet(
            T.take_columns(self.w_q, start, stop),
            T.take_columns(self.w_k, start, stop),
            T.take_columns(self.w_v, start, stop),
            init_mode=self.init_mode,
        )

    def parameters(self) -> list[Tensor]:
        return [self.w_q, self.w_k, self.w_v]


@dataclasses.dataclass
class BiasMLP:
    """
    The attention bias f: a scalar-to-scalar 2-layer ReLU MLP.

    There is no output bias: a constant added to every logit of a row cancels
    in the softmax and would never receive a gradient.
    """
    w1: Tensor
    b1: Tensor
    w2: Tensor

    @classmethod
    def initialize(
        cls,
        rng: np.random.Generator,
        hidden: int = BIAS_HIDDEN,
        prefix: str = "",
    ) -> BiasMLP:
        return cls(
            w1=Tensor.parameter(rng.standard_normal((1, hidden)), name=f"{prefix}f_w1"),
            b1=Tensor.parameter(rng.uniform(-1.0, 1.0, hidden), name=f"{prefix}f_b1"),
            w2=Tensor.parameter(
                rng.standard_normal((hidden, 1)) / math.sqrt(hidden),
                name=f"{prefix}f_w2",
            ),
        )

    @classmethod
    def zeros(cls, hidden: int = BIAS_HIDDEN) -> BiasMLP:
        return cls(
            w1=Tensor(np.zeros((1, hidden))),
            b1=Tensor(np.zeros(hidden)),
            w2=Tensor(np.zeros((hidden, 1))),
        )

    def __call__(self, offsets: Tensor) -> Tensor:
        flat = T.reshape(offsets, (-1, 1))
        hidden = T.relu(flat @ self.w1 + self.b1)
        return T.reshape(hidden @ self.w2, offsets.shape)

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2]


@dataclasses.dataclass
class RelationalState:
    """
    Per-layer relational state of indirect attention.

    Attributes
    ----------
    offsets : Tensor
        The offset matrix P, shape ``(m, n)`` or ``(batch, m, n)``.  At layer 0
        ``P[i, j] == j - i``.
    bias : BiasMLP
        The bias function f applied entrywise to ``offsets * offset_scale``.
    updater : Tensor or None
        The offset updater g, a ``(d_model, n_keys)`` linear map producing the
        next layer's P from the attention output.  None for a terminal layer:
        P then passes through unchanged.
    layer_index : int
    offset_scale : float
        Multiplies P before it enters f (``1 / n_keys`` keeps layer-0 inputs
        in [-1, 1]).
    """
    offsets: Tensor
    bias: BiasMLP
    updater: Optional[Tensor] = None
    layer_index: int = 0
    offset_scale: float = 1.0

    @classmethod
    def initial(
        cls,
        n_queries: int,
        n_keys: int,
        bias: BiasMLP,
        updater: Optional[Tensor] = None,
        normalize: bool = True,
    ) -> RelationalState:
        rows = np.arange(n_queries)[:, None]
        cols = np.arange(n_keys)[None, :]
        return cls(
            offsets=Tensor((cols - rows).astype(np.float64)),
            bias=bias,
            updater=updater,
            layer_index=0,
            offset_scale=1.0 / n_keys if normalize else 1.0,
        )


@dataclasses.dataclass
class QueryEmbeddings:
    """Learnable query embeddings M and the value-position map pi."""
    embeddings: Tensor
    pi: tuple[int, ...]

    @classmethod
    def identity(cls, embeddings: Tensor) -> QueryEmbeddings:
        return cls(embeddings, tuple(range(embeddings.shape[-2])))

    def __post_init__(self):
        self.pi = tuple(int(index) for index in self.pi)
        if len(self.pi) != self.embeddings.shape[-2]:
            raise ShapeError(
                f"pi has {len(self.pi)} entries for {self.embeddings.shape[-2]} queries"
            )


QuerySource = Union[Tensor, QueryEmbeddings]


def build_queries(embeddings: QueryEmbeddings, values: Tensor) -> Tensor:
    """
    ``q_i = m_i + y_{pi(i)}``.

    Raises
    ------
    IndexError
        If any ``pi(i)`` is not a position of ``values``.
    """
    n_values = values.shape[-2]
    bad = [index for index in embeddings.pi if not 0 <= index < n_values]
    if bad:
        raise IndexError(f"pi entries {bad} out of range for {n_values} value positions")
    return T.take_rows(values, embeddings.pi) + embeddings.embeddings


def _resolve_queries(queries: QuerySource, values: Tensor) -> Tensor:
    if isinstance(queries, QueryEmbeddings):
        return build_queries(queries, values)
    return queries


def scaled_scores(queries: Tensor, keys: Tensor) -> Tensor:
    d_k = queries.shape[-1]
    return (queries @ T.transpose(keys)) * (1.0 / math.sqrt(d_k))


def _attend(scores: Tensor, values: Tensor) -> tuple[Tensor, Tensor]:
    weights = T.softmax_rows(scores)
    return weights @ values, weights


def standard_attention(x: Tensor, proj: ProjectionSet) -> tuple[Tensor, Tensor]:
    """Self-attention: queries, keys and values all come from ``x``."""
    scores = scaled_scores(x @ proj.w_q, x @ proj.w_k)
    return _attend(scores, x @ proj.w_v)


def cross_attention(
    queries_from: Tensor, kv_from: Tensor, proj: ProjectionSet
) -> tuple[Tensor, Tensor]:
    scores = scaled_scores(queries_from @ proj.w_q, kv_from @ proj.w_k)
    return _attend(scores, kv_from @ proj.w_v)


def _check_pair(keys_from: Tensor, values_from: Tensor) -> None:
    if keys_from.shape[-2] != values_from.shape[-2]:
        raise ShapeError(
            f"Key source has {keys_from.shape[-2]} positions but value source has "
            f"{values_from.shape[-2]}; pad them to equal length"
        )


def naive_misaligned_attention(
    x_keys: Tensor,
    y_values: Tensor,
    queries: QuerySource,
    proj: ProjectionSet,
) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention with K from ``x_keys`` and V from ``y_values``."""
    _check_pair(x_keys, y_values)
    q = _resolve_queries(queries, y_values) @ proj.w_q
    scores = scaled_scores(q, x_keys @ proj.w_k)
    return _attend(scores, y_values @ proj.w_v)


def indirect_scores(q: Tensor, k: Tensor, state: RelationalState) -> Tensor:
    """``S_ij = (q_i . k_j + f(P_ij)) / sqrt(d_k)``."""
    d_k = q.shape[-1]
    bias = state.bias(state.offsets * state.offset_scale)
    content = q @ T.transpose(k)
    return (content + bias) * (1.0 / math.sqrt(d_k))


def update_offsets(output: Tensor, state: RelationalState) -> Tensor:
    """Next layer's offsets ``P[i] = o_i @ g``; unchanged when g is absent."""
    if state.updater is None:
        return state.offsets
    return output @ state.updater


def _advance(state: RelationalState, output: Tensor) -> RelationalState:
    return dataclasses.replace(
        state,
        offsets=update_offsets(output, state),
        layer_index=state.layer_index + 1,
    )


def indirect_attention(
    x_keys: Tensor,
    y_values: Tensor,
    queries: QuerySource,
    state: RelationalState,
    proj: ProjectionSet,
) -> tuple[Tensor, Tensor, RelationalState]:
    """
    Indirect attention: keys from ``x_keys``, values from ``y_values``,
    logits biased by ``f(P)``.

    Parameters
    ----------
    x_keys : Tensor
        Conditioning sequence, ``(..., n, d)``.
    y_values : Tensor
        Content sequence, ``(..., n, d)``.
    queries : Tensor or QueryEmbeddings
        Either already-built queries ``(..., m, d)`` or embeddings combined
        with ``y_values`` through :func:`build_queries`.
    state : RelationalState
    proj : ProjectionSet

    Returns
    -------
    output : Tensor
        ``(..., m, d_k)``.
    weights : Tensor
        ``(..., m, n)``, rows summing to one.
    new_state : RelationalState
        Offsets updated from ``output``, ``layer_index`` incremented.
    """
    _check_pair(x_keys, y_values)
    q = _resolve_queries(queries, y_values) @ proj.w_q
    scores = indirect_scores(q, x_keys @ proj.w_k, state)
    output, weights = _attend(scores, y_values @ proj.w_v)
    return output, weights, _advance(state, output)


def positional_prior(state: RelationalState, d_k: int) -> Tensor:
    """Row-softmax of ``f(P) / sqrt(d_k)``: the positional prior the bias encodes."""
    bias = state.bias(state.offsets * state.offset_scale)
    return T.softmax_rows(bias * (1.0 / math.sqrt(d_k)))


def attention_concentration(weights: Union[Tensor, np.ndarray]) -> np.ndarray:
    """Per-row sum of squared weights (1 for one-hot rows, 1/n for uniform)."""
    data = weights.data if isinstance(weights, Tensor) else np.asarray(weights)
    return (data ** 2).sum(axis=-1)


@dataclasses.dataclass
class AttentionInputs:
    """
    Sources for one attention call.

    ``standard`` reads only ``keys``; ``cross`` reads ``queries`` and
    ``keys`` (keys and values from the same sequence); the misaligned
    variants read all three.
    """
    keys: Tensor
    values: Optional[Tensor] = None
    queries: Optional[QuerySource] = None


@dataclasses.dataclass
class HeadParams:
    proj: ProjectionSet
    bias: Optional[BiasMLP] = None


@dataclasses.dataclass
class MultiHeadResult:
    output: Tensor
    weights: list[Tensor]
    state: Optional[RelationalState] = None


def split_heads(
    proj: ProjectionSet,
    n_heads: int,
    biases: Optional[Sequence[BiasMLP]] = None,
) -> list[HeadParams]:
    biases = list(biases) if biases is not None else [None] * n_heads
    if len(biases) != n_heads:
        raise ValueError(f"Expected {n_heads} bias functions, got {len(biases)}")
    return [
        HeadParams(proj.head(index, n_heads), bias)
        for index, bias in enumerate(biases)
    ]


def _run_head(
    variant: Variant,
    inputs: AttentionInputs,
    head: HeadParams,
    state: Optional[RelationalState],
) -> tuple[Tensor, Tensor]:
    if variant is Variant.STANDARD:
        return standard_attention(inputs.keys, head.proj)
    if variant is Variant.CROSS:
        return cross_attention(inputs.queries, inputs.keys, head.proj)
    if variant is Variant.NAIVE_MISALIGNED:
        return naive_misaligned_attention(
            inputs.keys, inputs.values, inputs.queries, head.proj
        )
    if state is None or head.bias is None:
        raise ValueError("Indirect attention needs a relational state and a bias per head")
    output, weights, _ = indirect_attention(
        inputs.keys,
        inputs.values,
        inputs.queries,
        dataclasses.replace(state, bias=head.bias),
        head.proj,
    )
    return output, weights


def multi_head(
    variant: Union[Variant, str],
    inputs: AttentionInputs,
    heads: Sequence[HeadParams],
    w_o: Tensor,
    state: Optional[RelationalState] = None,
) -> MultiHeadResult:
    """
    Run ``variant`` once per head and mix the concatenated heads with ``w_o``.

    Each head sees its own column slice of the projections and, for indirect
    attention, its own bias function; all heads share the offsets P.  The
    updated state is computed from the mixed output.

    Raises
    ------
    ShapeError
        If the number of heads does not divide ``w_o``'s width.
    """
    variant = Variant(variant)
    d_model = w_o.shape[-1]
    if d_model % len(heads):
        raise ShapeError(f"n_heads={len(heads)} does not divide d={d_model}")

    outputs, weights = [], []
    for head in heads:
        output, head_weights = _run_head(variant, inputs, head, state)
        outputs.append(output)
        weights.append(head_weights)

    mixed = T.concat(outputs, axis=-1) @ w_o
    new_state = None
    if variant is Variant.INDIRECT:
        new_state = _advance(state, mixed)
    return MultiHeadResult(mixed, weights, new_state)
