"""
Transformer variants for the synthetic tasks, and their checkpoints.

Every variant reads two embedded sequences: a conditioning sequence (the
reference ordering, or the padded retrieval query) and a content sequence
(the sorting target, or the retrieval reference).  Each block is an
attention layer of the model's variant, a residual connection with layer
norm, and a two-layer feed-forward network with another residual and norm.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import pathlib
from typing import Optional, Sequence, Union

import apischema
import numpy as np

from . import constants
from . import tensor as T
from .attention import (AttentionInputs, BiasMLP, InitMode, MultiHeadResult,
                        ProjectionSet, QueryEmbeddings, RelationalState,
                        Variant, build_queries, multi_head, split_heads)
from .tasks import (N_STARTS, QUERY_LENGTH, SEQUENCE_LENGTH, Instance,
                    SortingInstance, Task)
from .tensor import Tensor
from .util import atomic_output, make_rng, orthogonal_matrix

logger = logging.getLogger(__name__)

MODEL_VARIANTS = (Variant.INDIRECT, Variant.NAIVE_MISALIGNED, Variant.CROSS)
HEAD_INIT_SCALE = 0.01


class CheckpointFormatError(ValueError):
    ...


@dataclasses.dataclass(frozen=True)
class ModelSpec:
    variant: Variant
    task: Task
    n_layers: int = 6
    n_heads: int = 4
    d_model: int = 128
    vocab_size: int = constants.PAD_TOKEN + 1
    max_len: int = SEQUENCE_LENGTH
    init_mode: InitMode = InitMode.ORTHOGONAL

    def __post_init__(self):
        try:
            variant = Variant(self.variant)
        except ValueError:
            variant = None
        if variant not in MODEL_VARIANTS:
            choices = ", ".join(v.value for v in MODEL_VARIANTS)
            raise ValueError(f"Unknown model variant {self.variant!r}; choose one of: {choices}")
        object.__setattr__(self, "variant", variant)
        object.__setattr__(self, "task", Task(self.task))
        object.__setattr__(self, "init_mode", InitMode(self.init_mode))
        if self.n_layers < 1 or self.n_heads < 1 or self.d_model < 1:
            raise ValueError(f"Model sizes must be positive: {self}")
        if self.d_model % self.n_heads:
            raise ValueError(
                f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}"
            )
        if self.max_len != SEQUENCE_LENGTH:
            raise ValueError(
                f"max_len={self.max_len}: both task sequences have length {SEQUENCE_LENGTH}"
            )

    @property
    def n_classes(self) -> int:
        return SEQUENCE_LENGTH if self.task is Task.SORTING else N_STARTS


PROFILES = {
    "fast": dict(n_layers=2, n_heads=4, d_model=64),
    "full": dict(n_layers=6, n_heads=4, d_model=128),
}


def profile_spec(profile: str, variant: Variant, task: Task) -> ModelSpec:
    try:
        sizes = PROFILES[profile]
    except KeyError:
        raise ValueError(
            f"Unknown profile {profile!r}; choose one of: {', '.join(PROFILES)}"
        ) from None
    return ModelSpec(variant=variant, task=task, **sizes)


@dataclasses.dataclass(frozen=True)
class KVAssignment:
    """
    Which token sequence feeds keys, values and queries.

    ``query_tokens`` is None when queries are the learnable embeddings
    enriched with value features.
    """
    keys: tuple[int, ...]
    values: tuple[int, ...]
    query_tokens: Optional[tuple[int, ...]] = None


def conditioning_tokens(instance: Instance) -> tuple[int, ...]:
    if isinstance(instance, SortingInstance):
        return tuple(instance.ordering)
    padding = (constants.PAD_TOKEN, ) * (SEQUENCE_LENGTH - QUERY_LENGTH)
    return tuple(instance.query) + padding


def content_tokens(instance: Instance) -> tuple[int, ...]:
    if isinstance(instance, SortingInstance):
        return tuple(instance.target)
    return tuple(instance.reference)


def verify_assignment(variant: Variant, instance: Instance, assignment: KVAssignment) -> None:
    """Assert keys come from the conditioning sequence and values from the content."""
    conditioning = conditioning_tokens(instance)
    content = content_tokens(instance)
    if Variant(variant) is Variant.CROSS:
        assert assignment.query_tokens == conditioning, "cross queries must be the conditioning sequence"
        assert assignment.keys == assignment.values == content, "cross keys/values must be the content sequence"
        return
    assert assignment.keys == conditioning, "keys must come from the conditioning sequence"
    assert assignment.values == content, "values must come from the content sequence"
    assert assignment.query_tokens is None, "queries must be learnable embeddings"


def assign_kv(variant: Union[Variant, str], instance: Instance) -> KVAssignment:
    """
    Route an instance's sequences to keys, values and queries.

    Sorting keys are the ordering and values the target; retrieval keys are
    the query padded to the reference length and values the reference.
    Cross attention instead queries with the conditioning sequence and
    draws keys and values from the content sequence.
    """
    variant = Variant(variant)
    if variant not in MODEL_VARIANTS:
        raise ValueError(f"No key/value assignment for variant {variant.value!r}")
    conditioning = conditioning_tokens(instance)
    content = content_tokens(instance)
    if variant is Variant.CROSS:
        assignment = KVAssignment(keys=content, values=content, query_tokens=conditioning)
    else:
        assignment = KVAssignment(keys=conditioning, values=content)
    if __debug__:
        verify_assignment(variant, instance, assignment)
    return assignment


@dataclasses.dataclass
class Batch:
    """
    Token arrays for a batch of instances, shape ``(batch, length)``.

    ``queries`` holds the cross-attention query tokens, else None.
    ``labels`` is ``(batch, 10)`` for sorting and ``(batch, )`` for
    retrieval; ``label_mask`` excludes padded positions from the loss.
    """
    keys: np.ndarray
    values: np.ndarray
    labels: np.ndarray
    label_mask: np.ndarray
    queries: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.keys.shape[0]


def collate(variant: Variant, instances: Sequence[Instance]) -> Batch:
    if not instances:
        raise ValueError("Cannot collate an empty batch")
    assignments = [assign_kv(variant, instance) for instance in instances]
    if isinstance(instances[0], SortingInstance):
        labels = np.array([instance.labels for instance in instances], dtype=np.int64)
    else:
        labels = np.array([instance.start for instance in instances], dtype=np.int64)
    queries = None
    if assignments[0].query_tokens is not None:
        queries = np.array([a.query_tokens for a in assignments], dtype=np.int64)
    return Batch(
        keys=np.array([a.keys for a in assignments], dtype=np.int64),
        values=np.array([a.values for a in assignments], dtype=np.int64),
        labels=labels,
        label_mask=np.ones(labels.shape, dtype=bool),
        queries=queries,
    )


@dataclasses.dataclass
class Block:
    proj: ProjectionSet
    w_o: Tensor
    norm1_gain: Tensor
    norm1_bias: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    norm2_gain: Tensor
    norm2_bias: Tensor
    biases: Optional[list[BiasMLP]] = None
    updater: Optional[Tensor] = None

    @classmethod
    def initialize(
        cls,
        spec: ModelSpec,
        rng: np.random.Generator,
        layer: int,
    ) -> Block:
        d = spec.d_model
        hidden = 2 * d
        prefix = f"layers.{layer}."
        biases = updater = None
        if spec.variant is Variant.INDIRECT:
            biases = [
                BiasMLP.initialize(rng, prefix=f"{prefix}head{head}.")
                for head in range(spec.n_heads)
            ]
            if layer < spec.n_layers - 1:
                # Spread comparable to the raw layer-0 offsets j - i.
                updater = Tensor.parameter(
                    rng.standard_normal((d, spec.max_len)) * (spec.max_len / math.sqrt(d)),
                    name=f"{prefix}g",
                )
        return cls(
            proj=ProjectionSet.initialize(d, rng, spec.init_mode, prefix=prefix),
            w_o=Tensor.parameter(orthogonal_matrix(d, d, rng), name=f"{prefix}w_o"),
            norm1_gain=Tensor.parameter(np.ones(d), name=f"{prefix}norm1_gain"),
            norm1_bias=Tensor.parameter(np.zeros(d), name=f"{prefix}norm1_bias"),
            ffn_w1=Tensor.parameter(
                rng.standard_normal((d, hidden)) / math.sqrt(d), name=f"{prefix}ffn_w1"
            ),
            ffn_b1=Tensor.parameter(np.zeros(hidden), name=f"{prefix}ffn_b1"),
            ffn_w2=Tensor.parameter(
                rng.standard_normal((hidden, d)) / math.sqrt(hidden), name=f"{prefix}ffn_w2"
            ),
            ffn_b2=Tensor.parameter(np.zeros(d), name=f"{prefix}ffn_b2"),
            norm2_gain=Tensor.parameter(np.ones(d), name=f"{prefix}norm2_gain"),
            norm2_bias=Tensor.parameter(np.zeros(d), name=f"{prefix}norm2_bias"),
            biases=biases,
            updater=updater,
        )

    def parameters(self) -> list[Tensor]:
        params = self.proj.parameters() + [
            self.w_o,
            self.norm1_gain, self.norm1_bias,
            self.ffn_w1, self.ffn_b1, self.ffn_w2, self.ffn_b2,
            self.norm2_gain, self.norm2_bias,
        ]
        for bias in self.biases or []:
            params.extend(bias.parameters())
        if self.updater is not None:
            params.append(self.updater)
        return params

    def feed_forward(self, attended: Tensor, stream: Tensor) -> Tensor:
        x = T.layer_norm(stream + attended) * self.norm1_gain + self.norm1_bias
        hidden = T.relu(x @ self.ffn_w1 + self.ffn_b1)
        out = x + (hidden @ self.ffn_w2 + self.ffn_b2)
        return T.layer_norm(out) * self.norm2_gain + self.norm2_bias


@dataclasses.dataclass
class ForwardResult:
    logits: Tensor
    weights: list[list[Tensor]]
    states: list[RelationalState]


@dataclasses.dataclass
class Model:
    spec: ModelSpec
    token_embedding: Tensor
    key_positions: Tensor
    value_positions: Tensor
    blocks: list[Block]
    head_w: Tensor
    head_b: Tensor
    query_embeddings: Optional[Tensor] = None

    def parameters(self) -> list[Tensor]:
        params = [self.token_embedding, self.key_positions, self.value_positions]
        if self.query_embeddings is not None:
            params.append(self.query_embeddings)
        for block in self.blocks:
            params.extend(block.parameters())
        params.extend([self.head_w, self.head_b])
        return params

    def named_parameters(self) -> dict[str, Tensor]:
        return {param.name: param for param in self.parameters()}

    @property
    def parameter_count(self) -> int:
        return sum(param.size for param in self.parameters())

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.zero_grad()

    def _embed(self, tokens: np.ndarray, positions: Tensor) -> Tensor:
        length = tokens.shape[-1]
        return T.embedding_lookup(self.token_embedding, tokens) + T.take_rows(
            positions, range(length)
        )

    def forward(self, batch: Batch) -> ForwardResult:
        """Logits ``(batch, 10, 10)`` for sorting, ``(batch, 8)`` for retrieval."""
        spec = self.spec
        values = self._embed(batch.values, self.value_positions)
        if spec.variant is Variant.CROSS:
            if batch.queries is None:
                raise ValueError("Cross-attention batches need query tokens")
            stream = self._embed(batch.queries, self.key_positions)
            inputs = AttentionInputs(keys=values)
        else:
            stream = build_queries(QueryEmbeddings.identity(self.query_embeddings), values)
            keys = self._embed(batch.keys, self.key_positions)
            inputs = AttentionInputs(keys=keys, values=values)

        state = None
        if spec.variant is Variant.INDIRECT:
            state = RelationalState.initial(
                stream.shape[-2], values.shape[-2], bias=self.blocks[0].biases[0]
            )

        weights, states = [], []
        for block in self.blocks:
            if state is not None:
                state = dataclasses.replace(state, updater=block.updater)
                states.append(state)
            result: MultiHeadResult = multi_head(
                spec.variant,
                dataclasses.replace(inputs, queries=stream),
                split_heads(block.proj, spec.n_heads, block.biases),
                block.w_o,
                state,
            )
            state = result.state
            weights.append(result.weights)
            stream = block.feed_forward(result.output, stream)

        if spec.task is Task.RETRIEVAL:
            # The start index is read from query position 0.
            stream = T.reshape(T.take_rows(stream, [0]), (len(batch), spec.d_model))
        logits = stream @ self.head_w + self.head_b
        return ForwardResult(logits=logits, weights=weights, states=states)

    __call__ = forward


def build_model(spec: ModelSpec, seed: int = 0) -> Model:
    """
    Initialize a model; the same ``(spec, seed)`` always gives the same weights.

    Raises
    ------
    ValueError
        For an unknown variant (raised by ``ModelSpec``).
    """
    rng = make_rng(seed, "model", spec.variant.value, spec.task.value)
    d = spec.d_model
    model = Model(
        spec=spec,
        token_embedding=Tensor.parameter(
            rng.standard_normal((spec.vocab_size, d)), name="token_embedding"
        ),
        key_positions=Tensor.parameter(
            rng.standard_normal((spec.max_len, d)), name="key_positions"
        ),
        value_positions=Tensor.parameter(
            rng.standard_normal((spec.max_len, d)), name="value_positions"
        ),
        query_embeddings=(
            None if spec.variant is Variant.CROSS
            else Tensor.parameter(rng.standard_normal((spec.max_len, d)), name="query_embeddings")
        ),
        blocks=[Block.initialize(spec, rng, layer) for layer in range(spec.n_layers)],
        head_w=Tensor.parameter(
            rng.standard_normal((d, spec.n_classes)) * HEAD_INIT_SCALE, name="head_w"
        ),
        head_b=Tensor.parameter(np.zeros(spec.n_classes), name="head_b"),
    )
    logger.debug(
        "Built %s model for %s: %d parameters", spec.variant.value, spec.task.value,
        model.parameter_count,
    )
    return model


def bias_maps(model: Model, batch: Batch) -> np.ndarray:
    """
    ``f^h(P^l)`` for every layer ``l`` and head ``h``, averaged over the batch.

    Returns
    -------
    maps : numpy.ndarray
        Shape ``(n_layers, n_heads, m, n)``.  Layer 0 depends only on
        positions; later layers on the content through the offset updates.
    """
    if model.spec.variant is not Variant.INDIRECT:
        raise ValueError(f"{model.spec.variant.value} models have no attention bias")
    with T.no_grad():
        states = model.forward(batch).states
        maps = []
        for state, block in zip(states, model.blocks):
            scaled = state.offsets * state.offset_scale
            per_head = []
            for bias in block.biases:
                values = bias(scaled).data
                if values.ndim == 3:
                    values = values.mean(axis=0)
                per_head.append(values)
            maps.append(per_head)
    return np.asarray(maps)


def _header(model: Model) -> str:
    lines = [
        f"{constants.CHECKPOINT_MAGIC} {constants.CHECKPOINT_VERSION}",
        "spec " + json.dumps(apischema.serialize(ModelSpec, model.spec), sort_keys=True),
    ]
    for name, param in model.named_parameters().items():
        shape = "x".join(str(dim) for dim in param.shape)
        lines.append(f"tensor {name} {shape}")
    lines.append("end")
    return "\n".join(lines) + "\n"


def save_checkpoint(model: Model, path: Union[str, os.PathLike]) -> pathlib.Path:
    """
    Write a versioned text header (spec and tensor names/shapes) followed by
    every parameter as little-endian float64, in header order.
    """
    path = pathlib.Path(path)
    with atomic_output(path) as fp:
        fp.write(_header(model).encode("utf-8"))
        for param in model.parameters():
            fp.write(param.data.astype("<f8").tobytes())
    logger.info("Saved checkpoint %s", path)
    return path


def _read_header(fp, path) -> tuple[ModelSpec, list[tuple[str, tuple[int, ...]]]]:
    magic = fp.readline().decode("utf-8").split()
    if magic[:1] != [constants.CHECKPOINT_MAGIC]:
        raise CheckpointFormatError(f"{path} is not a checkpoint")
    if magic[1:] != [str(constants.CHECKPOINT_VERSION)]:
        raise CheckpointFormatError(
            f"{path}: unsupported checkpoint version {' '.join(magic[1:])!r}"
        )
    spec_line = fp.readline().decode("utf-8")
    if not spec_line.startswith("spec "):
        raise CheckpointFormatError(f"{path}: missing spec line")
    try:
        spec = apischema.deserialize(ModelSpec, json.loads(spec_line[len("spec "):]))
    except (ValueError, apischema.ValidationError) as ex:
        raise CheckpointFormatError(f"{path}: bad spec line: {ex}") from None

    entries = []
    for raw in iter(fp.readline, b""):
        line = raw.decode("utf-8").rstrip("\n")
        if line == "end":
            return spec, entries
        parts = line.split(" ")
        if len(parts) != 3 or parts[0] != "tensor":
            raise CheckpointFormatError(f"{path}: bad header line {line!r}")
        try:
            shape = tuple(int(dim) for dim in parts[2].split("x")) if parts[2] else ()
        except ValueError:
            raise CheckpointFormatError(f"{path}: bad tensor shape {parts[2]!r}") from None
        entries.append((parts[1], shape))
    raise CheckpointFormatError(f"{path}: header has no 'end' line")


def load_checkpoint(path: Union[str, os.PathLike]) -> Model:
    """
    Rebuild the model described by a checkpoint header and fill in its weights.

    Raises
    ------
    CheckpointFormatError
        On a bad header, a tensor list that does not match the spec, or a
        truncated payload.
    """
    path = pathlib.Path(path)
    with open(path, "rb") as fp:
        spec, entries = _read_header(fp, path)
        payload = fp.read()

    model = build_model(spec)
    params = model.named_parameters()
    expected = [(name, param.shape) for name, param in params.items()]
    if entries != expected:
        raise CheckpointFormatError(f"{path}: tensor list does not match a {spec} model")
    total = sum(param.size for param in params.values())
    if len(payload) != 8 * total:
        raise CheckpointFormatError(
            f"{path}: payload holds {len(payload)} bytes, header describes {total} values"
        )
    flat = np.frombuffer(payload, dtype="<f8")
    offset = 0
    for name, shape in entries:
        size = int(np.prod(shape, dtype=np.int64))
        params[name].data = flat[offset:offset + size].reshape(shape).astype(np.float64)
        offset += size
    logger.info("Loaded %s checkpoint %s", spec.variant.value, path)
    return model
