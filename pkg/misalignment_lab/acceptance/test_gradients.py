import dataclasses

import numpy as np
import pytest

from .. import conftest
from .. import tensor as T
from ..attention import (BiasMLP, ProjectionSet, QueryEmbeddings,
                         RelationalState, indirect_attention,
                         standard_attention)
from ..tensor import Tensor
from ..util import make_rng

pytestmark = conftest.slow

SEEDS = range(100)


def _pipeline_loss(rng):
    """Two stacked indirect layers with trainable f, g, M and projections."""
    n, d = 5, 4
    keys = Tensor(rng.uniform(-2, 2, (2, n, d)))
    values = Tensor(rng.uniform(-2, 2, (2, n, d)))
    proj = ProjectionSet(*(conftest.random_tensor(rng, d, d, name=f"w_{c}") for c in "qkv"))
    bias = BiasMLP(
        w1=conftest.random_tensor(rng, 1, 6, name="f_w1"),
        b1=conftest.random_tensor(rng, 6, name="f_b1"),
        w2=conftest.random_tensor(rng, 6, 1, name="f_w2"),
    )
    updater = Tensor.parameter(rng.uniform(-1, 1, (d, n)), name="g")
    embeddings = QueryEmbeddings.identity(conftest.random_tensor(rng, n, d, name="m"))
    labels = rng.integers(0, d, (2, n))

    def loss():
        state = RelationalState.initial(n, n, bias, updater=updater)
        out, _, state = indirect_attention(keys, values, embeddings, state, proj)
        state = dataclasses.replace(state, updater=None)
        out, _, _ = indirect_attention(keys, values, embeddings, state, proj)
        return T.cross_entropy(out, labels)

    params = proj.parameters() + bias.parameters() + [updater, embeddings.embeddings]
    return loss, params


@pytest.mark.parametrize("seed", SEEDS)
def test_indirect_pipeline_gradients(seed):
    loss, params = _pipeline_loss(make_rng(seed, "gradients"))
    conftest.assert_gradients_match(loss, params)


@pytest.mark.parametrize("seed", SEEDS)
def test_reduction_to_standard_attention(seed):
    """Zero bias, zero query embeddings and aligned inputs give self-attention."""
    rng = make_rng(seed, "reduction")
    n, d = 6, 8
    x = Tensor(rng.standard_normal((n, d)))
    proj = ProjectionSet.initialize(d, rng)
    expected, _ = standard_attention(x, proj)
    state = RelationalState.initial(n, n, BiasMLP.zeros())
    zeros = QueryEmbeddings.identity(Tensor(np.zeros((n, d))))
    output, _, _ = indirect_attention(x, x, zeros, state, proj)
    np.testing.assert_allclose(output.data, expected.data, atol=1e-10, rtol=0)
