"""Shared oracles for the test suites.

``fd_check`` compares tape gradients against a central finite-difference
oracle that never touches the tape (the function under test is re-run on
plain detached tensors). ``mha_loop_reference`` is the independent per-head
numpy implementation the batched attention is checked against.
"""

import numpy as np

from efnet import tensor as tx
from efnet.data import FEATURE_SHAPE, EncodedSample
from efnet.gradcheck import fd_gradient, max_rel_error
from efnet.model import EFNetParams, ModelConfig
from efnet.tensor import Tape, Tensor

GRAD_TOL = 1e-4


def tiny_config(**overrides) -> ModelConfig:
    """Smallest config the full pipeline runs at; double precision for oracles."""
    base = dict(
        embed_dim=8, hidden_dim=8, head_count=2, capsule_dim=4, att_dim=8,
        dropout=0.0, l2_lambda=0.0, max_len=8, text_only=False, seed=0,
        precision="double",
    )
    base.update(overrides)
    return ModelConfig(**base)


def tiny_params(cfg, rng, vocab=10) -> EFNetParams:
    matrix = rng.uniform(-0.1, 0.1, (vocab, cfg.embed_dim)).astype(cfg.dtype)
    matrix[0] = 0.0
    return EFNetParams.create(cfg, rng, Tensor(matrix, requires_grad=True))


def tiny_sample(cfg, rng, n=4, span=(1, 3), label=1, vocab=10) -> EncodedSample:
    features = None
    if not cfg.text_only:
        features = rng.uniform(0.0, 1.0, FEATURE_SHAPE).astype(cfg.dtype)
    return EncodedSample(
        id="t0",
        token_ids=rng.integers(2, vocab, size=n),
        mask=np.ones(n, dtype=bool),
        span=span,
        aspect_ids=rng.integers(2, vocab, size=2),
        label=label,
        features=features,
    )


def rand(rng, *shape):
    return rng.standard_normal(shape)


def fd_check(op, *arrays, seed=0, tol=GRAD_TOL):
    """Tape gradients of a weighted readout of ``op`` vs central differences."""
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    rng = np.random.default_rng(seed)

    tape = Tape()
    leaves = [tape.watch(Tensor(a.copy(), requires_grad=True)) for a in arrays]
    out = op(*leaves)
    if out.data.ndim == 0:
        w = None
        loss = out
    else:
        w = rng.standard_normal(out.shape)
        loss = tx.sum_all(tx.mul(out, Tensor(w)))
    grads = tape.backward(loss)

    def f(*arrs):
        res = op(*[Tensor(a) for a in arrs])
        if w is None:
            return float(res.data)
        return float((res.data * w).sum())

    numeric = fd_gradient(f, arrays)
    for leaf, num in zip(leaves, numeric):
        err = max_rel_error(grads[leaf], num)
        assert err < tol, f"gradient mismatch {err:.2e} for {op}"


def softmax_rows(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def mha_loop_reference(q, k, v, wqs, wks, wvs):
    """Head-by-head attention in plain numpy, concatenated along features."""
    outs = []
    for wq, wk, wv in zip(wqs, wks, wvs):
        qi, ki, vi = q @ wq, k @ wk, v @ wv
        scores = qi @ ki.T / np.sqrt(qi.shape[1])
        outs.append(softmax_rows(scores) @ vi)
    return np.concatenate(outs, axis=-1)
