"""Prompt pools, key-query retrieval and the retrieval regularizer."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import ContractError, DegenerateVectorError

TAU_MAX = 30
KEY_COLLAPSE = 1e-8


@dataclass
class Prompt:
    tokens: np.ndarray  # (P_len, d_model)
    key: np.ndarray  # (d_q,)


@dataclass
class PromptPool:
    """``tokens`` has shape ``(size, P_len, d_model)``, ``keys`` ``(size, d_q)``.

    ``kind`` is ``"inter"``, ``"intra"`` or ``"pattern"``; pattern pools hold one
    block per missing pattern and are indexed by pattern code instead of by
    retrieval, so their keys are carried but never used.
    """

    tokens: np.ndarray
    keys: np.ndarray
    kind: str = "intra"

    def __post_init__(self):
        self.tokens = np.array(self.tokens, dtype=np.float64)
        self.keys = np.array(self.keys, dtype=np.float64)
        if self.tokens.ndim != 3 or self.keys.ndim != 2 or len(self.tokens) != len(self.keys):
            raise ContractError(f"bad pool shapes {self.tokens.shape} / {self.keys.shape}")
        if len(self) < 1:
            raise ContractError("a prompt pool needs at least one prompt")

    def __len__(self):
        return self.tokens.shape[0]

    @property
    def prompt_len(self):
        return self.tokens.shape[1]

    def prompt(self, i) -> Prompt:
        return Prompt(self.tokens[i].copy(), self.keys[i].copy())

    def copy(self):
        return PromptPool(self.tokens.copy(), self.keys.copy(), self.kind)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.intp)
        return PromptPool(self.tokens[idx], self.keys[idx], self.kind)

    @classmethod
    def init(cls, size, prompt_len=1, d_model=32, d_q=16, kind="intra", rng=None, token_std=0.02):
        if not 1 <= size <= TAU_MAX and kind != "pattern":
            raise ContractError(f"pool size {size} outside [1, {TAU_MAX}]")
        rng = np.random.default_rng() if rng is None else rng
        tokens = token_std * rng.standard_normal((size, prompt_len, d_model))
        keys = rng.standard_normal((size, d_q))
        keys /= np.linalg.norm(keys, axis=1, keepdims=True)
        return cls(tokens, keys, kind)


def renormalize_keys(keys, rng=None):
    """Keys whose norm collapsed below ``KEY_COLLAPSE`` are redrawn on the unit
    sphere (or set to the first basis vector if no rng is given)."""
    norms = np.linalg.norm(keys, axis=1)
    bad = norms < KEY_COLLAPSE
    if bad.any():
        keys = keys.copy()
        for i in np.flatnonzero(bad):
            if rng is None:
                v = np.zeros(keys.shape[1])
                v[0] = 1.0
            else:
                v = rng.standard_normal(keys.shape[1])
            keys[i] = v / np.linalg.norm(v)
    return keys


def _dots(a, b):
    """``a @ b.T`` accumulated coordinate by coordinate in a fixed order, so
    equal rows give bit-equal results wherever they sit (BLAS kernels may
    round differently by row position, which would break the tie rule)."""
    out = np.zeros((a.shape[0], b.shape[0]))
    for j in range(a.shape[1]):
        out += a[:, j, None] * b[None, :, j]
    return out


def distances(q, keys):
    """``1 - cos(q, key)`` for one query against every key, or for a batch of
    queries ``(B, d_q)`` against ``(tau, d_q)`` keys giving ``(B, tau)``."""
    q = np.asarray(q, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    single = q.ndim == 1
    qb = q[None] if single else q
    qn = np.sqrt(np.einsum("ij,ij->i", qb, qb))
    kn = np.sqrt(_dots(keys, keys).diagonal())
    if np.any(qn == 0) or np.any(kn == 0):
        raise DegenerateVectorError("zero-norm query or key")
    d = 1.0 - np.clip(_dots(qb / qn[:, None], keys) / kn[None, :], -1.0, 1.0)
    return d[0] if single else d


def distance(q_vec, prompt) -> float:
    key = prompt.key if isinstance(prompt, Prompt) else prompt
    return float(1.0 - nc.cosine(q_vec, key).item())


def select_topk(q_vec, pool: PromptPool, kappa: int):
    """Indices of the ``kappa`` nearest prompts, nearest first, ties to the
    lower index.  Returns ``(indices, [Prompt, ...])``."""
    idx = topk_indices(np.asarray(q_vec)[None], pool.keys, kappa)[0]
    return idx, [pool.prompt(i) for i in idx]


def topk_indices(queries, keys, kappa):
    """Batched retrieval: ``(B, d_q)`` queries -> ``(B, kappa)`` indices."""
    if not 1 <= kappa <= len(keys):
        raise ContractError(f"kappa={kappa} must lie in [1, {len(keys)}]")
    d = distances(queries, keys)
    return np.argsort(d, axis=1, kind="stable")[:, :kappa]


def regularizer(q_vec, selected_keys, raw_cosine=False):
    """Sum over the selected keys of ``1 - cos(q, key)``.

    ``selected_keys`` is a tensor or array of keys (any leading shape, last
    axis ``d_q``) or a list of such groups, one per pool; the query is a
    constant.  With a batch of queries ``(B, d_q)`` and keys ``(B, k, d_q)`` the
    result is a ``(B,)`` tensor.  ``raw_cosine`` sums the cosines themselves.
    """
    groups = selected_keys if isinstance(selected_keys, (list, tuple)) else [selected_keys]
    tape = next((g.tape for g in groups if isinstance(g, nc.Tensor)), None) or nc.Tape()
    groups = [g if isinstance(g, nc.Tensor) else tape.constant(g) for g in groups]
    q = np.asarray(q_vec, dtype=np.float64)
    total = None
    for keys in groups:
        kshape = keys.shape
        qb = q.reshape(q.shape[:-1] + (1,) * (len(kshape) - q.ndim) + (q.shape[-1],))
        cos = nc.cosine(qb, keys)
        term = nc.sum(cos if raw_cosine else nc.sub(1.0, cos), axis=-1)
        total = term if total is None else nc.add(total, term)
    return total


def fedavg_pools(pools):
    """Uniform positionwise mean of tokens and keys."""
    if not pools:
        raise ContractError("nothing to average")
    ref = pools[0]
    for p in pools[1:]:
        if p.tokens.shape != ref.tokens.shape or p.keys.shape != ref.keys.shape:
            raise ContractError("pools differ in size or shape")
    tokens = np.mean(np.stack([p.tokens for p in pools]), axis=0)
    keys = np.mean(np.stack([p.keys for p in pools]), axis=0)
    return PromptPool(tokens, renormalize_keys(keys), ref.kind)
