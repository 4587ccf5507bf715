"""Frozen single-block multimodal encoder surrogate plus trainable head.

The sequence fed to attention is ``[prompts ; image tokens ; text tokens]``.
There are no positional embeddings, so logits do not depend on prompt order.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import numcore as nc
from .errors import DimensionError

PATTERN_COMPLETE, PATTERN_TEXT_MISSING, PATTERN_IMAGE_MISSING = 0, 1, 2


@dataclass(frozen=True)
class BackboneParams:
    embed_a: np.ndarray
    embed_b: np.ndarray
    type_embed: np.ndarray  # (2, d_model), row 0 image, row 1 text
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    w_1: np.ndarray
    w_2: np.ndarray
    query_proj: np.ndarray  # (d_model + 2, d_q)

    def __post_init__(self):
        for f in fields(self):
            arr = np.array(getattr(self, f.name), dtype=np.float64)
            arr.flags.writeable = False
            object.__setattr__(self, f.name, arr)

    @property
    def d_model(self):
        return self.w_q.shape[0]

    @property
    def d_q(self):
        return self.query_proj.shape[1]

    @classmethod
    def init(cls, d_raw=16, d_model=32, d_ff=64, d_q=16, seed=0):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB0B]))
        s = 1.0 / np.sqrt(d_model)

        def draw(*shape):
            return s * rng.standard_normal(shape)

        return cls(
            embed_a=draw(d_raw, d_model), embed_b=draw(d_raw, d_model), type_embed=draw(2, d_model),
            w_q=draw(d_model, d_model), w_k=draw(d_model, d_model), w_v=draw(d_model, d_model),
            w_o=draw(d_model, d_model), w_1=draw(d_model, d_ff), w_2=draw(d_ff, d_model),
            query_proj=draw(d_model + 2, d_q),
        )

    def fingerprint(self):
        return tuple(getattr(self, f.name).tobytes() for f in fields(self))


@dataclass
class HeadParams:
    pooler_w: np.ndarray
    pooler_b: np.ndarray
    cls_w: np.ndarray
    cls_b: np.ndarray

    NAMES = ("pooler_w", "pooler_b", "cls_w", "cls_b")

    @classmethod
    def init(cls, d_model=32, n_classes=8, seed=0):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x4EAD]))
        return cls(
            pooler_w=rng.standard_normal((d_model, d_model)) / np.sqrt(d_model),
            pooler_b=np.zeros(d_model),
            cls_w=rng.standard_normal((d_model, n_classes)) / np.sqrt(d_model),
            cls_b=np.zeros(n_classes),
        )

    @classmethod
    def zeros(cls, d_model=32, n_classes=8):
        return cls(np.zeros((d_model, d_model)), np.zeros(d_model),
                   np.zeros((d_model, n_classes)), np.zeros(n_classes))

    def arrays(self):
        return [getattr(self, n) for n in self.NAMES]

    def copy(self):
        return HeadParams(*(a.copy() for a in self.arrays()))

    def leaves(self, tape, trainable=True):
        return {n: tape.leaf(getattr(self, n), trainable=trainable, name=n) for n in self.NAMES}


def pattern_code(present):
    if present[0] and present[1]:
        return PATTERN_COMPLETE
    return PATTERN_TEXT_MISSING if present[0] else PATTERN_IMAGE_MISSING


def tokenize(sample, backbone: BackboneParams):
    """Embed one sample: ``(T_a + T_b, d_model)`` token matrix and its
    missing-pattern code.  A dropped modality contributes zero raw tokens, so
    its rows reduce to the modality-type embedding."""
    a = sample.modality_a @ backbone.embed_a + backbone.type_embed[0]
    b = sample.modality_b @ backbone.embed_b + backbone.type_embed[1]
    return np.concatenate([a, b], axis=0), pattern_code(sample.present)


def tokenize_batch(samples, backbone: BackboneParams):
    xa = np.stack([s.modality_a for s in samples])
    xb = np.stack([s.modality_b for s in samples])
    a = xa @ backbone.embed_a + backbone.type_embed[0]
    b = xb @ backbone.embed_b + backbone.type_embed[1]
    present = np.array([s.present for s in samples], dtype=bool)
    codes = np.array([pattern_code(p) for p in present], dtype=np.int64)
    return np.concatenate([a, b], axis=1), codes, present


def query(tokens, code, backbone: BackboneParams, t_a=None):
    """Frozen query vector(s).

    Averages the token embeddings of the present modalities, appends the
    two missing-pattern bits ``[text missing, image missing]`` and projects.
    Works on a single ``(L, d)`` token matrix or a ``(B, L, d)`` batch.
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    single = tokens.ndim == 2
    if single:
        tokens, code = tokens[None], np.array([code])
    code = np.asarray(code)
    t_a = tokens.shape[1] // 2 if t_a is None else t_a
    use_a = code != PATTERN_IMAGE_MISSING
    use_b = code != PATTERN_TEXT_MISSING
    w = np.zeros(tokens.shape[:2])
    w[:, :t_a] = use_a[:, None]
    w[:, t_a:] = use_b[:, None]
    w /= w.sum(axis=1, keepdims=True)
    pooled = np.einsum("bl,bld->bd", w, tokens)
    bits = np.stack([code == PATTERN_TEXT_MISSING, code == PATTERN_IMAGE_MISSING], axis=1).astype(np.float64)
    q = np.concatenate([pooled, bits], axis=1) @ backbone.query_proj
    return q[0] if single else q


def forward(tokens, prompts, head: dict, backbone: BackboneParams):
    """Class logits for ``tokens`` (``(L, d)`` or ``(B, L, d)``) with
    ``prompts`` (``(K, d)`` / ``(B, K, d)``, tensor or array) prepended.

    ``head`` maps :data:`HeadParams.NAMES` to tensors (or arrays).  Only
    prompts and head receive gradient; backbone weights enter as constants.
    """
    pd = prompts.shape[-1] if prompts is not None else backbone.d_model
    if tokens.shape[-1] != backbone.d_model or pd != backbone.d_model:
        raise DimensionError(f"token width {tokens.shape[-1]} / prompt width {pd} != d_model {backbone.d_model}")
    tape = next((x.tape for x in (prompts, *head.values()) if isinstance(x, nc.Tensor)), None) or nc.Tape()
    seq = tape.constant(tokens)
    if prompts is not None and prompts.shape[-2] > 0:
        seq = nc.concat([prompts if isinstance(prompts, nc.Tensor) else tape.constant(prompts), seq], axis=-2)
    head = {n: h if isinstance(h, nc.Tensor) else tape.constant(h) for n, h in head.items()}
    d = backbone.d_model
    q = nc.matmul(seq, backbone.w_q)
    k = nc.matmul(seq, backbone.w_k)
    v = nc.matmul(seq, backbone.w_v)
    attn = nc.softmax_rows(nc.scale(nc.matmul(q, nc.transpose(k)), 1.0 / np.sqrt(d)))
    h = nc.add(seq, nc.matmul(nc.matmul(attn, v), backbone.w_o))
    m = nc.add(h, nc.matmul(nc.tanh(nc.matmul(h, backbone.w_1)), backbone.w_2))
    pooled = nc.mean(m, axis=-2)
    z = nc.tanh(nc.add(nc.matmul(_as_row(pooled), head["pooler_w"]), head["pooler_b"]))
    logits = nc.add(nc.matmul(z, head["cls_w"]), head["cls_b"])
    return nc.reshape(logits, pooled.shape[:-1] + (logits.shape[-1],))


def _as_row(x):
    # matmul needs >= 2 dims; a single pooled vector becomes a 1-row matrix
    return nc.reshape(x, (1, x.shape[0])) if len(x.shape) == 1 else x


def cross_entropy(logits, labels):
    """Per-sample cross-entropy (stable log-softmax) as a tensor of shape (B,)."""
    logits = logits if isinstance(logits, nc.Tensor) else nc.Tape().constant(logits)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    lp = nc.log_softmax_rows(logits if len(logits.shape) == 2 else nc.reshape(logits, (1, logits.shape[0])))
    onehot = np.zeros(lp.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    return nc.scale(nc.sum(nc.mul(lp, onehot), axis=-1), -1.0)


def task_loss(logits, label):
    """Cross-entropy of one logit vector against ``label`` (scalar tensor)."""
    return nc.sum(cross_entropy(logits, [label]))
