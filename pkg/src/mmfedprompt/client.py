"""Local prompt-tuning on one client.

A client holds a trainable head and up to two retrieval pools (``inter`` and
``intra``), or a ``pattern`` pool of per-missing-pattern prompt blocks for the
FedAvg prompt baseline.  Each step selects prompts per sample, runs the frozen
backbone and takes a plain SGD step on the mean of cross-entropy plus the
weighted retrieval regularizer.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .errors import ContractError
from .promptpool import PromptPool, distances, regularizer, renormalize_keys, topk_indices
from .vlbackbone import BackboneParams, HeadParams, cross_entropy, forward, query, tokenize_batch

NOISE_FILL_STD = 0.01


@dataclass
class ClientState:
    client_id: int
    head: HeadParams
    pools: dict = field(default_factory=dict)  # name -> PromptPool
    kappa: dict = field(default_factory=dict)  # name -> prompts selected per input
    lr: float = 0.05
    local_epochs: int = 1
    batch_size: int = 64
    lambda_r: float = 1.0
    raw_cosine_regularizer: bool = False

    def __post_init__(self):
        if self.lr < 0:
            raise ContractError("lr must be non-negative")
        for name, pool in self.pools.items():
            if pool.kind != "pattern" and self.kappa.get(name, 0) > len(pool):
                raise ContractError(f"kappa for pool {name!r} exceeds its size")

    @property
    def inter_pool(self):
        return self.pools.get("inter")

    @property
    def intra_pool(self):
        return self.pools.get("intra")


@dataclass
class EncodedDataset:
    """Backbone-side features of a dataset; the backbone is frozen so these
    are computed once and reused across rounds."""

    tokens: np.ndarray
    codes: np.ndarray
    queries: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)

    def take(self, idx):
        return EncodedDataset(self.tokens[idx], self.codes[idx], self.queries[idx], self.labels[idx])


def encode(samples, backbone: BackboneParams) -> EncodedDataset:
    if not samples:
        raise ContractError("cannot encode an empty dataset")
    tokens, codes, _ = tokenize_batch(samples, backbone)
    t_a = samples[0].modality_a.shape[0]
    return EncodedDataset(tokens, codes, query(tokens, codes, backbone, t_a=t_a),
                          np.array([s.label for s in samples], dtype=np.int64))


def adopt_global(client: ClientState, g_intra, g_inter, queries, tau, rng=None):
    """Start the round from the global pools.

    The intra pool is copied.  The inter pool is cut or grown to ``tau``: with
    more global prompts than ``tau`` the ones with the smallest mean distance
    to ``queries`` are kept (in their global order, ties to the lower index);
    with fewer, all are kept and noisy copies of the closest ones are
    appended.
    """
    if g_intra is not None:
        client.pools["intra"] = g_intra.copy()
    if g_inter is None:
        return client
    if len(g_inter) < 1:
        raise ContractError("empty global inter pool")
    if len(g_inter) == tau:
        client.pools["inter"] = g_inter.copy()
        return client
    mean_d = distances(queries, g_inter.keys).mean(axis=0)
    order = np.argsort(mean_d, kind="stable")
    if len(g_inter) > tau:
        client.pools["inter"] = g_inter.subset(np.sort(order[:tau]))
        return client
    rng = np.random.default_rng() if rng is None else rng
    extra = [order[i % len(order)] for i in range(tau - len(g_inter))]
    tokens = g_inter.tokens[extra] + NOISE_FILL_STD * rng.standard_normal(g_inter.tokens[extra].shape)
    keys = g_inter.keys[extra] + NOISE_FILL_STD * rng.standard_normal(g_inter.keys[extra].shape)
    client.pools["inter"] = PromptPool(np.concatenate([g_inter.tokens, tokens]),
                                       np.concatenate([g_inter.keys, renormalize_keys(keys)]), "inter")
    return client


def select(client: ClientState, data: EncodedDataset):
    """Per-sample prompt indices for every pool of the client."""
    sel = {}
    for name, pool in client.pools.items():
        if pool.kind == "pattern":
            sel[name] = data.codes[:, None]
        else:
            sel[name] = topk_indices(data.queries, pool.keys, client.kappa[name])
    return sel


def batch_loss(client: ClientState, data: EncodedDataset, backbone: BackboneParams, sel=None, tape=None):
    """Mean over the batch of ``CE + lambda_r * r`` on a fresh tape.

    Returns ``(loss, leaves, per_sample)`` where ``leaves`` maps
    ``("head", name)`` / ``(pool, "tokens" | "keys")`` to the trainable leaves.
    """
    tape = nc.Tape() if tape is None else tape
    sel = select(client, data) if sel is None else sel
    b = len(data)
    leaves = {}
    head = client.head.leaves(tape)
    for n, t in head.items():
        leaves[("head", n)] = t
    blocks, key_groups = [], []
    for name, pool in client.pools.items():
        tok = tape.leaf(pool.tokens, name=f"{name}.tokens")
        leaves[(name, "tokens")] = tok
        idx = sel[name]
        g = nc.gather_rows(tok, idx)
        blocks.append(nc.reshape(g, (b, idx.shape[1] * pool.prompt_len, pool.tokens.shape[2])))
        if pool.kind != "pattern":
            keys = tape.leaf(pool.keys, name=f"{name}.keys")
            leaves[(name, "keys")] = keys
            key_groups.append(nc.gather_rows(keys, idx))
    prompts = nc.concat(blocks, axis=-2) if blocks else None
    logits = forward(data.tokens, prompts, head, backbone)
    per = cross_entropy(logits, data.labels)
    if key_groups and client.lambda_r != 0:
        r = regularizer(data.queries, key_groups, raw_cosine=client.raw_cosine_regularizer)
        per = nc.add(per, nc.scale(r, client.lambda_r))
    return nc.mean(per), leaves, per


def sgd_step(client: ClientState, data: EncodedDataset, backbone: BackboneParams, sel=None):
    loss, leaves, per = batch_loss(client, data, backbone, sel)
    grads = nc.backward(loss.tape, loss)
    lr = client.lr
    h = client.head
    for n in HeadParams.NAMES:
        setattr(h, n, getattr(h, n) - lr * grads[leaves[("head", n)]])
    for name, pool in client.pools.items():
        pool.tokens = pool.tokens - lr * grads[leaves[(name, "tokens")]]
        if (name, "keys") in leaves:
            pool.keys = renormalize_keys(pool.keys - lr * grads[leaves[(name, "keys")]])
    return per.data


@dataclass
class UpdateStats:
    epoch_losses: list
    n_samples: int
    selected: dict  # pool name -> bool mask of prompts selected at least once


def local_update(client: ClientState, dataset, backbone: BackboneParams, rng=None):
    """Run ``local_epochs`` of mini-batch SGD on ``dataset``.

    ``dataset`` is a list of samples, a :class:`ClientDataset` or an
    :class:`EncodedDataset`.  Mutates and returns the client's pools and head
    along with per-epoch mean losses.
    """
    data = dataset if isinstance(dataset, EncodedDataset) else encode(getattr(dataset, "samples", dataset), backbone)
    if len(data) == 0:
        raise ContractError("empty local dataset")
    rng = np.random.default_rng() if rng is None else rng
    selected = {name: np.zeros(len(p), dtype=bool) for name, p in client.pools.items()}
    epoch_losses = []
    for _ in range(client.local_epochs):
        order = rng.permutation(len(data))
        losses = []
        for start in range(0, len(data), client.batch_size):
            batch = data.take(order[start:start + client.batch_size])
            sel = select(client, batch)
            for name, idx in sel.items():
                selected[name][np.unique(idx)] = True
            losses.append(sgd_step(client, batch, backbone, sel))
        epoch_losses.append(float(np.concatenate(losses).mean()))
    stats = UpdateStats(epoch_losses, len(data), selected)
    return client.pools.get("inter"), client.pools.get("intra"), client.head, stats
