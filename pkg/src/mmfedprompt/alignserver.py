"""Server-side prompt alignment.

Inter-client prompts are clustered into centroids under a learnable diagonal
metric and a learned popularity score.  The continuous block (centroids,
metric, popularity net) takes plain gradient steps with the assignment fixed;
the assignment is then re-solved client by client with the Hungarian
algorithm, which minimises the joint objective exactly in that block.  Clusters
left without members are pruned at the end.

A prompt is clustered as the flat vector ``[tokens.ravel() ; key]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .assignment import hungarian
from .errors import ContractError, InfeasibleError
from .promptpool import PromptPool, renormalize_keys
from .vlbackbone import HeadParams

LOG_FLOOR = 1e-12
HIDDEN = 16
SIGNS = {"as_written": 1.0, "flipped": -1.0}


@dataclass
class AlignConfig:
    e_srv: int = 5
    t_grad: int = 20
    lr: float = 0.01
    popularity_sign: str = "as_written"
    gamma_zero_mean: bool = True
    check_monotone: bool = True
    monotone_tol: float = 1e-9

    def __post_init__(self):
        if self.popularity_sign not in SIGNS:
            raise ContractError(f"popularity_sign must be one of {sorted(SIGNS)}")


@dataclass
class ServerParams:
    """Metric and popularity parameters; they persist across rounds."""

    gamma: np.ndarray
    zeta: dict

    @classmethod
    def init(cls, d_p, seed=0, hidden=HIDDEN):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5E7]))
        zeta = {
            "w1": rng.standard_normal((d_p, hidden)) / np.sqrt(d_p),
            "b1": np.zeros(hidden),
            "w2": rng.standard_normal((hidden, 1)) / np.sqrt(hidden),
            "b2": np.zeros(1),
        }
        return cls(np.zeros(d_p), zeta)

    @classmethod
    def zeros(cls, d_p, hidden=HIDDEN):
        zeta = {"w1": np.zeros((d_p, hidden)), "b1": np.zeros(hidden),
                "w2": np.zeros((hidden, 1)), "b2": np.zeros(1)}
        return cls(np.zeros(d_p), zeta)

    def copy(self):
        return ServerParams(self.gamma.copy(), {k: v.copy() for k, v in self.zeta.items()})


@dataclass
class AlignmentState:
    """Centroids ``theta`` (Q, d_p) and the assignment ``assign`` (n, tau),
    ``assign[t, p]`` being the cluster of prompt ``p`` of the ``t``-th client
    (clients in ascending id order)."""

    theta: np.ndarray
    assign: np.ndarray
    params: ServerParams
    client_ids: list

    def alpha(self):
        """Dense binary assignment tensor of shape (n, tau, Q)."""
        n, tau = self.assign.shape
        a = np.zeros((n, tau, len(self.theta)), dtype=np.int8)
        a[np.arange(n)[:, None], np.arange(tau)[None, :], self.assign] = 1
        return a

    def counts(self):
        return np.bincount(self.assign.ravel(), minlength=len(self.theta))


@dataclass
class AlignReport:
    objective_before: float
    objective_after: float
    pool_size: int
    centroid_dist: float
    violations: int
    trace: list = field(default_factory=list)  # (step, value) after every block update
    state: AlignmentState | None = None


# prompt <-> vector

def pool_vectors(pool: PromptPool):
    return np.concatenate([pool.tokens.reshape(len(pool), -1), pool.keys], axis=1)


def vectors_to_pool(vecs, prompt_len, d_model, kind="inter"):
    vecs = np.asarray(vecs, dtype=np.float64)
    split = prompt_len * d_model
    tokens = vecs[:, :split].reshape(len(vecs), prompt_len, d_model)
    return PromptPool(tokens, renormalize_keys(vecs[:, split:]), kind)


# cost pieces

def cluster_cost(p_vec, theta_q, gamma):
    """``sum_i exp(2 gamma_i) (p_i - theta_i)^2``; broadcasts over leading axes."""
    p_vec, theta_q, gamma = (np.asarray(x, dtype=np.float64) for x in (p_vec, theta_q, gamma))
    return (np.exp(2.0 * gamma) * (p_vec - theta_q) ** 2).sum(axis=-1)


def cost_matrix(prompts, theta, gamma):
    """(tau, Q) matrix of :func:`cluster_cost` values."""
    w = np.exp(2.0 * np.asarray(gamma))
    diff = prompts[:, None, :] - theta[None, :, :]
    return (w * diff * diff).sum(axis=-1)


def _popularity_logit(theta, zeta):
    """MLP ``d_p -> 16 -> 1`` with tanh hidden layer, on tensors or arrays."""
    h = nc.tanh(nc.add(nc.matmul(theta, zeta["w1"]), zeta["b1"]))
    return nc.reshape(nc.add(nc.matmul(h, zeta["w2"]), zeta["b2"]), (theta.shape[0],))


def popularity(theta, zeta):
    """``sigmoid(g(theta; zeta))`` for each row of ``theta`` (or one vector)."""
    theta = np.asarray(theta, dtype=np.float64)
    single = theta.ndim == 1
    u = nc.sigmoid(_popularity_logit(theta[None] if single else theta, zeta)).data
    return float(u[0]) if single else u.copy()


def log_odds(u):
    u = np.asarray(u, dtype=np.float64)
    return np.log(np.maximum(u, LOG_FLOOR)) - np.log(np.maximum(1.0 - u, LOG_FLOOR))


def joint_objective(prompts, assign, theta, gamma, zeta, sign="as_written"):
    """Clustering cost plus (signed) popularity regulariser, as a tape scalar.

    ``prompts`` is (N, d_p) with ``N = n * tau`` rows in client-major order and
    ``assign`` the matching (N,) cluster indices.  ``theta``, ``gamma`` and the
    ``zeta`` entries may be trainable tensors on one tape or plain arrays.
    """
    s = SIGNS[sign]
    tape = next((x.tape for x in (theta, gamma, *zeta.values()) if isinstance(x, nc.Tensor)), None) or nc.Tape()

    def lift(x):
        return x if isinstance(x, nc.Tensor) else tape.constant(x)

    theta, gamma, prompts = lift(theta), lift(gamma), lift(prompts)
    zeta = {k: lift(v) for k, v in zeta.items()}
    assign = np.asarray(assign, dtype=np.intp).ravel()
    q = theta.shape[0]
    counts = np.bincount(assign, minlength=q).astype(np.float64)
    n_pairs = float(len(assign))
    theta_sel = nc.gather_rows(theta, assign)
    diff = nc.sub(prompts, theta_sel)
    g_term = nc.sum(nc.mul(nc.exp(nc.scale(gamma, 2.0)), nc.mul(diff, diff)))
    u = nc.sigmoid(_popularity_logit(theta, zeta))
    log_u = nc.log(u, floor=LOG_FLOOR)
    log_1mu = nc.log(nc.sub(1.0, u), floor=LOG_FLOOR)
    r_term = nc.add(nc.sum(nc.mul(log_u, counts)), nc.sum(nc.mul(log_1mu, n_pairs - counts)))
    return nc.add(g_term, nc.scale(r_term, s))


def objective_value(prompts, state: AlignmentState, sign="as_written"):
    return joint_objective(prompts, state.assign, state.theta, state.params.gamma,
                           state.params.zeta, sign).item()


# block updates

def continuous_step(prompts, state: AlignmentState, lr, sign="as_written", gamma_zero_mean=True):
    """One gradient step on (theta, gamma, zeta) with the assignment fixed."""
    tape = nc.Tape()
    theta = tape.leaf(state.theta, name="theta")
    gamma = tape.leaf(state.params.gamma, name="gamma")
    zeta = {k: tape.leaf(v, name=k) for k, v in state.params.zeta.items()}
    obj = joint_objective(prompts, state.assign, theta, gamma, zeta, sign)
    grads = nc.backward(tape, obj)
    state.theta = state.theta - lr * grads[theta]
    g = grads[gamma]
    if gamma_zero_mean:
        g = g - g.mean()
    state.params.gamma = state.params.gamma - lr * g
    state.params.zeta = {k: v - lr * grads[zeta[k]] for k, v in state.params.zeta.items()}
    return obj.item()


def assignment_costs(client_prompts, state: AlignmentState, sign="as_written"):
    """Matrix ``v(p, q) = c(p, theta_q) + s * logit U(theta_q)``, shape (tau, Q)."""
    u = popularity(state.theta, state.params.zeta)
    return cost_matrix(client_prompts, state.theta, state.params.gamma) + SIGNS[sign] * log_odds(u)[None, :]


def assign_client(t, client_prompts, state: AlignmentState, sign="as_written"):
    """Re-solve the assignment of client row ``t`` with everything else fixed."""
    tau, q = client_prompts.shape[0], state.theta.shape[0]
    if q < tau:
        raise InfeasibleError(f"{q} clusters cannot host {tau} prompts injectively")
    v = assignment_costs(client_prompts, state, sign)
    cols = hungarian(v)
    state.assign[t] = cols
    return cols


def check_assignment(state: AlignmentState):
    """Count rows of alpha not summing to one plus same-client collisions."""
    a = state.alpha()
    bad = int(np.sum(a.sum(axis=2) != 1))
    per_cluster = a.sum(axis=1)  # (n, Q)
    bad += int(np.sum(per_cluster > 1))
    return bad


def mean_pairwise_distance(vecs):
    vecs = np.asarray(vecs)
    if len(vecs) < 2:
        return 0.0
    d = np.sqrt(np.maximum(((vecs[:, None, :] - vecs[None, :, :]) ** 2).sum(-1), 0.0))
    iu = np.triu_indices(len(vecs), k=1)
    return float(d[iu].mean())


def align(prompt_pools, params: ServerParams, cfg: AlignConfig | None = None):
    """Aggregate inter-client pools into a new global inter pool.

    ``prompt_pools`` is a list of ``(client_id, PromptPool)``, all of the same
    size ``tau``.  ``params`` (metric, popularity net) is updated in place.
    Returns ``(pool, report)``.
    """
    cfg = AlignConfig() if cfg is None else cfg
    if not prompt_pools:
        raise ContractError("align needs at least one client pool")
    prompt_pools = sorted(prompt_pools, key=lambda cp: cp[0])
    ref = prompt_pools[0][1]
    tau = len(ref)
    if any(len(p) != tau or p.tokens.shape != ref.tokens.shape for _, p in prompt_pools):
        raise ContractError("all client inter pools must share size and shape")
    per_client = [pool_vectors(p) for _, p in prompt_pools]
    prompts = np.concatenate(per_client, axis=0)
    n = len(per_client)
    state = AlignmentState(theta=prompts.copy(), assign=np.arange(n * tau).reshape(n, tau),
                           params=params, client_ids=[cid for cid, _ in prompt_pools])
    sign = cfg.popularity_sign
    trace = []
    violations = 0
    before = objective_value(prompts, state, sign)
    for e in range(cfg.e_srv):
        for _ in range(cfg.t_grad):
            continuous_step(prompts, state, cfg.lr, sign, cfg.gamma_zero_mean)
        value = objective_value(prompts, state, sign)
        trace.append((e, "continuous", value))
        for t in range(n):
            assign_client(t, per_client[t], state, sign)
            new_value = objective_value(prompts, state, sign)
            if cfg.check_monotone and new_value > value + cfg.monotone_tol * max(1.0, abs(value)):
                violations += 1
            trace.append((e, f"alpha[{state.client_ids[t]}]", new_value))
            value = new_value
    after = objective_value(prompts, state, sign)
    counts = state.counts()
    keep = np.flatnonzero(counts > 0)
    survivors = state.theta[keep]
    pool = vectors_to_pool(survivors, ref.prompt_len, ref.tokens.shape[2], "inter")
    report = AlignReport(before, after, len(keep), mean_pairwise_distance(survivors), violations, trace, state)
    return pool, report


def fedavg_heads(heads):
    if not heads:
        raise ContractError("nothing to average")
    shapes = [tuple(a.shape for a in h.arrays()) for h in heads]
    if any(s != shapes[0] for s in shapes):
        raise ContractError("head shapes differ")
    return HeadParams(*(np.mean(np.stack(arrs), axis=0) for arrs in zip(*(h.arrays() for h in heads))))
