"""Independent reference checks used by ``selftest`` and the test suite.

Each check recomputes a quantity by a slow, obviously-correct route
(exhaustive enumeration, central finite differences) and reports every
mismatch it finds.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import alignserver as al
from .assignment import assignment_cost, brute_force, hungarian
from .client import ClientState, batch_loss, encode, select
from .promptpool import PromptPool
from .synthdata import Sample
from .vlbackbone import BackboneParams, HeadParams


@dataclass
class CheckResult:
    name: str
    cases: int
    failures: list
    worst: float = 0.0  # largest error seen, for checks with a tolerance

    @property
    def ok(self):
        return not self.failures

    def line(self):
        status = "PASS" if self.ok else "FAIL"
        tail = f" (worst error {self.worst:.2e})" if self.worst else ""
        return f"{status} {self.name}: {self.cases} cases, {len(self.failures)} failures{tail}"


def check_hungarian(n_cases=500, max_rows=5, max_cols=9, seed=0):
    rng = np.random.default_rng(seed)
    failures = []
    for k in range(n_cases):
        m = int(rng.integers(1, max_cols + 1))
        n = int(rng.integers(1, min(max_rows, m) + 1))
        cost = rng.random((n, m))
        cols = hungarian(cost)
        _, total = brute_force(cost)
        got = assignment_cost(cost, cols)
        if len(set(cols.tolist())) != n or got != total:
            failures.append((k, got, total))
    return CheckResult("hungarian vs brute force", n_cases, failures)


def _numpy_popularity(theta, zeta):
    h = np.tanh(theta @ zeta["w1"] + zeta["b1"])
    z = (h @ zeta["w2"] + zeta["b2"]).ravel()
    return 1.0 / (1.0 + np.exp(-z))


def enumerate_client_assignment(client_prompts, theta, gamma, zeta, sign="as_written"):
    """Best injective map by listing all of them; returns ``(cols, total)``."""
    tau, q = client_prompts.shape[0], theta.shape[0]
    u = np.clip(_numpy_popularity(theta, zeta), 1e-12, 1 - 1e-12)
    s = 1.0 if sign == "as_written" else -1.0
    v = np.empty((tau, q))
    for p in range(tau):
        for j in range(q):
            v[p, j] = np.sum(np.exp(2 * gamma) * (client_prompts[p] - theta[j]) ** 2) + s * np.log(u[j] / (1 - u[j]))
    best, best_cols = np.inf, None
    for cols in itertools.permutations(range(q), tau):
        total = sum(v[p, c] for p, c in enumerate(cols))
        if total < best:
            best, best_cols = total, np.array(cols)
    return best_cols, best, v


def check_assign_client(n_cases=200, tau=3, q=5, d_p=6, seed=0, sign="as_written"):
    rng = np.random.default_rng(seed)
    failures = []
    for k in range(n_cases):
        theta = rng.standard_normal((q, d_p))
        gamma = 0.3 * rng.standard_normal(d_p)
        params = al.ServerParams.init(d_p, seed=int(rng.integers(1 << 31)))
        params.gamma = gamma
        prompts = rng.standard_normal((tau, d_p))
        state = al.AlignmentState(theta=theta, assign=np.arange(tau)[None, :].copy(), params=params, client_ids=[0])
        cols = al.assign_client(0, prompts, state, sign)
        _, best, v = enumerate_client_assignment(prompts, theta, gamma, params.zeta, sign)
        got = float(sum(v[p, c] for p, c in enumerate(cols)))
        if len(set(cols.tolist())) != tau or abs(got - best) > 1e-12 * max(1.0, abs(best)):
            failures.append((k, got, best))
    return CheckResult(f"client assignment vs enumeration ({sign})", n_cases, failures)


def _random_client(rng):
    d_raw, d_model, d_q, c = 3, 6, 4, 3
    backbone = BackboneParams.init(d_raw, d_model, d_ff=5, d_q=d_q, seed=int(rng.integers(1 << 31)))
    head = HeadParams.init(d_model, c, seed=int(rng.integers(1 << 31)))
    head.cls_w = rng.standard_normal(head.cls_w.shape)
    head.pooler_b = 0.1 * rng.standard_normal(d_model)
    head.cls_b = 0.1 * rng.standard_normal(c)
    kind = rng.integers(3)
    layout = [{"inter": 2, "intra": 2}, {"intra": 3}, {"pattern": 1}][kind]
    pools = {}
    for name in layout:
        if name == "pattern":
            pools[name] = PromptPool.init(3, 2, d_model, d_q, "pattern", rng, token_std=0.5)
        else:
            pools[name] = PromptPool.init(4, int(rng.integers(1, 3)), d_model, d_q, name, rng, token_std=0.5)
    present = [(True, True), (True, False), (False, True)][rng.integers(3)]
    a = rng.standard_normal((2, d_raw)) * present[0]
    b = rng.standard_normal((2, d_raw)) * present[1]
    sample = Sample(a, b, present, int(rng.integers(c)))
    client = ClientState(0, head, pools, dict(layout), lambda_r=float(rng.uniform(0, 2)),
                         raw_cosine_regularizer=bool(rng.integers(2)))
    return client, encode([sample], backbone), backbone


def _leaf_arrays(client):
    out = {("head", n): (client.head, n) for n in HeadParams.NAMES}
    for name, pool in client.pools.items():
        out[(name, "tokens")] = (pool, "tokens")
        if pool.kind != "pattern":
            out[(name, "keys")] = (pool, "keys")
    return out


def check_gradients(n_configs=50, eps=1e-5, tol=1e-4, seed=0):
    """Tape gradients of the per-sample loss ``CE + lambda_r * r`` against
    central differences, for every trainable leaf.

    The prompt selection is held at its unperturbed value: it is a piecewise
    constant function of the keys and carries no gradient.  Error per leaf is
    ``|g - fd| / max(|g|, |fd|)`` in the 2-norm; leaves where both are below
    ``1e-10`` count as agreeing.
    """
    rng = np.random.default_rng(seed)
    failures = []
    worst = 0.0
    for k in range(n_configs):
        client, data, backbone = _random_client(rng)
        sel = select(client, data)
        loss, leaves, _ = batch_loss(client, data, backbone, sel)
        grads = loss.tape.backward(loss)
        for key, (owner, attr) in _leaf_arrays(client).items():
            base = getattr(owner, attr)
            fd = np.zeros_like(base)
            for idx in np.ndindex(base.shape):
                vals = []
                for step in (eps, -eps):
                    moved = base.copy()
                    moved[idx] += step
                    setattr(owner, attr, moved)
                    vals.append(batch_loss(client, data, backbone, sel)[0].item())
                fd[idx] = (vals[0] - vals[1]) / (2 * eps)
            setattr(owner, attr, base)
            g = grads[leaves[key]]
            scale = max(np.linalg.norm(g), np.linalg.norm(fd))
            err = 0.0 if scale < 1e-10 else np.linalg.norm(g - fd) / scale
            worst = max(worst, err)
            if err > tol:
                failures.append((k, key, err))
    return CheckResult("gradients vs central differences", n_configs, failures, worst)


def run_all(quick=False):
    if quick:
        return [check_hungarian(100), check_assign_client(40), check_gradients(10)]
    return [check_hungarian(), check_assign_client(), check_assign_client(sign="flipped"), check_gradients()]
