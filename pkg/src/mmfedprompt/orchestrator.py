"""Federated rounds, method variants, evaluation, metrics and checkpoints."""
from __future__ import annotations

import configparser
import csv
import io
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from pathlib import Path

import numpy as np

from . import alignserver as al
from .client import ClientState, EncodedDataset, adopt_global, encode, local_update, select
from .errors import ConfigError, ContractError
from .promptpool import TAU_MAX, PromptPool, fedavg_pools
from .synthdata import ScenarioSpec, TestScenario, TrainScenario, build_benchmark, nearest_mean_accuracy
from .vlbackbone import BackboneParams, HeadParams, cross_entropy, forward

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
OUTPUT_ENV = "MMFEDPROMPT_OUT"
METRICS_HEADER = ["round", "train_loss", "test_loss", "test_acc", "test_f1", "pool_size", "centroid_dist", "seconds"]


class Method(str, Enum):
    FED_PRIME = "fed-prime"
    FED_INTER = "fed-inter"
    FED_INTRA = "fed-intra"
    FEDAVG_P = "fedavg-p"
    CENTRALIZED_P = "centralized-p"


@dataclass(frozen=True)
class RunConfig:
    method: Method = Method.FED_PRIME
    train_scenario: TrainScenario = TrainScenario.MISS_BOTH
    test_scenario: TestScenario = TestScenario.SIM_TRAIN
    eta: float = 0.7
    test_eta: float | None = None
    n_clients: int = 8
    rounds: int = 60
    participation: float = 1.0
    tau: int = 20
    kappa: int = 5
    prompt_len: int = 1
    lambda_r: float = 1.0
    lr_client: float = 0.05
    lr_server: float = 0.01
    e_srv: int = 5
    t_grad: int = 20
    popularity_sign: str = "as_written"
    raw_cosine_regularizer: bool = False
    gamma_zero_mean: bool = True
    persist_server_params: bool = True
    disable_inter: bool = False
    local_epochs: int = 1
    batch_size: int = 64
    n_classes: int = 8
    n_train: int = 2000
    n_test: int = 500
    d_raw: int = 16
    d_model: int = 32
    d_ff: int = 64
    d_q: int = 16
    t_a: int = 4
    t_b: int = 4
    partition: str = "uniform"
    dirichlet_alpha: float = 0.1
    seed: int = 0
    workers: int = 1
    record_time: bool = False

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        object.__setattr__(self, "train_scenario", TrainScenario(self.train_scenario))
        object.__setattr__(self, "test_scenario", TestScenario(self.test_scenario))

    def validate(self):
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if not 0.0 < self.participation <= 1.0:
            raise ConfigError("participation must lie in (0, 1]")
        if self.participation * self.effective_clients < 1.0 - 1e-12:
            raise ConfigError("participation * n_clients must be >= 1")
        if not 1 <= self.tau <= TAU_MAX:
            raise ConfigError(f"tau must lie in [1, {TAU_MAX}]")
        if self.kappa < 1 or self.kappa_per_pool > self.tau:
            raise ConfigError("kappa must be >= 1 and fit inside the pool")
        if self.lr_client < 0 or self.lr_server < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.popularity_sign not in al.SIGNS:
            raise ConfigError(f"popularity_sign must be one of {sorted(al.SIGNS)}")
        if self.partition not in ("uniform", "dirichlet"):
            raise ConfigError("partition must be 'uniform' or 'dirichlet'")
        if self.effective_clients > self.n_train:
            raise ConfigError("more clients than training samples")
        if self.batch_size < 1 or self.local_epochs < 1 or self.workers < 1:
            raise ConfigError("batch_size, local_epochs and workers must be >= 1")
        ScenarioSpec(self.train_scenario, self.test_scenario, self.eta, self.effective_clients, self.seed, self.test_eta)
        return self

    @property
    def effective_clients(self):
        return 1 if self.method is Method.CENTRALIZED_P else self.n_clients

    @property
    def kappa_per_pool(self):
        two_pools = self.method is Method.FED_PRIME and not self.disable_inter
        return self.kappa if two_pools else 2 * self.kappa

    def scenario(self):
        return ScenarioSpec(self.train_scenario, self.test_scenario, self.eta, self.effective_clients,
                            self.seed, self.test_eta)

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, Enum):
                d[k] = v.value
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**{k: _coerce(known[k], v) for k, v in d.items()})

    def to_ini(self):
        cp = configparser.ConfigParser()
        cp["run"] = {k: "none" if v is None else str(v) for k, v in self.to_dict().items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text, base=None):
        cp = configparser.ConfigParser()
        cp.read_string(text)
        values = {}
        for section in cp.sections():
            values.update(cp[section])
        merged = (base or cls()).to_dict()
        unknown = set(values) - set(merged)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        merged.update(values)
        return cls.from_dict(merged)


FULL_SCALE = {"n_clients": 20, "rounds": 250}


def _coerce(f, v):
    if not isinstance(v, str):
        return v
    t = str(f.type)
    s = v.strip()
    if s.lower() == "none" and "None" in t:
        return None
    if t.startswith("bool"):
        if s.lower() in ("1", "true", "yes", "on"):
            return True
        if s.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{f.name}: expected a boolean, got {v!r}")
    try:
        if t.startswith("int"):
            return int(s)
        if t.startswith("float"):
            return float(s)
    except ValueError as exc:
        raise ConfigError(f"{f.name}: cannot parse {v!r}") from exc
    return s


# model state

@dataclass
class GlobalState:
    head: HeadParams
    pools: dict  # "inter" / "intra" / "pattern" -> PromptPool
    server: al.ServerParams
    round: int = 0

    def copy(self):
        return GlobalState(self.head.copy(), {k: p.copy() for k, p in self.pools.items()},
                           self.server.copy(), self.round)


def pool_layout(cfg: RunConfig):
    """Pool name -> prompts selected per input for the method."""
    k = cfg.kappa_per_pool
    m = cfg.method
    if m is Method.FED_PRIME:
        return {"intra": k} if cfg.disable_inter else {"inter": k, "intra": k}
    if m is Method.FED_INTER:
        return {"inter": k}
    if m is Method.FED_INTRA:
        return {"intra": k}
    return {"pattern": 1}


def init_state(cfg: RunConfig) -> GlobalState:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x1417]))
    pools = {}
    for name in pool_layout(cfg):
        if name == "pattern":
            # one block per missing pattern, as many tokens as the retrieval methods use per input
            pools[name] = PromptPool.init(3, 2 * cfg.kappa * cfg.prompt_len, cfg.d_model, cfg.d_q, "pattern", rng)
        else:
            pools[name] = PromptPool.init(cfg.tau, cfg.prompt_len, cfg.d_model, cfg.d_q, name, rng)
    head = HeadParams.init(cfg.d_model, cfg.n_classes, seed=cfg.seed)
    d_p = cfg.prompt_len * cfg.d_model + cfg.d_q
    return GlobalState(head, pools, al.ServerParams.init(d_p, seed=cfg.seed))


# evaluation

def confusion_matrix(labels, preds, n_classes):
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(preds)), 1)
    return cm


def f1_macro(labels, preds, n_classes):
    """Unweighted mean of per-class F1 over all ``n_classes`` classes; a class
    with zero precision + recall (including one absent everywhere) scores 0."""
    cm = confusion_matrix(labels, preds, n_classes)
    tp = np.diag(cm).astype(np.float64)
    pred_pos = cm.sum(axis=0)
    true_pos = cm.sum(axis=1)
    precision = np.divide(tp, pred_pos, out=np.zeros_like(tp), where=pred_pos > 0)
    recall = np.divide(tp, true_pos, out=np.zeros_like(tp), where=true_pos > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return float(f1.mean())


def predict_logits(state: GlobalState, data: EncodedDataset, backbone: BackboneParams, layout, chunk=250):
    probe = ClientState(-1, state.head, state.pools, dict(layout))
    out = []
    for start in range(0, len(data), chunk):
        part = data.take(np.arange(start, min(start + chunk, len(data))))
        sel = select(probe, part)
        blocks = []
        for name, pool in state.pools.items():
            idx = sel[name]
            blocks.append(pool.tokens[idx].reshape(len(part), -1, pool.tokens.shape[2]))
        prompts = np.concatenate(blocks, axis=1) if blocks else None
        head = {n: getattr(state.head, n) for n in HeadParams.NAMES}
        out.append(forward(part.tokens, prompts, head, backbone).data)
    return np.concatenate(out, axis=0)


def evaluate(state: GlobalState, data: EncodedDataset, backbone: BackboneParams, layout, n_classes):
    """Return ``(loss, accuracy, f1_macro)`` of the global model on ``data``."""
    if len(data) == 0:
        raise ContractError("empty test set")
    logits = predict_logits(state, data, backbone, layout)
    loss = float(cross_entropy(logits, data.labels).data.mean())
    preds = np.argmax(logits, axis=1)
    acc = float(np.mean(preds == data.labels))
    return loss, acc, f1_macro(data.labels, preds, n_classes)


# running

@dataclass
class RoundMetrics:
    round: int
    train_loss: float
    test_loss: float
    test_acc: float
    test_f1: float
    pool_size: int
    centroid_dist: float
    seconds: float

    def row(self):
        return [str(self.round)] + [f"{getattr(self, k):.6g}" for k in METRICS_HEADER[1:5]] + [
            str(self.pool_size), f"{self.centroid_dist:.6g}", f"{self.seconds:.6g}"]


@dataclass
class RunResult:
    config: RunConfig
    metrics: list
    state: GlobalState
    initial: RoundMetrics
    references: dict
    diagnostics: dict = field(default_factory=dict)

    @property
    def final_accuracy(self):
        return self.metrics[-1].test_acc


@dataclass
class Experiment:
    """Frozen backbone plus encoded client and test data for one config."""

    backbone: BackboneParams
    clients: list  # EncodedDataset per client, index = client id
    test: EncodedDataset
    references: dict


def prepare(cfg: RunConfig) -> Experiment:
    spec = cfg.scenario()
    bm = build_benchmark(spec, cfg.n_classes, cfg.n_train, cfg.n_test, cfg.d_raw, cfg.t_a, cfg.t_b,
                         cfg.partition, cfg.dirichlet_alpha)
    backbone = BackboneParams.init(cfg.d_raw, cfg.d_model, cfg.d_ff, cfg.d_q, seed=cfg.seed)
    clients = [encode(cd.samples, backbone) for cd in bm.clients]
    test = encode(bm.test, backbone)
    complete = [s for s in bm.train if s.present == (True, True)] or bm.train
    labels = test.labels
    refs = {
        "majority_class": float(np.bincount(labels, minlength=cfg.n_classes).max() / len(labels)),
        "nearest_mean": nearest_mean_accuracy(complete, bm.test),
        "uniform": 1.0 / cfg.n_classes,
    }
    return Experiment(backbone, clients, test, refs)


def _participants(cfg: RunConfig, rnd: int):
    n = cfg.effective_clients
    m = max(1, int(round(cfg.participation * n)))
    if m >= n:
        return list(range(n))
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, rnd, 0x9A27]))
    return sorted(int(t) for t in rng.choice(n, size=m, replace=False))


def client_rng(seed, client_id, rnd):
    return np.random.default_rng(np.random.SeedSequence([seed, client_id, rnd]))


def _client_round(cfg, exp: Experiment, state: GlobalState, layout, t, rnd):
    rng = client_rng(cfg.seed, t, rnd)
    c = ClientState(t, state.head.copy(), {}, dict(layout), lr=cfg.lr_client, local_epochs=cfg.local_epochs,
                    batch_size=cfg.batch_size, lambda_r=cfg.lambda_r,
                    raw_cosine_regularizer=cfg.raw_cosine_regularizer)
    data = exp.clients[t]
    for name, pool in state.pools.items():
        if name == "inter":
            adopt_global(c, None, pool, data.queries, cfg.tau, rng)
        else:
            c.pools[name] = pool.copy()
    *_, stats = local_update(c, data, exp.backbone, rng)
    return c, stats


def run_round(cfg: RunConfig, exp: Experiment, state: GlobalState, rnd: int, executor=None):
    """One round: local updates, aggregation, in place on ``state``.

    Returns ``(train_loss, pool_size, centroid_dist, diagnostics)``.
    """
    layout = pool_layout(cfg)
    ids = _participants(cfg, rnd)
    if executor is None:
        results = [_client_round(cfg, exp, state, layout, t, rnd) for t in ids]
    else:
        results = list(executor.map(lambda t: _client_round(cfg, exp, state, layout, t, rnd), ids))
    clients = [c for c, _ in results]
    n_seen = sum(s.n_samples for _, s in results)
    train_loss = sum(s.epoch_losses[-1] * s.n_samples for _, s in results) / n_seen
    diag = {"participants": ids, "align_violations": 0, "assignment_violations": 0}

    state.head = al.fedavg_heads([c.head for c in clients])
    centroid_dist = None
    for name in layout:
        pools = [c.pools[name] for c in clients]
        if name == "inter":
            if not cfg.persist_server_params:
                state.server = init_state(cfg).server
            acfg = al.AlignConfig(cfg.e_srv, cfg.t_grad, cfg.lr_server, cfg.popularity_sign, cfg.gamma_zero_mean)
            pool, report = al.align(list(zip(ids, pools)), state.server, acfg)
            diag["align_violations"] = report.violations
            diag["assignment_violations"] = al.check_assignment(report.state)
            diag["objective"] = (report.objective_before, report.objective_after)
            diag["clusters_used"] = int(np.sum(report.state.counts() > 0))
            state.pools[name] = pool
            centroid_dist = report.centroid_dist
        else:
            state.pools[name] = fedavg_pools(pools)
    main = "inter" if "inter" in state.pools else next(iter(state.pools))
    if centroid_dist is None:
        centroid_dist = al.mean_pairwise_distance(al.pool_vectors(state.pools[main]))
    state.round = rnd
    return train_loss, len(state.pools[main]), centroid_dist, diag


def run(cfg: RunConfig, out_dir=None, resume=False, checkpoint_every=1, verbose=False):
    """Run ``cfg.rounds`` federated rounds.

    With ``out_dir`` the resolved config, per-round metrics CSV, reference
    scores and a checkpoint are written there.  ``resume`` continues from the
    checkpoint in ``out_dir``; the continuation is bit-identical to an
    uninterrupted run.
    """
    cfg.validate()
    exp = prepare(cfg)
    layout = pool_layout(cfg)
    out = Path(out_dir) if out_dir is not None else None
    metrics: list[RoundMetrics] = []
    diagnostics = {"align_violations": 0, "assignment_violations": 0, "f1_mismatch": 0,
                   "pool_bound_violations": 0, "rounds": []}
    if resume:
        if out is None:
            raise ConfigError("resume needs an output directory")
        state, metrics = load_checkpoint(out / "checkpoint.json", cfg)
    else:
        state = init_state(cfg)
    init_loss, init_acc, init_f1 = evaluate(state if not resume else init_state(cfg), exp.test, exp.backbone,
                                            layout, cfg.n_classes)
    initial = RoundMetrics(0, float("nan"), init_loss, init_acc, init_f1,
                           len(next(iter(init_state(cfg).pools.values()))), 0.0, 0.0)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.ini").write_text(cfg.to_ini())
        (out / "reference.json").write_text(json.dumps(exp.references, indent=2, sort_keys=True))
        _write_metrics(out / "metrics.csv", metrics)
    executor = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for rnd in range(state.round + 1, cfg.rounds + 1):
            t0 = time.perf_counter()
            train_loss, pool_size, cdist, diag = run_round(cfg, exp, state, rnd, executor)
            loss, acc, f1 = evaluate(state, exp.test, exp.backbone, layout, cfg.n_classes)
            elapsed = time.perf_counter() - t0
            _self_check(cfg, state, exp, layout, acc, f1, diagnostics)
            if "inter" in state.pools and not 1 <= len(state.pools["inter"]) <= len(diag["participants"]) * cfg.tau:
                diagnostics["pool_bound_violations"] += 1
            if "intra" in state.pools and len(state.pools["intra"]) != cfg.tau:
                diagnostics["pool_bound_violations"] += 1
            diagnostics["align_violations"] += diag["align_violations"]
            diagnostics["assignment_violations"] += diag["assignment_violations"]
            diagnostics["rounds"].append(diag)
            m = RoundMetrics(rnd, train_loss, loss, acc, f1, pool_size, cdist,
                             elapsed if cfg.record_time else 0.0)
            metrics.append(m)
            if verbose:
                log.info("round %d loss %.4f acc %.4f f1 %.4f pool %d", rnd, loss, acc, f1, pool_size)
            if out is not None:
                _append_metrics(out / "metrics.csv", m)
                with open(out / "timing.csv", "a") as fh:
                    fh.write(f"{rnd},{elapsed:.6f}\n")
                if rnd % checkpoint_every == 0 or rnd == cfg.rounds:
                    save_checkpoint(out / "checkpoint.json", cfg, state, metrics)
    finally:
        if executor is not None:
            executor.shutdown()
    return RunResult(cfg, metrics, state, initial, exp.references, diagnostics)


def run_baseline(cfg: RunConfig, **kwargs):
    if cfg.method is Method.FED_PRIME:
        raise ConfigError("run_baseline expects a baseline method")
    return run(cfg, **kwargs)


def _self_check(cfg, state, exp, layout, acc, f1, diagnostics):
    logits = predict_logits(state, exp.test, exp.backbone, layout)
    preds = np.argmax(logits, axis=1)
    recount = sum(int(p == y) for p, y in zip(preds, exp.test.labels)) / len(preds)
    cm = confusion_matrix(exp.test.labels, preds, cfg.n_classes)
    f1s = []
    for c in range(cfg.n_classes):
        tp, fp, fn = cm[c, c], cm[:, c].sum() - cm[c, c], cm[c, :].sum() - cm[c, c]
        f1s.append(0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn))
    if abs(recount - acc) > 1e-12 or abs(float(np.mean(f1s)) - f1) > 1e-12:
        diagnostics["f1_mismatch"] += 1


# files

def _write_metrics(path, metrics):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for m in metrics:
            w.writerow(m.row())


def _append_metrics(path, m):
    with open(path, "a", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerow(m.row())


def read_metrics(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [RoundMetrics(int(r["round"]), float(r["train_loss"]), float(r["test_loss"]), float(r["test_acc"]),
                         float(r["test_f1"]), int(r["pool_size"]), float(r["centroid_dist"]), float(r["seconds"]))
            for r in rows]


def _pool_to_json(p: PromptPool):
    return {"kind": p.kind, "tokens": p.tokens.tolist(), "keys": p.keys.tolist()}


def _pool_from_json(d):
    return PromptPool(np.array(d["tokens"], dtype=np.float64), np.array(d["keys"], dtype=np.float64), d["kind"])


def save_checkpoint(path, cfg: RunConfig, state: GlobalState, metrics):
    """Plain-JSON snapshot; floats are written with ``repr`` precision so a
    reload is bit-exact.  Per-round randomness derives from ``(seed, client,
    round)``, so the round counter is the whole RNG state."""
    doc = {
        "version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "round": state.round,
        "rng": {"scheme": "SeedSequence([seed, client_id, round])", "seed": cfg.seed, "next_round": state.round + 1},
        "head": {n: getattr(state.head, n).tolist() for n in HeadParams.NAMES},
        "pools": {k: _pool_to_json(p) for k, p in state.pools.items()},
        "server": {"gamma": state.server.gamma.tolist(),
                   "zeta": {k: v.tolist() for k, v in state.server.zeta.items()}},
        "metrics": [asdict(m) for m in metrics],
    }
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(doc))
    os.replace(tmp, path)


def load_checkpoint(path, cfg: RunConfig | None = None):
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {doc.get('version')}")
    if cfg is not None:
        saved = dict(doc["config"])
        now = cfg.to_dict()
        for k in ("rounds", "workers", "record_time"):
            saved.pop(k, None)
            now.pop(k, None)
        if saved != now:
            diff = sorted(k for k in now if saved.get(k) != now[k])
            raise ConfigError(f"checkpoint was written for a different config (differs in {diff})")
    head = HeadParams(*(np.array(doc["head"][n], dtype=np.float64) for n in HeadParams.NAMES))
    pools = {k: _pool_from_json(v) for k, v in doc["pools"].items()}
    server = al.ServerParams(np.array(doc["server"]["gamma"], dtype=np.float64),
                             {k: np.array(v, dtype=np.float64) for k, v in doc["server"]["zeta"].items()})
    metrics = [RoundMetrics(**m) for m in doc["metrics"]]
    return GlobalState(head, pools, server, doc["round"]), metrics


def output_root():
    return Path(os.environ.get(OUTPUT_ENV, "runs"))


def with_overrides(cfg: RunConfig, **kw):
    return replace(cfg, **kw)
