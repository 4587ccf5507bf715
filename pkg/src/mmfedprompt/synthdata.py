"""Synthetic two-modality classification data and missing-modality protocols.

Modality A plays the role of the image, modality B the text.  A dropped
modality is replaced by an all-zero token block and its ``present`` flag is
cleared.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .errors import ConfigError, ContractError

NOISE_SIGMA = 0.5


class TrainScenario(str, Enum):
    MISS_TEXT = "miss-text"
    MISS_IMAGE = "miss-image"
    MISS_BOTH = "miss-both"


class TestScenario(str, Enum):
    __test__ = False  # not a pytest class

    SIM_TRAIN = "sim-train"
    MISS_BOTH = "miss-both"
    FULL_MODAL = "full-modal"
    TEXT_ONLY = "text-only"
    IMAGE_ONLY = "image-only"


@dataclass(frozen=True)
class Sample:
    modality_a: np.ndarray  # (T_a, d_raw), image-like
    modality_b: np.ndarray  # (T_b, d_raw), text-like
    present: tuple[bool, bool]
    label: int

    def __post_init__(self):
        if not (self.present[0] or self.present[1]):
            raise ContractError("a sample needs at least one observed modality")

    @property
    def pattern(self) -> int:
        """0 = complete, 1 = text missing, 2 = image missing."""
        if self.present[0] and self.present[1]:
            return 0
        return 1 if self.present[0] else 2

    def drop(self, modality: int) -> "Sample":
        if modality == 0:
            return replace(self, modality_a=np.zeros_like(self.modality_a), present=(False, self.present[1]))
        return replace(self, modality_b=np.zeros_like(self.modality_b), present=(self.present[0], False))


@dataclass
class ClientDataset:
    client_id: int
    samples: list

    def __post_init__(self):
        if not self.samples:
            raise ContractError(f"client {self.client_id} has no samples")

    def __len__(self):
        return len(self.samples)

    def labels(self):
        return np.array([s.label for s in self.samples], dtype=np.int64)


@dataclass(frozen=True)
class ScenarioSpec:
    train_scenario: TrainScenario = TrainScenario.MISS_BOTH
    test_scenario: TestScenario = TestScenario.SIM_TRAIN
    eta: float = 0.7
    n_clients: int = 8
    seed: int = 0
    test_eta: float | None = None  # None: reuse eta

    def __post_init__(self):
        object.__setattr__(self, "train_scenario", TrainScenario(self.train_scenario))
        object.__setattr__(self, "test_scenario", TestScenario(self.test_scenario))
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError(f"eta must lie in [0, 1], got {self.eta}")
        if self.n_clients < 1:
            raise ConfigError("n_clients must be >= 1")


def class_means(c_classes: int, d_raw: int, rng: np.random.Generator):
    """Unit mean directions per class and modality.

    Classes in the first half collide pairwise on modality A, classes in the
    second half collide pairwise on modality B, so each modality alone leaves
    pairs confusable while the pair (A, B) identifies every class.
    """
    def unit(n):
        v = rng.standard_normal((n, d_raw))
        return v / np.linalg.norm(v, axis=1, keepdims=True)

    half = c_classes // 2
    mu_a, mu_b = unit(c_classes), unit(c_classes)
    for c in range(0, half - 1, 2):
        mu_a[c + 1] = mu_a[c]
    for c in range(half, c_classes - 1, 2):
        mu_b[c + 1] = mu_b[c]
    return mu_a, mu_b


def generate(c_classes=8, per_class=250, d_raw=16, seed=0, t_a=4, t_b=4, sigma=NOISE_SIGMA):
    if c_classes < 2 or per_class < 1:
        raise ConfigError("need c_classes >= 2 and per_class >= 1")
    rng = np.random.default_rng(seed)
    mu_a, mu_b = class_means(c_classes, d_raw, rng)
    samples = []
    for c in range(c_classes):
        for _ in range(per_class):
            a = mu_a[c] + sigma * rng.standard_normal((t_a, d_raw))
            b = mu_b[c] + sigma * rng.standard_normal((t_b, d_raw))
            samples.append(Sample(a, b, (True, True), c))
    order = rng.permutation(len(samples))
    return [samples[i] for i in order]


def train_test_split(samples, test_fraction=0.2, seed=0):
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(samples))
    n_test = int(round(test_fraction * len(samples)))
    test = [samples[i] for i in order[:n_test]]
    train = [samples[i] for i in order[n_test:]]
    return train, test


def apply_missing(train, scenario, eta, seed):
    scenario = TrainScenario(scenario)
    if any(s.present != (True, True) for s in train):
        raise ContractError("apply_missing expects fully observed samples")
    n = len(train)
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    out = list(train)
    if scenario is TrainScenario.MISS_BOTH:
        k = int(np.floor(eta * n / 2))
        for i in order[:k]:
            out[i] = out[i].drop(0)
        for i in order[k:2 * k]:
            out[i] = out[i].drop(1)
    else:
        k = int(np.floor(eta * n))
        modality = 1 if scenario is TrainScenario.MISS_TEXT else 0
        for i in order[:k]:
            out[i] = out[i].drop(modality)
    return out


def make_test(test_pool, test_scenario, eta, seed, train_scenario=TrainScenario.MISS_BOTH):
    test_scenario = TestScenario(test_scenario)
    if test_scenario is TestScenario.FULL_MODAL:
        return list(test_pool)
    if test_scenario is TestScenario.TEXT_ONLY:
        return [s.drop(0) for s in test_pool]
    if test_scenario is TestScenario.IMAGE_ONLY:
        return [s.drop(1) for s in test_pool]
    if test_scenario is TestScenario.MISS_BOTH:
        return apply_missing(test_pool, TrainScenario.MISS_BOTH, eta, seed)
    return apply_missing(test_pool, train_scenario, eta, seed)


def partition(samples, n_clients, mode="uniform", seed=0, alpha=0.1, max_tries=1000):
    """Split ``samples`` into ``n_clients`` disjoint non-empty client datasets.

    ``mode`` is ``"uniform"`` (random near-equal split) or ``"dirichlet"``
    (per-class client shares drawn from Dirichlet(alpha), redrawn until every
    client is non-empty).
    """
    n = len(samples)
    if n_clients < 1 or n_clients > n:
        raise ConfigError(f"cannot split {n} samples across {n_clients} non-empty clients")
    rng = np.random.default_rng(seed)
    if mode == "uniform":
        order = rng.permutation(n)
        parts = np.array_split(order, n_clients)
    elif mode == "dirichlet":
        labels = np.array([s.label for s in samples])
        for _ in range(max_tries):
            parts = [[] for _ in range(n_clients)]
            for c in np.unique(labels):
                idx = rng.permutation(np.flatnonzero(labels == c))
                shares = rng.dirichlet(np.full(n_clients, alpha))
                cuts = (np.cumsum(shares)[:-1] * len(idx)).astype(int)
                for t, chunk in enumerate(np.split(idx, cuts)):
                    parts[t].extend(chunk.tolist())
            if all(parts):
                break
        else:
            raise ConfigError("could not draw a Dirichlet split with every client non-empty")
        parts = [np.sort(np.array(p)) for p in parts]
    else:
        raise ConfigError(f"unknown partition mode {mode!r}")
    return [ClientDataset(t, [samples[i] for i in p]) for t, p in enumerate(parts)]


@dataclass
class Benchmark:
    train: list
    test_pool: list
    clients: list = field(default_factory=list)
    test: list = field(default_factory=list)


def build_benchmark(spec: ScenarioSpec, c_classes=8, n_train=2000, n_test=500, d_raw=16,
                    t_a=4, t_b=4, partition_mode="uniform", alpha=0.1):
    """The full data pipeline: generate, 80:20 split, simulate missing data on
    the train side, partition across clients, and build the test set."""
    total = n_train + n_test
    per_class = -(-total // c_classes)
    seeds = np.random.SeedSequence([spec.seed, 0xDA7A]).generate_state(5)
    pool = generate(c_classes, per_class, d_raw, int(seeds[0]), t_a, t_b)[:total]
    train, test_pool = train_test_split(pool, test_fraction=n_test / total, seed=int(seeds[1]))
    train = apply_missing(train, spec.train_scenario, spec.eta, int(seeds[2]))
    clients = partition(train, spec.n_clients, partition_mode, int(seeds[3]), alpha=alpha)
    test_eta = spec.eta if spec.test_eta is None else spec.test_eta
    test = make_test(test_pool, spec.test_scenario, test_eta, int(seeds[4]), spec.train_scenario)
    return Benchmark(train, test_pool, clients, test)


def nearest_mean_accuracy(train, test, use=(True, True)):
    """Reference score: nearest class mean on the token-averaged features of
    the selected modalities.  Train means use fully observed samples only."""
    def feats(s):
        parts = []
        if use[0]:
            parts.append(s.modality_a.mean(axis=0))
        if use[1]:
            parts.append(s.modality_b.mean(axis=0))
        return np.concatenate(parts)

    labels = np.array([s.label for s in train])
    x = np.stack([feats(s) for s in train])
    classes = np.unique(labels)
    means = np.stack([x[labels == c].mean(axis=0) for c in classes])
    xt = np.stack([feats(s) for s in test])
    d = ((xt[:, None, :] - means[None]) ** 2).sum(-1)
    pred = classes[np.argmin(d, axis=1)]
    return float(np.mean(pred == np.array([s.label for s in test])))


# CSV dump, for debugging

def dump_csv(path, clients):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for cd in clients:
            for s in cd.samples:
                w.writerow([cd.client_id, s.label, int(s.present[0]), int(s.present[1])]
                           + [repr(float(v)) for v in s.modality_a.ravel()]
                           + [repr(float(v)) for v in s.modality_b.ravel()])


def load_csv(path, d_raw=16, t_a=4, t_b=4):
    grouped: dict[int, list] = {}
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            cid, label, pa, pb = (int(v) for v in row[:4])
            vals = np.array([float(v) for v in row[4:]])
            if vals.size != (t_a + t_b) * d_raw:
                raise ContractError(f"row has {vals.size} token values, expected {(t_a + t_b) * d_raw}")
            a = vals[: t_a * d_raw].reshape(t_a, d_raw)
            b = vals[t_a * d_raw:].reshape(t_b, d_raw)
            grouped.setdefault(cid, []).append(Sample(a, b, (bool(pa), bool(pb)), label))
    return [ClientDataset(cid, grouped[cid]) for cid in sorted(grouped)]
