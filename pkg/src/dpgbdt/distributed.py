"""In-process simulation of k-party training.

Parties share hyperparameters and a public random stream for tree structure.
Each party filters, subsamples and noises leaves on its own rows; only the
fixed-point sum of the parties' leaf vectors is revealed.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .data import Dataset
from .filter import LossTable, PrivacyLedger
from .model import Ensemble, gradient, loss_for_task
from .sgbdt import (Hyperparameters, admit_and_subsample, initialize, leaf_statistics,
                    make_streams, noisy_leaves, public_uniform_sample, random_tree,
                    static_denominator)

SCALE_BITS = 32
INT64_MAX = np.iinfo(np.int64).max


class ReplicaDivergence(AssertionError):
    pass


def to_fixed(values, bits: int = SCALE_BITS) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    scaled = np.round(v * 2.0 ** bits)
    if not np.all(np.isfinite(scaled)) or np.any(np.abs(scaled) >= 2.0 ** 62):
        raise OverflowError("value not representable at the fixed-point scale")
    return scaled.astype(np.int64)


def secure_aggregate(vectors: Sequence, bits: int = SCALE_BITS) -> np.ndarray:
    """Elementwise sum of fixed-point encodings, decoded back to floats."""
    vectors = [np.asarray(v, dtype=float) for v in vectors]
    if not vectors:
        raise ValueError("need at least one vector")
    if any(v.shape != vectors[0].shape for v in vectors):
        raise ValueError("vectors must have equal length")
    acc = np.zeros(vectors[0].shape, dtype=np.int64)
    for v in vectors:
        q = to_fixed(v, bits)
        # int64 addition must not wrap
        if np.any((q > 0) & (acc > INT64_MAX - q)) or np.any((q < 0) & (acc < -INT64_MAX - q)):
            raise OverflowError("fixed-point accumulator overflow")
        acc = acc + q
    return acc.astype(float) / 2.0 ** bits


@dataclass
class Party:
    uid: int
    data: Dataset
    seed: object
    ledger: Optional[PrivacyLedger] = None
    ensemble: Optional[Ensemble] = None
    raw: Optional[np.ndarray] = None
    noise_rng: Optional[np.random.Generator] = None
    active_sizes: list = field(default_factory=list)

    def setup(self, h: Hyperparameters, plan, keep_history: bool = True) -> None:
        self.ledger = PrivacyLedger(self.data.n, plan.alpha_hat, plan.rho_budget, keep_history)
        self.ensemble = Ensemble(0.0, h.eta, loss_for_task(self.data.task), [], self.data.m)
        self.raw = np.zeros(self.data.n)
        self.noise_rng = make_streams(self.seed)["noise"]
        self._table = LossTable(plan, h.g_star, h.r1, h.r2, h.gamma, h.leaf_noise)

    def local_round(self, h: Hyperparameters, plan, tree) -> tuple:
        """Filter, subsample and noise leaves; returns (W_u, subsampled indices)."""
        D = self.data
        g = np.clip(gradient(self.ensemble.loss, D.y, self.raw), -h.g_star, h.g_star)
        available = np.ones(D.n, dtype=bool)
        active, sub = admit_and_subsample(self.ledger, self._table(g), available, h.use_filter,
                                          h.gamma, self.noise_rng)
        self.active_sizes.append(active.shape[0])
        counts, sums = leaf_statistics(tree, D.X[sub], g[sub])
        w = noisy_leaves(counts, sums, plan.sigma2_leaf, h.r1, h.r2, h.lam, self.noise_rng,
                         h.leaf_noise, static_denominator(h, D.n))
        return w, sub

    def apply(self, tree) -> None:
        self.ensemble.trees.append(tree)
        self.raw += self.ensemble.eta * tree.predict(self.data.X)


@dataclass
class DistributedResult:
    replicas: List[Ensemble]
    parties: List[Party]
    plan: object
    transcript: list
    local_leaves: list   # per round, per party W_u (kept for tests only)

    @property
    def ensemble(self) -> Ensemble:
        return self.replicas[0]


def shard(D: Dataset, k: int, rng) -> List[Dataset]:
    """Uniformly random equal-size shards."""
    perm = rng.permutation(D.n)
    return [D.subset(np.sort(part)) for part in np.array_split(perm, k)]


def _same_ensemble(a: Ensemble, b: Ensemble) -> bool:
    return (a.init_score == b.init_score and len(a.trees) == len(b.trees)
            and all(x.same_structure(y) and np.array_equal(x.leaves, y.leaves)
                    for x, y in zip(a.trees, b.trees)))


def distributed_train(datasets: Sequence[Dataset], h: Hyperparameters, shared_seed,
                      party_seeds: Optional[Sequence] = None, *, parallel: bool = False,
                      keep_history: bool = True) -> DistributedResult:
    """Lockstep rounds over ``k = len(datasets)`` parties.

    ``shared_seed`` seeds the public stream used for tree sampling; party ``u``
    draws its subsampling and leaf noise from ``party_seeds[u]``.
    """
    k = len(datasets)
    if k < 1:
        raise ValueError("need at least one party")
    if party_seeds is None:
        party_seeds = [[shared_seed, u] for u in range(k)]
    transcript = [("bulletin", h.to_dict())]
    plan = initialize(h)
    parties = [Party(u, d, s) for u, (d, s) in enumerate(zip(datasets, party_seeds))]
    for p in parties:
        p.setup(h, plan, keep_history)
    public = make_streams(shared_seed)["structure"]
    local_leaves = []
    pool = ThreadPoolExecutor(max_workers=k) if parallel and k > 1 else None
    try:
        for t in range(h.rounds):
            state = public.bit_generator.state
            template = random_tree(h.depth, datasets[0].schema, h.r, public)
            transcript.append(("public_draws", t, state))
            trees = [template.copy() for _ in parties]
            if pool is not None:
                results = list(pool.map(lambda a: a[0].local_round(h, plan, a[1]),
                                        zip(parties, trees)))
            else:
                results = [p.local_round(h, plan, tr) for p, tr in zip(parties, trees)]
            W = [w for w, _ in results]
            local_leaves.append(W)
            A = secure_aggregate(W)
            transcript.append(("aggregate", t, A.copy()))
            for p, tr in zip(parties, trees):
                tr.leaves = A / k
                p.apply(tr)
            for p in parties[1:]:
                if not _same_ensemble(parties[0].ensemble, p.ensemble):
                    raise ReplicaDivergence(f"party {p.uid} diverged at round {t}")
    finally:
        if pool is not None:
            pool.shutdown()
    return DistributedResult([p.ensemble for p in parties], parties, plan, transcript,
                             local_leaves)


__all__ = ["public_uniform_sample", "secure_aggregate", "distributed_train", "shard", "Party",
           "DistributedResult", "ReplicaDivergence", "to_fixed"]
