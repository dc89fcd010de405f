"""Differentially private gradient boosting with random complete trees,
Poisson subsampling, dynamically scaled leaf noise and an individual filter."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import logit

from . import accountant
from .accountant import AccountantPlan, initialize
from .data import Dataset, FeatureSpec
from .filter import LossTable, PrivacyLedger, filter_round
from .model import LEAF_SIGN, Ensemble, Tree, gradient, loss_for_task

# Probability clamp applied when turning a private label mean into a logit.
PROB_CLIP = 1e-3


@dataclass(frozen=True)
class Hyperparameters:
    g_star: float = 1.0
    m_star: float = 1.0
    lam: float = 1.0
    eta: float = 0.1
    depth: int = 2
    gamma: float = 0.1
    T_regular: int = 100
    T_extra: int = 0
    eps_init: float = 0.05
    eps_trees: float = 0.5
    delta_trees: float = 1e-5
    r1: float = 0.3
    r2: Optional[float] = None
    r: float = 1.0
    alpha_max: int = 500
    use_filter: bool = True
    leaf_noise: str = "dynamic"     # "dynamic" or "static"
    conversion: str = "default"     # see accountant.rdp_to_adp
    init_scale: str = "algorithm"   # see accountant.laplace_ratio

    def __post_init__(self):
        if self.r2 is None:
            object.__setattr__(self, "r2", 1.0 - self.r1)
        if not (self.r1 > 0 and self.r2 > 0 and abs(self.r1 + self.r2 - 1.0) <= 1e-12):
            raise ValueError("leaf noise weights need r1, r2 > 0 and r1 + r2 = 1")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.g_star <= 0 or self.m_star <= 0:
            raise ValueError("g_star and m_star must be positive")
        if int(self.alpha_max) != self.alpha_max or self.alpha_max < 2:
            raise ValueError("alpha_max must be an integer >= 2")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.T_regular < 0 or self.T_extra < 0:
            raise ValueError("round counts must be nonnegative")
        if self.leaf_noise not in ("dynamic", "static"):
            raise ValueError(f"unknown leaf noise mode {self.leaf_noise!r}")

    @property
    def rounds(self) -> int:
        return self.T_regular + self.T_extra

    def replace(self, **kw) -> "Hyperparameters":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparameters":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown hyperparameters: {sorted(unknown)}")
        return cls(**d)


def make_streams(seed) -> dict:
    """Independent generators for tree structure, leaf noise and the init score."""
    ss = np.random.SeedSequence(seed)
    structure, noise, init = ss.spawn(3)
    return {"structure": np.random.default_rng(structure),
            "noise": np.random.default_rng(noise),
            "init": np.random.default_rng(init)}


def dp_init_score(labels, m_star: float, eps_init: float, rng,
                  scale: str = "algorithm") -> float:
    """Clamped label mean plus Laplace noise."""
    labels = np.asarray(labels, dtype=float)
    if labels.size == 0:
        raise ValueError("initial score needs at least one label")
    if eps_init <= 0:
        raise ValueError("eps_init must be positive")
    mean = float(np.mean(np.clip(labels, -m_star, m_star)))
    b = accountant.init_noise_scale(m_star, labels.size, eps_init, scale)
    return mean + float(rng.laplace(0.0, b))


def init_prediction(task: str, private_mean: float) -> float:
    """Raw starting score.  Classification maps the private positive rate to a logit."""
    if task == "classification":
        return float(logit(min(max(private_mean, PROB_CLIP), 1.0 - PROB_CLIP)))
    return private_mean


def feature_weights(schema: Sequence[FeatureSpec], r: float) -> np.ndarray:
    w = np.array([1.0 if f.is_categorical else float(r) for f in schema])
    if w.size == 0:
        raise ValueError("schema is empty")
    if np.any(w <= 0):
        raise ValueError("feature weight r must be positive")
    return w


def public_uniform_sample(a: float, b: float, rng) -> float:
    """Uniform draw from ``[a, b)``; every holder of ``rng``'s state sees the same value."""
    if not a < b:
        raise ValueError("need a < b")
    return a + (b - a) * rng.random()


def ceil_index(s: float, k: int) -> int:
    """0-based index ``ceil(s) - 1`` of a draw ``s`` from ``[0, k)``."""
    return min(max(math.ceil(s), 1), k) - 1


def sample_split(schema: Sequence[FeatureSpec], weights: np.ndarray, rng) -> tuple:
    """Feature by weighted inverse CDF, then a uniform value inside its border."""
    cum = np.cumsum(weights)
    s = public_uniform_sample(0.0, float(cum[-1]), rng)
    i = min(int(np.searchsorted(cum, s, side="right")), len(schema) - 1)
    f = schema[i]
    if f.is_categorical:
        c = len(f.values)
        return i, float(ceil_index(public_uniform_sample(0.0, c, rng), c)), True
    return i, f.v_min + public_uniform_sample(0.0, f.v_max - f.v_min, rng), False


def random_tree(depth: int, schema: Sequence[FeatureSpec], r: float, rng) -> Tree:
    """Data-independent complete tree: weighted random features, uniform thresholds.

    Consumes exactly two uniforms per internal node.
    """
    if depth < 1:
        raise ValueError("depth must be >= 1")
    w = feature_weights(schema, r)
    k = 2 ** depth - 1
    splits = [sample_split(schema, w, rng) for _ in range(k)]
    f, t, c = zip(*splits)
    return Tree(np.array(f), np.array(t), np.array(c))


def poisson_subsample(n: int, gamma: float, rng) -> np.ndarray:
    """Indices kept by independent Bernoulli(gamma) trials."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    if isinstance(n, Dataset):
        n = n.n
    return np.flatnonzero(rng.random(int(n)) < gamma)


def noisy_leaves(counts, sums, sigma2: float, r1: float, r2: float, lam: float, rng,
                 leaf_noise: str = "dynamic", static_denominator: float = 1.0) -> np.ndarray:
    """Vectorised leaf release for all leaves of one tree.

    ``sums`` must already be sums of clipped gradients.  Returns stored leaf
    values (sign applied).
    """
    counts = np.asarray(counts, dtype=float)
    sums = np.asarray(sums, dtype=float)
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    if leaf_noise == "dynamic":
        noise_n = rng.normal(0.0, math.sqrt(sigma2 / (2.0 * r1)), size=counts.shape)
        noise_s = rng.normal(0.0, math.sqrt(sigma2 / (2.0 * r2)), size=sums.shape)
        n_tilde = np.maximum(lam, counts + noise_n)
        s_tilde = sums + noise_s
        return LEAF_SIGN * s_tilde / n_tilde
    if leaf_noise == "static":
        s_tilde = sums + rng.normal(0.0, math.sqrt(sigma2), size=sums.shape)
        return LEAF_SIGN * s_tilde / max(lam, static_denominator)
    raise ValueError(f"unknown leaf noise mode {leaf_noise!r}")


def dp_leaf(gradients, g_star: float, sigma2: float, r1: float, r2: float, lam: float,
            rng) -> float:
    """Private value of a single leaf from its (unclipped) gradients."""
    if abs(r1 + r2 - 1.0) > 1e-12:
        raise ValueError("r1 + r2 must equal 1")
    g = np.clip(np.asarray(gradients, dtype=float), -g_star, g_star)
    return float(noisy_leaves([g.size], [g.sum()], sigma2, r1, r2, lam, rng)[0])


def leaf_statistics(tree: Tree, X, clipped_grad) -> tuple:
    """Per-leaf support and clipped gradient sum."""
    L = tree.n_leaves
    if X.shape[0] == 0:
        return np.zeros(L), np.zeros(L)
    idx = tree.leaf_index(X)
    counts = np.bincount(idx, minlength=L).astype(float)
    sums = np.bincount(idx, weights=clipped_grad, minlength=L)
    return counts, sums


def static_denominator(h: Hyperparameters, n: int) -> float:
    return h.gamma * n / 2 ** h.depth


def train_single_tree(D: Dataset, ensemble: Ensemble, h: Hyperparameters, sigma2: float,
                      rng=None, *, raw_scores=None, active=None, structure_rng=None,
                      noise_rng=None, n_public=None) -> Tree:
    """One boosting round on the rows ``active`` (default: all rows).

    ``rng`` drives both structure and noise unless separate streams are given.
    ``raw_scores`` may carry the current ensemble scores to avoid recomputation.
    """
    structure_rng = structure_rng or rng
    noise_rng = noise_rng or rng
    if active is None:
        active = np.arange(D.n)
    sub = active[poisson_subsample(active.shape[0], h.gamma, noise_rng)]
    tree = random_tree(h.depth, D.schema, h.r, structure_rng)
    X = D.X[sub]
    if raw_scores is None:
        pred = ensemble.raw_score(X) if X.shape[0] else np.zeros(0)
    else:
        pred = raw_scores[sub]
    g = np.clip(gradient(ensemble.loss, D.y[sub], pred), -h.g_star, h.g_star)
    counts, sums = leaf_statistics(tree, X, g)
    denom = static_denominator(h, D.n if n_public is None else n_public)
    tree.leaves = noisy_leaves(counts, sums, sigma2, h.r1, h.r2, h.lam, noise_rng,
                               h.leaf_noise, denom)
    return tree


@dataclass
class RunResult:
    ensemble: Ensemble
    plan: AccountantPlan
    ledger: PrivacyLedger
    active_sizes: list
    subsample_sizes: list
    epsilon_total: float
    rho_init: float
    seed: object = None

    def manifest(self) -> dict:
        return {
            "plan": self.plan.to_dict(),
            "rho_init": self.rho_init,
            "epsilon_total": self.epsilon_total,
            "ledger": self.ledger.summary(),
            "active_sizes": [int(a) for a in self.active_sizes],
            "subsample_sizes": [int(a) for a in self.subsample_sizes],
            "seed": self.seed,
        }


def privacy_plan(h: Hyperparameters, n: int) -> tuple:
    """Plan for the trees, init-score RDP at the chosen order, and the total epsilon."""
    plan = initialize(h)
    rho_init = accountant.rdp_laplace_init(plan.alpha_hat, h.m_star, n, h.eps_init, h.init_scale)
    eps = accountant.total_epsilon(plan, rho_init, h.delta_trees, h.conversion)
    return plan, rho_init, eps


def calibrate(h: Hyperparameters, n: int, eps_total: float, iterations: int = 3) -> Hyperparameters:
    """Lower ``eps_trees`` until trees plus init score fit ``eps_total``."""
    trees = eps_total
    for _ in range(iterations):
        cand = h.replace(eps_trees=trees)
        _, _, eps = privacy_plan(cand, n)
        if eps <= eps_total:
            return cand
        trees -= (eps - eps_total) + 1e-9
        if trees <= 0:
            break
    raise accountant.InfeasibleBudget(f"cannot fit total epsilon {eps_total}")


def admit_and_subsample(ledger: PrivacyLedger, proposed, available, use_filter: bool,
                        gamma: float, rng) -> tuple:
    """Filter (or admit every available point), then Poisson-subsample the active set."""
    if use_filter:
        active = filter_round(ledger, proposed, available)
    else:
        ledger.charge(proposed, available, available)
        active = np.flatnonzero(available)
    return active, active[poisson_subsample(active.shape[0], gamma, rng)]


def train_sgbdt(D: Dataset, h: Hyperparameters, rng=None, *, seed=None, late=None,
                keep_history: bool = True, init_score: bool = True) -> RunResult:
    """Train the full ensemble.

    ``seed`` (or an int ``rng``) seeds three independent streams.  ``late`` is
    an optional index array of points that only become available after the
    first ``T_regular`` rounds.  With ``init_score=False`` the ensemble starts
    from zero and no budget is spent on the initial score.
    """
    if D.n == 0:
        raise ValueError("cannot train on an empty dataset")
    plan = initialize(h)
    if seed is None:
        seed = rng if rng is not None and not isinstance(rng, np.random.Generator) else None
    if isinstance(rng, np.random.Generator):
        streams = {"structure": rng, "noise": rng, "init": rng}
    else:
        streams = make_streams(seed)

    available = np.ones(D.n, dtype=bool)
    if late is not None:
        available[np.asarray(late, dtype=np.int64)] = False
    n_pool = int(available.sum())
    if n_pool == 0:
        raise ValueError("no data points available before the late batch")

    loss = loss_for_task(D.task)
    if init_score:
        # only the initial pool is known when the init score is released
        private_mean = dp_init_score(D.y[available], h.m_star, h.eps_init, streams["init"],
                                     h.init_scale)
        ens = Ensemble(init_prediction(D.task, private_mean), h.eta, loss, [], D.m)
        rho_init = accountant.rdp_laplace_init(plan.alpha_hat, h.m_star, n_pool, h.eps_init,
                                               h.init_scale)
    else:
        ens = Ensemble(0.0, h.eta, loss, [], D.m)
        rho_init = 0.0
    eps_total = accountant.total_epsilon(plan, rho_init, h.delta_trees, h.conversion)

    ledger = PrivacyLedger(D.n, plan.alpha_hat, plan.rho_budget, keep_history)
    table = LossTable(plan, h.g_star, h.r1, h.r2, h.gamma, h.leaf_noise)

    raw = np.full(D.n, ens.init_score)
    active_sizes, subsample_sizes = [], []
    for t in range(h.rounds):
        if late is not None and t == h.T_regular:
            available[:] = True
        g = np.clip(gradient(loss, D.y, raw), -h.g_star, h.g_star)
        active, sub = admit_and_subsample(ledger, table(g), available, h.use_filter, h.gamma,
                                          streams["noise"])
        tree = random_tree(h.depth, D.schema, h.r, streams["structure"])
        counts, sums = leaf_statistics(tree, D.X[sub], g[sub])
        tree.leaves = noisy_leaves(counts, sums, plan.sigma2_leaf, h.r1, h.r2, h.lam,
                                   streams["noise"], h.leaf_noise, static_denominator(h, D.n))
        ens.trees.append(tree)
        raw += h.eta * tree.predict(D.X)
        active_sizes.append(active.shape[0])
        subsample_sizes.append(sub.shape[0])
    return RunResult(ens, plan, ledger, active_sizes, subsample_sizes, eps_total, rho_init, seed)
