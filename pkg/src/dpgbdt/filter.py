"""Per-point privacy ledger and the individual Rényi filter."""

from __future__ import annotations

import csv
from typing import Mapping, Optional, Union

import numpy as np

from .accountant import AccountantPlan, leaf_factor, rdp_subsampled, subsampled_gaussian


class PrivacyLedger:
    """Cumulative individual RDP loss of every data point at one fixed order.

    ``spent[i]`` is accumulated round by round with plain float addition, so
    a replay of ``history`` reproduces it bit for bit.
    """

    def __init__(self, n: int, alpha: int, budget: float, keep_history: bool = True):
        if budget < 0:
            raise ValueError("budget must be nonnegative")
        self.alpha = int(alpha)
        self.budget = float(budget)
        self.spent = np.zeros(int(n))
        self.rounds_active = np.zeros(int(n), dtype=np.int64)
        self.keep_history = keep_history
        self.history: list = []       # charged loss per round (0 where inactive)
        self.proposals: list = []     # proposed loss per round

    @property
    def n(self) -> int:
        return self.spent.shape[0]

    def charge(self, proposed: np.ndarray, active: np.ndarray,
               considered: Optional[np.ndarray] = None) -> None:
        """Add ``proposed`` for active points and 0 for the rest."""
        charged = np.where(active, proposed, 0.0)
        self.spent += charged
        self.rounds_active += active
        if self.keep_history:
            self.history.append(charged)
            mask = active if considered is None else considered
            self.proposals.append(np.where(mask, proposed, np.nan))

    def replay(self) -> np.ndarray:
        """Recompute per-point spending from the recorded history."""
        if not self.keep_history:
            raise RuntimeError("ledger was created without history")
        total = np.zeros(self.n)
        for charged in self.history:
            total[:charged.shape[0]] += charged
        return total

    def summary(self) -> dict:
        return {
            "alpha_hat": self.alpha,
            "rho_budget": self.budget,
            "n_points": self.n,
            "max_spent": float(self.spent.max()) if self.n else 0.0,
            "mean_spent": float(self.spent.mean()) if self.n else 0.0,
            "exhausted": int(np.sum(self.spent >= self.budget)) if self.n else 0,
        }

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "spent", "rounds_active", "fraction_of_budget"])
            frac = self.spent / self.budget if self.budget > 0 else np.zeros(self.n)
            for i in range(self.n):
                w.writerow([i, repr(float(self.spent[i])), int(self.rounds_active[i]),
                            repr(float(frac[i]))])


def filter_round(ledger: PrivacyLedger,
                 proposed: Union[np.ndarray, Mapping[int, float]],
                 considered: Optional[np.ndarray] = None) -> np.ndarray:
    """Admit every point whose spent plus proposed loss stays within budget.

    ``proposed`` is either a length-``n`` array or a mapping index -> loss.
    Points absent from a mapping, or masked out by ``considered``, are not
    candidates this round.  Returns the sorted active indices and charges
    the ledger.
    """
    if isinstance(proposed, Mapping):
        idx = np.fromiter(proposed.keys(), dtype=np.int64, count=len(proposed))
        vals = np.fromiter(proposed.values(), dtype=float, count=len(proposed))
        if idx.size and (idx.min() < 0 or idx.max() >= ledger.n):
            raise IndexError("proposed loss for an unknown data point")
        full = np.zeros(ledger.n)
        mask = np.zeros(ledger.n, dtype=bool)
        full[idx] = vals
        mask[idx] = True
    else:
        full = np.asarray(proposed, dtype=float)
        if full.shape != (ledger.n,):
            raise IndexError(f"expected {ledger.n} proposed losses, got shape {full.shape}")
        mask = np.ones(ledger.n, dtype=bool)
    if considered is not None:
        mask &= np.asarray(considered, dtype=bool)
    if np.any(full[mask] < 0):
        raise ValueError("proposed losses must be nonnegative")

    active = mask & (ledger.spent + full <= ledger.budget)
    ledger.charge(full, active, mask)
    return np.flatnonzero(active)


def per_point_loss(alpha: int, g: float, r1: float, r2: float, sigma2: float, gamma: float,
                   g_star: Optional[float] = None, leaf_noise: str = "dynamic") -> float:
    """Individual loss of one subsampled tree for a point with clipped gradient ``g``."""
    if g_star is not None and abs(g) > g_star:
        raise ValueError(f"gradient {g} exceeds the clip bound {g_star}; clip first")
    c = float(leaf_factor(g, r1, r2, sigma2, leaf_noise))
    return rdp_subsampled(alpha, lambda l: l * c, gamma)


class LossTable:
    """Upper-bounding lookup of `per_point_loss` on a grid of ``|g|`` values.

    Gradients are rounded up to the next grid point; the loss is increasing
    in ``|g|``, so the lookup never undercharges.  The last entry is the
    plan's worst-case tree loss, making worst-case points exhaust the
    budget after exactly the planned number of rounds.
    """

    def __init__(self, plan: AccountantPlan, g_star: float, r1: float, r2: float, gamma: float,
                 leaf_noise: str = "dynamic", size: int = 4097):
        self.g_star = float(g_star)
        self.grid = np.linspace(0.0, self.g_star, size)
        factors = leaf_factor(self.grid, r1, r2, plan.sigma2_leaf, leaf_noise)
        table = subsampled_gaussian(plan.alpha_hat, factors, gamma)
        table = np.maximum.accumulate(table)
        table[-1] = plan.rho_tree
        self.values = np.minimum(table, plan.rho_tree)

    def __call__(self, g) -> np.ndarray:
        a = np.abs(np.asarray(g, dtype=float))
        if np.any(a > self.g_star * (1 + 1e-12)):
            raise ValueError("gradients must be clipped before loss lookup")
        k = np.searchsorted(self.grid, a, side="left")
        return self.values[np.minimum(k, self.values.shape[0] - 1)]
