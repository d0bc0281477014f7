"""Factorial joint state space, flat indexing, and transition statistics.

Flat index convention: index = (k_S - 1) * K_B + (k_B - 1) with 1-based
regime/scenario labels, i.e. the regime factor varies fastest.  This single
convention is used everywhere: transition-matrix layout, evidence vectors,
and output files.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError

ROW_SUM_TOL = 1e-10


@dataclass(frozen=True)
class JointStateSpace:
    """Cartesian product of driving regimes and traffic scenarios."""

    n_regimes: int
    n_scenarios: int

    def __post_init__(self):
        if self.n_regimes < 1 or self.n_scenarios < 1:
            raise InvalidArgumentError("both factors must have >= 1 states")

    @property
    def size(self) -> int:
        return self.n_regimes * self.n_scenarios

    def flat_index(self, k_b: int, k_s: int) -> int:
        """Flat index of the 1-based pair (k_b, k_s)."""
        if not (1 <= k_b <= self.n_regimes and 1 <= k_s <= self.n_scenarios):
            raise InvalidArgumentError(f"state ({k_b}, {k_s}) out of range")
        return (k_s - 1) * self.n_regimes + (k_b - 1)

    def state_pair(self, index: int) -> tuple[int, int]:
        """Inverse of :meth:`flat_index`; returns 1-based (k_b, k_s)."""
        if not 0 <= index < self.size:
            raise InvalidArgumentError(f"flat index {index} out of range")
        return index % self.n_regimes + 1, index // self.n_regimes + 1

    def regimes_of(self, indices) -> np.ndarray:
        """0-based regime factor of an array of flat indices."""
        return np.asarray(indices) % self.n_regimes

    def scenarios_of(self, indices) -> np.ndarray:
        """0-based scenario factor of an array of flat indices."""
        return np.asarray(indices) // self.n_regimes

    def state_labels(self) -> list[str]:
        """Labels "(k_B,k_S)" in flat-index order."""
        return [
            "({},{})".format(*self.state_pair(i)) for i in range(self.size)
        ]


def validate_transition_matrix(pi: np.ndarray, space: JointStateSpace) -> None:
    pi = np.asarray(pi)
    if pi.shape != (space.size, space.size):
        raise InvalidArgumentError(
            f"transition matrix must be {space.size} x {space.size}"
        )
    if np.any(pi < 0.0):
        raise InvalidArgumentError("transition matrix entries must be >= 0")
    row_sums = pi.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > ROW_SUM_TOL):
        raise InvalidArgumentError("transition matrix rows must sum to 1")


def uniform_initial(space: JointStateSpace) -> np.ndarray:
    """Fixed uniform p(z1), the symmetric-prior mean."""
    return np.full(space.size, 1.0 / space.size)


def count_transitions(chains, space: JointStateSpace) -> np.ndarray:
    """Pooled transition counts n[k', k] over all chains.

    Chains hold flat joint-state indices; the output total equals
    sum_d (T_d - 1).
    """
    chains = list(chains)
    if not chains:
        raise InvalidArgumentError("need at least one chain")
    z = space.size
    counts = np.zeros((z, z), dtype=np.int64)
    for chain in chains:
        chain = np.asarray(chain)
        if chain.ndim != 1 or chain.shape[0] < 2:
            raise InvalidArgumentError("every chain must have length >= 2")
        if np.any(chain < 0) or np.any(chain >= z):
            raise InvalidArgumentError("chain contains out-of-range states")
        flat = chain[:-1] * z + chain[1:]
        counts += np.bincount(flat, minlength=z * z).reshape(z, z)
    return counts


def save_transition_matrix(pi: np.ndarray, space: JointStateSpace, path) -> None:
    """CSV grid with joint-state labels in flat-index order."""
    labels = space.state_labels()
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write("from," + ",".join(f'"{c}"' for c in labels) + "\n")
        for label, row in zip(labels, np.asarray(pi)):
            handle.write(f'"{label}",' + ",".join("%.12g" % v for v in row) + "\n")


def load_transition_matrix(path, space: JointStateSpace) -> np.ndarray:
    rows = []
    with open(path, encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None or header[0] != "from":
            raise InvalidArgumentError(f"{path}: not a transition-matrix CSV")
        for parts in reader:
            rows.append([float(v) for v in parts[1:]])
    pi = np.array(rows)
    validate_transition_matrix(pi, space)
    return pi
