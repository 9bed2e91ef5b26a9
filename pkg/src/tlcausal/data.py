"""Stratified observation table shared by the estimation and simulation code.

Rows carry a binary outcome, a region label, a group label and a covariate
vector; strata are (group, region) cells. Everything downstream indexes rows
through boolean masks so that filtering a table never reorders the surviving
rows (leave-one-center-out identities depend on this).
"""

from __future__ import annotations

import dataclasses

import numpy as np


@dataclasses.dataclass
class ObservationTable:
    """Observed data (y, t, r, x) with optional center identifiers.

    y : (n,) float array, outcomes in {0, 1}
    t : (n,) int array, region labels in {1..M}
    r : (n,) int array, group labels in {1..K}
    x : (n, p) float covariate matrix, finite entries
    center_id : optional (n,) array of center identifiers (strings)
    feature_names, region_labels, group_labels : optional reporting names;
        region_labels[j-1] is the display label of region j, same for groups.
    """

    y: np.ndarray
    t: np.ndarray
    r: np.ndarray
    x: np.ndarray
    center_id: np.ndarray | None = None
    feature_names: list[str] | None = None
    region_labels: list[str] | None = None
    group_labels: list[str] | None = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.t = np.asarray(self.t, dtype=int)
        self.r = np.asarray(self.r, dtype=int)
        self.x = np.asarray(self.x, dtype=float)
        if self.x.ndim != 2:
            raise ValueError("x must be a 2-d array")
        n = self.x.shape[0]
        for name, arr in (("y", self.y), ("t", self.t), ("r", self.r)):
            if arr.shape != (n,):
                raise ValueError(f"{name} must have shape ({n},), got {arr.shape}")
        if self.center_id is not None:
            self.center_id = np.asarray(self.center_id)
            if self.center_id.shape != (n,):
                raise ValueError("center_id length does not match the table")
        if n == 0:
            raise ValueError("empty table")
        if not np.all(np.isin(self.y, (0.0, 1.0))):
            raise ValueError("outcomes must be binary 0/1")
        if not np.isfinite(self.x).all():
            bad = np.where(~np.isfinite(self.x).all(axis=1))[0]
            raise ValueError(f"non-finite covariates in rows {bad[:10].tolist()}")
        if self.t.min() < 1 or self.r.min() < 1:
            raise ValueError("region and group labels must be >= 1")
        if self.region_labels is not None and self.t.max() > len(self.region_labels):
            raise ValueError("region label outside the declared label set")
        if self.group_labels is not None and self.r.max() > len(self.group_labels):
            raise ValueError("group label outside the declared label set")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def n_regions(self) -> int:
        if self.region_labels is not None:
            return len(self.region_labels)
        return int(self.t.max())

    @property
    def n_groups(self) -> int:
        if self.group_labels is not None:
            return len(self.group_labels)
        return int(self.r.max())

    def stratum_mask(self, k: int, m: int) -> np.ndarray:
        return (self.r == k) & (self.t == m)

    def stratum_count(self, k: int, m: int) -> int:
        return int(np.count_nonzero(self.stratum_mask(k, m)))

    def counts(self) -> np.ndarray:
        """(K, M) matrix of stratum sizes; entries sum to n."""
        out = np.zeros((self.n_groups, self.n_regions), dtype=int)
        for k in range(1, self.n_groups + 1):
            for m in range(1, self.n_regions + 1):
                out[k - 1, m - 1] = self.stratum_count(k, m)
        return out

    def subset(self, mask: np.ndarray) -> "ObservationTable":
        """Row-filtered copy; row order is preserved."""
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (self.n,):
            raise ValueError("mask length does not match the table")
        return ObservationTable(
            y=self.y[mask],
            t=self.t[mask],
            r=self.r[mask],
            x=self.x[mask],
            center_id=None if self.center_id is None else self.center_id[mask],
            feature_names=self.feature_names,
            region_labels=self.region_labels,
            group_labels=self.group_labels,
        )
