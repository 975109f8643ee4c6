"""Datasets with correlation structure, and the strict CSV format.

A ``Dataset`` holds the covariate matrix, the response, and at most one of a
clustered index (entity x day crossed random intercepts) or a spatial index
(planar coordinates plus region labels).  Fold subsets are taken with
``Dataset.subset``; level sets (q1, q2, q) are inherited from the parent so
random-effect designs stay aligned across folds.

CSV format: header row with columns ``x1..xp``, ``y``, optionally
``entity`` and ``day``, optionally ``coord1``, ``coord2`` and ``region``.
Unknown columns are rejected.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
import pandas as pd

from .validation import check_labels, check_matrix, check_positive_int, check_vector

__all__ = ["ClusterIndex", "SpatialIndex", "KernelParams", "Dataset",
           "BootstrapConfig", "load_dataset_csv", "save_dataset_csv"]


@dataclass(frozen=True)
class ClusterIndex:
    """Two crossed grouping factors with labels in 1..q1 and 1..q2."""

    entity: np.ndarray
    day: np.ndarray
    q1: int
    q2: int

    def __post_init__(self):
        object.__setattr__(self, "q1", check_positive_int(self.q1, "q1"))
        object.__setattr__(self, "q2", check_positive_int(self.q2, "q2"))
        object.__setattr__(self, "entity", check_labels(self.entity, self.q1, "entity"))
        object.__setattr__(self, "day",
                           check_labels(self.day, self.q2, "day", n=len(self.entity)))

    def __len__(self) -> int:
        return len(self.entity)

    @classmethod
    def from_labels(cls, entity, day) -> "ClusterIndex":
        """Build from raw labels, requiring every level 1..q to appear."""
        entity = np.asarray(entity)
        day = np.asarray(day)
        q1, q2 = int(entity.max()), int(day.max())
        idx = cls(entity, day, q1, q2)
        check_labels(idx.entity, q1, "entity", require_complete=True)
        check_labels(idx.day, q2, "day", require_complete=True)
        return idx

    def one_hot(self) -> np.ndarray:
        """The n x (q1+q2) indicator matrix with exactly two ones per row."""
        n = len(self)
        Z = np.zeros((n, self.q1 + self.q2))
        Z[np.arange(n), self.entity - 1] = 1.0
        Z[np.arange(n), self.q1 + self.day - 1] = 1.0
        return Z

    def take(self, rows) -> "ClusterIndex":
        return ClusterIndex(self.entity[rows], self.day[rows], self.q1, self.q2)


@dataclass(frozen=True)
class SpatialIndex:
    """Planar coordinates plus region labels in 1..q."""

    coords: np.ndarray
    region: np.ndarray
    q: int

    def __post_init__(self):
        coords = check_matrix(self.coords, "coords")
        if coords.shape[1] != 2:
            raise ValueError("coords must have exactly 2 columns")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "q", check_positive_int(self.q, "q"))
        object.__setattr__(self, "region",
                           check_labels(self.region, self.q, "region", n=len(coords)))

    def __len__(self) -> int:
        return len(self.region)

    @classmethod
    def from_labels(cls, coords, region) -> "SpatialIndex":
        region = np.asarray(region)
        idx = cls(coords, region, int(region.max()))
        check_labels(idx.region, idx.q, "region", require_complete=True)
        return idx

    def take(self, rows) -> "SpatialIndex":
        return SpatialIndex(self.coords[rows], self.region[rows], self.q)


@dataclass(frozen=True)
class KernelParams:
    """Gaussian kernel K(z1, z2) = sigma_out_sq * exp(-sigma_in_sq * |z1-z2|^2)."""

    sigma_out_sq: float
    sigma_in_sq: float

    def __post_init__(self):
        if not self.sigma_out_sq > 0:
            raise ValueError("sigma_out_sq must be > 0")
        if self.sigma_in_sq < 0:
            raise ValueError("sigma_in_sq must be >= 0")

    def __call__(self, z1: np.ndarray, z2: np.ndarray) -> np.ndarray:
        """Kernel matrix between coordinate arrays (m x 2) and (k x 2)."""
        d2 = np.sum((z1[:, None, :] - z2[None, :, :]) ** 2, axis=-1)
        return self.sigma_out_sq * np.exp(-self.sigma_in_sq * d2)


@dataclass(frozen=True)
class Dataset:
    """Covariates, responses and an optional correlation index."""

    X: np.ndarray
    y: np.ndarray
    clusters: Optional[ClusterIndex] = None
    spatial: Optional[SpatialIndex] = None

    def __post_init__(self):
        X = check_matrix(self.X, "X")
        y = check_vector(self.y, "y", n=X.shape[0])
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        if self.clusters is not None and self.spatial is not None:
            raise ValueError("at most one of clusters/spatial may be present")
        for idx, name in ((self.clusters, "clusters"), (self.spatial, "spatial")):
            if idx is not None and len(idx) != len(y):
                raise ValueError(f"{name} length does not match y")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def structure(self) -> str:
        if self.clusters is not None:
            return "clustered"
        if self.spatial is not None:
            return "spatial"
        return "iid"

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(
            self.X[rows],
            self.y[rows],
            self.clusters.take(rows) if self.clusters is not None else None,
            self.spatial.take(rows) if self.spatial is not None else None,
        )

    def with_response(self, y_new) -> "Dataset":
        return replace(self, y=np.asarray(y_new, dtype=float))

    def with_covariates(self, X_new) -> "Dataset":
        return replace(self, X=check_matrix(X_new, "X", n_rows=self.n))


@dataclass(frozen=True)
class BootstrapConfig:
    """Replication counts and the root seed for all bias estimators."""

    seed: int
    B: int = 200
    B1: int = 20
    B2: int = 30
    mc_draws_moments: int = 2000

    def __post_init__(self):
        for name in ("B", "B1", "B2", "mc_draws_moments"):
            check_positive_int(getattr(self, name), name, minimum=2)
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


_OPTIONAL_GROUPS = (("entity", "day"), ("coord1", "coord2", "region"))


def load_dataset_csv(path) -> Dataset:
    """Read the strict dataset CSV format."""
    df = pd.read_csv(path)
    cols = list(df.columns)
    xcols = [c for c in cols if c.startswith("x") and c[1:].isdigit()]
    expected_x = [f"x{j}" for j in range(1, len(xcols) + 1)]
    if sorted(xcols) != sorted(expected_x):
        raise ValueError(f"covariate columns must be x1..x{len(xcols)}, got {xcols}")
    known = set(expected_x) | {"y"}
    for group in _OPTIONAL_GROUPS:
        present = [c for c in group if c in cols]
        if present and len(present) != len(group):
            raise ValueError(f"columns {group} must appear together, got {present}")
        known |= set(group)
    unknown = [c for c in cols if c not in known]
    if unknown:
        raise ValueError(f"unknown columns: {unknown}")
    if "y" not in cols:
        raise ValueError("missing required column 'y'")

    X = df[expected_x].to_numpy(dtype=float)
    y = df["y"].to_numpy(dtype=float)
    clusters = spatial = None
    if "entity" in cols:
        clusters = ClusterIndex.from_labels(df["entity"].to_numpy(),
                                            df["day"].to_numpy())
    if "region" in cols:
        if clusters is not None:
            raise ValueError("dataset may not carry both cluster and spatial columns")
        coords = df[["coord1", "coord2"]].to_numpy(dtype=float)
        spatial = SpatialIndex.from_labels(coords, df["region"].to_numpy())
    return Dataset(X, y, clusters, spatial)


def save_dataset_csv(data: Dataset, path) -> None:
    cols = {f"x{j + 1}": data.X[:, j] for j in range(data.p)}
    cols["y"] = data.y
    if data.clusters is not None:
        cols["entity"] = data.clusters.entity
        cols["day"] = data.clusters.day
    if data.spatial is not None:
        cols["coord1"] = data.spatial.coords[:, 0]
        cols["coord2"] = data.spatial.coords[:, 1]
        cols["region"] = data.spatial.region
    pd.DataFrame(cols).to_csv(path, index=False)
