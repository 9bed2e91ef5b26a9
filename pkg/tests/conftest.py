"""Shared fixtures and small builders for the test suite."""

import numpy as np
import pytest

from tlcausal.data import ObservationTable


def make_table(y, t, r, x, center_id=None, n_regions=None, n_groups=None):
    region_labels = None
    group_labels = None
    if n_regions is not None:
        region_labels = [str(m) for m in range(1, n_regions + 1)]
    if n_groups is not None:
        group_labels = [str(k) for k in range(1, n_groups + 1)]
    return ObservationTable(
        y=np.asarray(y, dtype=float), t=np.asarray(t, dtype=int),
        r=np.asarray(r, dtype=int), x=np.asarray(x, dtype=float),
        center_id=None if center_id is None else np.asarray(center_id),
        region_labels=region_labels, group_labels=group_labels)


@pytest.fixture(scope="session")
def registry_csv(tmp_path_factory):
    """The ~3600-row registry-shaped CSV used by the end-to-end tests."""
    from tlcausal.io import write_synthetic_registry_csv
    path = tmp_path_factory.mktemp("registry") / "registry.csv"
    return write_synthetic_registry_csv(str(path), seed=2024, n_rows=3600)
