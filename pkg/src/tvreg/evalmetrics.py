"""Target overlap over labelled regions and endpoint error against a known field.

Target overlap is ``sum_L |F_L & R_L| / sum_L |R_L|`` over the non-background
labels ``L`` of the reference: the fraction of reference-region voxels that the
warped test labels recover. It uses the intersection of test and reference
regions; a union would not be bounded by one.
"""
import csv
from dataclasses import dataclass, field
from typing import List

import numpy as np

from .volume import as_field, warp_nearest


@dataclass
class OverlapRow:
    label: int
    intersection: int
    reference_size: int

    @property
    def to(self):
        return self.intersection / self.reference_size


@dataclass
class OverlapReport:
    aggregate: float
    rows: List[OverlapRow] = field(default_factory=list)
    labels_in_test: int = 0
    labels_in_reference: int = 0
    missing_in_test: List[int] = field(default_factory=list)

    def summary(self):
        return f"TO={self.aggregate:.6f}"

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["label", "intersection", "reference_size", "to"])
            for r in self.rows:
                writer.writerow([r.label, r.intersection, r.reference_size, f"{r.to:.6f}"])


def _labels(vol, name):
    vol = np.asarray(vol)
    if vol.ndim != 3:
        raise ValueError(f"{name} labels must be a 3D volume, got shape {vol.shape}")
    if not np.issubdtype(vol.dtype, np.integer):
        rounded = np.rint(vol)
        if not np.array_equal(rounded, vol):
            raise ValueError(f"{name} labels are not integer valued")
        vol = rounded.astype(np.int64)
    if vol.size and vol.min() < 0:
        raise ValueError(f"{name} labels must be non-negative")
    return vol


def target_overlap(test, reference):
    """Aggregate and per-label target overlap of ``test`` against ``reference``.

    Returns
    -------
    aggregate : float
    report : OverlapReport
    """
    test = _labels(test, "test")
    reference = _labels(reference, "reference")
    if test.shape != reference.shape:
        raise ValueError(f"dimension mismatch: test {test.shape} vs reference {reference.shape}")
    ref_labels, ref_counts = np.unique(reference[reference > 0], return_counts=True)
    if ref_labels.size == 0:
        raise ValueError("reference volume has no labelled (non-background) voxels")
    hit = (test == reference) & (reference > 0)
    hit_labels, hit_counts = np.unique(reference[hit], return_counts=True)
    hits = dict(zip(hit_labels.tolist(), hit_counts.tolist()))
    rows = [OverlapRow(int(lab), int(hits.get(int(lab), 0)), int(cnt))
            for lab, cnt in zip(ref_labels.tolist(), ref_counts.tolist())]
    aggregate = sum(r.intersection for r in rows) / sum(r.reference_size for r in rows)
    test_labels = set(np.unique(test[test > 0]).tolist())
    report = OverlapReport(
        aggregate=aggregate,
        rows=rows,
        labels_in_test=len(test_labels),
        labels_in_reference=len(rows),
        missing_in_test=[r.label for r in rows if r.label not in test_labels],
    )
    return aggregate, report


def endpoint_error(u, u_true):
    """Mean and max per-voxel Euclidean distance between two fields."""
    u = as_field(u)
    u_true = as_field(u_true, u.shape[1:])
    d = u - u_true
    norm = np.sqrt((d * d).sum(axis=0))
    return float(norm.mean()), float(norm.max())


def evaluate_registration(disp, moving_labels, reference_labels):
    """Carry ``moving_labels`` through ``disp`` and score them against the reference."""
    moving_labels = _labels(moving_labels, "moving")
    warped = warp_nearest(moving_labels, disp)
    _, report = target_overlap(warped, reference_labels)
    return report
