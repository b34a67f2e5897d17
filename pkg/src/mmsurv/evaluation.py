"""Balanced accuracy, stratified splitting, sliced reports and 2-D projections."""
from __future__ import annotations

import json
import math

import numpy as np

from .cohort import MODALITIES, Modality, modality_mask
from .errors import DegenerateClass, EmptyInput, InsufficientPoints

REPORT_COLUMNS = ("CT", "MRI", "WSI", "ClinGen", "AllPatients")
EXPERIMENT_ROWS = (
    "MIL",
    "Baselines",
    "Late Fusion WS",
    "Late Fusion LW",
    "Early Fusion Mean",
    "Early Fusion Cat",
    "Early Fusion Mean (W/ Reconstruction)",
    "Early Fusion Cat (W/ Reconstruction)",
)
THRESHOLD = 0.5


def balanced_accuracy(preds, labels):
    """Mean recall over the classes that occur in ``labels``."""
    preds = np.asarray(preds).astype(int).reshape(-1)
    labels = np.asarray(labels).astype(int).reshape(-1)
    if preds.shape != labels.shape:
        raise ValueError("preds and labels must have equal length")
    if labels.size == 0:
        raise EmptyInput("balanced accuracy of an empty sample")
    recalls = [np.mean(preds[labels == c] == c) for c in (0, 1) if np.any(labels == c)]
    return float(np.mean(recalls))


def stratified_split(labels, test_fraction, seed):
    """Boolean test-membership array, per-class sizes round(n_c * fraction)."""
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    is_test = np.zeros(len(labels), dtype=bool)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if len(idx) < 2:
            raise DegenerateClass(f"class {c} has {len(idx)} member(s); need >= 2")
        k = int(math.floor(len(idx) * test_fraction + 0.5))
        k = min(max(k, 1), len(idx) - 1)
        is_test[rng.permutation(idx)[:k]] = True
    return is_test


# ---------------------------------------------------------------------------
# Sliced reports
# ---------------------------------------------------------------------------

def column_patients(patients, column):
    if column == "AllPatients":
        return list(patients)
    m = Modality.CLINGEN if column == "ClinGen" else Modality[column]
    return [p for p in patients if modality_mask(p)[m]]


def evaluate_sliced(system, patients, columns=REPORT_COLUMNS, threshold=THRESHOLD):
    """BAcc per column, each over the patients having that modality.

    ``system`` maps patient_id -> survival probability, or is a dict
    column -> such mapping when different predictors serve different
    columns (MIL, baselines). Returns (cells, counts); a cell is None when
    the column has no patients or no predictor.
    """
    cells, counts = {}, {}
    for col in REPORT_COLUMNS:
        pts = column_patients(patients, col)
        counts[col] = len(pts)
        probs = system.get(col) if _per_column(system) else system
        if col not in columns or probs is None or not pts:
            cells[col] = None
            continue
        preds = [int(probs[p.patient_id] >= threshold) for p in pts]
        cells[col] = balanced_accuracy(preds, [p.label for p in pts])
    return cells, counts


def _per_column(system):
    return isinstance(system, dict) and any(k in REPORT_COLUMNS for k in system)


class EvaluationReport:
    """Rows of experiments x Table-2 columns; None marks not-applicable."""

    def __init__(self, meta=None):
        self.rows = {}
        self.counts = {}
        self.meta = dict(meta or {})

    def add(self, name, cells, counts):
        self.rows[name] = {c: cells.get(c) for c in REPORT_COLUMNS}
        self.counts[name] = {c: int(counts.get(c, 0)) for c in REPORT_COLUMNS}

    def __getitem__(self, name):
        return self.rows[name]

    def ordered_rows(self):
        known = [r for r in EXPERIMENT_ROWS if r in self.rows]
        return known + [r for r in self.rows if r not in EXPERIMENT_ROWS]

    def to_dict(self):
        return {
            "columns": list(REPORT_COLUMNS),
            "rows": [{"experiment": r,
                      "bacc": {c: _round(self.rows[r][c]) for c in REPORT_COLUMNS},
                      "counts": self.counts[r]} for r in self.ordered_rows()],
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d):
        rep = cls(d.get("meta"))
        for row in d["rows"]:
            rep.add(row["experiment"], row["bacc"], row["counts"])
        return rep

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self):
        names = self.ordered_rows()
        w = max([len("Experiment")] + [len(n) for n in names]) + 2
        lines = ["Experiment".ljust(w) + "".join(c.rjust(12) for c in REPORT_COLUMNS)]
        lines.append("-" * len(lines[0]))
        for n in names:
            cells = "".join(("-" if self.rows[n][c] is None else f"{100 * self.rows[n][c]:.2f}").rjust(12)
                            for c in REPORT_COLUMNS)
            lines.append(n.ljust(w) + cells)
        return "\n".join(lines) + "\n"


def _round(v):
    return None if v is None else round(float(v), 10)


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------

PROVENANCES = ("ground_truth", "reconstructed", "generated")


def pca_2d(points):
    """Project onto the top two principal axes of the centred point set.

    Each axis is signed so that its largest-magnitude loading is positive.
    Returns (coords (n, 2), axes (dim, 2), centre).
    """
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 3:
        raise InsufficientPoints(f"need at least 3 points, got {X.shape[0] if X.ndim == 2 else 0}")
    centre = X.mean(axis=0)
    Xc = X - centre
    _, _, vt = np.linalg.svd(Xc, full_matrices=False)
    axes = np.zeros((X.shape[1], 2))
    k = min(2, vt.shape[0])
    axes[:, :k] = vt[:k].T
    for j in range(k):
        i = np.argmax(np.abs(axes[:, j]))
        if axes[i, j] < 0:
            axes[:, j] = -axes[:, j]
    return Xc @ axes, axes, centre


class ProjectionDump:
    """Per modality: 2-D points with provenance labels, plus the raw vectors."""

    def __init__(self):
        self.points = {}    # Modality -> (coords (n,2), provenance list)
        self.vectors = {}   # Modality -> (raw (n,dim), provenance list, patient ids)

    def counts(self, m):
        prov = self.points[m][1]
        return {k: prov.count(k) for k in PROVENANCES}

    def subset(self, m, provenance):
        coords, prov = self.points[m]
        return coords[[i for i, p in enumerate(prov) if p == provenance]]


def project_vectors(groups):
    """groups: provenance -> (n_i, dim) arrays. Returns (coords, provenance list)."""
    blocks, prov = [], []
    for name in PROVENANCES:
        arr = groups.get(name)
        if arr is None or len(arr) == 0:
            continue
        blocks.append(np.asarray(arr, dtype=np.float64))
        prov += [name] * len(arr)
    if not blocks:
        raise InsufficientPoints("no points to project")
    coords, _, _ = pca_2d(np.concatenate(blocks))
    return coords, prov


def project_latents(recon_model, patients, selections=None, modalities=MODALITIES):
    """Ground-truth, reconstructed and generated vectors per modality, projected to 2-D."""
    from .reconstruction import patient_inputs, recon_forward, assemble_input

    gt = {m: [] for m in modalities}
    rec = {m: [] for m in modalities}
    gen = {m: [] for m in modalities}
    ids = {m: {k: [] for k in PROVENANCES} for m in modalities}
    for p in patients:
        feats, mask = patient_inputs(p, selections)
        out = recon_forward(recon_model, assemble_input(feats, mask, recon_model.dims), mask)
        for m in modalities:
            if mask[m]:
                gt[m].append(feats[m])
                rec[m].append(out.vectors[m])
                ids[m]["ground_truth"].append(p.patient_id)
                ids[m]["reconstructed"].append(p.patient_id)
            else:
                gen[m].append(out.vectors[m])
                ids[m]["generated"].append(p.patient_id)
    dump = ProjectionDump()
    for m in modalities:
        groups = {"ground_truth": np.array(gt[m]), "reconstructed": np.array(rec[m]),
                  "generated": np.array(gen[m])}
        coords, prov = project_vectors(groups)
        dump.points[m] = (coords, prov)
        raw = np.concatenate([g for g in groups.values() if len(g)])
        pid = sum((ids[m][k] for k in PROVENANCES), [])
        dump.vectors[m] = (raw.astype(np.float32), prov, pid)
    return dump
