"""Cohort data model, MMFV feature files and manifest loading."""
from __future__ import annotations

import csv
import enum
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tabular
from .errors import (
    BadMagic,
    CohortError,
    DimensionMismatch,
    DuplicateInstanceId,
    FeatureFileError,
    ManifestError,
    MissingFeatureFile,
    NonFiniteValue,
    TruncatedPayload,
    UnknownModality,
)


class Modality(enum.IntEnum):
    CT = 0
    MRI = 1
    WSI = 2
    CLINGEN = 3

    @property
    def key(self):
        return self.name.lower()

    @property
    def column(self):
        """Report column name."""
        return "ClinGen" if self is Modality.CLINGEN else self.name

    @classmethod
    def parse(cls, text):
        try:
            return cls[text.strip().upper()]
        except KeyError:
            raise UnknownModality(f"unknown modality {text!r}") from None


MODALITIES = tuple(Modality)
IMAGING = (Modality.CT, Modality.MRI, Modality.WSI)

MODALITY_DIMS = {
    Modality.CT: 512,
    Modality.MRI: 512,
    Modality.WSI: 2048,
    Modality.CLINGEN: tabular.CLINGEN_DIM,
}

TRAIN, TEST = "train", "test"
SURVIVED, DECEASED = 1, 0


# ---------------------------------------------------------------------------
# MMFV binary format
# ---------------------------------------------------------------------------

MAGIC = b"MMFV\x01"
_U32 = struct.Struct("<I")


def encode_array(values):
    arr = np.asarray(values)
    if arr.ndim == 0:
        raise ValueError("rank-0 arrays are not representable")
    payload = np.ascontiguousarray(arr, dtype="<f4")
    header = MAGIC + _U32.pack(arr.ndim) + b"".join(_U32.pack(d) for d in arr.shape)
    return header + payload.tobytes()


def decode_array(buf, path="<bytes>"):
    """Decode an MMFV buffer of any rank into a float32 array."""
    if len(buf) < len(MAGIC) or buf[: len(MAGIC)] != MAGIC:
        raise BadMagic(path, 0, "missing MMFV v1 magic")
    pos = len(MAGIC)
    if len(buf) < pos + 4:
        raise TruncatedPayload(path, pos, "header ends before rank field")
    (rank,) = _U32.unpack_from(buf, pos)
    pos += 4
    if len(buf) < pos + 4 * rank:
        raise TruncatedPayload(path, pos, f"header ends before {rank} dims")
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 0
    expected = 4 * count
    found = len(buf) - pos
    if found != expected:
        raise TruncatedPayload(path, pos + min(found, expected),
                               f"payload is {found} bytes, dims {list(dims)} need {expected}")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).astype(np.float32)
    bad = np.flatnonzero(~np.isfinite(arr))
    if bad.size:
        raise NonFiniteValue(path, pos + 4 * int(bad[0]), f"non-finite value at index {int(bad[0])}")
    return arr.reshape(dims)


def write_array(path, values):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_array(values))


def read_array(path):
    path = Path(path)
    return decode_array(path.read_bytes(), path)


def write_feature_file(path, vector):
    v = np.asarray(vector)
    if v.ndim != 1:
        raise ValueError(f"feature vectors are rank 1, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("feature vector contains non-finite values")
    write_array(path, v)


def read_feature_file(path):
    arr = read_array(path)
    if arr.ndim != 1:
        raise FeatureFileError(path, len(MAGIC), f"expected rank 1, found rank {arr.ndim}")
    return arr


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FeatureBag:
    modality: Modality
    instances: np.ndarray  # (n_instances, dim) float32
    instance_ids: tuple

    def __post_init__(self):
        inst = np.asarray(self.instances, dtype=np.float32)
        if inst.ndim != 2 or inst.shape[0] == 0:
            raise CohortError(f"{self.modality.key} bag must be a non-empty (n, dim) block")
        if len(self.instance_ids) != inst.shape[0]:
            raise CohortError("instance_ids must parallel instances")
        if len(set(self.instance_ids)) != len(self.instance_ids):
            raise DuplicateInstanceId(f"duplicate instance ids in {self.modality.key} bag")
        inst.setflags(write=False)
        object.__setattr__(self, "instances", inst)
        object.__setattr__(self, "instance_ids", tuple(self.instance_ids))

    def __len__(self):
        return self.instances.shape[0]

    @property
    def dim(self):
        return self.instances.shape[1]


@dataclass(frozen=True)
class ModalityMask:
    present: tuple  # bools in Modality order

    def __getitem__(self, m):
        return self.present[int(m)]

    @classmethod
    def of(cls, *mods):
        s = set(mods)
        return cls(tuple(m in s for m in MODALITIES))

    @classmethod
    def full(cls):
        return cls((True,) * len(MODALITIES))

    @property
    def modalities(self):
        return tuple(m for m in MODALITIES if self.present[m])

    @property
    def missing(self):
        return tuple(m for m in MODALITIES if not self.present[m])

    def as_array(self):
        return np.array(self.present, dtype=bool)

    def label(self):
        return "+".join(m.column for m in self.modalities) or "none"


@dataclass(eq=False)
class PatientRecord:
    patient_id: str
    split: str
    label: int
    bags: dict = field(default_factory=dict)  # Modality -> FeatureBag, imaging only
    clinical_raw: dict = field(default_factory=dict)
    genomics_raw: dict | None = None
    clingen: np.ndarray | None = None  # precomputed encoding, overrides clinical_raw

    def clingen_vector(self, schema=tabular.DEFAULT_SCHEMA):
        if self.clingen is not None:
            return self.clingen
        return tabular.encode_clingen(self.clinical_raw, self.genomics_raw, schema)

    @property
    def has_genomics(self):
        return bool(self.genomics_raw) and any(
            v != tabular.UNKNOWN for v in self.genomics_raw.values())


def modality_mask(p):
    present = [p.bags.get(m) is not None and len(p.bags[m]) > 0 for m in IMAGING]
    return ModalityMask(tuple(present) + (True,))


@dataclass(eq=False)
class Cohort:
    patients: tuple
    modality_dims: dict = field(default_factory=lambda: dict(MODALITY_DIMS))

    def __post_init__(self):
        self.patients = tuple(self.patients)
        ids = [p.patient_id for p in self.patients]
        if len(set(ids)) != len(ids):
            raise CohortError("patient_id values must be unique")
        self._index = {p.patient_id: i for i, p in enumerate(self.patients)}

    def __len__(self):
        return len(self.patients)

    def __iter__(self):
        return iter(self.patients)

    def get(self, patient_id):
        return self.patients[self._index[patient_id]]

    def split(self, which):
        return [p for p in self.patients if p.split == which]

    def subset(self, which):
        return Cohort(self.split(which), self.modality_dims)


SUMMARY_COLUMNS = ("Patients", "Survived", "CT", "MRI", "WSI", "Genomics", "Clinical")


def cohort_summary(c):
    """Counts per split x modality, plus a total row (Table-1 layout)."""
    table = {s: dict.fromkeys(SUMMARY_COLUMNS, 0) for s in (TRAIN, TEST, "total")}
    for p in c.patients:
        mask = modality_mask(p)
        for row in (table[p.split], table["total"]):
            row["Patients"] += 1
            row["Survived"] += int(p.label == SURVIVED)
            row["CT"] += int(mask[Modality.CT])
            row["MRI"] += int(mask[Modality.MRI])
            row["WSI"] += int(mask[Modality.WSI])
            row["Genomics"] += int(p.has_genomics)
            row["Clinical"] += int(bool(p.clinical_raw) or p.clingen is not None)
    return table


# ---------------------------------------------------------------------------
# Manifest loading
# ---------------------------------------------------------------------------

MANIFEST_COLUMNS = ("patient_id", "split", "label_12mo", "modality", "instance_id", "feature_path")
TABULAR_COLUMNS = ("patient_id", "variable", "value")


def _read_csv(path, columns):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{path}: empty file, header required") from None
        if tuple(h.strip() for h in header) != columns:
            raise ManifestError(f"{path}: header must be {','.join(columns)}, got {','.join(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(columns):
                raise ManifestError(f"{path}:{lineno}: expected {len(columns)} fields")
            yield lineno, dict(zip(columns, (x.strip() for x in row)))


def read_tabular(path, schema=tabular.DEFAULT_SCHEMA):
    """patient_id -> (clinical_raw, genomics_raw or None)."""
    out = {}
    for lineno, row in _read_csv(path, TABULAR_COLUMNS):
        clin, gen = out.setdefault(row["patient_id"], ({}, {}))
        var = row["variable"]
        if var in schema.genes:
            gen[var] = row["value"]
        elif var in schema.clinical_variables:
            clin[var] = row["value"]
        else:
            raise ManifestError(f"{path}:{lineno}: unknown tabular variable {var!r}")
    return {pid: (clin, gen or None) for pid, (clin, gen) in out.items()}


def load_cohort(manifest_path, feature_root, tabular_path=None, modality_dims=None,
                schema=tabular.DEFAULT_SCHEMA, strict=True):
    """Load a manifest + feature files into an immutable in-memory Cohort.

    ``tabular_path`` defaults to ``tabular.csv`` next to the manifest. A row
    with modality ``clingen`` supplies a pre-encoded CLINGEN vector, which
    takes precedence over the tabular fields. With ``strict`` every patient
    must have a WSI bag and clinical data.
    """
    manifest_path = Path(manifest_path)
    feature_root = Path(feature_root)
    dims = dict(MODALITY_DIMS)
    dims[Modality.CLINGEN] = schema.dim
    dims.update(modality_dims or {})
    if tabular_path is None:
        tabular_path = manifest_path.parent / "tabular.csv"
    tab = read_tabular(tabular_path, schema) if Path(tabular_path).exists() else {}

    order = []
    meta = {}
    rows = {}  # pid -> modality -> [(instance_id, vector)]
    seen_ids = {}
    for lineno, row in _read_csv(manifest_path, MANIFEST_COLUMNS):
        pid = row["patient_id"]
        split = row["split"].lower()
        if split not in (TRAIN, TEST):
            raise ManifestError(f"{manifest_path}:{lineno}: split must be train/test")
        if row["label_12mo"] not in ("0", "1"):
            raise ManifestError(f"{manifest_path}:{lineno}: label_12mo must be 0/1")
        label = int(row["label_12mo"])
        mod = Modality.parse(row["modality"])
        if pid not in meta:
            order.append(pid)
            meta[pid] = (split, label)
            rows[pid] = {}
        elif meta[pid] != (split, label):
            raise ManifestError(f"{manifest_path}:{lineno}: inconsistent split/label for {pid}")
        key = (pid, mod, row["instance_id"])
        if key in seen_ids:
            raise DuplicateInstanceId(
                f"{manifest_path}:{lineno}: instance {row['instance_id']!r} repeated "
                f"for {pid}/{mod.key}")
        seen_ids[key] = lineno
        fpath = feature_root / row["feature_path"]
        if not fpath.is_file():
            raise MissingFeatureFile(f"{manifest_path}:{lineno}: {fpath} not found")
        vec = read_feature_file(fpath)
        if vec.shape[0] != dims[mod]:
            raise DimensionMismatch(dims[mod], vec.shape[0], f"{fpath} ({mod.key})")
        rows[pid].setdefault(mod, []).append((row["instance_id"], vec))

    patients = []
    for pid in order:
        split, label = meta[pid]
        bags = {}
        clingen = None
        for mod, items in rows[pid].items():
            if mod is Modality.CLINGEN:
                if len(items) != 1:
                    raise ManifestError(f"{pid}: at most one clingen row per patient")
                clingen = items[0][1]
                continue
            bags[mod] = FeatureBag(mod, np.stack([v for _, v in items]),
                                   tuple(i for i, _ in items))
        clin, gen = tab.get(pid, ({}, None))
        p = PatientRecord(pid, split, label, bags, clin, gen, clingen)
        if clingen is None:
            p.clingen = p.clingen_vector(schema)
        if strict:
            if Modality.WSI not in bags:
                raise CohortError(f"{pid}: every patient needs a WSI bag")
            if not clin and clingen is None:
                raise CohortError(f"{pid}: every patient needs clinical data")
        patients.append(p)
    return Cohort(patients, dims)


def write_manifest(path, rows):
    """rows: iterables matching MANIFEST_COLUMNS."""
    _write_csv(path, MANIFEST_COLUMNS, rows)


def write_tabular(path, rows):
    _write_csv(path, TABULAR_COLUMNS, rows)


def _write_csv(path, columns, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow(r)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(buf.getvalue().encode("utf-8"))
