"""Ordinal / one-hot encoding of clinical and genomics fields into the CLINGEN vector.

Layout of the encoded vector (fixed, part of the model-file contract)::

    [T, N, M, Mp, ajcc_stage, grade]            ordinal, rank/(levels-1), unknown -> -1
    gender(3) cancer_history(3) age_bucket(12)  one-hot, last slot = unknown
    race(6) VHL(3) PBMR1(3) TTN(3)

Total width is 39.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import UnknownLevel

UNKNOWN = "unknown"
UNKNOWN_ORDINAL = -1.0
SCHEMA_VERSION = "clingen-v1"

AGE_BUCKETS = tuple(f"{10 * i}-{10 * i + 9}" for i in range(11))

GENES = ("VHL", "PBMR1", "TTN")
GENE_LEVELS = ("mutated", "not_mutated")


def _default_ordinals():
    return {
        "T": ("T0", "T1", "T1a", "T1b", "T2", "T2a", "T2b", "T3", "T3a", "T3b", "T4"),
        "N": ("0", "1", "2"),
        "M": ("0", "1", "2"),
        "Mp": ("0", "1", "2"),
        "ajcc_stage": ("I", "II", "III", "IV"),
        "grade": ("1", "2", "3", "4", "5"),
    }


def _default_categoricals():
    return {
        "gender": ("male", "female"),
        "cancer_history": ("yes", "no"),
        "age_bucket": AGE_BUCKETS,
        "race": ("black_or_african_american", "white", "asian", "hispanic_or_latino", "other"),
    }


@dataclass(frozen=True)
class TabularSchema:
    """Variable vocabularies. Dict insertion order is the encoding order."""

    ordinals: Mapping[str, tuple] = field(default_factory=_default_ordinals)
    categoricals: Mapping[str, tuple] = field(default_factory=_default_categoricals)
    genes: tuple = GENES
    version: str = SCHEMA_VERSION

    @property
    def clinical_variables(self):
        return tuple(self.ordinals) + tuple(self.categoricals)

    @property
    def dim(self):
        n = len(self.ordinals)
        n += sum(len(levels) + 1 for levels in self.categoricals.values())
        n += len(self.genes) * (len(GENE_LEVELS) + 1)
        return n

    def levels(self, variable):
        if variable in self.ordinals:
            return self.ordinals[variable]
        if variable in self.categoricals:
            return self.categoricals[variable]
        if variable in self.genes:
            return GENE_LEVELS
        raise UnknownLevel(f"unknown variable {variable!r}")


DEFAULT_SCHEMA = TabularSchema()
CLINGEN_DIM = DEFAULT_SCHEMA.dim


def age_bucket(age_years):
    """Decade label for an age in years (0-109)."""
    idx = int(age_years) // 10
    if not 0 <= idx < len(AGE_BUCKETS):
        raise UnknownLevel(f"age {age_years} outside 0-109")
    return AGE_BUCKETS[idx]


def encode_ordinal(variable, value, schema=DEFAULT_SCHEMA):
    levels = schema.ordinals.get(variable)
    if levels is None:
        raise UnknownLevel(f"{variable!r} is not an ordinal variable")
    if value == UNKNOWN:
        return UNKNOWN_ORDINAL
    try:
        rank = levels.index(value)
    except ValueError:
        raise UnknownLevel(f"{variable}: undeclared level {value!r}") from None
    return rank / (len(levels) - 1)


def encode_onehot(variable, value, schema=DEFAULT_SCHEMA):
    levels = schema.levels(variable)
    if variable in schema.ordinals:
        raise UnknownLevel(f"{variable!r} is ordinal, not categorical")
    out = np.zeros(len(levels) + 1, dtype=np.float32)
    if value == UNKNOWN:
        out[-1] = 1.0
        return out
    try:
        out[levels.index(value)] = 1.0
    except ValueError:
        raise UnknownLevel(f"{variable}: undeclared level {value!r}") from None
    return out


def encode_clingen(clinical_raw, genomics_raw=None, schema=DEFAULT_SCHEMA):
    """Encode raw fields into the fixed-width CLINGEN vector (float32).

    Variables absent from ``clinical_raw`` are treated as unknown; a
    ``genomics_raw`` of None marks every gene unknown.
    """
    clinical_raw = clinical_raw or {}
    genomics_raw = genomics_raw or {}
    extra = set(clinical_raw) - set(schema.clinical_variables)
    if extra:
        raise UnknownLevel(f"undeclared clinical variables: {sorted(extra)}")
    extra = set(genomics_raw) - set(schema.genes)
    if extra:
        raise UnknownLevel(f"undeclared genes: {sorted(extra)}")

    parts = [np.array([encode_ordinal(v, clinical_raw.get(v, UNKNOWN), schema)
                       for v in schema.ordinals], dtype=np.float32)]
    for v in schema.categoricals:
        parts.append(encode_onehot(v, clinical_raw.get(v, UNKNOWN), schema))
    for g in schema.genes:
        parts.append(encode_onehot(g, genomics_raw.get(g, UNKNOWN), schema))
    return np.concatenate(parts)


def slot_layout(schema=DEFAULT_SCHEMA):
    """(variable, start, stop) for every block of the encoded vector."""
    out, pos = [], 0
    for v in schema.ordinals:
        out.append((v, pos, pos + 1))
        pos += 1
    for v, levels in schema.categoricals.items():
        out.append((v, pos, pos + len(levels) + 1))
        pos += len(levels) + 1
    for g in schema.genes:
        out.append((g, pos, pos + len(GENE_LEVELS) + 1))
        pos += len(GENE_LEVELS) + 1
    return out
