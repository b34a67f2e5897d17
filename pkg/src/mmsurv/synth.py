"""Synthetic cohorts from a label-first shared-latent Gaussian model, plus its Bayes oracle.

Generative model, per patient::

    y ~ Bernoulli(class_prior)                 (1 = survived)
    z ~ N(y * class_shift, I_k)
    x_m,j = A_m z + noise_m * N(0, I)          (j-th instance of modality m)

Under this model both classes share the covariance of the observed block,
so the posterior of survival is a logistic function of a linear score.
Loading matrices are either given explicitly or drawn as
``A_m = G_m diag(loading_scales[m])`` with ``G_m`` standard normal from
``loading_seed``, so several cohort seeds share one generative model.
"""
from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, logit, ndtr

from . import tabular
from .cohort import (
    MODALITIES,
    MODALITY_DIMS,
    FeatureBag,
    Modality,
    ModalityMask,
    TEST,
    TRAIN,
    load_cohort,
    write_feature_file,
    write_manifest,
    write_tabular,
)
from .evaluation import balanced_accuracy, stratified_split
from .errors import InvalidConfig, SingularCovariance

# Availability and bag sizes echo the real cohort's structure.
DEFAULT_MISSING = {"ct": 0.60, "mri": 0.92, "wsi": 0.0, "clingen": 0.0}
DEFAULT_BAG_SIZES = {"ct": [1, 3], "mri": [1, 3], "wsi": [2, 3], "clingen": [1, 1]}

# Latent 0 carries the class signal; latents 1-3 are class-independent
# nuisance factors. Within each modality the class latent only appears tied
# to a nuisance latent along one shared direction, so no single modality
# separates the classes well: ClinGen mixes latents 0-2, WSI and the
# radiology modalities mix latent 0 with latent 3. WSI exposes latent 1 and
# CT/MRI latent 2 along their own directions, which lets fusion undo the
# confounding in ClinGen.
DEFAULT_SHIFT = [2.9, 0.0, 0.0, 0.0]
DEFAULT_LOADINGS = {
    "clingen": [1.0, 1.76, 0.5, 0.0],
    "wsi": [0.01, 0.1, 0.0, 0.1],
    "ct": [0.017, 0.0, 0.1, 0.08],
    "mri": [0.017, 0.0, 0.1, 0.08],
}
DEFAULT_TIES = {"clingen": [[0, 1, 2]], "wsi": [[0, 3]], "ct": [[0, 3]], "mri": [[0, 3]]}
# Imaging features live on a smaller scale than the ClinGen block.
DEFAULT_NOISE = {"clingen": 1.0, "wsi": 0.05, "ct": 0.05, "mri": 0.05}


@dataclass
class SynthConfig:
    n_patients: int = 618
    latent_dim: int = 4
    class_prior: float = 0.88
    class_shift: list = field(default_factory=lambda: list(DEFAULT_SHIFT))
    loading_scales: dict = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_LOADINGS.items()})
    loading_ties: dict = field(default_factory=lambda: {k: [list(g) for g in v] for k, v in DEFAULT_TIES.items()})
    noise: dict = field(default_factory=lambda: dict(DEFAULT_NOISE))
    missing_rates: dict = field(default_factory=lambda: dict(DEFAULT_MISSING))
    bag_sizes: dict = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_BAG_SIZES.items()})
    genomics_rate: float = 0.74
    test_fraction: float = 0.2
    dims: dict = field(default_factory=lambda: {m.key: d for m, d in MODALITY_DIMS.items()})
    loading_seed: int = 0
    seed: int = 0
    clingen_source: str = "latent"  # "latent": encoded vector written; "tabular": from tabular.csv only
    loadings: dict | None = None  # explicit A_m matrices override loading_scales

    def __post_init__(self):
        self._A = None
        self.validate()

    def validate(self):
        k = self.latent_dim
        if self.n_patients < 0 or k < 1:
            raise InvalidConfig("n_patients must be >= 0 and latent_dim >= 1")
        if not 0 < self.class_prior < 1:
            raise InvalidConfig("class_prior must lie in (0, 1)")
        if len(self.class_shift) != k:
            raise InvalidConfig(f"class_shift must have {k} entries")
        for name in ("noise", "missing_rates", "bag_sizes", "dims"):
            d = getattr(self, name)
            missing = {m.key for m in MODALITIES} - set(d)
            if missing:
                raise InvalidConfig(f"{name} lacks entries for {sorted(missing)}")
        for key, rate in self.missing_rates.items():
            if not 0 <= rate <= 1:
                raise InvalidConfig(f"missing rate for {key} outside [0, 1]")
        if self.missing_rates["wsi"] != 0 or self.missing_rates["clingen"] != 0:
            raise InvalidConfig("WSI and ClinGen are present for every patient; their missing rates must be 0")
        for key, s in self.noise.items():
            if s < 0:
                raise InvalidConfig(f"noise for {key} must be non-negative")
        for key, (lo, hi) in self.bag_sizes.items():
            if not 1 <= lo <= hi:
                raise InvalidConfig(f"bag size range for {key} must satisfy 1 <= lo <= hi")
        if list(self.bag_sizes["clingen"]) != [1, 1]:
            raise InvalidConfig("clingen has exactly one vector per patient")
        if self.dims["clingen"] != tabular.CLINGEN_DIM and self.clingen_source == "tabular":
            raise InvalidConfig("tabular clingen source fixes the clingen dim")
        if self.clingen_source not in ("latent", "tabular"):
            raise InvalidConfig("clingen_source must be 'latent' or 'tabular'")
        if not 0 < self.test_fraction < 1:
            raise InvalidConfig("test_fraction must lie in (0, 1)")
        if not 0 <= self.genomics_rate <= 1:
            raise InvalidConfig("genomics_rate must lie in [0, 1]")
        if self.loadings is None:
            for key, s in self.loading_scales.items():
                if len(s) != k:
                    raise InvalidConfig(f"loading_scales[{key}] must have {k} entries")
            for key, groups in self.loading_ties.items():
                for g in groups:
                    if not g or any(not 0 <= j < k for j in g):
                        raise InvalidConfig(f"loading_ties[{key}] must index latents 0..{k - 1}")
        else:
            for m in MODALITIES:
                A = np.asarray(self.loadings[m.key], dtype=float)
                if A.shape != (self.dims[m.key], k):
                    raise InvalidConfig(f"loadings[{m.key}] must be {self.dims[m.key]}x{k}")

    # -- derived quantities -------------------------------------------------

    def dim(self, m):
        return int(self.dims[Modality(m).key])

    @property
    def modality_dims(self):
        return {m: self.dim(m) for m in MODALITIES}

    def loading(self, m):
        if self._A is None:
            self._A = self._build_loadings()
        return self._A[Modality(m)]

    def _build_loadings(self):
        if self.loadings is not None:
            return {m: np.asarray(self.loadings[m.key], dtype=np.float64) for m in MODALITIES}
        rng = np.random.default_rng(self.loading_seed)
        out = {}
        for m in MODALITIES:
            G = rng.standard_normal((self.dim(m), self.latent_dim))
            for group in self.loading_ties.get(m.key, []):
                G[:, group] = G[:, [group[0]]]
            out[m] = G * np.asarray(self.loading_scales[m.key], dtype=np.float64)
        return out

    def shift(self):
        return np.asarray(self.class_shift, dtype=np.float64)

    def sigma(self, m):
        return float(self.noise[Modality(m).key])

    def bag_range(self, m):
        lo, hi = self.bag_sizes[Modality(m).key]
        return int(lo), int(hi)

    # -- serialisation ------------------------------------------------------

    def to_dict(self):
        d = {
            "n_patients": self.n_patients, "latent_dim": self.latent_dim,
            "class_prior": self.class_prior, "class_shift": list(self.class_shift),
            "loading_scales": self.loading_scales, "loading_ties": self.loading_ties,
            "noise": self.noise,
            "missing_rates": self.missing_rates, "bag_sizes": self.bag_sizes,
            "genomics_rate": self.genomics_rate, "test_fraction": self.test_fraction,
            "dims": self.dims, "loading_seed": self.loading_seed, "seed": self.seed,
            "clingen_source": self.clingen_source,
        }
        if self.loadings is not None:
            d["loadings"] = {k: np.asarray(v).tolist() for k, v in self.loadings.items()}
        return d

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown synth config fields: {sorted(unknown)}")
        base = cls()
        merged = {}
        for name in known:
            if name not in d:
                continue
            v = d[name]
            cur = getattr(base, name)
            if isinstance(cur, dict) and isinstance(v, dict) and name != "loadings":
                cur = dict(cur)
                cur.update(v)
                v = cur
            merged[name] = v
        try:
            return cls(**merged)
        except (TypeError, ValueError) as e:
            raise InvalidConfig(str(e)) from None

    def replace(self, **kw):
        d = self.to_dict()
        d.update(kw)
        return SynthConfig.from_dict(d)


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def sample_patients(config, rng):
    """In-memory draw: labels, latents, presence, bags. No splitting or files."""
    n, k = config.n_patients, config.latent_dim
    y = (rng.random(n) < config.class_prior).astype(int)
    z = rng.standard_normal((n, k)) + y[:, None] * config.shift()
    present = {m: rng.random(n) >= config.missing_rates[m.key] for m in MODALITIES}
    bag_n = {}
    for m in MODALITIES:
        lo, hi = config.bag_range(m)
        bag_n[m] = rng.integers(lo, hi + 1, size=n)
    bags = {m: [None] * n for m in MODALITIES}
    for m in MODALITIES:
        A, s, d = config.loading(m), config.sigma(m), config.dim(m)
        clean = z @ A.T
        for i in range(n):
            if not present[m][i]:
                continue
            cnt = int(bag_n[m][i])
            noise = rng.standard_normal((cnt, d)) * s if s > 0 else np.zeros((cnt, d))
            bags[m][i] = (clean[i][None, :] + noise).astype(np.float32)
    return y, z, present, bags


def _quantize(value, sd, n_levels):
    u = ndtr(value / sd) if sd > 0 else 0.5
    return int(min(n_levels - 1, max(0, math.floor(u * n_levels))))


def raw_tabular_fields(clingen_vec, config, has_genomics, schema=tabular.DEFAULT_SCHEMA):
    """Derive raw clinical/genomic labels by binning leading coordinates of the ClinGen vector."""
    A = config.loading(Modality.CLINGEN)
    sd = np.sqrt(np.sum(A ** 2, axis=1) + config.sigma(Modality.CLINGEN) ** 2)
    names = list(schema.ordinals) + list(schema.categoricals) + list(schema.genes)
    clin, gen = {}, {}
    for i, var in enumerate(names):
        j = i % len(clingen_vec)
        levels = schema.levels(var)
        label = levels[_quantize(float(clingen_vec[j]), float(sd[j]), len(levels))]
        if var in schema.genes:
            if has_genomics:
                gen[var] = label
        else:
            clin[var] = label
    return clin, (gen or None)


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def generate(config, out_dir):
    """Write manifest.csv, tabular.csv, features/, hidden/latents.csv and ledger.json.

    Returns (cohort, ledger). Everything is a deterministic function of config.
    """
    config.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(config.seed)
    y, z, present, bags = sample_patients(config, rng)
    has_gen = rng.random(config.n_patients) < config.genomics_rate
    n = config.n_patients
    is_test = stratified_split(y, config.test_fraction, config.seed) if n else np.zeros(0, bool)

    manifest, tab_rows, latent_rows = [], [], []
    pids = [f"SYN{i:04d}" for i in range(n)]
    for i, pid in enumerate(pids):
        split = TEST if is_test[i] else TRAIN
        for m in MODALITIES:
            if bags[m][i] is None:
                continue
            if m is Modality.CLINGEN and config.clingen_source == "tabular":
                continue
            for j, vec in enumerate(bags[m][i]):
                rel = f"features/{pid}/{m.key}_{j}.mmfv"
                write_feature_file(out / rel, vec)
                manifest.append((pid, split, int(y[i]), m.key, f"{m.key}{j}", rel))
        clin, gen = raw_tabular_fields(bags[Modality.CLINGEN][i][0], config, bool(has_gen[i]))
        for var, val in clin.items():
            tab_rows.append((pid, var, val))
        for var, val in (gen or {}).items():
            tab_rows.append((pid, var, val))
        latent_rows.append((pid, int(y[i]), *[repr(float(v)) for v in z[i]]))

    write_manifest(out / "manifest.csv", manifest)
    write_tabular(out / "tabular.csv", tab_rows)
    _write_latents(out / "hidden" / "latents.csv", latent_rows, config.latent_dim)

    dims = config.modality_dims
    if config.clingen_source == "tabular":
        dims[Modality.CLINGEN] = tabular.CLINGEN_DIM
    cohort = load_cohort(out / "manifest.csv", out, modality_dims=dims)
    # bookkeeping from the draw itself, independent of the loader
    counts = {s: {"Patients": 0, "Survived": 0, "CT": 0, "MRI": 0, "WSI": 0,
                  "Genomics": 0, "Clinical": 0} for s in (TRAIN, TEST, "total")}
    for i in range(n):
        for s in (TEST if is_test[i] else TRAIN, "total"):
            c = counts[s]
            c["Patients"] += 1
            c["Survived"] += int(y[i])
            c["CT"] += int(present[Modality.CT][i])
            c["MRI"] += int(present[Modality.MRI][i])
            c["WSI"] += int(present[Modality.WSI][i])
            c["Genomics"] += int(has_gen[i])
            c["Clinical"] += 1

    files = {}
    for path in sorted(out.rglob("*")):
        if path.is_file() and path.name != "ledger.json":
            files[path.relative_to(out).as_posix()] = _sha256(path)
    digest = hashlib.sha256("".join(f"{k}\0{v}\n" for k, v in files.items()).encode()).hexdigest()
    ledger = {
        "counts": counts,
        "instances": {m.key: int(sum(len(b) for b in bags[m] if b is not None)) for m in MODALITIES},
        "config": config.to_dict(),
        "files": files,
        "content_hash": digest,
    }
    (out / "ledger.json").write_text(json.dumps(ledger, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return cohort, ledger


def _write_latents(path, rows, k):
    path.parent.mkdir(parents=True, exist_ok=True)
    header = "patient_id,label_12mo," + ",".join(f"z{j}" for j in range(k))
    lines = [header] + [",".join(str(x) for x in r) for r in rows]
    path.write_bytes(("\n".join(lines) + "\n").encode("utf-8"))


def read_latents(path):
    """patient_id -> latent vector (float64), as written by generate."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            parts = line.rstrip("\n").split(",")
            out[parts[0]] = np.array([float(v) for v in parts[2:]])
    return out


def clean_signal(config, m, z):
    """Noise-free modality mean A_m z for one or many latent vectors."""
    return np.asarray(z) @ config.loading(m).T


# ---------------------------------------------------------------------------
# Bayes oracle
# ---------------------------------------------------------------------------

def _as_obs(v):
    if isinstance(v, FeatureBag):
        return v.instances.astype(np.float64).mean(axis=0), len(v)
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim == 2:
        return arr.mean(axis=0), arr.shape[0]
    return arr, 1


def _precision_terms(config, mods, counts):
    """(I + M, per-modality precision n_m / sigma_m^2), M = sum_m prec_m A_m^T A_m."""
    k = config.latent_dim
    S = np.eye(k)
    prec = {}
    for m in mods:
        s = config.sigma(m)
        if s == 0:
            raise SingularCovariance(f"{m.key}: zero noise makes the observation covariance singular")
        prec[m] = counts[m] / (s * s)
        A = config.loading(m)
        S = S + prec[m] * (A.T @ A)
    return S, prec


def _check_mask(observed, mask, config):
    mods = mask.modalities
    if not mods:
        raise ValueError("at least one modality must be observed")
    if set(observed) != set(mods):
        raise ValueError("observed modalities must match the mask exactly")
    if Modality.CLINGEN in mods and config.clingen_source != "latent":
        raise InvalidConfig("the oracle needs clingen_source='latent'")
    return mods


def log_likelihood_ratio(observed, mask, config):
    """log p(x | survived) - log p(x | deceased) under the generative model."""
    observed = {Modality(m): v for m, v in observed.items()}
    mods = _check_mask(observed, mask, config)
    obs = {m: _as_obs(observed[m]) for m in mods}
    counts = {m: obs[m][1] for m in mods}
    S, prec = _precision_terms(config, mods, counts)
    delta = config.shift()
    u = np.linalg.solve(S, delta)           # (I+M)^-1 delta
    linear = sum(prec[m] * (config.loading(m) @ u) @ obs[m][0] for m in mods)
    M = S - np.eye(config.latent_dim)
    return float(linear - 0.5 * delta @ np.linalg.solve(S, M @ delta))


def bayes_posterior(observed, mask, config):
    """P(survived | observed modalities); bags are reduced to their mean."""
    llr = log_likelihood_ratio(observed, mask, config)
    return float(expit(logit(config.class_prior) + llr))


def separation(config, mask, counts=None):
    """Mahalanobis distance between the class-conditional observation means."""
    mods = mask.modalities
    counts = counts or {m: 1 for m in mods}
    S, _ = _precision_terms(config, mods, counts)
    M = S - np.eye(config.latent_dim)
    delta = config.shift()
    return float(np.sqrt(max(delta @ np.linalg.solve(S, M @ delta), 0.0)))


def analytic_bacc(config, mask):
    """BAcc of the likelihood-ratio rule, exact by enumerating bag sizes.

    For fixed bag sizes the LLR is N(+-D^2/2, D^2) per class, giving
    Phi(D/2); bag sizes are independent uniform draws.
    """
    mods = mask.modalities
    ranges = [range(config.bag_range(m)[0], config.bag_range(m)[1] + 1) for m in mods]
    total, count = 0.0, 0
    for combo in itertools.product(*ranges):
        d = separation(config, mask, dict(zip(mods, combo)))
        total += ndtr(d / 2)
        count += 1
    return total / count


def _mc_posteriors(config, mask, n, rng, chunk=4096):
    """Draw n patients observing exactly the masked modalities; return (posteriors, labels)."""
    mods = mask.modalities
    delta = config.shift()
    k = config.latent_dim
    priors = logit(config.class_prior)
    post = np.empty(n)
    labels = np.empty(n, dtype=int)
    # one linear score per bag-size combination, applied to bag means
    for start in range(0, n, chunk):
        b = min(chunk, n - start)
        y = (rng.random(b) < config.class_prior).astype(int)
        z = rng.standard_normal((b, k)) + y[:, None] * delta
        sizes = {m: rng.integers(config.bag_range(m)[0], config.bag_range(m)[1] + 1, size=b) for m in mods}
        means = {}
        for m in mods:
            A, s = config.loading(m), config.sigma(m)
            noise = rng.standard_normal((b, config.dim(m))) * (s / np.sqrt(sizes[m]))[:, None]
            means[m] = z @ A.T + noise
        keys = np.stack([sizes[m] for m in mods], axis=1)
        llr = np.empty(b)
        for combo in np.unique(keys, axis=0):
            rows = np.all(keys == combo, axis=1)
            counts = dict(zip(mods, (int(c) for c in combo)))
            S, prec = _precision_terms(config, mods, counts)
            u = np.linalg.solve(S, delta)
            lin = sum(prec[m] * (means[m][rows] @ (config.loading(m) @ u)) for m in mods)
            M = S - np.eye(k)
            llr[rows] = lin - 0.5 * delta @ np.linalg.solve(S, M @ delta)
        post[start:start + b] = expit(priors + llr)
        labels[start:start + b] = y
    return post, labels


def best_threshold(scores, labels):
    """Threshold t maximising BAcc of (scores >= t)."""
    order = np.argsort(-scores, kind="stable")
    s, lab = scores[order], labels[order]
    n1 = max(int(lab.sum()), 1)
    n0 = max(int(len(lab) - lab.sum()), 1)
    tp = np.cumsum(lab)
    fp = np.cumsum(1 - lab)
    bacc = 0.5 * (tp / n1 + (n0 - fp) / n0)
    # only cut between distinct scores
    valid = np.r_[s[1:] != s[:-1], True]
    bacc = np.where(valid, bacc, -1)
    i = int(np.argmax(bacc))
    return float(s[i])


def oracle_bacc(config, mask, n_mc=100_000, seed=0):
    """Monte-Carlo BAcc of the Bayes posterior, threshold tuned on a separate MC sample."""
    _check_mask({m: None for m in mask.modalities}, mask, config)
    rng = np.random.default_rng(seed)
    tune_p, tune_y = _mc_posteriors(config, mask, n_mc, rng)
    t = best_threshold(tune_p, tune_y)
    p, yv = _mc_posteriors(config, mask, n_mc, rng)
    return balanced_accuracy((p >= t).astype(int), yv)


@dataclass
class OracleReport:
    bayes_bacc: dict  # mask label -> BAcc
    analytic: dict

    def to_dict(self):
        return {"bayes_bacc": self.bayes_bacc, "analytic": self.analytic}


STANDARD_MASKS = {
    "CT": ModalityMask.of(Modality.CT),
    "MRI": ModalityMask.of(Modality.MRI),
    "WSI": ModalityMask.of(Modality.WSI),
    "ClinGen": ModalityMask.of(Modality.CLINGEN),
    "WSI+ClinGen": ModalityMask.of(Modality.WSI, Modality.CLINGEN),
    "all": ModalityMask.full(),
}


def oracle_report(config, n_mc=100_000, seed=0, masks=None):
    masks = masks or STANDARD_MASKS
    return OracleReport(
        {k: oracle_bacc(config, m, n_mc, seed) for k, m in masks.items()},
        {k: analytic_bacc(config, m) for k, m in masks.items()},
    )
