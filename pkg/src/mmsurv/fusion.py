"""Per-modality baselines and late / early fusion classifiers."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .cohort import MODALITIES, Modality, ModalityMask, TEST, TRAIN
from .errors import AllMasked, EmptyModality, MissingDependency, ModelFormatError
from .evaluation import EvaluationReport, balanced_accuracy, evaluate_sliced
from .mil import patient_inputs
from .reconstruction import impute

OVERSAMPLE = 6
NOISE_SIGMA = 0.01
PROJECTION_DIM = 128
BASELINE_HIDDEN = {
    Modality.CT: (256, 128),
    Modality.MRI: (256, 128),
    Modality.WSI: (256, 128),
    Modality.CLINGEN: (64, 32),
}
HEAD_HIDDEN = (64,)
MODES = ("ws", "lw", "mean", "concat")
ROW_NAMES = {
    ("ws", False): "Late Fusion WS",
    ("lw", False): "Late Fusion LW",
    ("mean", False): "Early Fusion Mean",
    ("concat", False): "Early Fusion Cat",
    ("ws", True): "Late Fusion WS (W/ Reconstruction)",
    ("lw", True): "Late Fusion LW (W/ Reconstruction)",
    ("mean", True): "Early Fusion Mean (W/ Reconstruction)",
    ("concat", True): "Early Fusion Cat (W/ Reconstruction)",
}


def default_config(base=None):
    base = base or nn.TrainConfig()
    return base.replace(oversample_factor=OVERSAMPLE, noise_sigma=NOISE_SIGMA)


# ---------------------------------------------------------------------------
# Combination rules
# ---------------------------------------------------------------------------

def late_ws_predict(probs, weights, mask):
    """sum_m 1_m w_m p_m / sum_m 1_m w_m."""
    num = den = 0.0
    for m in MODALITIES:
        if mask[m]:
            num += weights[m] * probs[m]
            den += weights[m]
    if den <= 0:
        raise AllMasked("no present modality carries positive weight")
    return num / den


def masked_softmax(theta, mask):
    theta = np.asarray(theta, dtype=np.float64)
    present = np.asarray(mask.present if isinstance(mask, ModalityMask) else mask, dtype=bool)
    if not present.any():
        raise AllMasked("every modality is masked")
    z = np.where(present, theta, -np.inf)
    z = z - z[present].max()
    e = np.where(present, np.exp(z), 0.0)
    return e / e.sum()


def late_lw_predict(probs, theta, mask):
    a = masked_softmax(theta, mask)
    return float(sum(a[int(m)] * probs[m] for m in MODALITIES if mask[m]))


def early_combine(projected, mask, mode):
    """Masked mean over present projections, or fixed-order concat with zero-filled gaps."""
    d = len(next(iter(projected.values())))
    if mode == "mean":
        present = [np.asarray(projected[m]) for m in MODALITIES if mask[m]]
        if not present:
            raise AllMasked("masked mean over zero modalities")
        return np.mean(present, axis=0)
    if mode == "concat":
        return np.concatenate([np.asarray(projected[m]) if mask[m] else np.zeros(d, dtype=np.float32)
                               for m in MODALITIES])
    raise ValueError(f"unknown early fusion mode {mode!r}")


# ---------------------------------------------------------------------------
# Inputs
# ---------------------------------------------------------------------------

def fusion_inputs(patients, selections=None, recon=None, modalities=MODALITIES):
    """(features, mask) per patient; with ``recon`` absent modalities are generated
    and the mask becomes all-true. Modalities outside ``modalities`` are hidden."""
    rows = []
    for p in patients:
        feats, mask = patient_inputs(p, selections)
        if recon is not None:
            feats = impute(recon, feats, mask)
            mask = ModalityMask.full()
        keep = set(modalities)
        mask = ModalityMask(tuple(pr and m in keep for m, pr in zip(MODALITIES, mask.present)))
        feats = {m: v for m, v in feats.items() if mask[m]}
        rows.append((feats, mask))
    return rows


def _stack(rows, dims):
    X = {m: np.zeros((len(rows), dims[m]), dtype=np.float32) for m in MODALITIES}
    M = np.zeros((len(rows), len(MODALITIES)), dtype=bool)
    for i, (feats, mask) in enumerate(rows):
        for m, v in feats.items():
            X[m][i] = v
        M[i] = mask.present
    return X, M


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------

@dataclass
class BaselineClassifier:
    modality: Modality
    head: nn.FeedForwardModel
    train_bacc: float

    def predict(self, X):
        return self.head.forward(np.asarray(X, dtype=np.float32))[:, 0]


def baseline_train(cohort, selections, modality, cfg=None):
    """Train a single-modality classifier on each train patient's selected vector."""
    modality = Modality(modality)
    cfg = cfg or default_config()
    rows = [(f[modality], p.label) for p in cohort.split(TRAIN)
            for f, mk in [patient_inputs(p, selections)] if mk[modality]]
    if not rows:
        raise EmptyModality(f"no train-split {modality.key} vectors")
    X = np.stack([r[0] for r in rows])
    y = np.array([r[1] for r in rows])
    rng = np.random.default_rng(cfg.seed)
    head = nn.FeedForwardModel.mlp(X.shape[1], BASELINE_HIDDEN[modality], 1, rng)
    nn.train(head, (X, y), "weighted_bce", cfg)
    bacc = balanced_accuracy((head.forward(X)[:, 0] >= 0.5).astype(int), y)
    return BaselineClassifier(modality, head, bacc)


def baseline_probs(baseline, patients, selections=None):
    out = {}
    for p in patients:
        feats, mask = patient_inputs(p, selections)
        if mask[baseline.modality]:
            out[p.patient_id] = float(baseline.predict(feats[baseline.modality][None, :])[0])
    return out


# ---------------------------------------------------------------------------
# Fusion systems
# ---------------------------------------------------------------------------

@dataclass
class FusionSystem:
    mode: str
    use_reconstruction: bool
    modalities: tuple = MODALITIES
    baselines: dict = field(default_factory=dict)   # late modes
    theta: np.ndarray | None = None                  # lw
    projections: dict = field(default_factory=dict)  # early modes
    head: nn.FeedForwardModel | None = None
    recon: object = None
    meta: dict = field(default_factory=dict)

    @property
    def name(self):
        return ROW_NAMES[(self.mode, self.use_reconstruction)]

    def predict_rows(self, rows):
        if self.mode in ("ws", "lw"):
            P = _baseline_matrix(self.baselines, rows, self.modalities)
            return np.array([self._late(P[i], rows[i][1]) for i in range(len(rows))])
        X, M = _stack(rows, self.dims)
        return _early_forward(self, X, M)[0][:, 0]

    def _late(self, probs_row, mask):
        probs = {m: probs_row[int(m)] for m in MODALITIES}
        if self.mode == "ws":
            w = {m: (self.baselines[m].train_bacc if m in self.baselines else 0.0) for m in MODALITIES}
            return late_ws_predict(probs, w, mask)
        return late_lw_predict(probs, self.theta, mask)

    @property
    def dims(self):
        return {m: self.projections[m].input_dim for m in MODALITIES}

    def predict(self, patients, selections=None):
        rows = fusion_inputs(patients, selections, self.recon if self.use_reconstruction else None,
                             self.modalities)
        return dict(zip((p.patient_id for p in patients), (float(v) for v in self.predict_rows(rows))))


def _baseline_matrix(baselines, rows, modalities):
    """(n, 4) baseline probabilities; NaN where a modality is masked."""
    P = np.full((len(rows), len(MODALITIES)), np.nan)
    for m in modalities:
        if m not in baselines:
            continue
        idx = [i for i, (_, mk) in enumerate(rows) if mk[m]]
        if idx:
            X = np.stack([rows[i][0][m] for i in idx])
            P[idx, int(m)] = baselines[m].predict(X)
    return P


def _early_forward(system, X, M, cache=False):
    hs, caches = {}, {}
    for m in MODALITIES:
        if cache:
            hs[m], caches[m] = system.projections[m].forward_cache(X[m])
        else:
            hs[m] = system.projections[m].forward(X[m])
    Mf = M.astype(np.float32)
    if system.mode == "mean":
        cnt = Mf.sum(axis=1, keepdims=True)
        if np.any(cnt == 0):
            raise AllMasked("masked mean over zero modalities")
        fused = sum(hs[m] * Mf[:, [int(m)]] for m in MODALITIES) / cnt
    else:
        fused = np.concatenate([hs[m] * Mf[:, [int(m)]] for m in MODALITIES], axis=1)
    if cache:
        out, hc = system.head.forward_cache(fused)
        return out, (caches, hc, Mf)
    return system.head.forward(fused), None


def _early_backward(system, cache, g_out):
    caches, hc, Mf = cache
    g_fused, head_grads = system.head.backward(hc, g_out, need_input_grad=True)
    grads = []
    d = PROJECTION_DIM
    for m in MODALITIES:
        w = Mf[:, [int(m)]]
        if system.mode == "mean":
            g = g_fused * w / Mf.sum(axis=1, keepdims=True)
        else:
            g = g_fused[:, int(m) * d:(int(m) + 1) * d] * w
        _, pg = system.projections[m].backward(caches[m], g)
        grads += pg
    return grads + head_grads


def _early_params(system):
    out = []
    for m in MODALITIES:
        out += system.projections[m].params()
    return out + system.head.params()


def train_fusion(cohort, selections, mode, use_reconstruction=False, recon_model=None,
                 baselines=None, cfg=None, modalities=MODALITIES):
    """Train one fusion system and evaluate it on the test split.

    Late modes combine previously trained ``baselines``; early modes learn
    per-modality projections plus a classifier head end to end.
    Returns (FusionSystem, EvaluationReport).
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if use_reconstruction and recon_model is None:
        raise MissingDependency("use_reconstruction requires a trained reconstruction model")
    if mode in ("ws", "lw") and not baselines:
        raise MissingDependency("late fusion requires trained baselines")
    cfg = cfg or default_config()
    modalities = tuple(Modality(m) for m in modalities)
    system = FusionSystem(mode, use_reconstruction, modalities,
                          recon=recon_model if use_reconstruction else None)
    system.meta["train_config"] = cfg.to_dict()
    train = cohort.split(TRAIN)
    rows = fusion_inputs(train, selections, system.recon, modalities)
    labels = np.array([p.label for p in train])
    rng = np.random.default_rng(cfg.seed)

    if mode in ("ws", "lw"):
        system.baselines = {m: b for m, b in baselines.items() if m in modalities}
        if mode == "lw":
            system.theta = _train_lw(system, rows, labels, cfg, rng)
    else:
        dims = {m: cohort.modality_dims[m] for m in MODALITIES}
        system.projections = {m: nn.FeedForwardModel.init([dims[m], PROJECTION_DIM], ["relu"], rng)
                              for m in MODALITIES}
        width = PROJECTION_DIM * (len(MODALITIES) if mode == "concat" else 1)
        system.head = nn.FeedForwardModel.mlp(width, HEAD_HIDDEN, 1, rng)
        _train_early(system, rows, labels, cfg, rng)

    report = EvaluationReport({"mode": mode, "use_reconstruction": use_reconstruction})
    cells, counts = evaluate_fusion(system, cohort.split(TEST), selections)
    report.add(system.name, cells, counts)
    return system, report


def evaluate_fusion(system, patients, selections=None):
    probs = system.predict(patients, selections) if patients else {}
    return evaluate_sliced(probs, patients)


def _split_val(labels, cfg):
    is_val = nn.validation_split(labels, cfg, cfg.seed)
    tr = np.arange(len(labels)) if is_val is None else np.flatnonzero(~is_val)
    va = None if is_val is None else np.flatnonzero(is_val)
    return tr, va


def _train_early(system, rows, labels, cfg, rng):
    X, M = _stack(rows, system.dims)
    tr, va = _split_val(labels, cfg)
    w0, w1 = cfg.class_weights or nn.class_weights_from_labels(labels[tr], cfg.oversample_factor)
    params = _early_params(system)

    def loss_grad(idx, noise):
        Xb = {m: X[m][idx] for m in MODALITIES}
        if noise and cfg.noise_sigma > 0:
            for m in MODALITIES:
                keep = M[idx, int(m)][:, None]
                Xb[m] = Xb[m] + rng.normal(0.0, cfg.noise_sigma, Xb[m].shape).astype(np.float32) * keep
        out, cache = _early_forward(system, Xb, M[idx], cache=True)
        p = out[:, 0]
        y = labels[idx].astype(np.float32)
        loss = float(np.mean(nn.weighted_bce(p, y, w0, w1)))
        g = (nn.weighted_bce_grad(p, y, w0, w1) / len(idx))[:, None]
        return loss, _early_backward(system, cache, g.astype(np.float32))

    val_fn = None
    if va is not None:
        def val_fn():
            Xb = {m: X[m][va] for m in MODALITIES}
            p = _early_forward(system, Xb, M[va])[0][:, 0]
            return float(np.mean(nn.weighted_bce(p, labels[va], w0, w1)))

    hist = nn.fit(params, labels[tr], lambda b: loss_grad(tr[b], True), cfg, rng, val_fn)
    system.meta["history"] = hist.to_dict()


def _train_lw(system, rows, labels, cfg, rng):
    """Learn one logit per modality; the combination is a masked softmax of these."""
    P = _baseline_matrix(system.baselines, rows, system.modalities)
    present = ~np.isnan(P)
    if not present.any(axis=1).all():
        raise AllMasked("a training patient has no usable modality")
    P = np.nan_to_num(P)
    tr, va = _split_val(labels, cfg)
    w0, w1 = cfg.class_weights or nn.class_weights_from_labels(labels[tr], cfg.oversample_factor)
    theta = np.zeros(len(MODALITIES), dtype=np.float32)

    def combine(idx):
        z = np.where(present[idx], theta[None, :], -np.inf)
        z = z - z.max(axis=1, keepdims=True)
        a = np.where(present[idx], np.exp(z), 0.0)
        a /= a.sum(axis=1, keepdims=True)
        return a, (a * P[idx]).sum(axis=1)

    def step(b):
        idx = tr[b]
        a, p = combine(idx)
        y = labels[idx]
        loss = float(np.mean(nn.weighted_bce(p, y, w0, w1)))
        gp = nn.weighted_bce_grad(p, y.astype(np.float64), w0, w1) / len(idx)
        # dp/dtheta_j = a_j (p_j - p)
        g = (gp[:, None] * a * (P[idx] - p[:, None])).sum(axis=0)
        return loss, [g.astype(np.float32)]

    val_fn = None
    if va is not None:
        def val_fn():
            _, p = combine(va)
            return float(np.mean(nn.weighted_bce(p, labels[va], w0, w1)))

    hist = nn.fit([theta], labels[tr], step, cfg, rng, val_fn)
    system.meta["history"] = hist.to_dict()
    return theta


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_baseline(path, b):
    nn.save_container(path, {"head": b.head}, meta={"modality": b.modality.key, "train_bacc": b.train_bacc},
                      kind="baseline")


def load_baseline(path):
    models, _, meta = nn.load_container(path, kind="baseline")
    return BaselineClassifier(Modality.parse(meta["modality"]), models["head"], float(meta["train_bacc"]))


def save_fusion(path, system):
    models, arrays = {}, {}
    if system.head is not None:
        models["head"] = system.head
    for m, pm in system.projections.items():
        models[f"proj.{m.key}"] = pm
    if system.theta is not None:
        arrays["theta"] = system.theta
    meta = {"mode": system.mode, "use_reconstruction": system.use_reconstruction,
            "modalities": [m.key for m in system.modalities],
            "baseline_weights": {m.key: b.train_bacc for m, b in system.baselines.items()},
            **{k: v for k, v in system.meta.items() if k != "history"}}
    nn.save_container(path, models, arrays, meta, kind="fusion")


def load_fusion(path, baselines=None, recon=None):
    models, arrays, meta = nn.load_container(path, kind="fusion")
    mods = tuple(Modality.parse(k) for k in meta["modalities"])
    system = FusionSystem(meta["mode"], bool(meta["use_reconstruction"]), mods, recon=recon)
    if system.mode in ("ws", "lw"):
        if baselines is None:
            raise MissingDependency(f"{path}: late fusion needs its baselines")
        system.baselines = {m: baselines[m] for m in mods if m in baselines}
        if system.mode == "lw":
            if "theta" not in arrays:
                raise ModelFormatError(f"{path}: learned weights missing")
            system.theta = arrays["theta"]
    else:
        system.head = models["head"]
        system.projections = {m: models[f"proj.{m.key}"] for m in MODALITIES}
    if system.use_reconstruction and recon is None:
        raise MissingDependency(f"{path}: fusion with reconstruction needs the reconstruction model")
    system.meta = {k: v for k, v in meta.items() if k == "train_config"}
    return system
