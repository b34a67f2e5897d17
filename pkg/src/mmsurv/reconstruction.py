"""Cross-modal encoder/decoder that generates feature vectors for missing modalities.

Each modality has an encoder (native -> 128 -> 128); the concatenated codes
pass through one shared cross-modal layer (4*128 -> 128) and modality
decoders (128 -> 128 -> native, identity output). Absent modalities enter
as zero vectors.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .cohort import MODALITIES, Modality, ModalityMask, TEST, TRAIN
from .errors import DimMismatch, EmptyCohort, MaskMismatch
from .mil import patient_inputs

WIDTH = 128
OVERSAMPLE = 6
NOISE_SIGMA = 0.01
P_DROP = 0.25

RECONSTRUCTED, GENERATED = "reconstructed", "generated"


def default_config(base=None):
    base = base or nn.TrainConfig()
    return base.replace(oversample_factor=OVERSAMPLE, noise_sigma=NOISE_SIGMA)


@dataclass
class ReconModel:
    encoders: dict   # Modality -> FeedForwardModel
    cross: nn.FeedForwardModel
    decoders: dict
    meta: dict = field(default_factory=dict)

    @classmethod
    def init(cls, dims, rng, width=WIDTH):
        enc = {m: nn.FeedForwardModel.init([dims[m], width, width], "relu", rng) for m in MODALITIES}
        cross = nn.FeedForwardModel.init([len(MODALITIES) * width, width], ["relu"], rng)
        dec = {m: nn.FeedForwardModel.init([width, width, dims[m]], ["relu", "identity"], rng)
               for m in MODALITIES}
        return cls(enc, cross, dec, {"p_drop": P_DROP, "cross_activation": "relu"})

    @property
    def dims(self):
        return {m: self.encoders[m].input_dim for m in MODALITIES}

    def params(self):
        out = []
        for m in MODALITIES:
            out += self.encoders[m].params()
        out += self.cross.params()
        for m in MODALITIES:
            out += self.decoders[m].params()
        return out

    def named_models(self):
        d = {f"enc.{m.key}": self.encoders[m] for m in MODALITIES}
        d.update({f"dec.{m.key}": self.decoders[m] for m in MODALITIES})
        d["cross"] = self.cross
        return d

    def forward_batch(self, X):
        """X: Modality -> (B, dim). Returns (outputs per modality, cache)."""
        codes, enc_cache = [], {}
        for m in MODALITIES:
            h, c = self.encoders[m].forward_cache(X[m])
            codes.append(h)
            enc_cache[m] = c
        hc, cross_cache = self.cross.forward_cache(np.concatenate(codes, axis=1))
        outs, dec_cache = {}, {}
        for m in MODALITIES:
            outs[m], dec_cache[m] = self.decoders[m].forward_cache(hc)
        return outs, (enc_cache, cross_cache, dec_cache)

    def backward_batch(self, cache, grad_out):
        """grad_out: Modality -> (B, dim). Returns grads aligned with params()."""
        enc_cache, cross_cache, dec_cache = cache
        g_hc = None
        dec_grads = {}
        for m in MODALITIES:
            g_in, dec_grads[m] = self.decoders[m].backward(dec_cache[m], grad_out[m], need_input_grad=True)
            g_hc = g_in if g_hc is None else g_hc + g_in
        g_codes, cross_grads = self.cross.backward(cross_cache, g_hc, need_input_grad=True)
        enc_grads = {}
        for i, m in enumerate(MODALITIES):
            g = g_codes[:, i * WIDTH:(i + 1) * WIDTH]
            _, enc_grads[m] = self.encoders[m].backward(enc_cache[m], g)
        out = []
        for m in MODALITIES:
            out += enc_grads[m]
        out += cross_grads
        for m in MODALITIES:
            out += dec_grads[m]
        return out


@dataclass
class ReconOutput:
    vectors: dict      # Modality -> native-dim vector
    provenance: dict   # Modality -> "reconstructed" | "generated"


def assemble_input(features, mask, dims=None):
    """Modality-ordered input block with zero vectors in absent slots."""
    block = {}
    for m in MODALITIES:
        v = features.get(m)
        if mask[m]:
            if v is None:
                raise MaskMismatch(f"{m.key} is marked present but no vector was given")
            block[m] = np.asarray(v, dtype=np.float32)
        else:
            if v is not None:
                raise MaskMismatch(f"{m.key} is marked absent but a vector was given")
            if dims is None:
                from .cohort import MODALITY_DIMS
                d = MODALITY_DIMS[m]
            else:
                d = dims[m]
            block[m] = np.zeros(d, dtype=np.float32)
    return block


def recon_forward(model, block, mask):
    dims = model.dims
    for m in MODALITIES:
        if block[m].shape[-1] != dims[m]:
            raise DimMismatch(f"{m.key}: expected dim {dims[m]}, got {block[m].shape[-1]}")
    outs, _ = model.forward_batch({m: block[m][None, :] for m in MODALITIES})
    return ReconOutput({m: outs[m][0] for m in MODALITIES},
                       {m: RECONSTRUCTED if mask[m] else GENERATED for m in MODALITIES})


def impute(model, features, mask):
    """Present modalities keep their original vectors; absent ones are generated."""
    if all(mask.present):
        return dict(features)
    out = recon_forward(model, assemble_input(features, mask, model.dims), mask)
    return {m: (features[m] if mask[m] else out.vectors[m]) for m in MODALITIES}


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def dropout_eligible(mask):
    return len(mask.missing) <= 1


def dropout_candidates(mask):
    """Present modalities that may be zeroed: at least one of WSI/ClinGen must remain."""
    present = mask.modalities
    if len(present) < 2:
        return ()
    core = {Modality.WSI, Modality.CLINGEN}
    out = []
    for m in present:
        rest = set(present) - {m}
        if rest & core:
            out.append(m)
    return tuple(out)


def apply_dropout(mask, rng, p_drop=P_DROP):
    """Input mask after modality dropout (the loss mask is unchanged)."""
    if not dropout_eligible(mask) or rng.random() >= p_drop:
        return mask
    cands = dropout_candidates(mask)
    if not cands:
        return mask
    drop = cands[int(rng.integers(len(cands)))]
    return ModalityMask(tuple(p and m != drop for m, p in zip(MODALITIES, mask.present)))


def masked_loss_and_grads(model, X, targets, loss_mask):
    """Sum over modalities of per-dim MSE, only where ``loss_mask`` (B, 4) is set.

    Returns (mean loss over the batch, grads aligned with model.params()).
    """
    outs, cache = model.forward_batch(X)
    B = loss_mask.shape[0]
    total = 0.0
    grad_out = {}
    for m in MODALITIES:
        w = loss_mask[:, int(m)].astype(np.float32)[:, None]
        err = (outs[m] - targets[m]) * w
        total += float(np.sum(np.mean(err * err, axis=1)))
        grad_out[m] = (2.0 / outs[m].shape[1] / B) * err
    return total / B, model.backward_batch(cache, grad_out)


def _stack_inputs(rows, dims):
    """rows: list of (features, mask) -> (X, targets, mask array)."""
    X = {m: np.zeros((len(rows), dims[m]), dtype=np.float32) for m in MODALITIES}
    M = np.zeros((len(rows), len(MODALITIES)), dtype=bool)
    for i, (feats, mask) in enumerate(rows):
        for m in mask.modalities:
            X[m][i] = feats[m]
        M[i] = mask.present
    return X, M


def train_recon(cohort, selections=None, cfg=None, p_drop=P_DROP):
    """Fit the reconstruction model on the train split.

    Returns (ReconModel, metrics) with per-modality test MSE next to a
    train-mean predictor baseline.
    """
    cfg = cfg or default_config()
    train = cohort.split(TRAIN)
    if not train:
        raise EmptyCohort("no train-split patients")
    dims = {m: cohort.modality_dims[m] for m in MODALITIES}
    rows = [patient_inputs(p, selections) for p in train]
    X, M = _stack_inputs(rows, dims)
    labels = np.array([p.label for p in train])
    masks = [r[1] for r in rows]

    rng = np.random.default_rng(cfg.seed)
    model = ReconModel.init(dims, rng)
    model.meta.update({"p_drop": p_drop, "train_config": cfg.to_dict()})

    is_val = nn.validation_split(labels, cfg, cfg.seed)
    tr = np.arange(len(train)) if is_val is None else np.flatnonzero(~is_val)

    def batch_inputs(batch, augment):
        Xb = {m: X[m][batch].copy() for m in MODALITIES}
        Mb = M[batch]
        in_mask = Mb.copy()
        if augment:
            for r, i in enumerate(batch):
                dropped = apply_dropout(masks[i], rng, p_drop)
                in_mask[r] = dropped.present
            for m in MODALITIES:
                keep = in_mask[:, int(m)][:, None]
                if cfg.noise_sigma > 0:
                    Xb[m] += rng.normal(0.0, cfg.noise_sigma, size=Xb[m].shape).astype(np.float32)
                Xb[m] *= keep
        targets = {m: X[m][batch] for m in MODALITIES}
        return Xb, targets, Mb

    def step(local):
        batch = tr[local]
        Xb, T, Mb = batch_inputs(batch, True)
        return masked_loss_and_grads(model, Xb, T, Mb)

    val_fn = None
    if is_val is not None:
        va = np.flatnonzero(is_val)

        def val_fn():
            Xb, T, Mb = batch_inputs(va, False)
            outs, _ = model.forward_batch(Xb)
            return _masked_mse_total(outs, T, Mb)

    hist = nn.fit(model.params(), labels[tr], step, cfg, rng, val_fn)
    metrics = recon_metrics(model, cohort, selections)
    metrics["history"] = hist.to_dict()
    metrics["train_config"] = cfg.to_dict()
    metrics["p_drop"] = p_drop
    return model, metrics


def _masked_mse_total(outs, T, Mb):
    total = 0.0
    for m in MODALITIES:
        w = Mb[:, int(m)][:, None]
        err = (outs[m] - T[m]) * w
        total += float(np.sum(np.mean(err * err, axis=1)))
    return total / max(len(Mb), 1)


def recon_metrics(model, cohort, selections=None):
    """Per-modality MSE on present test modalities vs a train-mean predictor."""
    dims = model.dims
    train_rows = [patient_inputs(p, selections) for p in cohort.split(TRAIN)]
    test_rows = [patient_inputs(p, selections) for p in cohort.split(TEST)]
    out = {"mse": {}, "mean_predictor_mse": {}, "n_test": {}}
    if not test_rows:
        return out
    X, M = _stack_inputs(test_rows, dims)
    outs, _ = model.forward_batch(X)
    for m in MODALITIES:
        rows = M[:, int(m)]
        tr_vecs = [f[m] for f, mk in train_rows if mk[m]]
        out["n_test"][m.key] = int(rows.sum())
        if not rows.any() or not tr_vecs:
            out["mse"][m.key] = None
            out["mean_predictor_mse"][m.key] = None
            continue
        mean = np.mean(tr_vecs, axis=0)
        out["mse"][m.key] = float(np.mean((outs[m][rows] - X[m][rows]) ** 2))
        out["mean_predictor_mse"][m.key] = float(np.mean((mean - X[m][rows]) ** 2))
    return out


def save_recon(path, model):
    nn.save_container(path, model.named_models(), meta=model.meta, kind="recon")


def load_recon(path):
    models, _, meta = nn.load_container(path, kind="recon")
    enc = {m: models[f"enc.{m.key}"] for m in MODALITIES}
    dec = {m: models[f"dec.{m.key}"] for m in MODALITIES}
    return ReconModel(enc, models["cross"], dec, meta)
