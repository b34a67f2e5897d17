"""Patient-level multiple-instance learning with max pooling, and scan/WSI selection."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .cohort import IMAGING, MODALITIES, Modality, TEST, TRAIN, modality_mask
from .errors import DimMismatch, EmptyModality, MissingDependency
from .evaluation import balanced_accuracy

HIDDEN = {
    Modality.CT: (256, 128),
    Modality.MRI: (256, 128),
    Modality.WSI: (512, 256, 128),
}
OVERSAMPLE = {Modality.CT: 8, Modality.MRI: 16, Modality.WSI: 8}
NOISE_SIGMA = 0.01


def default_config(modality, base=None):
    base = base or nn.TrainConfig()
    return base.replace(oversample_factor=OVERSAMPLE[Modality(modality)], noise_sigma=NOISE_SIGMA)


@dataclass
class MilModel:
    modality: Modality
    scorer: nn.FeedForwardModel

    def instance_probs(self, instances):
        # One row at a time: batched GEMM rounding depends on row position.
        x = np.asarray(instances, dtype=np.float32)
        return np.array([self.scorer.forward(row[None, :])[0, 0] for row in x], dtype=np.float32)


@dataclass(frozen=True)
class Selection:
    patient_id: str
    modality: Modality
    instance_id: str
    index: int
    bag_prob: float | None
    bypassed: bool


def new_model(modality, dim, rng):
    return MilModel(Modality(modality), nn.FeedForwardModel.mlp(dim, HIDDEN[Modality(modality)], 1, rng))


def mil_forward(model, bag):
    """(bag probability, argmax index); ties go to the smallest index."""
    if bag.modality != model.modality:
        raise DimMismatch(f"{model.modality.key} model applied to a {bag.modality.key} bag")
    if bag.dim != model.scorer.input_dim:
        raise DimMismatch(f"bag dim {bag.dim} != model input {model.scorer.input_dim}")
    probs = model.instance_probs(bag.instances)
    i = int(np.argmax(probs))
    return float(probs[i]), i


def _stack_bags(bags, batch, rng=None, sigma=0.0):
    """Stack the instances of a batch of bags; returns (X, segment offsets)."""
    blocks = [bags[i] for i in batch]
    X = np.concatenate(blocks)
    if sigma > 0 and rng is not None:
        X = X + rng.normal(0.0, sigma, size=X.shape).astype(X.dtype)
    offsets = np.cumsum([0] + [len(b) for b in blocks])
    return X, offsets


def _max_pool(p, offsets):
    idx = np.array([offsets[j] + int(np.argmax(p[offsets[j]:offsets[j + 1]]))
                    for j in range(len(offsets) - 1)])
    return p[idx], idx


def train_mil(cohort, modality, cfg=None, seed=None):
    """Fit a max-pooling MIL scorer on the train-split bags of one modality.

    Returns (MilModel, metrics) where metrics holds train/test bag-level BAcc
    and the loss history.
    """
    modality = Modality(modality)
    cfg = cfg or default_config(modality)
    if seed is not None:
        cfg = cfg.replace(seed=seed)
    train = [p for p in cohort.split(TRAIN) if modality in p.bags]
    if not train:
        raise EmptyModality(f"no train-split {modality.key} bags")
    bags = [p.bags[modality].instances for p in train]
    labels = np.array([p.label for p in train])
    rng = np.random.default_rng(cfg.seed)
    model = new_model(modality, bags[0].shape[1], rng)
    scorer = model.scorer

    is_val = nn.validation_split(labels, cfg, cfg.seed)
    tr = np.arange(len(bags)) if is_val is None else np.flatnonzero(~is_val)
    w0, w1 = cfg.class_weights or nn.class_weights_from_labels(labels[tr], cfg.oversample_factor)
    tr_bags = [bags[i] for i in tr]
    tr_labels = labels[tr]

    def bag_loss(batch_bags, batch_labels, batch, noise):
        X, offsets = _stack_bags(batch_bags, batch, rng, cfg.noise_sigma if noise else 0.0)
        out, cache = scorer.forward_cache(X)
        pooled, idx = _max_pool(out[:, 0], offsets)
        y = batch_labels[batch].astype(np.float32)
        loss = float(np.mean(nn.weighted_bce(pooled, y, w0, w1)))
        return loss, out, cache, pooled, idx, y

    def step(batch):
        loss, out, cache, pooled, idx, y = bag_loss(tr_bags, tr_labels, batch, True)
        g = np.zeros_like(out)
        g[idx, 0] = nn.weighted_bce_grad(pooled, y, w0, w1) / len(batch)
        _, grads = scorer.backward(cache, g)
        return loss, grads

    val_fn = None
    if is_val is not None:
        va = np.flatnonzero(is_val)
        va_bags = [bags[i] for i in va]
        va_labels = labels[va]

        def val_fn():
            return bag_loss(va_bags, va_labels, np.arange(len(va_bags)), False)[0]

    hist = nn.fit(scorer.params(), tr_labels, step, cfg, rng, val_fn)
    metrics = {
        "modality": modality.key,
        "train_bacc": mil_bacc(model, cohort.split(TRAIN)),
        "test_bacc": mil_bacc(model, cohort.split(TEST)),
        "n_train_bags": len(train),
        "history": hist.to_dict(),
        "train_config": cfg.to_dict(),
    }
    return model, metrics


def mil_probs(model, patients):
    return {p.patient_id: mil_forward(model, p.bags[model.modality])[0]
            for p in patients if model.modality in p.bags}


def mil_bacc(model, patients):
    probs = mil_probs(model, patients)
    if not probs:
        return None
    pts = [p for p in patients if p.patient_id in probs]
    return balanced_accuracy([int(probs[p.patient_id] >= 0.5) for p in pts], [p.label for p in pts])


def select_best(cohort, models):
    """patient_id -> modality -> Selection, only where a bag exists.

    Singleton bags are taken as-is without evaluating any model.
    """
    out = {}
    for p in cohort:
        sel = {}
        for m in IMAGING:
            bag = p.bags.get(m)
            if bag is None:
                continue
            if len(bag) == 1:
                sel[m] = Selection(p.patient_id, m, bag.instance_ids[0], 0, None, True)
                continue
            if m not in models:
                raise MissingDependency(f"{p.patient_id}: {len(bag)} {m.key} instances but no MIL model")
            prob, i = mil_forward(models[m], bag)
            sel[m] = Selection(p.patient_id, m, bag.instance_ids[i], i, prob, False)
        out[p.patient_id] = sel
    return out


def patient_inputs(p, selections=None):
    """Selected vector per present modality plus the patient's mask.

    Without selections the first instance of each bag is used.
    """
    mask = modality_mask(p)
    feats = {}
    for m in MODALITIES:
        if not mask[m]:
            continue
        if m is Modality.CLINGEN:
            feats[m] = p.clingen_vector()
            continue
        bag = p.bags[m]
        idx = 0
        if selections is not None:
            s = selections.get(p.patient_id, {}).get(m)
            if s is not None:
                idx = bag.instance_ids.index(s.instance_id)
        feats[m] = bag.instances[idx]
    return feats, mask


SELECTION_COLUMNS = ("patient_id", "modality", "instance_id", "bag_prob", "bypassed")


def write_selections(path, selections):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SELECTION_COLUMNS)
    for pid, per in selections.items():
        for m in IMAGING:
            s = per.get(m)
            if s is None:
                continue
            w.writerow((pid, m.key, s.instance_id, "" if s.bag_prob is None else repr(float(s.bag_prob)),
                        int(s.bypassed)))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(buf.getvalue().encode("utf-8"))


def read_selections(path, cohort):
    out = {p.patient_id: {} for p in cohort}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            m = Modality.parse(row["modality"])
            p = cohort.get(row["patient_id"])
            idx = p.bags[m].instance_ids.index(row["instance_id"])
            prob = float(row["bag_prob"]) if row["bag_prob"] else None
            out[p.patient_id][m] = Selection(p.patient_id, m, row["instance_id"], idx, prob,
                                             row["bypassed"] == "1")
    return out


def save_mil(path, model, meta=None):
    nn.save_container(path, {"scorer": model.scorer}, meta={"modality": model.modality.key, **(meta or {})},
                      kind="mil")


def load_mil(path):
    models, _, meta = nn.load_container(path, kind="mil")
    return MilModel(Modality.parse(meta["modality"]), models["scorer"])

