"""Acceptance suite: one check per criterion, each printing a PASS/FAIL line.

Run under pytest (``pytest tests/test_acceptance.py``) or directly with
``python tests/test_acceptance.py``. Pipeline runs on the default synthetic
config are shared between criteria 6-9 and cached under
``$MMSURV_ACCEPTANCE_DIR`` (a fresh temporary directory when unset).
"""
from __future__ import annotations

import contextlib
import io
import json
import math
import os
import struct
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

from mmsurv import cli, nn
from mmsurv import reconstruction as R
from mmsurv.cohort import (
    MAGIC,
    MODALITIES,
    FeatureBag,
    Modality,
    ModalityMask,
    TEST,
    decode_array,
    encode_array,
    load_cohort,
    read_feature_file,
    write_feature_file,
)
from mmsurv.errors import BadMagic, NonFiniteValue, TruncatedPayload
from mmsurv.evaluation import balanced_accuracy
from mmsurv.fusion import late_ws_predict
from mmsurv.mil import MilModel, _max_pool, mil_forward, patient_inputs, read_selections
from mmsurv.synth import SynthConfig, clean_signal, read_latents

SEEDS = (0, 1, 2, 3, 4)
CT, MRI, WSI, CG = MODALITIES
RESULTS: dict[int, tuple[bool, str]] = {}

_ROOT = None


def _root():
    global _ROOT
    if _ROOT is None:
        env = os.environ.get("MMSURV_ACCEPTANCE_DIR")
        _ROOT = Path(env) if env else Path(tempfile.mkdtemp(prefix="mmsurv-acceptance-"))
        _ROOT.mkdir(parents=True, exist_ok=True)
    return _ROOT


def _report(n, ok, detail, elapsed, limit):
    ok = ok and elapsed < limit
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  ({elapsed:.1f}s / limit {limit:.0f}s)  {detail}"
    RESULTS[n] = (ok, line)
    sys.__stdout__.write(line + "\n")
    sys.__stdout__.flush()
    return ok


def pipeline_run(seed, tag=""):
    """Output directory of a default-config pipeline run; runs it on first use."""
    out = _root() / f"seed{seed}{tag}"
    if not (out / "report.json").exists():
        with contextlib.redirect_stdout(io.StringIO()):
            code = cli.main(["pipeline", "--seed", str(seed), "--output", str(out)])
        if code != 0:
            raise RuntimeError(f"pipeline seed {seed} exited with {code}")
    return out


def report_rows(out):
    rows = json.loads((out / "report.json").read_text())["rows"]
    return {r["experiment"]: r["bacc"] for r in rows}


# ---------------------------------------------------------------------------
# 1. weighted-sum late fusion
# ---------------------------------------------------------------------------

def check_1():
    t0 = time.perf_counter()
    mask = ModalityMask.of(CT, WSI)
    probs = {CT: 0.8, MRI: 0.3, WSI: 0.5, CG: 0.1}
    w = {CT: 0.6, MRI: 0.9, WSI: 0.4, CG: 0.7}
    worked = abs(late_ws_predict(probs, w, mask) - 0.68) <= 1e-12
    single = abs(late_ws_predict(probs, w, ModalityMask.of(MRI)) - 0.3) <= 1e-12
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        mask = ModalityMask(tuple(bool(b) for b in rng.integers(0, 2, 4)))
        if not mask.modalities:
            mask = ModalityMask.of(WSI)
        p = dict(zip(MODALITIES, rng.random(4)))
        w = dict(zip(MODALITIES, rng.uniform(0.05, 1.0, 4)))
        c = float(np.exp(rng.uniform(-10, 10)))
        a = late_ws_predict(p, w, mask)
        b = late_ws_predict(p, {m: c * v for m, v in w.items()}, mask)
        worst = max(worst, abs(a - b))
    ok = worked and single and worst <= 1e-12
    return _report(1, ok, f"0.68 case {worked}, identity {single}, scale max|diff| {worst:.1e}",
                   time.perf_counter() - t0, 1)


# ---------------------------------------------------------------------------
# 2. balanced accuracy vs a confusion-matrix count
# ---------------------------------------------------------------------------

def _confusion_bacc(preds, labels):
    cm = [[0, 0], [0, 0]]
    for p, y in zip(preds, labels):
        cm[y][p] += 1
    recalls = [cm[c][c] / (cm[c][0] + cm[c][1]) for c in (0, 1) if cm[c][0] + cm[c][1]]
    return sum(recalls) / len(recalls)


def check_2():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(1, 200))
        labels = (rng.random(n) < rng.uniform(0.05, 0.95)).astype(int)
        preds = rng.integers(0, 2, n)
        if balanced_accuracy(preds, labels) != _confusion_bacc(preds.tolist(), labels.tolist()):
            mismatches += 1
    return _report(2, mismatches == 0, f"{mismatches} mismatches in 1000 pairs", time.perf_counter() - t0, 5)


# ---------------------------------------------------------------------------
# 3. MIL max pooling
# ---------------------------------------------------------------------------

def _random_mil(rng, dim):
    return MilModel(Modality.CT, nn.FeedForwardModel.mlp(dim, (16,), 1, rng))


def check_3():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    model = _random_mil(rng, 6)
    # monotone scorer: instance probability sigmoid(x[0])
    mono = MilModel(Modality.CT, nn.FeedForwardModel([np.array([[1.0]], np.float32)],
                                                     [np.zeros(1, np.float32)], ["sigmoid"]))
    fails = {"permutation": 0, "monotone": 0, "tie": 0}
    for _ in range(500):
        n = int(rng.integers(1, 9))
        X = rng.standard_normal((n, 6)).astype(np.float32)
        ids = tuple(f"i{j}" for j in range(n))
        prob, i = mil_forward(model, FeatureBag(Modality.CT, X, ids))
        perm = rng.permutation(n)
        prob_p, i_p = mil_forward(model, FeatureBag(Modality.CT, X[perm], tuple(ids[j] for j in perm)))
        if prob_p != prob or ids[perm[i_p]] != ids[i]:
            fails["permutation"] += 1
        # raising instance scores or adding an instance never lowers the bag score
        s = rng.standard_normal((n, 1)).astype(np.float32)
        up = s + np.abs(rng.standard_normal((n, 1))).astype(np.float32)
        more = np.vstack([s, rng.standard_normal((1, 1)).astype(np.float32)])
        base = mil_forward(mono, FeatureBag(Modality.CT, s, ids))[0]
        if mil_forward(mono, FeatureBag(Modality.CT, up, ids))[0] < base or \
                mil_forward(mono, FeatureBag(Modality.CT, more, ids + ("x",)))[0] < base:
            fails["monotone"] += 1
        # duplicate the top instance at random positions: smallest index wins
        k = int(rng.integers(2, 6))
        t = rng.standard_normal((k, 1)).astype(np.float32)
        top = np.float32(t.max() + 1.0)
        pos = np.sort(rng.choice(k, size=int(rng.integers(2, k + 1)), replace=False))
        t[pos] = top
        tie_ids = tuple(f"t{j}" for j in range(k))
        if mil_forward(mono, FeatureBag(Modality.CT, t, tie_ids))[1] != pos[0]:
            fails["tie"] += 1
        pooled, idx = _max_pool(np.repeat(0.5, k).astype(np.float32), np.array([0, k]))
        if idx[0] != 0:
            fails["tie"] += 1
    ok = not any(fails.values())
    return _report(3, ok, f"failures {fails} over 500 bags", time.perf_counter() - t0, 10)


# ---------------------------------------------------------------------------
# 4. reconstruction contracts
# ---------------------------------------------------------------------------

def check_4():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    dims = {CT: 12, MRI: 10, WSI: 16, CG: 39}
    model = R.ReconModel.init(dims, rng)
    fails = {"keep_original": 0, "zero_fill": 0, "dropout_rule": 0, "loss_mask": 0}
    for trial in range(200):
        present = [bool(b) for b in rng.integers(0, 2, 4)]
        present[int(rng.choice([int(WSI), int(CG)]))] = True
        mask = ModalityMask(tuple(present))
        feats = {m: rng.standard_normal(dims[m]).astype(np.float32) for m in mask.modalities}
        out = R.impute(model, feats, mask)
        if any(out[m].tobytes() != feats[m].tobytes() for m in mask.modalities) or \
                any(out[m].shape != (dims[m],) for m in MODALITIES):
            fails["keep_original"] += 1
        block = R.assemble_input(feats, mask, dims)
        if any(block[m].any() or block[m].shape != (dims[m],) for m in mask.missing) or \
                any(block[m].tobytes() != feats[m].tobytes() for m in mask.modalities):
            fails["zero_fill"] += 1
        dropped = R.apply_dropout(mask, rng, 1.0)
        n_missing = len(mask.missing)
        if n_missing >= 2 and dropped != mask:
            fails["dropout_rule"] += 1
        if n_missing <= 1 and dropped != mask and (len(mask.modalities) - len(dropped.modalities) != 1
                                                    or not (dropped[WSI] or dropped[CG])):
            fails["dropout_rule"] += 1
        if trial < 40:
            B = 3
            X = {m: rng.standard_normal((B, dims[m])).astype(np.float32) for m in MODALITIES}
            T = {m: rng.standard_normal((B, dims[m])).astype(np.float32) for m in MODALITIES}
            M = rng.random((B, 4)) < 0.6
            off = int(rng.integers(4))
            M[:, int(CG) if off == int(WSI) else int(WSI)] = True
            M[:, off] = False
            _, ga = R.masked_loss_and_grads(model, X, T, M)
            T2 = dict(T)
            T2[MODALITIES[off]] = T[MODALITIES[off]] + rng.standard_normal(T[MODALITIES[off]].shape).astype(
                np.float32) * 50
            _, gb = R.masked_loss_and_grads(model, X, T2, M)
            dec = model.decoders[MODALITIES[off]].params()
            dec_idx = [i for i, p in enumerate(model.params()) if any(p is d for d in dec)]
            if any(not np.array_equal(a, b) for a, b in zip(ga, gb)) or any(ga[i].any() for i in dec_idx):
                fails["loss_mask"] += 1
    ok = not any(fails.values())
    return _report(4, ok, f"failures {fails} over 200 trials", time.perf_counter() - t0, 30)


# ---------------------------------------------------------------------------
# 5. gradient check
# ---------------------------------------------------------------------------

def check_5():
    t0 = time.perf_counter()
    worst = {"mse": 0.0, "weighted_bce": 0.0}
    for seed in range(20):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((6, 5))
        mse_net = nn.FeedForwardModel.init([5, 7, 3], ["relu", "identity"], rng)
        worst["mse"] = max(worst["mse"], nn.grad_check(mse_net, "mse", (x, rng.standard_normal((6, 3)))))
        bce_net = nn.FeedForwardModel.mlp(5, (7,), 1, rng)
        y = rng.integers(0, 2, 6)
        w = tuple(rng.uniform(0.2, 3.0, 2))
        worst["weighted_bce"] = max(worst["weighted_bce"],
                                    nn.grad_check(bce_net, "weighted_bce", (x, y), weights=w))
    ok = max(worst.values()) < 1e-4
    return _report(5, ok, "max relative error " + ", ".join(f"{k} {v:.2e}" for k, v in worst.items()),
                   time.perf_counter() - t0, 30)


# ---------------------------------------------------------------------------
# 6. learners against the Bayes oracle
# ---------------------------------------------------------------------------

ORACLE_KEY = {"CT": "CT", "MRI": "MRI", "WSI": "WSI", "ClinGen": "ClinGen"}


def check_6():
    t0 = time.perf_counter()
    out = pipeline_run(0)
    rows = report_rows(out)
    oracle = json.loads((out / "oracle.json").read_text())
    parts, ok = [], True
    for col, key in ORACLE_KEY.items():
        got, o = rows["Baselines"][col], oracle[key]
        inside = got is not None and o - 0.10 <= got <= o + 0.01
        ok &= inside
        parts.append(f"{col} {_pct(got)} in [{_pct(o - 0.10)}, {_pct(o + 0.01)}] {'ok' if inside else 'NO'}")
    em, o = rows["Early Fusion Mean"]["AllPatients"], oracle["all"]
    inside = abs(em - o) <= 0.10
    ok &= inside
    parts.append(f"early-mean {_pct(em)} vs oracle(all) {_pct(o)} {'ok' if inside else 'NO'}")
    return _report(6, ok, "; ".join(parts), time.perf_counter() - t0, 600)


def _pct(v):
    return "n/a" if v is None else f"{100 * v:.2f}"


# ---------------------------------------------------------------------------
# 7. direction of effect over five seeds
# ---------------------------------------------------------------------------

def check_7():
    t0 = time.perf_counter()
    runs = [report_rows(pipeline_run(s)) for s in SEEDS]

    def mean(row, col="AllPatients"):
        return float(np.mean([r[row][col] for r in runs]))

    em, cat = mean("Early Fusion Mean"), mean("Early Fusion Cat")
    ws, lw = mean("Late Fusion WS"), mean("Late Fusion LW")
    cg = mean("Baselines", "ClinGen")
    rec = [r["Early Fusion Mean (W/ Reconstruction)"]["AllPatients"] for r in runs]
    plain = [r["Early Fusion Mean"]["AllPatients"] for r in runs]
    gains = [a - b for a, b in zip(rec, plain)]
    a = em > cg
    b = min(em, cat) > max(ws, lw)
    c = float(np.mean(gains)) >= -0.01 and sum(g > 0 for g in gains) >= 3
    detail = (f"(a) early-mean {_pct(em)} > ClinGen {_pct(cg)}: {a}; "
              f"(b) early mean/cat {_pct(em)}/{_pct(cat)} > late WS/LW {_pct(ws)}/{_pct(lw)}: {b}; "
              f"(c) recon gain mean {100 * np.mean(gains):+.2f}, improved on {sum(g > 0 for g in gains)}/5: {c}")
    return _report(7, a and b and c, detail, time.perf_counter() - t0, 1800)


# ---------------------------------------------------------------------------
# 8. reconstruction quality
# ---------------------------------------------------------------------------

def _generated_mse(model, cohort, selections, m, truth=None):
    """Error of regenerating modality m with m hidden, on test patients.

    With ``truth`` (clean signal per patient) every test patient is scored;
    otherwise only those that have m, against their observed features.
    """
    errs = []
    for p in cohort.split(TEST):
        feats, mask = patient_inputs(p, selections)
        if truth is None and not mask[m]:
            continue
        hidden = ModalityMask(tuple(pr and k != m for k, pr in zip(MODALITIES, mask.present)))
        gen = R.impute(model, {k: v for k, v in feats.items() if k != m}, hidden)[m]
        ref = feats[m] if truth is None else truth(p.patient_id)
        errs.append(float(np.mean((gen - ref) ** 2)))
    return float(np.mean(errs)), len(errs)


def check_8():
    t0 = time.perf_counter()
    out = pipeline_run(0)
    metrics = json.loads((out / "recon_metrics.json").read_text())
    ratios = {k: metrics["mean_predictor_mse"][k] / metrics["mse"][k] for k in metrics["mse"]
              if metrics["mse"][k]}
    q = all(r >= 2 for r in ratios.values())
    sc = SynthConfig.from_dict(json.loads((out / "cohort" / "ledger.json").read_text())["config"])
    assert sc.missing_rates["ct"] == 0.60 and sc.missing_rates["mri"] == 0.92
    cohort = load_cohort(out / "cohort" / "manifest.csv", out / "cohort", modality_dims=sc.modality_dims)
    sel = read_selections(out / "selections.csv", cohort)
    model = R.load_recon(out / "models" / "recon.mmnn")
    z = read_latents(out / "cohort" / "hidden" / "latents.csv")
    # CT and MRI share loading scales, so clean-signal errors are directly comparable.
    gen = {m: _generated_mse(model, cohort, sel, m, lambda pid, m=m: clean_signal(sc, m, z[pid]))
           for m in (CT, MRI)}
    obs = {m: _generated_mse(model, cohort, sel, m) for m in (CT, MRI)}
    order = gen[CT][0] < gen[MRI][0]
    detail = ("MSE ratio vs mean predictor " + ", ".join(f"{k} {v:.2f}" for k, v in ratios.items())
              + f" (>=2: {q}); generated vs clean signal CT {gen[CT][0]:.5f} < MRI {gen[MRI][0]:.5f}"
              f" (n={gen[CT][1]}): {order}; vs observed CT {obs[CT][0]:.5f} (n={obs[CT][1]}),"
              f" MRI {obs[MRI][0]:.5f} (n={obs[MRI][1]})")
    return _report(8, q and order, detail, time.perf_counter() - t0, 600)


# ---------------------------------------------------------------------------
# 9. byte-identical reruns
# ---------------------------------------------------------------------------

def check_9():
    t0 = time.perf_counter()
    a, b = pipeline_run(0), pipeline_run(0, "-rerun")
    files = ["report.json"] + sorted(f"models/{p.name}" for p in (a / "models").glob("*.mmnn"))
    diff = [f for f in files if (a / f).read_bytes() != (b / f).read_bytes()]
    return _report(9, not diff and len(files) > 1, f"{len(files)} files compared, differing: {diff or 'none'}",
                   time.perf_counter() - t0, 1800)


# ---------------------------------------------------------------------------
# 10. MMFV format
# ---------------------------------------------------------------------------

def _edge_values(rng, n):
    pool = np.array([0.0, -0.0, 1.0, -1.0, np.finfo(np.float32).max, -np.finfo(np.float32).max,
                     np.finfo(np.float32).tiny, np.float32(1e-45), -np.float32(1e-45)], np.float32)
    v = rng.standard_normal(n).astype(np.float32) * np.float32(10.0) ** rng.integers(-30, 30, n).astype(np.float32)
    v[~np.isfinite(v)] = 0.0
    hit = rng.random(n) < 0.2
    v[hit] = rng.choice(pool, hit.sum())
    return v


def check_10():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    tmp = Path(tempfile.mkdtemp(prefix="mmfv-"))
    edge_dims = [1, 2, 3, 39, 511, 512, 513, 2047, 2048]
    lossy = 0
    for i in range(1000):
        d = edge_dims[i] if i < len(edge_dims) else int(rng.integers(1, 2049))
        v = _edge_values(rng, d)
        path = tmp / f"{i}.mmfv"
        write_feature_file(path, v)
        back = read_feature_file(path)
        if back.dtype != np.float32 or back.tobytes() != v.tobytes() or encode_array(back) != path.read_bytes():
            lossy += 1
    good = encode_array(np.arange(4, dtype=np.float32))
    nan_buf = bytearray(good)
    struct.pack_into("<f", nan_buf, 13, float("inf"))
    cases = [
        (b"", BadMagic), (b"MMFX\x01" + good[5:], BadMagic), (b"MMFV\x02" + good[5:], BadMagic),
        (MAGIC, TruncatedPayload), (MAGIC + b"\x01\x00", TruncatedPayload),
        (MAGIC + struct.pack("<I", 2) + struct.pack("<I", 4), TruncatedPayload),
        (good[:-1], TruncatedPayload), (good + b"\x00" * 4, TruncatedPayload),
        (bytes(nan_buf), NonFiniteValue),
    ]
    wrong = []
    for buf, err in cases:
        try:
            decode_array(buf)
            wrong.append((buf[:8], "no error"))
        except err:
            pass
        except Exception as e:  # noqa: BLE001
            wrong.append((buf[:8], type(e).__name__))
    ok = lossy == 0 and not wrong
    return _report(10, ok, f"{lossy} lossy round trips of 1000; malformed-header mismatches: {wrong or 'none'}",
                   time.perf_counter() - t0, 10)


CHECKS = [check_1, check_2, check_3, check_4, check_5, check_6, check_7, check_8, check_9, check_10]


@pytest.mark.parametrize("n", range(1, 11), ids=[f"criterion_{n}" for n in range(1, 11)])
def test_criterion(n):
    assert CHECKS[n - 1](), RESULTS[n][1]


def main():
    for check in CHECKS:
        try:
            check()
        except Exception as e:  # noqa: BLE001
            n = CHECKS.index(check) + 1
            _report(n, False, f"raised {type(e).__name__}: {e}", 0.0, math.inf)
    print("\n".join(RESULTS[n][1] for n in sorted(RESULTS)))
    return 0 if all(ok for ok, _ in RESULTS.values()) else 1


if __name__ == "__main__":
    sys.exit(main())
