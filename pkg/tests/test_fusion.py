import numpy as np
import pytest

from mmsurv import fusion
from mmsurv.cohort import MODALITIES, Modality, ModalityMask
from mmsurv.errors import AllMasked, MissingDependency
from mmsurv.fusion import early_combine, late_lw_predict, late_ws_predict, masked_softmax

from conftest import FAST

CT, MRI, WSI, CG = MODALITIES


def _mask(*present):
    return ModalityMask(tuple(m in present for m in MODALITIES))


def test_ws_worked_example():
    p = {CT: 0.8, MRI: 0.1, WSI: 0.5, CG: 0.9}
    w = {CT: 0.6, MRI: 0.3, WSI: 0.4, CG: 0.2}
    assert late_ws_predict(p, w, _mask(CT, WSI)) == pytest.approx(0.68, abs=1e-12)


def test_ws_single_and_equal_weights():
    p = {CT: 0.1, MRI: 0.2, WSI: 0.3, CG: 0.6}
    assert late_ws_predict(p, dict.fromkeys(MODALITIES, 7.0), _mask(WSI)) == 0.3
    assert late_ws_predict(p, dict.fromkeys(MODALITIES, 2.0), _mask(MRI, WSI, CG)) == pytest.approx(
        (0.2 + 0.3 + 0.6) / 3, abs=1e-15)


def test_ws_all_masked():
    with pytest.raises(AllMasked):
        late_ws_predict(dict.fromkeys(MODALITIES, 0.5), dict.fromkeys(MODALITIES, 1.0), _mask())


def test_lw_cases():
    p = {CT: 0.2, MRI: 0.4, WSI: 0.9, CG: 0.7}
    assert late_lw_predict(p, np.zeros(4), _mask(CT, WSI, CG)) == pytest.approx((0.2 + 0.9 + 0.7) / 3)
    assert late_lw_predict(p, np.array([3.0, -1.0, 5.0, 0.0]), _mask(MRI)) == pytest.approx(0.4)
    assert late_lw_predict(p, np.array([60.0, 0, 0, 0]), _mask(CT, WSI)) == pytest.approx(0.2, abs=1e-12)


def test_masked_softmax_support_and_sum(rng):
    theta = rng.standard_normal(4)
    a = masked_softmax(theta, _mask(CT, CG))
    assert a[1] == a[2] == 0 and a.sum() == pytest.approx(1.0)


def test_early_combine_modes():
    proj = {CT: np.array([1.0, 1.0]), MRI: np.array([9.0, 9.0]),
            WSI: np.array([3.0, 3.0]), CG: np.array([0.0, 4.0])}
    assert early_combine(proj, _mask(CT, WSI), "mean").tolist() == [2.0, 2.0]
    cat = early_combine(proj, _mask(CT, WSI, CG), "concat")
    assert cat.shape == (8,) and cat[2:4].tolist() == [0.0, 0.0]
    assert cat[6:].tolist() == [0.0, 4.0]
    with pytest.raises(AllMasked):
        early_combine(proj, _mask(), "mean")


def test_oversample_default():
    assert fusion.default_config().oversample_factor == 6


@pytest.fixture(scope="module")
def trained(small_cohort):
    cohort, _, _ = small_cohort
    sel = None
    base = {m: fusion.baseline_train(cohort, sel, m, FAST) for m in MODALITIES}
    return cohort, sel, base


def test_baseline_deterministic(trained):
    cohort, sel, base = trained
    again = fusion.baseline_train(cohort, sel, CG, FAST)
    assert again.train_bacc == base[CG].train_bacc
    for a, b in zip(again.head.params(), base[CG].head.params()):
        assert np.array_equal(a, b)


def test_late_requires_baselines(trained):
    cohort, sel, _ = trained
    with pytest.raises(MissingDependency):
        fusion.train_fusion(cohort, sel, "ws", baselines=None, cfg=FAST)
    with pytest.raises(MissingDependency):
        fusion.train_fusion(cohort, sel, "mean", use_reconstruction=True, cfg=FAST)


@pytest.mark.parametrize("mode", fusion.MODES)
def test_fusion_round_trip(trained, mode, tmp_path):
    cohort, sel, base = trained
    system, report = fusion.train_fusion(cohort, sel, mode, baselines=base, cfg=FAST)
    row = report[system.name]
    assert 0.0 <= row["AllPatients"] <= 1.0
    path = tmp_path / f"{mode}.mmnn"
    fusion.save_fusion(path, system)
    back = fusion.load_fusion(path, baselines=base)
    test = cohort.split("test")
    assert back.predict(test, sel) == system.predict(test, sel)


def test_ws_uses_train_bacc_weights(trained):
    cohort, sel, base = trained
    system, _ = fusion.train_fusion(cohort, sel, "ws", baselines=base, cfg=FAST)
    p = cohort.split("test")[0]
    rows = fusion.fusion_inputs([p], sel)
    probs = {m: fusion.baseline_probs(base[m], [p], sel).get(p.patient_id, 0.0) for m in MODALITIES}
    w = {m: base[m].train_bacc for m in MODALITIES}
    assert system.predict([p], sel)[p.patient_id] == pytest.approx(late_ws_predict(probs, w, rows[0][1]))


def test_modalities_subset_hides_others(trained):
    cohort, sel, _ = trained
    rows = fusion.fusion_inputs(cohort.split("test"), sel, modalities=(Modality.CLINGEN,))
    assert all(mk.modalities == (Modality.CLINGEN,) for _, mk in rows)


def test_masked_mean_equals_plain_mean_when_full(rng):
    proj = {m: rng.standard_normal(5) for m in MODALITIES}
    got = early_combine(proj, ModalityMask.full(), "mean")
    np.testing.assert_array_equal(got, np.mean([proj[m] for m in MODALITIES], axis=0))


def test_concat_ignores_mapping_order(rng):
    proj = {m: rng.standard_normal(3) for m in MODALITIES}
    reversed_proj = dict(reversed(list(proj.items())))
    mask = _mask(CT, WSI, CG)
    assert np.array_equal(early_combine(proj, mask, "concat"), early_combine(reversed_proj, mask, "concat"))


def test_lw_with_single_modality_matches_baseline(trained):
    cohort, sel, base = trained
    system, report = fusion.train_fusion(cohort, sel, "lw", baselines=base, cfg=FAST, modalities=(CG,))
    test = cohort.split("test")
    probs = fusion.baseline_probs(base[CG], test, sel)
    assert system.predict(test, sel) == pytest.approx(probs, abs=1e-6)


def test_reconstruction_fills_every_slot(trained):
    from mmsurv import reconstruction as R
    cohort, sel, _ = trained
    recon = R.ReconModel.init(cohort.modality_dims, np.random.default_rng(0))
    rows = fusion.fusion_inputs(cohort.split("test"), sel, recon)
    assert all(mk == ModalityMask.full() and set(f) == set(MODALITIES) for f, mk in rows)
