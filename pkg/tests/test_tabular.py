import numpy as np
import pytest

from mmsurv import tabular
from mmsurv.errors import UnknownLevel
from mmsurv.tabular import (
    CLINGEN_DIM,
    DEFAULT_SCHEMA,
    UNKNOWN,
    age_bucket,
    encode_clingen,
    encode_onehot,
    encode_ordinal,
    slot_layout,
)


def test_dim_is_sum_of_slot_counts():
    # 6 ordinals + gender 3 + history 3 + age 12 + race 6 + three genes x 3
    assert CLINGEN_DIM == 6 + (3 + 3 + 12 + 6 + 3 + 3 + 3) == 39
    assert slot_layout()[-1][2] == CLINGEN_DIM


def test_ordinal_extremes_and_middle():
    assert encode_ordinal("T", DEFAULT_SCHEMA.ordinals["T"][0]) == 0.0
    assert encode_ordinal("grade", "5") == 1.0
    assert encode_ordinal("N", "1") == 0.5


def test_t_has_eleven_levels():
    assert len(DEFAULT_SCHEMA.ordinals["T"]) == 11
    assert encode_ordinal("T", "T4") == 1.0
    assert encode_ordinal("T", "T1a") == pytest.approx(2 / 10)


def test_ordinal_unknown_is_sentinel():
    assert encode_ordinal("ajcc_stage", UNKNOWN) == -1.0


def test_ordinal_monotone():
    for var, levels in DEFAULT_SCHEMA.ordinals.items():
        vals = [encode_ordinal(var, lv) for lv in levels]
        assert all(a < b for a, b in zip(vals, vals[1:])), var


def test_undeclared_levels_raise():
    with pytest.raises(UnknownLevel):
        encode_ordinal("T", "T5")
    with pytest.raises(UnknownLevel):
        encode_onehot("race", "martian")
    with pytest.raises(UnknownLevel):
        encode_clingen({"T": "T9"})
    with pytest.raises(UnknownLevel):
        encode_clingen({"shoe_size": "42"})


def test_onehot_definitions():
    assert encode_onehot("gender", "male").tolist() == [1, 0, 0]
    race = encode_onehot("race", "asian")
    assert race.shape == (6,) and race.sum() == 1
    assert race[DEFAULT_SCHEMA.categoricals["race"].index("asian")] == 1
    assert encode_onehot("VHL", UNKNOWN).tolist() == [0, 0, 1]


def test_all_unknown_vector():
    v = encode_clingen({}, None)
    assert v.shape == (CLINGEN_DIM,)
    assert v[:6].tolist() == [-1.0] * 6
    for var, lo, hi in slot_layout()[6:]:
        block = v[lo:hi]
        assert block.sum() == 1 and block[-1] == 1, var


def test_each_onehot_block_sums_to_one():
    raw = {"T": "T2b", "N": "0", "M": "1", "Mp": "2", "ajcc_stage": "III", "grade": "2",
           "gender": "female", "cancer_history": "no", "age_bucket": age_bucket(63), "race": "white"}
    gen = {"VHL": "mutated", "PBMR1": "not_mutated", "TTN": "mutated"}
    v = encode_clingen(raw, gen)
    for var, lo, hi in slot_layout()[6:]:
        assert v[lo:hi].sum() == 1, var
    assert np.array_equal(v, encode_clingen(dict(raw), dict(gen)))


def test_missing_genomics_maps_to_unknown_slots():
    raw = {"gender": "male"}
    v = encode_clingen(raw, None)
    for var, lo, hi in slot_layout():
        if var in tabular.GENES:
            assert v[hi - 1] == 1


def test_age_buckets():
    assert age_bucket(0) == "0-9"
    assert age_bucket(109) == "100-109"
    assert len(tabular.AGE_BUCKETS) == 11
    with pytest.raises(UnknownLevel):
        age_bucket(110)
