import numpy as np
import pytest

from mmsurv import nn
from mmsurv.synth import SynthConfig, generate

SMALL_DIMS = {"ct": 12, "mri": 12, "wsi": 16, "clingen": 39}


def small_config(**kw):
    """Low-dimensional generative model so training tests take seconds."""
    base = dict(n_patients=160, dims=SMALL_DIMS, seed=3,
                missing_rates={"ct": 0.4, "mri": 0.7, "wsi": 0.0, "clingen": 0.0},
                class_prior=0.7)
    base.update(kw)
    return SynthConfig.from_dict(base)


FAST = nn.TrainConfig(epochs=15, patience=5)


@pytest.fixture(scope="session")
def small_cohort(tmp_path_factory):
    cfg = small_config()
    cohort, ledger = generate(cfg, tmp_path_factory.mktemp("small"))
    return cohort, ledger, cfg


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys
    acc = sys.modules.get("test_acceptance")
    if acc is None or not acc.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(acc.RESULTS):
        terminalreporter.write_line(acc.RESULTS[n][1])
