"""Pin the Bayes-oracle BAcc of the shipped synthetic config to tests/golden/oracle_default.json."""
import json
from pathlib import Path

from mmsurv.synth import SynthConfig, oracle_report

N_MC, MC_SEED = 100_000, 0


def main():
    cfg = SynthConfig()
    rep = oracle_report(cfg, N_MC, MC_SEED)
    conf = cfg.to_dict()
    conf.pop("seed")
    out = {"config": conf, "n_mc": N_MC, "mc_seed": MC_SEED, **rep.to_dict()}
    path = Path(__file__).resolve().parents[1] / "tests" / "golden" / "oracle_default.json"
    path.write_text(json.dumps(out, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(path)


if __name__ == "__main__":
    main()
