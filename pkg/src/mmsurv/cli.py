"""Experiment runner: one JSON config, resumable stages, reproducible outputs.

Exit codes: 0 success, 1 usage error, 2 config error, 3 + N failure in
pipeline stage N (see ``STAGES``).
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from . import __version__, fusion, mil, nn, reconstruction, synth
from .cohort import (
    IMAGING,
    MODALITIES,
    Modality,
    TEST,
    cohort_summary,
    load_cohort,
    write_array,
    write_feature_file,
)
from .errors import InvalidConfig, MissingModel, MMSurvError
from .evaluation import EvaluationReport, evaluate_sliced, project_latents

STAGES = ("synth", "encode", "train-mil", "select", "train-recon", "train-fusion", "evaluate", "project")
TRAIN_SECTIONS = ("default", "mil", "recon", "baseline", "fusion")


class UsageError(MMSurvError):
    pass


class StageError(MMSurvError):
    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")

    @property
    def exit_code(self):
        return 3 + STAGES.index(self.stage)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def default_config_dict():
    text = resources.files("mmsurv").joinpath("default_config.json").read_text(encoding="utf-8")
    return json.loads(text)


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class ExperimentConfig:
    seed: int
    output_dir: str
    manifest: str | None = None
    feature_root: str | None = None
    tabular: str | None = None
    synth: dict | None = None
    train: dict = field(default_factory=dict)
    fusion: str | None = None
    use_reconstruction: bool = True
    n_mc: int = 100_000

    @classmethod
    def from_dict(cls, d):
        known = {"seed", "paths", "synth", "train", "fusion", "use_reconstruction", "oracle"}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown config fields: {sorted(unknown)}")
        if d.get("seed") is None:
            raise InvalidConfig("seed is mandatory")
        paths = d.get("paths") or {}
        bad = set(paths) - {"manifest", "feature_root", "tabular", "output_dir"}
        if bad:
            raise InvalidConfig(f"unknown paths: {sorted(bad)}")
        train = d.get("train") or {}
        bad = set(train) - set(TRAIN_SECTIONS)
        if bad:
            raise InvalidConfig(f"unknown train sections: {sorted(bad)}")
        mode = d.get("fusion")
        if mode is not None and mode not in fusion.MODES:
            raise InvalidConfig(f"fusion must be one of {fusion.MODES}")
        cfg = cls(
            seed=int(d["seed"]),
            output_dir=paths.get("output_dir") or "runs/default",
            manifest=paths.get("manifest"),
            feature_root=paths.get("feature_root"),
            tabular=paths.get("tabular"),
            synth=d.get("synth"),
            train=train,
            fusion=mode,
            use_reconstruction=bool(d.get("use_reconstruction", True)),
            n_mc=int((d.get("oracle") or {}).get("n_mc", 100_000)),
        )
        if cfg.manifest is None and cfg.synth is None:
            raise InvalidConfig("give either paths.manifest or a synth section")
        for section in TRAIN_SECTIONS:
            cfg.train_config(section)
        if cfg.synth is not None:
            cfg.synth_config()
        return cfg

    def to_dict(self):
        return {
            "seed": self.seed,
            "paths": {"manifest": self.manifest, "feature_root": self.feature_root,
                      "tabular": self.tabular, "output_dir": self.output_dir},
            "synth": self.synth,
            "train": self.train,
            "fusion": self.fusion,
            "use_reconstruction": self.use_reconstruction,
            "oracle": {"n_mc": self.n_mc},
        }

    def train_config(self, section, module_default=None, modality=None):
        """Shared defaults, then the stage's module defaults, then the
        stage section of the config. ``oversample_factor`` in the mil
        section may map modality keys to factors."""
        try:
            cfg = nn.TrainConfig.from_dict({**(self.train.get("default") or {}), "seed": self.seed})
            if module_default is not None:
                cfg = module_default(cfg)
            over = dict(self.train.get(section) or {}) if section != "default" else {}
            over.pop("seed", None)
            factor = over.get("oversample_factor")
            if isinstance(factor, dict):
                if modality is None:
                    over.pop("oversample_factor")
                else:
                    over["oversample_factor"] = factor[Modality(modality).key]
            return nn.TrainConfig.from_dict({**cfg.to_dict(), **over})
        except (TypeError, ValueError, KeyError) as e:
            raise InvalidConfig(f"train.{section}: {e}") from None

    def synth_config(self):
        return synth.SynthConfig.from_dict({**(self.synth or {}), "seed": self.seed})

    @property
    def out(self):
        return Path(self.output_dir)

    @property
    def cohort_paths(self):
        if self.manifest is not None:
            m = Path(self.manifest)
            root = Path(self.feature_root) if self.feature_root else m.parent
            return m, root, (Path(self.tabular) if self.tabular else None)
        d = self.out / "cohort"
        return d / "manifest.csv", d, None


def resolve_config(args):
    d = default_config_dict()
    if args.config:
        try:
            user = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as e:
            raise InvalidConfig(f"cannot read config {args.config}: {e}") from None
        except json.JSONDecodeError as e:
            raise InvalidConfig(f"{args.config}: invalid JSON ({e})") from None
        if "synth" in user and user["synth"] is None:
            d["synth"] = None
        d = _merge(d, user)
    if args.seed is not None:
        d["seed"] = args.seed
    if args.output is not None:
        d.setdefault("paths", {})["output_dir"] = args.output
    if args.skip_reconstruction:
        d["use_reconstruction"] = False
    if args.fusion is not None:
        d["fusion"] = args.fusion
    return ExperimentConfig.from_dict(d)


# ---------------------------------------------------------------------------
# Run bookkeeping
# ---------------------------------------------------------------------------

class RunLock:
    """Exclusive lock file in the output directory."""

    def __init__(self, out):
        self.path = Path(out) / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise UsageError(f"{self.path} exists: another run is writing to this directory") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(f"{os.getpid()}\n")
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _input_hashes(cfg):
    manifest, root, tab = cfg.cohort_paths
    out = {}
    if manifest.exists():
        out[str(manifest)] = _sha256(manifest)
        tab = tab or manifest.parent / "tabular.csv"
        if tab.exists():
            out[str(tab)] = _sha256(tab)
        ledger = manifest.parent / "ledger.json"
        if ledger.exists():
            out[str(ledger)] = _sha256(ledger)
    return out


def _output_hashes(out):
    skip = {"run.json", ".lock"}
    files = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name not in skip and "cohort" not in p.relative_to(out).parts[:1]:
            files[p.relative_to(out).as_posix()] = _sha256(p)
    return files


def write_run_json(cfg, stages_done):
    run = {
        "tool": "mmsurv",
        "version": __version__,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "stages": list(stages_done),
        "inputs": _input_hashes(cfg),
        "outputs": _output_hashes(cfg.out),
    }
    _write_json(cfg.out / "run.json", run)


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes((json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def _read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def _models(cfg):
    return cfg.out / "models"


def _model_path(cfg, name):
    return _models(cfg) / f"{name}.mmnn"


def _require(path):
    if not Path(path).is_file():
        raise MissingModel(f"{path}: model file not found")
    return path


def load_run_cohort(cfg):
    manifest, root, tab = cfg.cohort_paths
    if not manifest.exists():
        raise MissingModel(f"{manifest}: cohort not found (run `synth` first)")
    dims = None
    if cfg.synth is not None and cfg.manifest is None:
        dims = cfg.synth_config().modality_dims
    return load_cohort(manifest, root, tab, modality_dims=dims)


def stage_synth(cfg):
    sc = cfg.synth_config()
    _, ledger = synth.generate(sc, cfg.out / "cohort")
    report = synth.oracle_report(sc, n_mc=cfg.n_mc, seed=cfg.seed)
    _write_json(cfg.out / "oracle.json", {k: _r(v) for k, v in report.bayes_bacc.items()} |
                {"analytic": {k: _r(v) for k, v in report.analytic.items()}})
    return ledger


def _r(v):
    return None if v is None else round(float(v), 10)


def stage_encode(cfg):
    """Materialise every patient's ClinGen vector and the cohort summary."""
    cohort = load_run_cohort(cfg)
    enc = cfg.out / "encoded"
    for p in cohort:
        write_feature_file(enc / f"{p.patient_id}.clingen.mmfv", p.clingen_vector())
    _write_json(cfg.out / "cohort_summary.json", cohort_summary(cohort))
    return cohort


def stage_train_mil(cfg, cohort=None):
    cohort = cohort or load_run_cohort(cfg)
    metrics = {}
    for m in IMAGING:
        if not any(m in p.bags for p in cohort.split("train")):
            continue
        tc = cfg.train_config("mil", lambda c, m=m: mil.default_config(m, c), m)
        model, met = mil.train_mil(cohort, m, tc)
        mil.save_mil(_model_path(cfg, f"mil_{m.key}"), model, {"train_config": met["train_config"]})
        metrics[m.key] = met
    _write_json(cfg.out / "mil_metrics.json", _strip_history(metrics))
    return metrics


def _strip_history(d):
    if isinstance(d, dict):
        return {k: _strip_history(v) for k, v in d.items() if k != "history"}
    return d


def _load_mil_models(cfg, cohort):
    models = {}
    for m in IMAGING:
        path = _model_path(cfg, f"mil_{m.key}")
        if path.exists():
            models[m] = mil.load_mil(path)
        elif any(m in p.bags and len(p.bags[m]) > 1 for p in cohort):
            raise MissingModel(f"{path}: model file not found")
    return models


def stage_select(cfg, cohort=None):
    cohort = cohort or load_run_cohort(cfg)
    selections = mil.select_best(cohort, _load_mil_models(cfg, cohort))
    mil.write_selections(cfg.out / "selections.csv", selections)
    return selections


def _selections(cfg, cohort):
    path = cfg.out / "selections.csv"
    if not path.exists():
        raise MissingModel(f"{path}: selections not found (run `select` first)")
    return mil.read_selections(path, cohort)


def stage_train_recon(cfg, cohort=None):
    cohort = cohort or load_run_cohort(cfg)
    selections = _selections(cfg, cohort)
    model, metrics = reconstruction.train_recon(
        cohort, selections, cfg.train_config("recon", reconstruction.default_config))
    reconstruction.save_recon(_model_path(cfg, "recon"), model)
    _write_json(cfg.out / "recon_metrics.json", _strip_history(metrics))
    _write_imputed(cfg, cohort, selections, model)
    return model


def _write_imputed(cfg, cohort, selections, model):
    out = cfg.out / "imputed"
    lines = ["patient_id,split,modality,provenance,path"]
    for p in cohort:
        feats, mask = mil.patient_inputs(p, selections)
        full = reconstruction.impute(model, feats, mask)
        for m in MODALITIES:
            if mask[m]:
                lines.append(f"{p.patient_id},{p.split},{m.key},original,")
                continue
            rel = f"{p.patient_id}.{m.key}.mmfv"
            write_feature_file(out / rel, full[m])
            lines.append(f"{p.patient_id},{p.split},{m.key},{reconstruction.GENERATED},imputed/{rel}")
    (out / "provenance.csv").write_bytes(("\n".join(lines) + "\n").encode("utf-8"))


def _fusion_jobs(cfg, only_mode=None):
    modes = [only_mode] if only_mode else list(fusion.MODES)
    jobs = [(m, False) for m in modes]
    if cfg.use_reconstruction:
        jobs += [(m, True) for m in modes if m in ("mean", "concat")]
    return jobs


def _fusion_name(mode, rec):
    return f"fusion_{mode}" + ("_recon" if rec else "")


def stage_train_fusion(cfg, cohort=None):
    cohort = cohort or load_run_cohort(cfg)
    selections = _selections(cfg, cohort)
    bcfg = cfg.train_config("baseline", fusion.default_config)
    baselines = {}
    for m in MODALITIES:
        b = fusion.baseline_train(cohort, selections, m, bcfg)
        fusion.save_baseline(_model_path(cfg, f"baseline_{m.key}"), b)
        baselines[m] = b
    recon = None
    jobs = _fusion_jobs(cfg, cfg.fusion)
    if any(rec for _, rec in jobs):
        recon = reconstruction.load_recon(_require(_model_path(cfg, "recon")))
    fcfg = cfg.train_config("fusion", fusion.default_config)
    combined = EvaluationReport({"seed": cfg.seed})
    for mode, rec in jobs:
        system, rep = fusion.train_fusion(cohort, selections, mode, rec, recon, baselines, fcfg)
        fusion.save_fusion(_model_path(cfg, _fusion_name(mode, rec)), system)
        combined.add(system.name, rep.rows[system.name], rep.counts[system.name])
    (cfg.out / "fusion_report.json").write_bytes(combined.to_json().encode("utf-8"))
    return combined


def build_report(cfg, cohort, selections):
    """Test-split report from saved models only."""
    test = cohort.split(TEST)
    report = EvaluationReport({"seed": cfg.seed, "n_test": len(test)})
    mil_models = {m: mil.load_mil(p) for m in IMAGING
                  if (p := _model_path(cfg, f"mil_{m.key}")).exists()}
    if mil_models:
        per_col = {m.column: mil.mil_probs(mm, test) for m, mm in mil_models.items()}
        report.add("MIL", *evaluate_sliced(per_col, test))
    baselines = {}
    for m in MODALITIES:
        baselines[m] = fusion.load_baseline(_require(_model_path(cfg, f"baseline_{m.key}")))
    per_col = {m.column: fusion.baseline_probs(b, test, selections) for m, b in baselines.items()}
    report.add("Baselines", *evaluate_sliced(per_col, test))
    recon = None
    recon_path = _model_path(cfg, "recon")
    jobs = _fusion_jobs(cfg)
    if any(rec for _, rec in jobs):
        recon = reconstruction.load_recon(_require(recon_path))
    for mode, rec in jobs:
        path = _model_path(cfg, _fusion_name(mode, rec))
        if cfg.fusion is not None and mode != cfg.fusion and not path.exists():
            continue
        system = fusion.load_fusion(_require(path), baselines, recon if rec else None)
        cells, counts = fusion.evaluate_fusion(system, test, selections)
        report.add(system.name, cells, counts)
    return report


def stage_evaluate(cfg, cohort=None):
    cohort = cohort or load_run_cohort(cfg)
    selections = _selections(cfg, cohort)
    report = build_report(cfg, cohort, selections)
    (cfg.out / "report.json").write_bytes(report.to_json().encode("utf-8"))
    (cfg.out / "report.txt").write_bytes(report.to_text().encode("utf-8"))
    return report


def stage_project(cfg, cohort=None):
    cohort = cohort or load_run_cohort(cfg)
    selections = _selections(cfg, cohort)
    recon = reconstruction.load_recon(_require(_model_path(cfg, "recon")))
    dump = project_latents(recon, cohort.split(TEST), selections)
    for m in MODALITIES:
        coords, prov = dump.points[m]
        raw, _, pids = dump.vectors[m]
        lines = ["x,y,provenance"] + [f"{x!r},{y!r},{p}" for (x, y), p in
                                      zip(coords.tolist(), prov)]
        (cfg.out / f"projection_{m.key}.csv").write_bytes(("\n".join(lines) + "\n").encode("utf-8"))
        write_array(cfg.out / f"latents_{m.key}.mmfv", raw)
        rows = ["row,patient_id,provenance"] + [f"{i},{pid},{p}" for i, (pid, p) in enumerate(zip(pids, prov))]
        (cfg.out / f"latents_{m.key}.csv").write_bytes(("\n".join(rows) + "\n").encode("utf-8"))
    return dump


def run_pipeline(cfg):
    """synth (when configured) -> encode -> train-mil -> select -> train-recon
    -> train-fusion -> evaluate -> project. Returns the EvaluationReport."""
    done = []

    def run(stage, fn, *a):
        try:
            result = fn(cfg, *a)
        except MMSurvError as e:
            raise StageError(stage, e) from e
        except (ValueError, OSError, KeyError) as e:
            raise StageError(stage, e) from e
        done.append(stage)
        return result

    if cfg.manifest is None:
        run("synth", stage_synth)
    cohort = run("encode", stage_encode)
    run("train-mil", stage_train_mil, cohort)
    run("select", stage_select, cohort)
    if cfg.use_reconstruction:
        run("train-recon", stage_train_recon, cohort)
    run("train-fusion", stage_train_fusion, cohort)
    report = run("evaluate", stage_evaluate, cohort)
    if cfg.use_reconstruction:
        run("project", stage_project, cohort)
    write_run_json(cfg, done)
    return report


COMMANDS = {
    "synth": stage_synth,
    "encode": stage_encode,
    "train-mil": stage_train_mil,
    "select": stage_select,
    "train-recon": stage_train_recon,
    "train-fusion": stage_train_fusion,
    "evaluate": stage_evaluate,
    "project": stage_project,
}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON experiment config (merged over the shipped defaults)")
    common.add_argument("--seed", type=int, help="seed for generation and every training stage")
    common.add_argument("--output", help="output directory")
    common.add_argument("--skip-reconstruction", action="store_true",
                        help="train no reconstruction model and omit the reconstruction rows")
    common.add_argument("--fusion", choices=fusion.MODES, help="restrict train-fusion to one mode")
    p = _Parser(prog="mmsurv", description="Multi-modal survival prediction experiments.",
                parents=[common])
    p.add_argument("--version", action="version", version=f"mmsurv {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in (*COMMANDS, "pipeline"):
        sub.add_parser(name, parents=[common], help=f"run the {name} stage" if name != "pipeline"
                       else "run every stage in order")
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"mmsurv: usage error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    try:
        cfg = resolve_config(args)
    except InvalidConfig as e:
        print(f"mmsurv: config error: {e}", file=sys.stderr)
        return 2
    try:
        with RunLock(cfg.out):
            if args.command == "pipeline":
                report = run_pipeline(cfg)
                sys.stdout.write(report.to_text())
            else:
                stage = args.command
                try:
                    COMMANDS[stage](cfg)
                except InvalidConfig:
                    raise
                except (MMSurvError, ValueError, OSError, KeyError) as e:
                    raise StageError(stage, e) from e
                write_run_json(cfg, [stage])
    except UsageError as e:
        print(f"mmsurv: usage error: {e}", file=sys.stderr)
        return 1
    except InvalidConfig as e:
        print(f"mmsurv: config error: {e}", file=sys.stderr)
        return 2
    except StageError as e:
        if isinstance(e.cause, InvalidConfig):
            print(f"mmsurv: config error: {e.cause}", file=sys.stderr)
            return 2
        print(f"mmsurv: {e}", file=sys.stderr)
        return e.exit_code
    return 0


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
