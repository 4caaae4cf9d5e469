"""Run directories and the reproduce chain."""

import json
import logging
from pathlib import Path

import numpy as np
import torch

from ..errors import AdvSigError, UsageError
from .config import PARAMS, ExperimentConfig, build_config, read_config_file
from .stages import STAGE_FUNCS

log = logging.getLogger("advsig.cli")


class StageFailure(AdvSigError):
    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause}")


def run_dir_for(cfg):
    return Path(cfg.output_dir) / f"{cfg.stage}-{cfg.content_hash()[:12]}"


def _dump(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")


def run(cfg, reuse=False):
    """Execute one stage into its content-addressed run directory.

    Writes ``config.json``, ``run.log`` and ``summary.json`` next to the
    stage outputs. With ``reuse`` a directory that already holds a summary is
    returned untouched.
    """
    d = run_dir_for(cfg)
    if reuse and (d / "summary.json").exists():
        return d
    d.mkdir(parents=True, exist_ok=True)
    _dump(d / "config.json", cfg.to_dict())
    handler = logging.FileHandler(d / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("advsig")
    root.addHandler(handler)
    prev_level = root.level
    root.setLevel(logging.INFO)
    try:
        # single-threaded kernels keep floating-point reductions reproducible
        torch.set_num_threads(1)
        if cfg.stage == "reproduce":
            summary = reproduce_all(cfg.params.profile, d, cfg.seed)
        else:
            summary = STAGE_FUNCS[cfg.stage](cfg, d)
        _dump(d / "summary.json", summary)
        log.info("stage %s complete", cfg.stage)
    finally:
        root.removeHandler(handler)
        root.setLevel(prev_level)
        handler.close()
    return d


def _sub(stage, root, seed, **params):
    """Run a nested stage inside ``root``; returns ``(run dir name, summary)``."""
    params = {k: v for k, v in params.items() if v is not None}
    cfg = build_config({"stage": stage, "seed": seed, "output_dir": str(root), "params": params}, env={})
    try:
        d = run(cfg)
    except AdvSigError as exc:
        raise StageFailure(stage, exc) from exc
    return d.name, json.loads((d / "summary.json").read_text())


def _diag_comparison(a, b):
    """Per-class diagonal of two confusion matrices over the same label space."""
    space = a["label_space"]
    da, db = np.diag(np.array(a["confusion_percent"])), np.diag(np.array(b["confusion_percent"]))
    return [
        {"label": lab, a["arch"]: float(x), b["arch"]: float(y), "difference": float(x - y)}
        for lab, x, y in zip(space, da, db)
    ]


TOY = {
    "victim_epochs": 20,
    "denoiser_epochs": 10,
    "detection_epochs": 5,
    "multiclass_epochs": 40,
}


def reproduce_all(profile, root, seed=0):
    """Full toy chain; returns the consolidated report (also written to ``report.json``)."""
    if profile != "toy":
        raise UsageError(f"params.profile: only 'toy' is available, got {profile!r}")
    root = Path(root)
    P = TOY
    stages = {}

    def sub(key, stage, **params):
        name, summary = _sub(stage, root, seed, **params)
        stages[key] = name
        log.info("reproduce: %s done (%s)", key, name)
        return name, summary

    synth, corpus_s = sub("synth", "synth")
    corpus = f"{synth}/corpus"
    tv, victims_s = sub("train-victim", "train-victim", corpus=corpus, epochs=P["victim_epochs"])
    victims = f"{tv}/victims"
    svm, svm_s = sub("gen-singlevm", "gen-attacks", corpus=corpus, victims=victims, recipe="singlevm")
    mvm, mvm_s = sub("gen-multivm", "gen-attacks", corpus=corpus, victims=victims, recipe="multivm")
    svm_m, mvm_m = f"{svm}/manifest", f"{mvm}/manifest"
    den, den_s = sub("train-denoiser", "train-denoiser", manifest=mvm_m, epochs=P["denoiser_epochs"])
    denoiser = f"{den}/denoiser"

    def train_eval(key, manifest, task, arch="lresnet34-sig", input_mode="raw", estimator="oracle", epochs=None):
        clf, _ = sub(f"train-{key}", "train-clf", manifest=manifest, task=task, arch=arch,
                     input_mode=input_mode, estimator=estimator, epochs=epochs)
        _, ev = sub(f"eval-{key}", "eval", classifier=f"{clf}/classifier", manifest=manifest, estimator=estimator)
        return ev

    det_ep = P["detection_epochs"]
    detection = {
        "singlevm": train_eval("det-singlevm", svm_m, "detection", input_mode="delta-estimate", epochs=det_ep),
        "multivm": train_eval("det-multivm", mvm_m, "detection", input_mode="delta-estimate", epochs=det_ep),
        "multivm-learned-denoiser": train_eval(
            "det-multivm-learned", mvm_m, "detection", input_mode="delta-estimate", estimator=denoiser, epochs=det_ep
        ),
        "multivm-raw": train_eval("det-multivm-raw", mvm_m, "detection", input_mode="raw", epochs=det_ep),
    }
    _, loao = sub("loao", "loao", manifest=mvm_m, epochs=det_ep)

    mc_ep = P["multiclass_epochs"]
    attack_type = {}
    for ds, manifest in (("singlevm", svm_m), ("multivm", mvm_m)):
        res = {arch: train_eval(f"atk-{ds}-{arch}", manifest, "attack-type", arch=arch, epochs=mc_ep)
               for arch in ("lresnet34-sig", "ecapatdnn-sig")}
        a, b = res["lresnet34-sig"], res["ecapatdnn-sig"]
        attack_type[ds] = {
            "classifiers": res,
            "diagonal_comparison": _diag_comparison(a, b),
            "most_confused": {k: v["most_confused"] for k, v in res.items()},
        }
    victim_model = train_eval("victim-multivm", mvm_m, "victim-model", epochs=mc_ep)

    def det_row(name, ev):
        return {"dataset": name, "trained_on": "all attacks", "evaluated_on": "full-test",
                "auc": ev["auc"], "accuracy": ev["accuracy"], "eer": ev["eer"]}

    report = {
        "profile": profile,
        "seed": seed,
        "stages": stages,
        "corpus": corpus_s,
        "victims": victims_s["victims"],
        "datasets": {"singlevm": svm_s, "multivm": mvm_s},
        "denoiser": {k: v for k, v in den_s.items() if k != "history"},
        "detection": {
            "table": [det_row("singlevm", detection["singlevm"]), det_row("multivm", detection["multivm"])]
            + [dict(r, dataset="multivm", trained_on=f"all but {r['excluded_attack']}", evaluated_on=r["slice"])
               for r in loao["rows"]],
            "input_mode_comparison": {
                k: {m: detection[k][m] for m in ("auc", "accuracy", "eer")}
                for k in ("multivm", "multivm-learned-denoiser", "multivm-raw")
            },
        },
        "loao": loao,
        "attack_type": attack_type,
        "victim_model": victim_model,
    }
    _dump(root / "report.json", report)
    return report


def make_config(stage, config_path=None, seed=None, out=None, overrides=None, env=None):
    """Build a config from an optional file plus flag overrides."""
    ov = dict(overrides or {})
    ov.update({"seed": seed, "output_dir": out})
    raw = read_config_file(config_path) if config_path is not None else {"stage": stage}
    if raw.get("stage", stage) != stage:
        raise UsageError(f"stage: config file is for {raw.get('stage')!r}, command is {stage!r}")
    raw.setdefault("stage", stage)
    return build_config(raw, env, ov)


__all__ = ["ExperimentConfig", "PARAMS", "StageFailure", "make_config", "reproduce_all", "run", "run_dir_for"]
