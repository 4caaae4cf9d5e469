"""Stage runners. Each takes a resolved config and its run directory and returns a summary dict."""

import json
import logging
from pathlib import Path

import numpy as np

from ..attacks.spec import AttackSpec
from ..errors import ConfigurationError, DependencyError, UsageError
from ..metrics import (
    confusion_and_accuracy,
    detection_report,
    most_confused_pair,
    run_loao,
    write_confusion_csv,
    write_scores_csv,
)
from ..signature import (
    ClassifierConfig,
    DenoiserConfig,
    centroid_separability,
    estimate_perturbation,
    export_embeddings,
    load_classifier,
    load_denoiser,
    paired_examples,
    save_classifier,
    save_denoiser,
    score_split,
    train_denoiser,
    train_signature_classifier,
)
from ..threatdata import (
    AttackEntry,
    generate_threat_dataset,
    ingest_corpus,
    load_corpus,
    load_manifest,
    multi_vm_recipe,
    save_corpus,
    single_vm_recipe,
    synth_corpus,
    validate_manifest,
    victim_splits,
)
from ..threatdata.corpus import corpus_checksum
from ..threatdata.generate import default_attack_entries
from ..victim import (
    VICTIM_ARCHS,
    VictimTrainConfig,
    accuracy,
    build_victim,
    load_victim,
    parameter_checksum,
    save_victim,
    train_victim,
)

log = logging.getLogger("advsig.cli")


def _corpus(cfg):
    d = cfg.resolve("corpus")
    if not (d / "speakers.csv").exists():
        raise DependencyError(d / "speakers.csv", "corpus")
    corpus, splits = load_corpus(d)
    if splits is None:
        raise DependencyError(d / "splits.csv", "corpus splits")
    return corpus, splits


def _manifest(cfg):
    d = cfg.resolve("manifest")
    m = load_manifest(d)
    # keep audio in memory; classifiers read every record several times
    for r in m.records:
        m.audio[r.utt_id] = m.waveform(r.utt_id)
    return m


def _estimator(cfg):
    est = cfg.params.estimator
    if est == "oracle":
        return "oracle"
    p = Path(est)
    return load_denoiser(p if p.is_absolute() else Path(cfg.output_dir) / p)


def stage_synth(cfg, run_dir):
    p = cfg.params
    if p.ingest_csv:
        corpus = ingest_corpus(cfg.resolve("ingest_csv"), p.sample_rate, p.duration_s)
    else:
        corpus = synth_corpus(p.n_speakers, p.utts_per_speaker, p.duration_s, cfg.seed, p.sample_rate, p.noise_db)
    splits = victim_splits(corpus, cfg.seed, p.test_ratio, p.val_ratio)
    save_corpus(corpus, run_dir / "corpus", splits)
    counts = {s: sum(v == s for v in splits.values()) for s in ("train", "val", "test")}
    log.info("corpus: %d utterances, splits %s", len(corpus), counts)
    return {
        "n_utterances": len(corpus),
        "n_speakers": len({u.speaker_id for u in corpus}),
        "checksum": corpus_checksum(corpus),
        "splits": counts,
    }


def stage_train_victim(cfg, run_dir):
    p = cfg.params
    corpus, splits = _corpus(cfg)
    parts = {s: [u for u in corpus if splits.get(u.id) == s] for s in ("train", "val", "test")}
    n_spk = max(u.speaker_id for u in corpus) + 1
    out = {}
    for arch in p.archs:
        if arch not in VICTIM_ARCHS:
            raise UsageError(f"params.archs: unknown architecture {arch!r}")
        model = build_victim(arch, n_spk, seed=cfg.seed)
        hp = VictimTrainConfig(epochs=p.epochs, batch_size=p.batch_size, lr=p.lr, seed=cfg.seed)
        model, val_acc = train_victim(model, parts["train"], parts["val"], hp)
        save_victim(model, run_dir / "victims" / arch)
        out[arch] = {
            "val_accuracy": val_acc,
            "test_accuracy": accuracy(model, parts["test"]),
            "checksum": parameter_checksum(model),
        }
        log.info("victim %s: val %.3f test %.3f", arch, val_acc, out[arch]["test_accuracy"])
    return {"victims": out}


def stage_gen_attacks(cfg, run_dir):
    p = cfg.params
    corpus, splits = _corpus(cfg)
    vdir = cfg.resolve("victims")
    kw = dict(fraction=p.fraction, val_fraction=p.val_fraction, seed=cfg.seed, batch_size=p.batch_size, quantize=p.quantize)
    if p.recipe == "singlevm":
        recipe = single_vm_recipe((p.victim_ids or ["lresnet34"])[0], cw=p.cw, **kw)
    elif p.recipe == "multivm":
        recipe = multi_vm_recipe(p.victim_ids or ["ecapatdnn", "fwseresnet", "resnet34", "lresnet34"], cw=p.cw, **kw)
    else:
        raise UsageError(f"params.recipe: expected 'singlevm' or 'multivm', got {p.recipe!r}")
    if p.attacks is not None:
        entries = []
        for a in p.attacks:
            if isinstance(a, str):
                entries += default_attack_entries([a], **p.cw)
            elif isinstance(a, dict):
                entries.append(AttackEntry.from_dict(a) if "spec" in a else AttackEntry(AttackSpec.from_dict(a)))
            else:
                raise UsageError(f"params.attacks: entries must be labels or objects, got {a!r}")
        recipe.attacks = entries
    victims = {}
    for v in recipe.victims:
        victims[v] = load_victim(vdir / v)
        recipe.victim_checkpoints[v] = parameter_checksum(victims[v])
    manifest = generate_threat_dataset(recipe, victims, corpus, splits, run_dir / "manifest")
    report = validate_manifest(manifest, victims, check_audio=True)
    log.info("manifest %s: %d records, validation %s", recipe.name, len(manifest.records), report["counts"])
    header = manifest.header()
    return {
        "recipe": recipe.name,
        "n_records": len(manifest.records),
        "counts": header["counts"],
        "victim_totals": header["victim_totals"],
        "generation": header["generation"],
        "validation": {"ok": report["ok"], "violations": report["counts"]},
    }


def _residual_ratio(denoiser, xs):
    return [float(np.linalg.norm(estimate_perturbation(denoiser, x).delta_hat) / np.linalg.norm(x)) for x in xs]


def stage_train_denoiser(cfg, run_dir):
    p = cfg.params
    m = _manifest(cfg)
    hp = DenoiserConfig(epochs=p.epochs, batch_size=p.batch_size, lr=p.lr, l1_weight=p.l1_weight, seed=cfg.seed)
    model = train_denoiser(paired_examples(m, ("train", "val")), hp)
    save_denoiser(model, run_dir / "denoiser")
    # held-out quality on the test split
    test = paired_examples(m, ("test",))
    byid = m.by_id()
    adv = [(xa, xc) for xa, xc, uid in test if byid[uid].kind == "adversarial"]
    ben = [xa for xa, _, uid in test if byid[uid].kind == "benign"]
    ratios = [
        float(np.linalg.norm(estimate_perturbation(model, xa).delta_hat - (xa - xc)) / np.linalg.norm(xa - xc))
        for xa, xc in adv
        if np.linalg.norm(xa - xc) > 0
    ]
    summary = {
        "heldout_loss": model.heldout_loss,
        "initial_heldout_loss": model.initial_heldout_loss,
        "history": model.history,
        "test_delta_error_ratio_median": float(np.median(ratios)) if ratios else None,
        "test_residual_ratio_median": {
            "benign": float(np.median(_residual_ratio(model, ben))) if ben else None,
            "adversarial": float(np.median(_residual_ratio(model, [a for a, _ in adv]))) if adv else None,
        },
    }
    log.info("denoiser: held-out loss %.4f (untrained %.4f)", model.heldout_loss, model.initial_heldout_loss)
    return summary


def stage_train_clf(cfg, run_dir):
    p = cfg.params
    m = _manifest(cfg)
    hp = ClassifierConfig(epochs=p.epochs, batch_size=p.batch_size, lr=p.lr, seed=cfg.seed, include_benign=p.include_benign)
    clf = train_signature_classifier(m, p.task, p.arch, p.input_mode, hp, _estimator(cfg))
    save_classifier(clf, run_dir / "classifier")
    log.info("classifier %s/%s trained on %d classes", p.arch, p.task, len(clf.label_space))
    return {"task": p.task, "arch": p.arch, "input_mode": p.input_mode, "label_space": clf.label_space, "history": clf.history}


def evaluate_classifier(clf, manifest, split, estimator, out_dir):
    """Metrics for a trained classifier on one split; writes CSV side products into ``out_dir``."""
    recs, y, scores, emb = score_split(clf, manifest, split, estimator)
    if len(y) == 0:
        raise ConfigurationError(f"no task-eligible records in split {split!r}")
    space = clf.label_space
    out = {"task": clf.task, "arch": clf.arch_id, "input_mode": clf.input_mode, "label_space": space, "n": int(len(y))}
    export_embeddings(clf, manifest, split, out_dir / "embeddings.csv", estimator)
    if clf.task == "detection":
        s = scores[:, space.index("adversarial")]
        out.update(detection_report(s, y))
        write_scores_csv(out_dir / "scores.csv", [(r.utt_id, "none", split, float(v), int(t)) for r, v, t in zip(recs, s, y)])
    else:
        true = [space[i] for i in y]
        pred = [space[i] for i in scores.argmax(1)]
        matrix, acc = confusion_and_accuracy(true, pred, space)
        write_confusion_csv(out_dir / "confusion.csv", matrix, space)
        a, b, pct = most_confused_pair(matrix, space)
        out.update(
            {
                "accuracy": acc,
                "confusion_percent": np.round(matrix, 6).tolist(),
                "most_confused": {"true": a, "predicted": b, "percent": pct},
            }
        )
        if len(set(y.tolist())) >= 2:
            out["separability"] = centroid_separability(emb, y)
    return out


def stage_eval(cfg, run_dir):
    p = cfg.params
    clf = load_classifier(cfg.resolve("classifier"))
    m = _manifest(cfg)
    return evaluate_classifier(clf, m, p.split, _estimator(cfg), run_dir)


def stage_loao(cfg, run_dir):
    p = cfg.params
    m = _manifest(cfg)
    hp = ClassifierConfig(epochs=p.epochs, batch_size=p.batch_size, lr=p.lr, seed=cfg.seed)
    res = run_loao(m, p.attacks, p.arch, p.input_mode, hp, _estimator(cfg))
    write_scores_csv(run_dir / "scores.csv", res["scores"])
    rows = [r.to_dict() for r in res["rows"]]
    (run_dir / "loao.json").write_text(json.dumps(rows, indent=2, sort_keys=True))
    for r in rows:
        log.info("excluded %s, %s: auc %.4f", r["excluded_attack"], r["slice"], r["auc"])
    return {
        "rows": rows,
        "baseline": res["baseline"].to_dict() if res["baseline"] else None,
        "deltas": res.get("deltas", []),
    }


STAGE_FUNCS = {
    "synth": stage_synth,
    "train-victim": stage_train_victim,
    "gen-attacks": stage_gen_attacks,
    "train-denoiser": stage_train_denoiser,
    "train-clf": stage_train_clf,
    "eval": stage_eval,
    "loao": stage_loao,
}
