"""Leave-one-attack-out detection ablation."""

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..errors import ConfigurationError
from .scores import detection_report

SLICES = ("full-test", "test-minus-attack", "benign-plus-attack")


@dataclass
class AblationRow:
    excluded_attack: str
    slice: str
    auc: float
    accuracy: float
    eer: float
    n: int

    def to_dict(self):
        return asdict(self)


def slice_mask(records, excluded, name):
    """Boolean mask over test ``records`` for one evaluation slice."""
    adv_excl = np.array([r.kind == "adversarial" and r.attack_label == excluded for r in records], dtype=bool)
    benign = np.array([r.kind == "benign" for r in records], dtype=bool)
    if name == "full-test":
        return np.ones(len(records), dtype=bool)
    if name == "test-minus-attack":
        return ~adv_excl
    if name == "benign-plus-attack":
        return benign | adv_excl
    raise ConfigurationError(f"unknown slice {name!r}")


def run_loao(manifest, attack_list=None, arch_id="lresnet34-sig", input_mode="delta-estimate",
             hyperparams=None, estimator="oracle", include_baseline=True):
    """Train one detector per excluded attack and score it on the three test slices.

    Returns a dict with ``rows`` (3 per excluded attack), ``baseline`` (the
    detector trained on every attack, scored on the full test split),
    ``deltas`` (each row's AUC minus the baseline AUC) and ``scores``
    (``utt_id, excluded, slice, score, label`` tuples for histogramming).
    """
    from ..signature.classifier import score_split, train_signature_classifier

    present = manifest.attack_labels()
    attack_list = list(attack_list) if attack_list is not None else present
    missing = [a for a in attack_list if a not in present]
    if missing:
        raise ConfigurationError(f"attacks not in manifest: {missing}")

    def evaluate(clf, excluded):
        recs, y, scores, _ = score_split(clf, manifest, "test", estimator)
        s = scores[:, clf.label_space.index("adversarial")]
        rows, dist = [], []
        for name in SLICES if excluded is not None else ("full-test",):
            m = slice_mask(recs, excluded, name)
            rep = detection_report(s[m], y[m])
            rows.append(AblationRow(excluded or "none", name, rep["auc"], rep["accuracy"], rep["eer"], rep["n"]))
            dist += [(r.utt_id, excluded or "none", name, float(v), int(t)) for r, v, t, k in zip(recs, s, y, m) if k]
        return rows, dist

    out = {"rows": [], "scores": [], "baseline": None}
    if include_baseline:
        clf = train_signature_classifier(manifest, "detection", arch_id, input_mode, hyperparams, estimator)
        rows, dist = evaluate(clf, None)
        out["baseline"], out["scores"] = rows[0], dist
    for a in attack_list:
        sub = manifest.subset(lambda r, a=a: not (r.kind == "adversarial" and r.attack_label == a and r.split != "test"))
        clf = train_signature_classifier(sub, "detection", arch_id, input_mode, hyperparams, estimator)
        rows, dist = evaluate(clf, a)
        out["rows"] += rows
        out["scores"] += dist
    if out["baseline"] is not None:
        out["deltas"] = [
            {"excluded_attack": r.excluded_attack, "slice": r.slice, "auc_delta": r.auc - out["baseline"].auc}
            for r in out["rows"]
        ]
    return out


def write_scores_csv(path, scores):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["utt_id", "excluded_attack", "slice", "score", "label"])
        for utt, ex, sl, s, y in scores:
            w.writerow([utt, ex, sl, repr(s), y])
