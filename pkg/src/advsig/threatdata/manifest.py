"""Threat-dataset records, the JSONL manifest format, and manifest validation."""

import json
import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .. import __version__
from ..attacks.spec import ATTACK_LABELS, INF, lp_norm, parse_label, parse_norm
from ..errors import DataError, DependencyError, ManifestParseError
from .corpus import read_wav, write_wav

SPLITS = ("train", "val", "test")
KINDS = ("benign", "adversarial")
MANIFEST_NAME = "manifest.jsonl"
HEADER_NAME = "header.json"


@dataclass
class ThreatRecord:
    utt_id: str
    split: str
    kind: str
    attack_label: str = None
    norm: str = None
    eps: float = None
    victim_id: str = None
    clean_ref_id: str = None
    success: bool = False
    audio_path: str = None
    snr_db: float = None
    seed: int = None

    def to_json(self):
        d = asdict(self)
        if d["snr_db"] is not None and not math.isfinite(d["snr_db"]):
            d["snr_db"] = None
        return json.dumps(d, sort_keys=True)


_RECORD_FIELDS = tuple(f.name for f in fields(ThreatRecord))


def count_records(records):
    """Tallies per (attack_label, victim_id, split); benign rows use label ``"benign"``."""
    c = Counter((r.attack_label or "benign", r.victim_id, r.split) for r in records)
    return [
        {"attack_label": k[0], "victim_id": k[1], "split": k[2], "n": n}
        for k, n in sorted(c.items(), key=lambda kv: (kv[0][0], kv[0][1] or "", kv[0][2]))
    ]


def victim_totals(records):
    """Per-victim train/val/test totals (adversarial records only)."""
    out = defaultdict(lambda: {s: 0 for s in SPLITS})
    for r in records:
        if r.kind == "adversarial":
            out[r.victim_id][r.split] += 1
    return {v: out[v] for v in sorted(out)}


@dataclass
class ThreatManifest:
    records: list
    recipe: dict
    clean_labels: dict = field(default_factory=dict)
    root: Path = None
    generation: dict = field(default_factory=dict)
    audio: dict = field(default_factory=dict, repr=False)
    stored_counts: list = None

    @property
    def counts(self):
        return count_records(self.records)

    def by_id(self):
        return {r.utt_id: r for r in self.records}

    def attack_labels(self):
        present = {r.attack_label for r in self.records if r.kind == "adversarial"}
        return [a for a in ATTACK_LABELS if a in present]

    def victim_ids(self):
        return sorted({r.victim_id for r in self.records if r.kind == "adversarial"})

    def waveform(self, utt_id):
        """Float32 samples of a record, from the in-memory cache or the WAV on disk."""
        if utt_id in self.audio:
            return self.audio[utt_id]
        idx = self.__dict__.get("_index")
        if idx is None or len(idx) != len(self.records):
            idx = self.__dict__["_index"] = self.by_id()
        rec = idx[utt_id]
        if self.root is None or rec.audio_path is None:
            raise DataError(f"no audio available for {utt_id}")
        x, _ = read_wav(Path(self.root) / rec.audio_path)
        return x

    def header(self):
        return {
            "recipe": self.recipe,
            "counts": self.counts,
            "tool_version": __version__,
            "clean_labels": dict(sorted(self.clean_labels.items())),
            "victim_totals": victim_totals(self.records),
            "generation": self.generation,
        }

    def subset(self, keep):
        """New manifest with the records for which ``keep(record)`` is true (shares audio)."""
        recs = [r for r in self.records if keep(r)]
        return ThreatManifest(recs, self.recipe, self.clean_labels, self.root, self.generation, self.audio)


def write_manifest(manifest, directory):
    """Write JSONL, header and audio under ``directory``, then rebind ``manifest.root`` to it."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    records = sorted(manifest.records, key=lambda r: r.utt_id)
    in_place = manifest.root is not None and Path(manifest.root).resolve() == d.resolve()
    for r in records:
        if r.audio_path is None or (in_place and r.utt_id not in manifest.audio):
            continue
        write_wav(d / r.audio_path, manifest.waveform(r.utt_id))
    with open(d / MANIFEST_NAME, "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")
    (d / HEADER_NAME).write_text(json.dumps(manifest.header(), indent=2, sort_keys=True))
    manifest.root = d
    return d


def _parse_record(obj, path, lineno):
    if not isinstance(obj, dict):
        raise ManifestParseError(path, lineno, "record is not a JSON object")
    missing = [k for k in _RECORD_FIELDS if k not in obj]
    extra = [k for k in obj if k not in _RECORD_FIELDS]
    if missing or extra:
        raise ManifestParseError(path, lineno, f"missing fields {missing}, unknown fields {extra}")
    if obj["split"] not in SPLITS:
        raise ManifestParseError(path, lineno, f"bad split {obj['split']!r}")
    if obj["kind"] not in KINDS:
        raise ManifestParseError(path, lineno, f"bad kind {obj['kind']!r}")
    return ThreatRecord(**obj)


def load_manifest(path):
    """Read ``manifest.jsonl`` (+ ``header.json`` next to it). ``path`` may be the directory."""
    p = Path(path)
    if p.is_dir():
        p = p / MANIFEST_NAME
    if not p.exists():
        raise DependencyError(p, "manifest")
    records = []
    with open(p) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestParseError(p, lineno, f"invalid JSON ({exc.msg})") from None
            records.append(_parse_record(obj, p, lineno))
    header = {}
    if (p.parent / HEADER_NAME).exists():
        header = json.loads((p.parent / HEADER_NAME).read_text())
    return ThreatManifest(
        records,
        header.get("recipe", {}),
        header.get("clean_labels", {}),
        p.parent,
        header.get("generation", {}),
        stored_counts=header.get("counts"),
    )


def _violation(report, code, utt_id, detail):
    report["violations"].append({"code": code, "utt_id": utt_id, "detail": detail})


def validate_manifest(manifest, victims=None, check_audio=False, tol=1e-6):
    """Check record invariants, split hygiene, counts and (optionally) audio.

    ``victims`` maps victim_id to a model; when given, every adversarial record's
    success flag is recomputed against it. ``check_audio`` reloads the WAV pairs and
    checks the perturbation budget and the [-1, 1] box.
    """
    from ..attacks.gradient import attack_success

    report = {"n_records": len(manifest.records), "violations": []}
    ids = Counter(r.utt_id for r in manifest.records)
    splits_of = defaultdict(set)
    for r in manifest.records:
        splits_of[r.utt_id].add(r.split)
    for uid, n in sorted(ids.items()):
        if len(splits_of[uid]) > 1:
            _violation(report, "split_leakage", uid, f"appears in splits {sorted(splits_of[uid])}")
        elif n > 1:
            _violation(report, "duplicate_id", uid, f"{n} records")
    index = {}
    for r in manifest.records:
        index.setdefault((r.utt_id, r.split), r)

    for r in manifest.records:
        if r.kind == "benign":
            if r.attack_label is not None or r.victim_id is not None:
                _violation(report, "benign_has_attack", r.utt_id, "benign record carries attack/victim")
        else:
            if not r.success:
                _violation(report, "unsuccessful_adversarial", r.utt_id, "adversarial record with success=false")
            if r.attack_label not in ATTACK_LABELS:
                _violation(report, "bad_attack_label", r.utt_id, repr(r.attack_label))
            if r.victim_id is None:
                _violation(report, "missing_victim", r.utt_id, "")
        ref = r.clean_ref_id
        if ref is None or ref not in ids:
            _violation(report, "dangling_clean_ref", r.utt_id, f"clean_ref_id {ref!r} not in manifest")
        elif r.kind == "adversarial":
            target = index.get((ref, r.split))
            if target is None or target.kind != "benign":
                _violation(report, "unpaired_benign", r.utt_id, f"no benign {ref} in split {r.split}")

    test_refs = {r.clean_ref_id for r in manifest.records if r.split == "test"}
    trainval_refs = {r.clean_ref_id for r in manifest.records if r.split != "test"}
    for ref in sorted(test_refs & trainval_refs):
        _violation(report, "test_leakage", ref, "test clean reference also used in train/val")

    if manifest.stored_counts is not None and manifest.stored_counts != manifest.counts:
        _violation(report, "count_mismatch", None, "header counts differ from records")

    if victims is not None or check_audio:
        byid = manifest.by_id()
        for r in manifest.records:
            if r.kind != "adversarial":
                continue
            x_adv = manifest.waveform(r.utt_id)
            if check_audio:
                clean = manifest.waveform(r.clean_ref_id) if r.clean_ref_id in byid else None
                if np.any(x_adv < -1.0) or np.any(x_adv > 1.0):
                    _violation(report, "box", r.utt_id, "samples outside [-1, 1]")
                family, p = parse_label(r.attack_label)
                if clean is not None and family != "cw" and r.eps is not None:
                    bn = INF if family in ("fgsm", "iter-fgsm") else parse_norm(r.norm)
                    nrm = lp_norm(x_adv.astype(np.float64) - clean.astype(np.float64), bn)
                    if nrm > r.eps + tol:
                        _violation(report, "budget", r.utt_id, f"norm {nrm:.6g} > eps {r.eps}")
            if victims is not None and r.victim_id in victims:
                label = manifest.clean_labels.get(r.clean_ref_id)
                if label is None:
                    _violation(report, "unknown_label", r.utt_id, "no speaker label for clean reference")
                elif attack_success(victims[r.victim_id], x_adv, label) != r.success:
                    _violation(report, "success_mismatch", r.utt_id, "recomputed success differs")
    report["ok"] = not report["violations"]
    report["counts"] = dict(sorted(Counter(v["code"] for v in report["violations"]).items()))
    return report
