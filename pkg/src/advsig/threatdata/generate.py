"""Threat-dataset generation (SingleVM / MultiVM recipes)."""

import logging
import warnings
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from ..attacks.gradient import derived_seed, run_attack_batch
from ..attacks.spec import MULTI_VM_ATTACKS, ATTACK_LABELS, AttackSpec, norm_name, parse_label, snr_db
from ..errors import ConfigurationError, DataError
from ..victim import predict
from .corpus import PCM_MAX, PCM_SCALE, split_per_speaker
from .manifest import ThreatManifest, ThreatRecord, write_manifest

log = logging.getLogger(__name__)


@dataclass
class AttackEntry:
    """One attack stratum of a recipe.

    With ``eps_choices`` each attacked utterance draws its budget from the list
    (seeded per utterance) and ``alpha`` is rescaled as ``alpha_frac * eps``.
    """

    spec: AttackSpec
    eps_choices: list = None
    alpha_frac: float = 0.25

    def to_dict(self):
        return {"spec": self.spec.to_dict(), "eps_choices": self.eps_choices, "alpha_frac": self.alpha_frac}

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"spec", "eps_choices", "alpha_frac"}
        if unknown:
            raise ConfigurationError(f"unknown attack entry field(s): {sorted(unknown)}")
        return cls(AttackSpec.from_dict(d["spec"]), d.get("eps_choices"), d.get("alpha_frac", 0.25))


@dataclass
class Recipe:
    name: str
    attacks: list
    victims: list
    fraction: float = 0.25
    val_fraction: float = 0.1
    seed: int = 0
    batch_size: int = 25
    quantize: bool = True
    victim_checkpoints: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "name": self.name,
            "attacks": [a.to_dict() for a in self.attacks],
            "victims": list(self.victims),
            "fraction": self.fraction,
            "val_fraction": self.val_fraction,
            "seed": self.seed,
            "batch_size": self.batch_size,
            "quantize": self.quantize,
            "victim_checkpoints": dict(self.victim_checkpoints),
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["attacks"] = [AttackEntry.from_dict(a) for a in d.get("attacks", [])]
        return cls(**d)


def default_attack_entries(labels, **cw_overrides):
    """Default strata for the given Table-3 labels.

    Budgets are in waveform amplitude units (audio in [-1, 1]); fgsm draws its
    budget from {0.001, 0.01}; PGD uses random starts.
    """
    entries = []
    for label in labels:
        family, p = parse_label(label)
        if family == "fgsm":
            entries.append(AttackEntry(AttackSpec("fgsm", 2, eps=0.01), eps_choices=[0.001, 0.01]))
        elif family == "iter-fgsm":
            entries.append(AttackEntry(AttackSpec("iter-fgsm", 2, eps=0.002, steps=10)))
        elif family == "pgd":
            eps = {1: 2.0, 2: 0.1}.get(p, 0.004)
            entries.append(AttackEntry(AttackSpec("pgd", p, eps=eps, steps=10, random_start=True)))
        else:
            entries.append(AttackEntry(AttackSpec("cw", p, **cw_overrides)))
    return entries


def single_vm_recipe(victim="lresnet34", **kw):
    cw = kw.pop("cw", {})
    return Recipe("singlevm", default_attack_entries(ATTACK_LABELS, **cw), [victim], **kw)


def multi_vm_recipe(victims=("ecapatdnn", "fwseresnet", "resnet34", "lresnet34"), **kw):
    cw = kw.pop("cw", {})
    return Recipe("multivm", default_attack_entries(MULTI_VM_ATTACKS, **cw), list(victims), **kw)


def quantize_delta(clean, delta):
    """Snap ``clean + delta`` to 16-bit PCM by truncating delta toward zero.

    ``clean`` must already be on the PCM grid. Truncation never increases any
    ``|delta_i|``, so Lp budgets and the box survive quantisation.
    """
    q = np.trunc(np.asarray(delta, dtype=np.float64) * PCM_SCALE) / PCM_SCALE
    adv = np.clip(np.asarray(clean, dtype=np.float64) + q, -1.0, PCM_MAX)
    return adv.astype(np.float32)


def threat_splits(corpus, victim_split, val_fraction, seed):
    """Map clean utterance id -> threat split.

    Victim test utterances form the threat test split. Everything the victim saw
    in training/validation goes to threat train, with ``val_fraction`` per
    speaker carved out (by clean utterance, so a clean id never straddles
    train and val).
    """
    trainval = [u for u in corpus if victim_split.get(u.id) in ("train", "val")]
    out = {u.id: "test" for u in corpus if victim_split.get(u.id) == "test"}
    if trainval:
        if 0 < val_fraction < 1:
            tr, va = split_per_speaker(trainval, 1.0 - val_fraction, derived_seed(seed, "val-carve"))
        else:
            tr, va = trainval, []
        out.update({u.id: "train" for u in tr})
        out.update({u.id: "val" for u in va})
    return out


def _groups(items, key, size):
    buckets = defaultdict(list)
    for it in items:
        buckets[key(it)].append(it)
    for k in sorted(buckets):
        b = buckets[k]
        for i in range(0, len(b), size):
            yield k, b[i : i + size]


def generate_threat_dataset(recipe, victims, corpus, victim_split, out_dir=None):
    """Attack, filter to successes, pair with benign references, and assemble a manifest.

    Args:
        recipe: :class:`Recipe` naming attack strata, victims and the sample fraction.
        victims: mapping victim_id -> eval-state model.
        corpus: utterances (the attack source).
        victim_split: mapping utt_id -> ``train``/``val``/``test`` as used to
            train the victims; it decides the threat split of every record.
        out_dir: when given, WAVs and the manifest are written there.
    """
    for v in recipe.victims:
        if v not in victims:
            raise ConfigurationError(f"recipe names victim {v!r} but no model was supplied")
    split_of = threat_splits(corpus, victim_split, recipe.val_fraction, recipe.seed)
    source = [u for u in corpus if u.id in split_of]
    if not source:
        raise DataError("no source utterances in the victim split")
    by_id = {u.id: u for u in corpus}
    records, audio, stats = [], {}, {}
    benign_needed = set()
    clean_pred_cache = {}

    for victim_id in recipe.victims:
        model = victims[victim_id]
        for entry in recipe.attacks:
            base = entry.spec
            label = base.label
            stratum_seed = derived_seed(recipe.seed, label, victim_id)
            rng = np.random.default_rng(stratum_seed)
            n_draw = int(round(recipe.fraction * len(source)))
            drawn = sorted(rng.choice(len(source), size=min(n_draw, len(source)), replace=False).tolist())
            picked = [source[i] for i in drawn]
            correct = []
            for u in picked:
                key = (victim_id, u.id)
                if key not in clean_pred_cache:
                    clean_pred_cache[key] = predict(model, u.waveform)[0]
                if clean_pred_cache[key] == u.speaker_id:
                    correct.append(u)

            def eps_for(u):
                if not entry.eps_choices:
                    return float(base.eps)
                r = np.random.default_rng(derived_seed(stratum_seed, u.id, "eps"))
                return float(entry.eps_choices[int(r.integers(len(entry.eps_choices)))])

            st = {"drawn": len(picked), "correct": len(correct), "succeeded": 0, "kept": 0}
            for (eps, _), batch in _groups(correct, lambda u: (eps_for(u), len(u.waveform)), recipe.batch_size):
                spec = base.replace(seed=stratum_seed)
                if entry.eps_choices:
                    spec = spec.replace(eps=eps, alpha=entry.alpha_frac * eps)
                for ex in run_attack_batch(model, batch, spec, victim_id):
                    if not ex.success:
                        continue
                    st["succeeded"] += 1
                    clean = by_id[ex.clean_id].waveform
                    if recipe.quantize:
                        adv = quantize_delta(clean, ex.delta)
                        if predict(model, adv)[0] == ex.true_label:
                            continue
                    else:
                        adv = ex.adversarial_waveform.astype(np.float32)
                    st["kept"] += 1
                    split = split_of[ex.clean_id]
                    uid = f"{ex.clean_id}__{label}__{victim_id}"
                    delta = adv.astype(np.float64) - np.asarray(clean, dtype=np.float64)
                    records.append(
                        ThreatRecord(
                            utt_id=uid,
                            split=split,
                            kind="adversarial",
                            attack_label=label,
                            norm=norm_name(spec.p),
                            eps=spec.eps,
                            victim_id=victim_id,
                            clean_ref_id=ex.clean_id,
                            success=True,
                            audio_path=f"audio/{split}/{uid}.wav",
                            snr_db=round(snr_db(clean, delta), 6),
                            seed=ex.seed,
                        )
                    )
                    audio[uid] = adv
                    benign_needed.add(ex.clean_id)
            if st["kept"] == 0:
                warnings.warn(f"attack {label} against {victim_id}: no successful examples", RuntimeWarning)
            stats[f"{label}|{victim_id}"] = st
            log.info("%s vs %s: %s", label, victim_id, st)

    for cid in sorted(benign_needed):
        split = split_of[cid]
        records.append(
            ThreatRecord(
                utt_id=cid,
                split=split,
                kind="benign",
                clean_ref_id=cid,
                success=False,
                audio_path=f"audio/{split}/{cid}.wav",
                seed=recipe.seed,
            )
        )
        audio[cid] = np.asarray(by_id[cid].waveform, dtype=np.float32)

    records.sort(key=lambda r: r.utt_id)
    manifest = ThreatManifest(
        records,
        recipe.to_dict(),
        {cid: int(by_id[cid].speaker_id) for cid in sorted(benign_needed)},
        None,
        stats,
        audio,
    )
    if out_dir is not None:
        write_manifest(manifest, out_dir)
    return manifest
