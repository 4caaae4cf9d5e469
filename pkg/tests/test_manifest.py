import dataclasses
import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from advsig.attacks import INF, AttackSpec, lp_norm
from advsig.errors import ConfigurationError, DependencyError, ManifestParseError
from advsig.threatdata import (
    PCM_MAX,
    PCM_SCALE,
    AttackEntry,
    Recipe,
    ThreatRecord,
    generate_threat_dataset,
    load_manifest,
    multi_vm_recipe,
    quantize_delta,
    single_vm_recipe,
    threat_splits,
    validate_manifest,
    write_manifest,
)
from advsig.threatdata.manifest import victim_totals
from advsig.victim import load_victim


def test_generated_manifest_validates(toy_world):
    m = toy_world.manifest
    rep = validate_manifest(m, victims=toy_world.victims, check_audio=True)
    assert rep["ok"], rep["violations"][:3]
    assert m.stored_counts == m.counts


def test_strata_sizes_and_success(toy_world):
    m = toy_world.manifest
    n_source = sum(1 for s in toy_world.split.values())
    for key, st_ in m.generation.items():
        assert st_["drawn"] == round(0.5 * n_source)
        assert st_["kept"] <= st_["succeeded"] <= st_["correct"] <= st_["drawn"]
        label, victim = key.split("|")
        n = sum(r.attack_label == label and r.victim_id == victim for r in m.records)
        assert n == st_["kept"]
    adv = [r for r in m.records if r.kind == "adversarial"]
    assert adv and all(r.success for r in adv)
    assert m.attack_labels() == ["cw-l2", "fgsm", "pgd-l2", "pgd-linf"]
    assert set(victim_totals(m.records)) == {"ecapatdnn", "lresnet34"}


def test_benign_pairing_and_split_hygiene(toy_world):
    m = toy_world.manifest
    benign = {r.utt_id: r for r in m.records if r.kind == "benign"}
    for r in m.records:
        if r.kind == "adversarial":
            assert benign[r.clean_ref_id].split == r.split
    # threat test split is exactly the victim's test split
    for r in m.records:
        assert (r.split == "test") == (toy_world.split[r.clean_ref_id] == "test")
    assert len(benign) == len({r.clean_ref_id for r in m.records})


def test_success_recomputes_from_stored_checkpoints(toy_world):
    victims = {a: load_victim(toy_world.root / "victims" / a) for a in toy_world.victims}
    assert validate_manifest(toy_world.manifest, victims=victims)["ok"]


def test_generation_is_deterministic(toy_world, tmp_path):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        again = generate_threat_dataset(toy_world.recipe, toy_world.victims, toy_world.corpus, toy_world.split,
                                        out_dir=tmp_path)
    a = (toy_world.root / "manifest" / "manifest.jsonl").read_text()
    assert (tmp_path / "manifest.jsonl").read_text() == a
    for r in again.records[:10]:
        np.testing.assert_array_equal(again.audio[r.utt_id], toy_world.manifest.waveform(r.utt_id))


def test_empty_attack_list_gives_no_adversarial(toy_world):
    recipe = Recipe("empty", [], ["lresnet34"])
    m = generate_threat_dataset(recipe, toy_world.victims, toy_world.corpus, toy_world.split)
    assert all(r.kind == "benign" for r in m.records)
    assert validate_manifest(m)["ok"]


def test_recipe_needs_supplied_victims(toy_world):
    with pytest.raises(ConfigurationError):
        generate_threat_dataset(single_vm_recipe("resnet34"), toy_world.victims, toy_world.corpus, toy_world.split)


def test_zero_success_stratum_warns(toy_world):
    recipe = Recipe("weak", [AttackEntry(AttackSpec("fgsm", 2, eps=0.0))], ["lresnet34"])
    with pytest.warns(RuntimeWarning, match="no successful"):
        m = generate_threat_dataset(recipe, toy_world.victims, toy_world.corpus, toy_world.split)
    assert m.records == []


def test_recipe_roundtrip():
    r = single_vm_recipe(cw={"kappa": 0.1}, fraction=0.3)
    assert len(r.attacks) == 8
    back = Recipe.from_dict(json.loads(json.dumps(r.to_dict())))
    assert back.to_dict() == r.to_dict()
    assert [a.spec.label for a in multi_vm_recipe().attacks] == ["cw-l2", "fgsm", "pgd-l2", "pgd-linf"]
    with pytest.raises(ConfigurationError):
        AttackEntry.from_dict({"spec": {"family": "fgsm", "p": "2"}, "bogus": 1})
    with pytest.raises(ConfigurationError):
        AttackEntry.from_dict({"spec": {"family": "fgsm", "p": "inf"}})


def test_threat_splits_keep_clean_ids_in_one_split(toy_world):
    ts = threat_splits(toy_world.corpus, toy_world.split, 0.1, seed=0)
    assert set(ts) == set(toy_world.split)
    assert {k for k, v in ts.items() if v == "test"} == {k for k, v in toy_world.split.items() if v == "test"}
    assert "val" in ts.values()


# --- validation catches injected faults ---------------------------------------


def _copy(m):
    return dataclasses.replace(m, records=[dataclasses.replace(r) for r in m.records], stored_counts=None)


def test_injected_unsuccessful_record_flagged(toy_world):
    m = _copy(toy_world.manifest)
    adv = next(r for r in m.records if r.kind == "adversarial")
    adv.success = False
    rep = validate_manifest(m)
    assert not rep["ok"] and rep["counts"]["unsuccessful_adversarial"] == 1


def test_split_leakage_flagged(toy_world):
    m = _copy(toy_world.manifest)
    clean = next(r for r in m.records if r.kind == "benign" and r.split == "test")
    m.records.append(dataclasses.replace(clean, split="train"))
    rep = validate_manifest(m)
    assert "split_leakage" in rep["counts"]


def test_dangling_reference_and_count_mismatch(toy_world, tmp_path):
    m = _copy(toy_world.manifest)
    m.records.append(ThreatRecord("ghost__fgsm__lresnet34", "train", "adversarial", "fgsm", "2", 0.01,
                                  "lresnet34", "ghost", True))
    m.stored_counts = toy_world.manifest.counts
    rep = validate_manifest(m)
    assert {"dangling_clean_ref", "count_mismatch"} <= set(rep["counts"])


def test_budget_violation_flagged(toy_world):
    m = _copy(toy_world.manifest)
    r = next(r for r in m.records if r.attack_label == "pgd-linf")
    m.audio = dict(toy_world.manifest.audio)
    m.audio[r.utt_id] = np.clip(m.waveform(r.clean_ref_id) + 0.5, -1, 1).astype(np.float32)
    rep = validate_manifest(m, check_audio=True)
    assert rep["counts"].get("budget", 0) >= 1


def test_parse_errors_report_line_numbers(tmp_path, toy_world):
    lines = (toy_world.root / "manifest" / "manifest.jsonl").read_text().splitlines()
    bad = lines[:2] + ["{not json"] + lines[2:]
    (tmp_path / "manifest.jsonl").write_text("\n".join(bad) + "\n")
    with pytest.raises(ManifestParseError) as exc:
        load_manifest(tmp_path)
    assert exc.value.lineno == 3
    rec = json.loads(lines[0])
    rec.pop("seed")
    (tmp_path / "manifest.jsonl").write_text(json.dumps(rec) + "\n")
    with pytest.raises(ManifestParseError, match=":1:"):
        load_manifest(tmp_path / "manifest.jsonl")
    with pytest.raises(DependencyError):
        load_manifest(tmp_path / "nowhere")


def test_write_load_roundtrip(tmp_path, toy_world):
    m = toy_world.manifest.subset(lambda r: True)
    write_manifest(m, tmp_path)
    back = load_manifest(tmp_path)
    assert back.records == sorted(m.records, key=lambda r: r.utt_id)
    assert back.clean_labels == m.clean_labels


def test_write_to_new_directory_carries_audio(tmp_path, toy_world):
    m = toy_world.manifest.subset(lambda r: True)
    m.audio = {}
    write_manifest(m, tmp_path)
    back = load_manifest(tmp_path)
    for r in back.records[:10]:
        np.testing.assert_array_equal(back.waveform(r.utt_id), toy_world.manifest.waveform(r.utt_id))
    assert toy_world.manifest.root != tmp_path


# --- quantisation ---------------------------------------------------------------


def _pcm(x):
    return np.clip(np.round(x * PCM_SCALE), -32768, 32767) / PCM_SCALE


@settings(max_examples=200, deadline=None)
@given(
    arrays(np.float64, 64, elements=st.floats(-1, 1)),
    arrays(np.float64, 64, elements=st.floats(-0.05, 0.05)),
    st.sampled_from([1, 2, INF]),
)
def test_quantize_keeps_budget_box_and_grid(clean, delta, p):
    clean = _pcm(clean)
    delta = np.clip(clean + delta, -1, 1) - clean
    adv = quantize_delta(clean, delta).astype(np.float64)
    assert np.all(adv >= -1.0) and np.all(adv <= PCM_MAX)
    np.testing.assert_array_equal(adv * PCM_SCALE, np.round(adv * PCM_SCALE))
    assert lp_norm(adv - clean, p) <= lp_norm(delta, p) + 1e-12
