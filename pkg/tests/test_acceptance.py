"""The ten acceptance criteria, each at its stated tolerance.

The end-to-end criteria (4, 6-10) share one toy reproduction from the
``reproduce_run`` fixture; criterion 10 runs a second one. A PASS/FAIL line per
criterion is printed in the terminal summary.
"""

import math
import time
import warnings

import numpy as np
import pytest
import torch

from advsig.attacks import AttackSpec, cw, fgsm, lp_norm, parse_label, parse_norm, pgd, project_lp
from advsig.metrics import confusion_and_accuracy, eer, roc_auc
from advsig.threatdata import load_manifest, validate_manifest
from advsig.victim import VICTIM_ARCHS, build_victim, input_gradient, load_victim

from conftest import run_reproduce
from doubles import linear_case
from oracles import central_difference, qp_projection, random_projection_cases

INF = math.inf
pytestmark = pytest.mark.slow


@pytest.mark.acceptance(1, "gradient oracle")
def test_gradient_oracle(record_property):
    t0 = time.perf_counter()
    worst = 0.0
    for k, arch in enumerate(VICTIM_ARCHS):
        model = build_victim(arch, 6, seed=k).double().eval()
        rng = np.random.default_rng(100 + k)
        x = rng.uniform(-0.3, 0.3, 3200)
        idx = rng.choice(x.size, 20, replace=False)
        y = torch.tensor([1])

        def loss(v):
            with torch.no_grad():
                return float(torch.nn.functional.cross_entropy(model(torch.from_numpy(v)[None]), y))

        g = input_gradient(model, x, 1)[idx]
        fd = central_difference(loss, x, idx, h=1e-3)
        worst = max(worst, float(np.max(np.abs(g - fd) / (np.abs(g) + 1e-8))))
    elapsed = time.perf_counter() - t0
    record_property("max_rel_err", f"{worst:.2e}")
    record_property("seconds", round(elapsed, 1))
    assert worst < 1e-2
    assert elapsed < 60


@pytest.mark.acceptance(2, "projection oracle")
def test_projection_oracle(record_property):
    t0 = time.perf_counter()
    worst = {}
    for p, seed in ((1, 11), (2, 12), (INF, 13)):
        dist = [np.linalg.norm(project_lp(v, p, eps) - qp_projection(v, p, eps))
                for v, eps in random_projection_cases(1000, seed)]
        worst[p] = max(dist)
    elapsed = time.perf_counter() - t0
    record_property("max_l2_dist", f"{max(worst.values()):.1e}")
    record_property("seconds", round(elapsed, 1))
    assert all(d <= 1e-4 for d in worst.values()), worst
    assert elapsed < 60


@pytest.mark.acceptance(3, "linear-model attack oracles")
def test_linear_attack_oracles(record_property):
    t0 = time.perf_counter()
    cw_ratios = []
    for seed in range(5):
        model, utt, margin = linear_case(seed=seed)
        w = model.w.detach().numpy()
        t1 = margin / np.abs(w).sum()
        assert fgsm(model, utt, AttackSpec("fgsm", 2, eps=1.1 * t1)).success
        assert not fgsm(model, utt, AttackSpec("fgsm", 2, eps=0.9 * t1)).success
        t2 = margin / np.linalg.norm(w)
        eps = 1.2 * t2
        assert pgd(model, utt, AttackSpec("pgd", 2, eps=eps, alpha=eps / 4, steps=20)).success
        ex = cw(model, utt, AttackSpec("cw", 2, lr=1e-2, max_cw_iters=200, c_search_steps=6, c_init=1e-2))
        assert ex.success
        cw_ratios.append(ex.l2_norm / t2)
    elapsed = time.perf_counter() - t0
    record_property("cw_l2_ratio_range", f"{min(cw_ratios):.3f}-{max(cw_ratios):.3f}")
    record_property("seconds", round(elapsed, 1))
    assert all(abs(r - 1) <= 0.10 for r in cw_ratios)
    assert elapsed < 120


@pytest.mark.acceptance(4, "budget/box invariants on generated manifests")
def test_manifest_invariants(reproduce_run, record_property):
    root, stages = reproduce_run.run_dir, reproduce_run.report["stages"]
    victims = {a: load_victim(root / stages["train-victim"] / "victims" / a) for a in VICTIM_ARCHS}
    n_checked = 0
    for key in ("gen-singlevm", "gen-multivm"):
        m = load_manifest(root / stages[key] / "manifest")
        rep = validate_manifest(m, victims=victims, check_audio=True)
        assert rep["ok"], rep["violations"][:5]
        for r in m.records:
            if r.kind != "adversarial":
                continue
            x = m.waveform(r.utt_id).astype(np.float64)
            assert np.all(x >= -1.0) and np.all(x <= 1.0)
            family, _ = parse_label(r.attack_label)
            if family != "cw":
                bn = INF if family in ("fgsm", "iter-fgsm") else parse_norm(r.norm)
                assert lp_norm(x - m.waveform(r.clean_ref_id), bn) <= r.eps + 1e-6
            n_checked += 1
    record_property("adversarial_records", n_checked)


@pytest.mark.acceptance(5, "metric fixtures")
def test_metric_fixtures():
    assert roc_auc([0.8, 0.3, 0.5, 0.2], [1, 1, 0, 0]) == 0.75
    assert eer([0.9, 0.4, 0.6, 0.1], [1, 1, 0, 0]) == 0.5
    _, acc = confusion_and_accuracy(["a", "a", "b"], ["a", "b", "b"], ["a", "b"])
    assert acc == 2 / 3


@pytest.mark.acceptance(6, "toy end-to-end detection (oracle delta)")
def test_toy_detection(reproduce_run, record_property):
    rows = [r for r in reproduce_run.report["detection"]["table"] if r["trained_on"] == "all attacks"]
    multivm = next(r for r in rows if r["dataset"] == "multivm")
    record_property("auc", round(multivm["auc"], 4))
    record_property("reproduce_minutes", round(reproduce_run.seconds / 60, 1))
    assert multivm["auc"] >= 0.90
    assert reproduce_run.seconds < 30 * 60


@pytest.mark.acceptance(7, "toy attack-type classification")
def test_toy_attack_type(reproduce_run, record_property):
    section = reproduce_run.report["attack_type"]["multivm"]
    accs = {arch: res["accuracy"] for arch, res in section["classifiers"].items()}
    record_property("accuracy", {k: round(v, 3) for k, v in accs.items()})
    assert set(accs) == {"lresnet34-sig", "ecapatdnn-sig"}
    assert all(a >= 0.5 for a in accs.values())
    for res in section["classifiers"].values():
        m = np.array(res["confusion_percent"])
        assert m.shape == (4, 4)
    assert [d["label"] for d in section["diagonal_comparison"]] == ["cw-l2", "fgsm", "pgd-l2", "pgd-linf"]


@pytest.mark.acceptance(8, "toy victim-model classification")
def test_toy_victim_model(reproduce_run, record_property):
    res = reproduce_run.report["victim_model"]
    sep = res["separability"]
    record_property("accuracy", round(res["accuracy"], 3))
    record_property("inter_vs_intra", f"{sep['inter']:.2f}>{sep['intra']:.2f}")
    assert sorted(res["label_space"]) == sorted(VICTIM_ARCHS)
    assert res["accuracy"] >= 0.5
    assert sep["inter"] > sep["intra"]


@pytest.mark.acceptance(9, "LOAO harness")
def test_loao(reproduce_run, record_property):
    rows = reproduce_run.report["loao"]["rows"]
    bpa = [r["auc"] for r in rows if r["slice"] == "benign-plus-attack"]
    record_property("rows", len(rows))
    record_property("min_benign_plus_attack_auc", round(min(bpa), 4))
    assert len(rows) == 12
    assert len(bpa) == 4
    assert all(a >= 0.75 for a in bpa)


@pytest.mark.acceptance(10, "determinism of reproduce-all")
def test_reproduce_determinism(reproduce_run, tmp_path, record_property):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        second = run_reproduce(tmp_path, seed=0)
    assert second.run_dir.name == reproduce_run.run_dir.name
    first_bytes = (reproduce_run.run_dir / "summary.json").read_bytes()
    assert (second.run_dir / "summary.json").read_bytes() == first_bytes
    nested = sorted(p.relative_to(reproduce_run.run_dir) for p in reproduce_run.run_dir.glob("*/summary.json"))
    for rel in nested:
        assert (second.run_dir / rel).read_bytes() == (reproduce_run.run_dir / rel).read_bytes(), rel
    record_property("summaries_compared", len(nested) + 1)
