import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from advsig.attacks import (
    ATTACK_LABELS,
    AttackSpec,
    attack,
    attack_success,
    cw,
    fgsm,
    grad_step_direction,
    iter_fgsm,
    label_for,
    lp_norm,
    parse_label,
    pgd,
    pgd_batch,
    project_lp,
)
from advsig.errors import ConfigurationError
from advsig.victim import batch_loss

from doubles import LinearDouble, Utt, linear_case

INF = math.inf


def _logit_margin(model, x, label):
    """max_{i != y} Z_i - Z_y for the two-logit double."""
    z = model(torch.as_tensor(x)[None])[0].detach().numpy()
    return float(z[1 - label] - z[label])


# --- spec --------------------------------------------------------------------


@pytest.mark.parametrize("family,p", [("fgsm", INF), ("iter-fgsm", 1), ("pgd", 0), ("cw", 1), ("bim", 2)])
def test_invalid_family_norm_pairs(family, p):
    with pytest.raises(ConfigurationError):
        AttackSpec(family, p)


def test_valid_pairs_cover_exactly_eight_labels():
    pairs = [("cw", 0), ("cw", 2), ("cw", INF), ("fgsm", 2), ("iter-fgsm", 2), ("pgd", 1), ("pgd", 2), ("pgd", INF)]
    labels = sorted(AttackSpec(f, p).label for f, p in pairs)
    assert labels == sorted(ATTACK_LABELS)
    for lab in ATTACK_LABELS:
        assert label_for(*parse_label(lab)) == lab


def test_spec_defaults_and_checks():
    s = AttackSpec("pgd", "linf", eps=0.008)
    assert s.alpha == 0.002 and s.p == INF
    with pytest.raises(ConfigurationError):
        AttackSpec("pgd", 2, eps=-1)
    with pytest.raises(ConfigurationError):
        AttackSpec("pgd", 2, eps=0.1, alpha=0.0, steps=3)
    with pytest.raises(ConfigurationError):
        AttackSpec("cw", 2, kappa=-0.1)


def test_spec_json_roundtrip():
    s = AttackSpec("cw", INF, eps=0.0, kappa=0.3, seed=11)
    d = json.loads(s.to_json())
    assert d["p"] == "inf"
    assert AttackSpec.from_dict(d) == s
    with pytest.raises(ConfigurationError):
        AttackSpec.from_dict(dict(d, bogus=1))


def test_wrapper_rejects_wrong_family():
    model, utt, _ = linear_case()
    with pytest.raises(ConfigurationError):
        fgsm(model, utt, AttackSpec("pgd", 2, eps=0.1))
    with pytest.raises(ConfigurationError):
        cw(model, utt, AttackSpec("fgsm", 2, eps=0.1))


# --- step directions ---------------------------------------------------------


def test_step_direction_fixtures():
    g = np.array([3.0, -4.0])
    np.testing.assert_allclose(grad_step_direction(g, 2), [0.6, -0.8])
    np.testing.assert_array_equal(grad_step_direction(g, INF), [1.0, -1.0])
    np.testing.assert_array_equal(grad_step_direction(np.array([3.0, -4.0, 0.1]), 1, k=1), [0.0, -1.0, 0.0])
    np.testing.assert_array_equal(grad_step_direction(np.zeros(4), 2), np.zeros(4))


def test_projection_fixtures():
    d = np.array([0.3, 0.4])
    np.testing.assert_array_equal(project_lp(d, 2, 1.0), d)
    np.testing.assert_array_equal(project_lp(np.array([2.0, -3.0]), INF, 1.0), [1.0, -1.0])
    np.testing.assert_allclose(project_lp(np.array([3.0, 1.0]), 1, 2.0), [2.0, 0.0])


# --- FGSM / iterative FGSM on the linear double ------------------------------


@pytest.mark.parametrize("seed", range(5))
def test_fgsm_linear_margin_oracle(seed):
    model, utt, margin = linear_case(seed=seed)
    thr = margin / np.abs(model.w.detach().numpy()).sum()
    assert thr < 0.5
    above = fgsm(model, utt, AttackSpec("fgsm", 2, eps=1.1 * thr))
    below = fgsm(model, utt, AttackSpec("fgsm", 2, eps=0.9 * thr))
    assert above.success and not below.success


def test_fgsm_zero_budget_is_identity():
    model, utt, _ = linear_case()
    ex = fgsm(model, utt, AttackSpec("fgsm", 2, eps=0.0))
    np.testing.assert_array_equal(ex.adversarial_waveform, utt.waveform)
    assert not ex.success and ex.snr_db == INF


def test_iter_fgsm_single_step_equals_fgsm():
    model, utt, margin = linear_case(seed=2)
    eps = 0.02
    a = fgsm(model, utt, AttackSpec("fgsm", 2, eps=eps))
    b = iter_fgsm(model, utt, AttackSpec("iter-fgsm", 2, eps=eps, alpha=eps, steps=1))
    np.testing.assert_array_equal(a.adversarial_waveform, b.adversarial_waveform)


@pytest.mark.parametrize("alpha,eps", [(0.001, 0.004), (0.001, 0.05)])
def test_iter_fgsm_linear_matches_capped_fgsm(alpha, eps):
    # sign(grad) is constant for a linear model, so ten steps equal one step of min(10*alpha, eps)
    model, utt, _ = linear_case(seed=3)
    it = iter_fgsm(model, utt, AttackSpec("iter-fgsm", 2, eps=eps, alpha=alpha, steps=10))
    one = fgsm(model, utt, AttackSpec("fgsm", 2, eps=min(10 * alpha, eps)))
    np.testing.assert_allclose(it.adversarial_waveform, one.adversarial_waveform, atol=1e-12)
    assert it.linf_norm <= eps + 1e-12


def test_iter_fgsm_zero_step():
    model, utt, _ = linear_case()
    ex = iter_fgsm(model, utt, AttackSpec("iter-fgsm", 2, eps=0.1, alpha=0.0, steps=5))
    np.testing.assert_array_equal(ex.adversarial_waveform, utt.waveform)


# --- PGD ---------------------------------------------------------------------


def test_pgd_no_steps_is_identity():
    model, utt, _ = linear_case()
    ex = pgd(model, utt, AttackSpec("pgd", 2, eps=0.5, steps=0))
    np.testing.assert_array_equal(ex.adversarial_waveform, utt.waveform)


@pytest.mark.parametrize("p", [1, 2, INF])
def test_pgd_every_iterate_in_ball_and_box(p):
    model, utt, _ = linear_case(seed=4)
    eps = {1: 0.3, 2: 0.1, INF: 0.01}[p]
    spec = AttackSpec("pgd", p, eps=eps, steps=20, random_start=True, seed=5, l1_topk=0.05)
    x0 = torch.from_numpy(utt.waveform[None].copy())
    y = torch.tensor([utt.speaker_id])
    seen = []
    pgd_batch(model, x0, y, spec, on_step=lambda t, x, loss: seen.append(x[0].numpy().copy()))
    assert len(seen) == 21
    for x in seen:
        assert lp_norm(x - utt.waveform, p) <= eps + 1e-6
        assert np.all(np.abs(x) <= 1.0)


def test_pgd_l2_linear_succeeds_with_monotone_loss():
    model, utt, margin = linear_case(seed=1)
    eps = 1.2 * margin / np.linalg.norm(model.w.detach().numpy())
    spec = AttackSpec("pgd", 2, eps=eps, alpha=eps / 4, steps=20)
    losses = []
    x0 = torch.from_numpy(utt.waveform[None].copy())
    y = torch.tensor([utt.speaker_id])
    pgd_batch(model, x0, y, spec, on_step=lambda t, x, loss: losses.append(float(loss)))
    assert all(b >= a - 1e-12 for a, b in zip(losses, losses[1:]))
    assert pgd(model, utt, spec).success


def test_pgd_inf_one_step_reaches_fgsm_point():
    model, utt, _ = linear_case(seed=6)
    eps = 0.01
    a = pgd(model, utt, AttackSpec("pgd", INF, eps=eps, alpha=eps, steps=1))
    b = fgsm(model, utt, AttackSpec("fgsm", 2, eps=eps))
    np.testing.assert_allclose(a.adversarial_waveform, b.adversarial_waveform, atol=1e-15)


def test_attack_determinism_with_random_start():
    model, utt, _ = linear_case(seed=7)
    spec = AttackSpec("pgd", 2, eps=0.05, steps=5, random_start=True, seed=9)
    a, b = attack(model, utt, spec), attack(model, utt, spec)
    np.testing.assert_array_equal(a.adversarial_waveform, b.adversarial_waveform)
    assert a.seed == b.seed


@settings(max_examples=30, deadline=None)
@given(
    st.sampled_from([("fgsm", 2), ("iter-fgsm", 2), ("pgd", 1), ("pgd", 2), ("pgd", INF)]),
    st.floats(0.0, 0.5),
    st.integers(0, 50),
)
def test_budget_and_box_respected(fp, eps, seed):
    family, p = fp
    model, utt, _ = linear_case(dim=32, seed=seed)
    # push the clean point near the box edge so clipping matters
    utt.waveform = np.clip(utt.waveform * 3.5, -1, 1)
    spec = AttackSpec(family, p, eps=eps, alpha=max(eps / 4, 1e-3), steps=4, random_start=family == "pgd", seed=seed, l1_topk=0.1)
    ex = attack(model, utt, spec)
    assert lp_norm(ex.delta, spec.budget_norm) <= eps + 1e-6
    assert np.all(np.abs(ex.adversarial_waveform) <= 1.0)
    np.testing.assert_array_equal(ex.adversarial_waveform, utt.waveform + ex.delta)
    assert ex.success == attack_success(model, ex.adversarial_waveform, utt.speaker_id)


# --- CW ----------------------------------------------------------------------


@pytest.mark.parametrize("seed", [0, 1])
def test_cw_l2_near_hyperplane_distance(seed):
    model, utt, margin = linear_case(seed=seed)
    spec = AttackSpec("cw", 2, lr=1e-2, max_cw_iters=200, c_search_steps=6, c_init=1e-2)
    ex = cw(model, utt, spec)
    dist = margin / np.linalg.norm(model.w.detach().numpy())
    assert ex.success
    assert ex.l2_norm == pytest.approx(dist, rel=0.10)


def test_cw_already_misclassified():
    model, utt, _ = linear_case(seed=2)
    wrong = Utt("w", utt.waveform, 1 - utt.speaker_id)
    ex = cw(model, wrong, AttackSpec("cw", 2, kappa=0.0, lr=1e-2, max_cw_iters=50))
    assert ex.success
    assert ex.l2_norm <= 1e-3


def test_cw_kappa_raises_adversarial_margin():
    model, utt, _ = linear_case(seed=3)
    margins = []
    for kappa in (0.0, 0.25, 0.5):
        ex = cw(model, utt, AttackSpec("cw", 2, kappa=kappa, lr=1e-2, max_cw_iters=200))
        assert ex.success
        margins.append(_logit_margin(model, ex.adversarial_waveform, utt.speaker_id))
    assert margins == sorted(margins)


def test_cw_linf_and_l0_succeed_and_stay_in_box():
    model, utt, margin = linear_case(seed=5)
    linf = cw(model, utt, AttackSpec("cw", INF, lr=1e-2, max_cw_iters=100, outer_steps=6))
    l2 = cw(model, utt, AttackSpec("cw", 2, lr=1e-2, max_cw_iters=100))
    l0 = cw(model, utt, AttackSpec("cw", 0, lr=1e-2, max_cw_iters=100, outer_steps=4))
    for ex in (linf, l2, l0):
        assert ex.success
        assert np.all(np.abs(ex.adversarial_waveform) <= 1.0)
    # no successful perturbation beats the analytic L-inf distance margin/||w||_1
    assert linf.linf_norm >= margin / np.abs(model.w.detach().numpy()).sum() - 1e-12
    assert np.count_nonzero(l0.delta) < np.count_nonzero(l2.delta)


def test_cw_unreachable_returns_failure():
    # zero weights: no perturbation can move the score
    model = LinearDouble(np.zeros(8), b=1.0)
    utt = Utt("z", np.full(8, 0.1), 1)
    ex = cw(model, utt, AttackSpec("cw", 2, max_cw_iters=20, c_search_steps=2, lr=1e-2))
    assert not ex.success


def test_attack_success_definition():
    model, utt, _ = linear_case()
    assert not attack_success(model, utt.waveform, utt.speaker_id)
    assert attack_success(model, utt.waveform, 1 - utt.speaker_id)
