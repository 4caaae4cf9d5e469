"""FGSM, iterative FGSM and PGD (untargeted, white-box).

The ``*_batch`` functions take a float64 batch ``x0`` of shape (B, T) and
labels ``y``; the per-utterance wrappers build :class:`AdversarialExample`
records. Losses are summed over the batch, so each row's trajectory is the
same as if it were attacked alone (up to floating-point reduction order).
"""

import hashlib

import numpy as np
import torch

from ..errors import ConfigurationError
from ..victim import batch_loss, batch_loss_and_grad, predict
from .lp import grad_step_direction, project_lp, random_in_ball
from .spec import AdversarialExample


def derived_seed(seed, utt_id, *extra):
    """64-bit seed from the spec seed and the utterance id (order/worker independent)."""
    key = "|".join(str(s) for s in (seed, utt_id) + extra)
    return int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "little") & ((1 << 63) - 1)


def _clip(x):
    return torch.clamp(x, -1.0, 1.0)


def fgsm_batch(model, x0, y, eps):
    _, g = batch_loss_and_grad(model, x0, y)
    return _clip(x0 + eps * torch.sign(g))


def iter_fgsm_batch(model, x0, y, eps, alpha, steps):
    x = x0.clone()
    for _ in range(steps):
        _, g = batch_loss_and_grad(model, x, y)
        x = _clip(x + alpha * torch.sign(g))
        x = _clip(x0 + torch.clamp(x - x0, -eps, eps))
    return x


def pgd_batch(model, x0, y, spec, seeds=None, on_step=None):
    """Projected gradient ascent on the cross-entropy inside the ``spec.p`` ball.

    ``seeds`` gives one random-start seed per row. ``on_step(t, x, loss)`` is
    called after every projected iterate (``t = 0`` is the start point, with
    the loss of the start point).
    """
    p, eps = spec.p, spec.eps
    delta = torch.zeros_like(x0)
    if spec.random_start and eps > 0:
        seeds = seeds if seeds is not None else [spec.seed] * x0.shape[0]
        rows = []
        for s in seeds:
            gen = torch.Generator().manual_seed(int(s))
            rows.append(random_in_ball((x0.shape[-1],), p, eps, gen, dtype=x0.dtype))
        delta = torch.stack(rows)
    x = _clip(x0 + delta)
    for t in range(spec.steps):
        loss, g = batch_loss_and_grad(model, x, y)
        if on_step is not None and t == 0:
            on_step(0, x, loss)
        d = grad_step_direction(g, p, topk_frac=spec.l1_topk, dense_l1=spec.l1_dense)
        x = _clip(x + spec.alpha * d)
        delta = project_lp(x - x0, p, eps)
        # clipping toward the box only shrinks |delta_i|, so the iterate stays in the ball
        x = _clip(x0 + delta)
        if on_step is not None:
            on_step(t + 1, x, batch_loss(model, x, y))
    return x


def _batch_from_utts(utts):
    x0 = torch.from_numpy(np.stack([np.asarray(u.waveform, dtype=np.float64) for u in utts]))
    y = torch.tensor([int(u.speaker_id) for u in utts], dtype=torch.long)
    return x0, y


def attack_success(model, adversarial_waveform, true_label):
    """Untargeted criterion: the victim's label differs from ``true_label``."""
    label, _ = predict(model, adversarial_waveform)
    return label != int(true_label)


def finalize(model, utt, x_adv, spec, victim_id, seed, clean_prediction=None):
    """Record an adversarial example with predictions recomputed one utterance at a time."""
    clean = np.asarray(utt.waveform, dtype=np.float64)
    if clean_prediction is None:
        clean_prediction, _ = predict(model, clean)
    ex = AdversarialExample.build(
        clean,
        np.asarray(x_adv, dtype=np.float64),
        clean_id=utt.id,
        attack_label=spec.label,
        victim_id=victim_id,
        success=False,
        true_label=int(utt.speaker_id),
        clean_prediction=int(clean_prediction),
        adversarial_prediction=-1,
        eps=float(spec.eps),
        seed=int(seed),
    )
    ex.adversarial_prediction, _ = predict(model, ex.adversarial_waveform)
    ex.success = ex.adversarial_prediction != ex.true_label
    return ex


def run_attack_batch(model, utts, spec, victim_id=None):
    """Attack a list of equal-length utterances with one spec; returns one record per utterance."""
    from .cw import cw_batch

    if not utts:
        return []
    victim_id = victim_id or getattr(model, "arch_id", "model")
    x0, y = _batch_from_utts(utts)
    seeds = [derived_seed(spec.seed, u.id) for u in utts]
    if spec.family == "fgsm":
        x = fgsm_batch(model, x0, y, spec.eps)
    elif spec.family == "iter-fgsm":
        x = iter_fgsm_batch(model, x0, y, spec.eps, spec.alpha, spec.steps)
    elif spec.family == "pgd":
        x = pgd_batch(model, x0, y, spec, seeds)
    elif spec.family == "cw":
        x = cw_batch(model, x0, y, spec)
    else:  # pragma: no cover - AttackSpec already validates
        raise ConfigurationError(spec.family)
    x = x.detach().numpy()
    return [finalize(model, u, x[i], spec, victim_id, seeds[i]) for i, u in enumerate(utts)]


def _single(model, utterance, spec, family, victim_id):
    if spec.family != family:
        raise ConfigurationError(f"spec family is {spec.family!r}, expected {family!r}")
    return run_attack_batch(model, [utterance], spec, victim_id)[0]


def fgsm(model, utterance, spec, victim_id=None):
    return _single(model, utterance, spec, "fgsm", victim_id)


def iter_fgsm(model, utterance, spec, victim_id=None):
    return _single(model, utterance, spec, "iter-fgsm", victim_id)


def pgd(model, utterance, spec, victim_id=None):
    return _single(model, utterance, spec, "pgd", victim_id)


def attack(model, utterance, spec, victim_id=None):
    """Dispatch on ``spec.family``."""
    return run_attack_batch(model, [utterance], spec, victim_id)[0]
