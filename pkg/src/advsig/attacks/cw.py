"""Carlini-Wagner attacks (L2, L-inf, L0), untargeted, batched over utterances.

All three share one inner optimiser: Adam over ``w`` with ``x' = tanh(w)``
(audio already lives in [-1, 1]) minimising ``penalty(delta) + c * f(x')``
where ``f = max(Z_y - max_{i != y} Z_i, -kappa)``.

* L2: penalty is ``||delta||_2^2``; ``c`` is bisected per row, keeping the
  successful example with the smallest L2 norm.
* L-inf: penalty is ``sum(max(|delta_i| - tau, 0))``; ``tau`` shrinks while
  the attack keeps succeeding, ``c`` doubles while it has never succeeded.
* L0: runs the L2 core, then repeatedly freezes the active coordinates that
  contribute least (``|grad_i * delta_i|``) and re-optimises on the rest
  until the attack fails; the last success is returned.

Every per-row quantity (``c``, ``tau``, masks, Adam moments) is independent
across rows.
"""

import torch

from ..errors import ConfigurationError
from ..victim import _model_dtype
from .spec import INF

_BIG = 1e10
_TAU_DECAY = 0.9
_EDGE = 1.0 - 1e-6


def _margin(logits, y):
    """``Z_y - max_{i != y} Z_i`` per row."""
    zy = logits.gather(1, y[:, None])[:, 0]
    other = logits.masked_fill(torch.nn.functional.one_hot(y, logits.shape[1]).bool(), -float("inf"))
    return zy - other.max(dim=1).values


def _atanh(x):
    return torch.atanh(torch.clamp(x, -_EDGE, _EDGE))


def _size(delta, p):
    if p == INF:
        return delta.abs().amax(dim=-1)
    if p == 0:
        return (delta != 0).sum(dim=-1).to(delta.dtype)
    return torch.linalg.vector_norm(delta, dim=-1)


def _optimize(model, x0, y, spec, c, penalty, p, mask=None, tau=None, w_init=None, active=None):
    """One inner run. Returns ``(best_delta, found, last_delta, w)``.

    ``best_delta`` is the successful iterate with the smallest size in norm ``p``
    (size measured after masking); rows that never succeeded keep the last iterate.
    """
    dtype = _model_dtype(model)
    w = (_atanh(x0) if w_init is None else w_init).clone().requires_grad_(True)
    opt = torch.optim.Adam([w], lr=spec.lr)
    n = x0.shape[0]
    best = torch.zeros_like(x0)
    best_size = torch.full((n,), float("inf"), dtype=x0.dtype)
    found = torch.zeros(n, dtype=torch.bool)
    act = torch.ones(n, dtype=torch.bool) if active is None else active

    def current():
        xa = torch.tanh(w)
        if mask is not None:
            xa = x0 + mask * (xa - x0)
        return xa

    for it in range(spec.max_cw_iters + 1):
        xa = current()
        delta = xa - x0
        logits = model(xa.to(dtype))
        margin = _margin(logits, y)
        with torch.no_grad():
            ok = (-margin >= spec.kappa) & (logits.argmax(dim=1) != y) & act
            size = _size(delta.detach(), p)
            better = ok & (size < best_size)
            if better.any():
                best[better] = delta.detach()[better]
                best_size[better] = size[better]
                found |= better
        if it == spec.max_cw_iters:
            break
        f = torch.clamp(margin, min=-spec.kappa)
        if penalty == "l2":
            pen = (delta**2).sum(dim=-1)
        else:
            pen = torch.relu(delta.abs() - tau[:, None]).sum(dim=-1)
        loss = (pen + c.to(pen.dtype) * f.to(pen.dtype)) * act
        # autograd.grad keeps the model's own .grad buffers untouched
        (gw,) = torch.autograd.grad(loss.sum(), w)
        w.grad = gw
        opt.step()
    last = current().detach() - x0
    best = torch.where(found[:, None], best, last)
    return best, found, last, w.detach()


def _l2_search(model, x0, y, spec, mask=None, active=None, c_start=None):
    n = x0.shape[0]
    c = torch.full((n,), float(spec.c_init), dtype=x0.dtype) if c_start is None else c_start.clone()
    lo = torch.zeros(n, dtype=x0.dtype)
    hi = torch.full((n,), _BIG, dtype=x0.dtype)
    best = torch.zeros_like(x0)
    best_norm = torch.full((n,), float("inf"), dtype=x0.dtype)
    best_c = c.clone()
    found = torch.zeros(n, dtype=torch.bool)
    last = torch.zeros_like(x0)
    for _ in range(max(1, spec.c_search_steps)):
        d, ok, last, _ = _optimize(model, x0, y, spec, c, "l2", 2, mask=mask, active=active)
        nrm = torch.linalg.vector_norm(d, dim=-1)
        better = ok & (nrm < best_norm)
        best[better] = d[better]
        best_norm[better] = nrm[better]
        best_c[better] = c[better]
        found |= ok
        hi = torch.where(ok, torch.minimum(hi, c), hi)
        lo = torch.where(ok, lo, torch.maximum(lo, c))
        c = torch.where(hi < _BIG / 10, (lo + hi) / 2, c * 2)
    best = torch.where(found[:, None], best, last)
    return best, found, best_c


def _cw_l2(model, x0, y, spec):
    best, _, _ = _l2_search(model, x0, y, spec)
    return x0 + best


def _cw_linf(model, x0, y, spec):
    n = x0.shape[0]
    c = torch.full((n,), float(spec.c_init), dtype=x0.dtype)
    tau = torch.ones(n, dtype=x0.dtype)
    best = torch.zeros_like(x0)
    ever = torch.zeros(n, dtype=torch.bool)
    done = torch.zeros(n, dtype=torch.bool)
    last = torch.zeros_like(x0)
    w = None
    for _ in range(max(1, spec.outer_steps)):
        active = ~done
        if not active.any():
            break
        d, ok, last_round, w = _optimize(model, x0, y, spec, c, "linf", INF, tau=tau, w_init=w, active=active)
        last = torch.where(active[:, None], last_round, last)
        ok = ok & active
        best[ok] = d[ok]
        linf = d.abs().amax(dim=-1)
        tau = torch.where(ok, torch.minimum(tau, linf) * _TAU_DECAY, tau)
        done |= active & ~ok & ever
        c = torch.where(active & ~ok & ~ever, c * 2, c)
        ever |= ok
    best = torch.where(ever[:, None], best, last)
    return x0 + best


def _cw_l0(model, x0, y, spec):
    best, found, c = _l2_search(model, x0, y, spec)
    mask = torch.ones_like(x0)
    done = ~found
    for _ in range(max(0, spec.outer_steps)):
        if done.all():
            break
        # rank active coordinates by their first-order contribution to the margin
        xa = (x0 + best).detach().requires_grad_(True)
        margin = _margin(model(xa.to(_model_dtype(model))), y)
        (g,) = torch.autograd.grad(margin.sum(), xa)
        contrib = (g * best).abs()
        contrib = torch.where(mask > 0, contrib, torch.full_like(contrib, float("inf")))
        n_active = mask.sum(dim=-1)
        n_drop = torch.clamp((n_active * spec.l0_drop).floor(), min=1).long()
        order = torch.argsort(contrib, dim=-1)
        ranks = torch.empty_like(order)
        ranks.scatter_(-1, order, torch.arange(x0.shape[-1]).expand_as(order))
        drop = (ranks < n_drop[:, None]) & ~done[:, None]
        trial = torch.where(drop, torch.zeros_like(mask), mask)
        # rows with nothing left to free cannot shrink further
        done |= trial.sum(dim=-1) < 1
        # fewer free coordinates need a larger c, so the search is rerun from the last one
        d, ok, c_new = _l2_search(model, x0, y, spec, mask=trial, active=~done, c_start=c)
        ok = ok & ~done
        c = torch.where(ok, c_new, c)
        best = torch.where(ok[:, None], d, best)
        mask = torch.where(ok[:, None], trial, mask)
        done |= ~ok
    return x0 + best


def cw_batch(model, x0, y, spec):
    """Dispatch on ``spec.p``; returns adversarial waveforms (B, T)."""
    if spec.p == 2:
        return _cw_l2(model, x0, y, spec).detach()
    if spec.p == INF:
        return _cw_linf(model, x0, y, spec).detach()
    return _cw_l0(model, x0, y, spec).detach()


def cw(model, utterance, spec, victim_id=None):
    from .gradient import run_attack_batch

    if spec.family != "cw":
        raise ConfigurationError(f"spec family is {spec.family!r}, expected 'cw'")
    return run_attack_batch(model, [utterance], spec, victim_id)[0]
