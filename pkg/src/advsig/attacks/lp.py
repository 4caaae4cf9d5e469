"""Norm-specific steepest-ascent directions and exact Euclidean projections onto Lp balls.

Every function works row-wise on the last axis, takes numpy arrays or torch
tensors, and returns the same type it was given.
"""

import math

import numpy as np
import torch

from ..errors import ConfigurationError, NumericError

INF = math.inf


def _to_torch(v):
    if isinstance(v, torch.Tensor):
        return v, False
    return torch.as_tensor(np.asarray(v, dtype=np.float64)), True


def _back(t, was_numpy):
    return t.numpy() if was_numpy else t


def topk_count(n, frac=0.01):
    return max(1, math.ceil(frac * n))


def grad_step_direction(grad, p, k=None, topk_frac=0.01, dense_l1=False):
    """Unit-norm ascent direction for a gradient.

    p=inf gives ``sign(grad)``; p=2 gives ``grad / ||grad||_2``; p=1 puts
    ``sign(grad_i) / k`` on the ``k`` largest-magnitude coordinates
    (``k = max(1, ceil(topk_frac * dims))`` unless given), or with
    ``dense_l1`` the whole gradient scaled to unit L1 norm. All-zero rows map
    to zero.
    """
    g, was_np = _to_torch(grad)
    if not torch.isfinite(g).all():
        raise NumericError("gradient has non-finite entries")
    if p == INF:
        return _back(torch.sign(g), was_np)
    if p == 2:
        n = torch.linalg.vector_norm(g, dim=-1, keepdim=True)
        return _back(torch.where(n > 0, g / torch.where(n > 0, n, 1), torch.zeros_like(g)), was_np)
    if p == 1:
        if dense_l1:
            n = g.abs().sum(dim=-1, keepdim=True)
            return _back(torch.where(n > 0, g / torch.where(n > 0, n, 1), torch.zeros_like(g)), was_np)
        k = k or topk_count(g.shape[-1], topk_frac)
        idx = torch.topk(g.abs(), k, dim=-1).indices
        out = torch.zeros_like(g)
        out.scatter_(-1, idx, torch.sign(torch.gather(g, -1, idx)) / k)
        return _back(out, was_np)
    raise ConfigurationError(f"no step direction for norm {p!r}")


def _project_l1(v, eps):
    # sort-based simplex projection applied to |v|, signs restored afterwards
    a = v.abs()
    inside = a.sum(dim=-1, keepdim=True) <= eps
    u, _ = torch.sort(a, dim=-1, descending=True)
    css = torch.cumsum(u, dim=-1)
    j = torch.arange(1, v.shape[-1] + 1, dtype=v.dtype, device=v.device)
    cond = u - (css - eps) / j > 0
    rho = cond.to(torch.int64).cumsum(dim=-1).argmax(dim=-1, keepdim=True)
    # argmax of the running count picks the last index where cond holds
    theta = (torch.gather(css, -1, rho) - eps) / (rho + 1).to(v.dtype)
    w = torch.sign(v) * torch.clamp(a - theta, min=0.0)
    return torch.where(inside, v, w)


def project_lp(delta, p, eps):
    """Nearest point (in L2) to ``delta`` inside ``{d : ||d||_p <= eps}``."""
    if eps < 0:
        raise ConfigurationError("eps must be >= 0")
    v, was_np = _to_torch(delta)
    if p == INF:
        out = torch.clamp(v, -eps, eps)
    elif p == 2:
        n = torch.linalg.vector_norm(v, dim=-1, keepdim=True)
        scale = torch.where(n > eps, eps / torch.where(n > 0, n, 1), torch.ones_like(n))
        out = v * scale
    elif p == 1:
        if eps == 0:
            out = torch.zeros_like(v)
        else:
            flat = v.reshape(-1, v.shape[-1]) if v.dim() > 0 else v.reshape(1, 1)
            out = _project_l1(flat, eps).reshape(v.shape)
    else:
        raise ConfigurationError(f"projection supports p in (1, 2, inf), got {p!r}")
    return _back(out, was_np)


def random_in_ball(shape, p, eps, generator, dtype=torch.float64):
    """Uniform sample from the Lp ball of radius ``eps`` (one row, last axis = dims)."""
    n = shape[-1]
    if p == INF:
        return (torch.rand(shape, generator=generator, dtype=dtype) * 2 - 1) * eps
    radius = torch.rand(shape[:-1] + (1,), generator=generator, dtype=dtype) ** (1.0 / n) * eps
    if p == 2:
        g = torch.randn(shape, generator=generator, dtype=dtype)
        return g / torch.linalg.vector_norm(g, dim=-1, keepdim=True) * radius
    if p == 1:
        # normalised exponentials are uniform on the simplex; random signs fill the cross-polytope
        e = -torch.log(torch.rand(shape, generator=generator, dtype=dtype).clamp_min(1e-300))
        s = torch.where(torch.rand(shape, generator=generator, dtype=dtype) < 0.5, -1.0, 1.0).to(dtype)
        return s * e / e.sum(dim=-1, keepdim=True) * radius
    raise ConfigurationError(f"no random start for norm {p!r}")
