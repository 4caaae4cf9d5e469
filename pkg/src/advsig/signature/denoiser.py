"""Perturbation estimation: a waveform denoiser and the oracle shortcut."""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from ..errors import ConfigurationError, DataError, DependencyError, UsageError

log = logging.getLogger(__name__)

DEFAULT_RESOLUTIONS = ((512, 128, 512), (1024, 256, 1024), (256, 64, 256))


class MRSTFTLoss(nn.Module):
    """Multi-resolution STFT loss plus a weighted waveform L1 term.

    Each resolution ``(n_fft, hop, win)`` contributes spectral convergence
    ``||S - S_hat||_F / ||S||_F`` and the mean absolute log-magnitude error.
    """

    def __init__(self, resolutions=DEFAULT_RESOLUTIONS, l1_weight=1.0, eps=1e-7):
        super().__init__()
        if len(resolutions) < 3:
            raise ConfigurationError("at least three STFT resolutions are required")
        self.resolutions = tuple(tuple(int(v) for v in r) for r in resolutions)
        self.l1_weight = float(l1_weight)
        self.eps = eps
        for i, (_, _, win) in enumerate(self.resolutions):
            self.register_buffer(f"win{i}", torch.hann_window(win), persistent=False)

    def _mag(self, x, i):
        n_fft, hop, win = self.resolutions[i]
        spec = torch.stft(
            x, n_fft, hop, win, getattr(self, f"win{i}").to(x.dtype), center=True, return_complex=True
        )
        return torch.sqrt(spec.real**2 + spec.imag**2 + self.eps)

    def per_sample(self, estimate, target):
        """Loss per row of (B, T) batches."""
        total = torch.zeros(target.shape[0], dtype=target.dtype, device=target.device)
        for i in range(len(self.resolutions)):
            s, s_hat = self._mag(target, i), self._mag(estimate, i)
            sc = torch.linalg.vector_norm(s - s_hat, dim=(1, 2)) / torch.linalg.vector_norm(s, dim=(1, 2))
            mag = (torch.log(s) - torch.log(s_hat)).abs().mean(dim=(1, 2))
            total = total + sc + mag
        total = total / len(self.resolutions)
        return total + self.l1_weight * (estimate - target).abs().mean(dim=-1)

    def forward(self, estimate, target):
        return self.per_sample(estimate, target).mean()


class Denoiser(nn.Module):
    """Spectral-mask encoder-decoder: waveform in, waveform out.

    A small 2-D conv encoder-decoder reads the log-magnitude STFT of ``x`` and
    predicts a gain ``M = 2 sigmoid(z)`` per time-frequency bin; the output is
    the inverse STFT of ``M * STFT(x)`` with the input phase. The last layer
    starts at zero, so an untrained denoiser is the identity (up to STFT
    round-off).
    """

    def __init__(self, channels=(8, 16), n_fft=512, hop=128):
        super().__init__()
        self.channels = tuple(channels)
        self.n_fft, self.hop = n_fft, hop
        self.register_buffer("window", torch.hann_window(n_fft), persistent=False)
        self.enc = nn.ModuleList()
        cin = 1
        for i, c in enumerate(channels):
            d = 2**i
            self.enc.append(nn.Sequential(nn.Conv2d(cin, c, 3, padding=d, dilation=d), nn.SiLU()))
            cin = c
        self.dec = nn.ModuleList()
        for c in reversed(self.channels[:-1]):
            self.dec.append(nn.Sequential(nn.Conv2d(cin, c, 3, padding=1), nn.SiLU()))
            cin = c
        self.out = nn.Conv2d(cin, 1, 1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def mask(self, spec):
        feat = torch.log(spec.abs() + 1e-7)
        feat = feat - feat.mean(dim=(1, 2), keepdim=True)
        h = feat.unsqueeze(1)
        skips = []
        for layer in self.enc:
            h = layer(h)
            skips.append(h)
        for layer, skip in zip(self.dec, reversed(skips[:-1])):
            h = layer(h) + skip
        return 2 * torch.sigmoid(self.out(h)[:, 0])

    def forward(self, x):
        spec = torch.stft(x, self.n_fft, self.hop, window=self.window.to(x.dtype), center=True, return_complex=True)
        y = torch.istft(spec * self.mask(spec), self.n_fft, self.hop, window=self.window.to(x.dtype), center=True, length=x.shape[-1])
        return y


@dataclass
class DenoiserConfig:
    epochs: int = 20
    batch_size: int = 16
    lr: float = 3e-3
    l1_weight: float = 1.0
    resolutions: tuple = DEFAULT_RESOLUTIONS
    heldout_fraction: float = 0.1
    seed: int = 0
    channels: tuple = (8, 16)


@dataclass
class PerturbationEstimate:
    delta_hat: np.ndarray
    source_mode: str


def paired_examples(manifest, splits=("train", "val")):
    """``(x_adv, x_clean, utt_id)`` for every adversarial record, plus benign identity pairs."""
    by_id = manifest.by_id()
    pairs = []
    for r in manifest.records:
        if r.split not in splits:
            continue
        if r.kind == "adversarial":
            ref = by_id.get(r.clean_ref_id)
            if ref is None or ref.kind != "benign":
                raise DataError(f"{r.utt_id}: no benign reference {r.clean_ref_id!r}")
            pairs.append((manifest.waveform(r.utt_id), manifest.waveform(ref.utt_id), r.utt_id))
        else:
            x = manifest.waveform(r.utt_id)
            pairs.append((x, x, r.utt_id))
    return pairs


def _stack(arrs):
    return torch.from_numpy(np.stack([np.asarray(a, dtype=np.float32) for a in arrs]))


@torch.no_grad()
def _eval_loss(model, loss_fn, x, y, batch_size=64):
    if len(x) == 0:
        return float("nan")
    total = 0.0
    for i in range(0, len(x), batch_size):
        total += float(loss_fn.per_sample(model(x[i : i + batch_size]), y[i : i + batch_size]).sum())
    return total / len(x)


def train_denoiser(pairs, hyperparams=None):
    """Fit a :class:`Denoiser` on ``(x_adv, x_clean[, id])`` pairs.

    A seeded ``heldout_fraction`` of the pairs is kept aside; the returned model
    is the checkpoint with the lowest held-out loss (epoch 0, the untrained
    identity, included).
    """
    hp = hyperparams or DenoiserConfig()
    if not pairs:
        raise DataError("no training pairs")
    for p in pairs:
        if p[1] is None or np.shape(p[0]) != np.shape(p[1]):
            raise DataError("every adversarial input needs a clean reference of the same length")
    gen = torch.Generator().manual_seed(hp.seed)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(hp.seed)
        model = Denoiser(hp.channels)
    loss_fn = MRSTFTLoss(hp.resolutions, hp.l1_weight)
    order = torch.randperm(len(pairs), generator=gen).tolist()
    n_held = int(round(hp.heldout_fraction * len(pairs))) if len(pairs) > 1 else 0
    held, train = order[:n_held], order[n_held:]
    x_tr, y_tr = _stack([pairs[i][0] for i in train]), _stack([pairs[i][1] for i in train])
    x_ho, y_ho = (_stack([pairs[i][0] for i in held]), _stack([pairs[i][1] for i in held])) if held else ([], [])
    model.eval()
    best_loss = _eval_loss(model, loss_fn, x_ho, y_ho)
    initial_loss = best_loss
    best_state = {k: v.clone() for k, v in model.state_dict().items()}
    history = [{"epoch": 0, "train_loss": None, "heldout_loss": best_loss}]
    opt = torch.optim.Adam(model.parameters(), lr=hp.lr)
    for epoch in range(hp.epochs):
        model.train()
        perm = torch.randperm(len(train), generator=gen)
        total = 0.0
        for i in range(0, len(train), hp.batch_size):
            idx = perm[i : i + hp.batch_size]
            loss = loss_fn(model(x_tr[idx]), y_tr[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        model.eval()
        ho = _eval_loss(model, loss_fn, x_ho, y_ho)
        history.append({"epoch": epoch + 1, "train_loss": total / len(train), "heldout_loss": ho})
        if held and ho < best_loss:
            best_loss = ho
            best_state = {k: v.clone() for k, v in model.state_dict().items()}
        elif not held:
            best_state = {k: v.clone() for k, v in model.state_dict().items()}
    model.load_state_dict(best_state)
    model.eval()
    model.config = hp
    model.history = history
    model.heldout_loss = best_loss
    model.initial_heldout_loss = initial_loss
    model.heldout_ids = [pairs[i][2] for i in held] if len(pairs[0]) > 2 else held
    return model


@torch.no_grad()
def denoise(denoiser, waveforms):
    x = _stack(waveforms) if isinstance(waveforms, (list, tuple)) else torch.as_tensor(np.asarray(waveforms), dtype=torch.float32)
    single = x.dim() == 1
    out = denoiser(x[None] if single else x)
    return (out[0] if single else out).numpy()


def estimate_perturbation(source, x_prime, x_clean=None):
    """``x' - D(x')`` for a denoiser, or ``x' - x_clean`` when ``source == "oracle"``."""
    x_prime = np.asarray(x_prime)
    if isinstance(source, str):
        if source != "oracle":
            raise UsageError(f"unknown estimator {source!r}")
        if x_clean is None:
            raise UsageError("oracle estimation needs the clean reference")
        x_clean = np.asarray(x_clean)
        if x_clean.shape != x_prime.shape:
            raise DataError("clean reference and input differ in length")
        return PerturbationEstimate(x_prime - x_clean, "oracle")
    if denoiser_training(source):
        raise ConfigurationError("denoiser must be in eval state")
    delta = x_prime.astype(np.float32) - denoise(source, x_prime.astype(np.float32))
    return PerturbationEstimate(delta, "learned")


def denoiser_training(model):
    return bool(getattr(model, "training", False))


def save_denoiser(model, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), d / "denoiser.pt")
    cfg = asdict(getattr(model, "config", DenoiserConfig()))
    meta = {"config": cfg, "heldout_loss": getattr(model, "heldout_loss", None), "history": getattr(model, "history", [])}
    (d / "denoiser.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return d


def load_denoiser(directory):
    d = Path(directory)
    if not (d / "denoiser.json").exists():
        raise DependencyError(d / "denoiser.json", "denoiser checkpoint")
    meta = json.loads((d / "denoiser.json").read_text())
    cfg = meta["config"]
    cfg["resolutions"] = tuple(tuple(r) for r in cfg["resolutions"])
    cfg["channels"] = tuple(cfg["channels"])
    model = Denoiser(cfg["channels"])
    model.load_state_dict(torch.load(d / "denoiser.pt", weights_only=True))
    model.config = DenoiserConfig(**cfg)
    model.history = meta.get("history", [])
    model.heldout_loss = meta.get("heldout_loss")
    return model.eval()
