"""Speaker-identification victims: build, train, predict, and input gradients."""

import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import ConfigurationError, DataError, DependencyError
from .features import FeatureConfig, LogMel
from .nets import EcapaTdnn, ResNet2d, count_parameters, graph_signature

log = logging.getLogger(__name__)

VICTIM_ARCHS = ("resnet34", "lresnet34", "fwseresnet", "ecapatdnn")


def _make_backbone(arch_id, n_mels, emb_dim):
    if arch_id == "resnet34":
        return ResNet2d(n_mels, channels=(16, 32, 64), blocks=(1, 1, 1), emb_dim=emb_dim)
    if arch_id == "lresnet34":
        return ResNet2d(n_mels, channels=(8, 16, 32), blocks=(1, 1, 1), emb_dim=emb_dim)
    if arch_id == "fwseresnet":
        return ResNet2d(n_mels, channels=(16, 32, 64), blocks=(1, 1, 1), emb_dim=emb_dim, fwse=True)
    if arch_id == "ecapatdnn":
        return EcapaTdnn(n_mels, channels=48, emb_dim=emb_dim)
    raise ConfigurationError(f"unknown victim architecture {arch_id!r}; expected one of {VICTIM_ARCHS}")


class VictimModel(nn.Module):
    """Waveform in, speaker logits out. Features are computed inside forward."""

    def __init__(self, arch_id, num_speakers, feature_config=None, seed=0, emb_dim=64):
        super().__init__()
        self.arch_id = arch_id
        self.num_speakers = num_speakers
        self.feature_config = feature_config or FeatureConfig()
        self.seed = seed
        self.emb_dim = emb_dim
        self.train_history = []
        self.frontend = LogMel(self.feature_config)
        self.backbone = _make_backbone(arch_id, self.feature_config.n_mels, emb_dim)
        self.head = nn.Linear(emb_dim, num_speakers)

    def embed(self, wave):
        feats = self.frontend(wave)
        # per-utterance mean normalisation over time
        feats = feats - feats.mean(dim=-1, keepdim=True)
        return self.backbone(feats)

    def forward(self, wave):
        return self.head(F.silu(self.embed(wave)))

    @property
    def dtype(self):
        return self.head.weight.dtype

    def metadata(self):
        return {
            "arch_id": self.arch_id,
            "num_speakers": self.num_speakers,
            "feature_config": self.feature_config.to_dict(),
            "seed": self.seed,
            "emb_dim": self.emb_dim,
            "train_history": self.train_history,
        }


def build_victim(arch_id, num_speakers, feature_config=None, seed=0):
    if arch_id not in VICTIM_ARCHS:
        raise ConfigurationError(f"unknown victim architecture {arch_id!r}; expected one of {VICTIM_ARCHS}")
    if num_speakers < 2:
        raise ConfigurationError("a victim needs at least 2 speakers")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = VictimModel(arch_id, num_speakers, feature_config, seed)
    return model.eval()


def parameter_checksum(model):
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def layer_graph_hash(model):
    return hashlib.sha256(graph_signature(model).encode()).hexdigest()


def describe_architectures(num_speakers=20, feature_config=None):
    """Parameter count and layer-graph hash of every victim architecture."""
    out = {}
    for arch in VICTIM_ARCHS:
        m = build_victim(arch, num_speakers, feature_config)
        out[arch] = {"parameters": count_parameters(m), "graph_hash": layer_graph_hash(m)[:16]}
    return out


@dataclass
class VictimTrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 3e-3
    weight_decay: float = 1e-4
    seed: int = 0


def _stack(utts):
    x = torch.from_numpy(np.stack([np.asarray(u.waveform, dtype=np.float32) for u in utts]))
    y = torch.tensor([int(u.speaker_id) for u in utts], dtype=torch.long)
    return x, y


def _check_labels(utts, num_speakers):
    for u in utts:
        if not 0 <= int(u.speaker_id) < num_speakers:
            raise DataError(f"utterance {u.id}: speaker label {u.speaker_id} outside [0, {num_speakers})")


@torch.no_grad()
def accuracy(model, utts, batch_size=64):
    if not utts:
        return float("nan")
    was_training = model.training
    model.eval()
    correct = 0
    for i in range(0, len(utts), batch_size):
        x, y = _stack(utts[i : i + batch_size])
        correct += int((model(x.to(model.dtype)).argmax(-1) == y).sum())
    model.train(was_training)
    return correct / len(utts)


def train_victim(model, corpus_train, corpus_val, hyperparams=None):
    """Train with cross-entropy; returns ``(model, val_accuracy)`` with the model in eval state.

    ``corpus_train``/``corpus_val`` are sequences of utterances (anything with
    ``waveform``, ``speaker_id`` and ``id``). Waveforms in a batch must share a
    length.
    """
    hp = hyperparams or VictimTrainConfig()
    if not corpus_train:
        raise DataError("training corpus is empty")
    _check_labels(corpus_train, model.num_speakers)
    _check_labels(corpus_val, model.num_speakers)
    if hp.epochs <= 0:
        model.eval()
        return model, accuracy(model, corpus_val)

    gen = torch.Generator().manual_seed(hp.seed)
    opt = torch.optim.Adam(model.parameters(), lr=hp.lr, weight_decay=hp.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=hp.epochs)
    x_all, y_all = _stack(corpus_train)
    n = len(corpus_train)
    for epoch in range(hp.epochs):
        model.train()
        perm = torch.randperm(n, generator=gen)
        total = 0.0
        for i in range(0, n, hp.batch_size):
            idx = perm[i : i + hp.batch_size]
            if len(idx) < 2:
                continue  # BatchNorm needs more than one sample
            logits = model(x_all[idx])
            loss = F.cross_entropy(logits, y_all[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        sched.step()
        val_acc = accuracy(model, corpus_val)
        model.train_history.append({"epoch": epoch + 1, "loss": total / n, "val_accuracy": val_acc})
        log.debug("victim %s epoch %d loss %.4f val %.3f", model.arch_id, epoch + 1, total / n, val_acc)
    model.eval()
    return model, accuracy(model, corpus_val)


def _as_batch(waveform, dtype):
    x = torch.as_tensor(np.asarray(waveform), dtype=dtype)
    if not torch.isfinite(x).all():
        raise DataError("waveform contains non-finite samples")
    return x.unsqueeze(0) if x.dim() == 1 else x


def _require_eval(model):
    if model.training:
        raise ConfigurationError("model must be in eval state")


def _model_dtype(model):
    for p in model.parameters():
        return p.dtype
    return torch.float64


@torch.no_grad()
def predict(model, waveform):
    """Return ``(speaker_label, logits)`` for a single waveform."""
    _require_eval(model)
    logits = model(_as_batch(waveform, _model_dtype(model)))[0]
    return int(torch.argmax(logits)), logits.cpu().numpy()


@torch.no_grad()
def batch_loss(model, x, y):
    return F.cross_entropy(model(x.to(_model_dtype(model))), y, reduction="none")


def batch_loss_and_grad(model, x, y):
    """Per-sample cross-entropy and its gradient w.r.t. ``x`` (B, T).

    The loss is summed rather than averaged so each row's gradient does not
    depend on the batch size. ``x`` may be float64; it is cast to the model
    dtype for the forward pass and the gradient comes back in ``x``'s dtype.
    """
    x = x.detach().requires_grad_(True)
    logits = model(x.to(_model_dtype(model)))
    losses = F.cross_entropy(logits, y, reduction="none")
    (grad,) = torch.autograd.grad(losses.sum(), x, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(x)
    return losses.detach(), grad.detach()


def input_gradient(model, waveform, true_label):
    """Gradient of the cross-entropy loss w.r.t. the input waveform."""
    _require_eval(model)
    dtype = _model_dtype(model)
    x = _as_batch(waveform, dtype)
    with torch.no_grad():
        n_classes = model(x).shape[-1]
    if not 0 <= int(true_label) < n_classes:
        raise DataError(f"label {true_label} outside [0, {n_classes})")
    y = torch.tensor([int(true_label)])
    _, grad = batch_loss_and_grad(model, x, y)
    return grad[0].cpu().numpy().reshape(np.shape(waveform))


def save_victim(model, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), d / "model.pt")
    (d / "meta.json").write_text(json.dumps(model.metadata(), indent=2, sort_keys=True))
    return d


def load_victim(directory):
    d = Path(directory)
    if not (d / "meta.json").exists():
        raise DependencyError(d / "meta.json", "victim checkpoint")
    meta = json.loads((d / "meta.json").read_text())
    model = VictimModel(
        meta["arch_id"],
        meta["num_speakers"],
        FeatureConfig.from_dict(meta["feature_config"]),
        meta["seed"],
        meta.get("emb_dim", 64),
    )
    model.load_state_dict(torch.load(d / "model.pt", weights_only=True))
    model.train_history = meta.get("train_history", [])
    return model.eval()
