"""Signature classifiers: detection, attack-type and victim-model heads on a 10-d embedding."""

import csv
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from ..errors import ConfigurationError, DataError, DependencyError, UsageError
from ..features import FeatureConfig, LogMel
from ..nets import EcapaTdnn, ResNet2d
from .denoiser import estimate_perturbation

log = logging.getLogger(__name__)

SIG_ARCHS = ("lresnet34-sig", "ecapatdnn-sig")
TASKS = ("detection", "attack-type", "victim-model")
INPUT_MODES = ("raw", "delta-estimate")
DETECTION_LABELS = ("benign", "adversarial")
VICTIM_LABELS = ("ecapatdnn", "fwseresnet", "resnet34", "lresnet34")
EMBEDDING_DIM = 10

# perturbations sit far below speech level, so the log floor is much lower than the victims'
SIGNATURE_FEATURES = FeatureConfig(log_floor=1e-10)


def label_space_for(task, manifest, include_benign=False):
    """Ordered class names for ``task`` given the labels present in ``manifest``."""
    if task == "detection":
        return list(DETECTION_LABELS)
    if task == "attack-type":
        labels = manifest.attack_labels()
        return labels + ["benign"] if include_benign else labels
    if task == "victim-model":
        present = set(manifest.victim_ids())
        unknown = sorted(present - set(VICTIM_LABELS))
        return [v for v in VICTIM_LABELS if v in present] + unknown
    raise ConfigurationError(f"unknown task {task!r}; expected one of {TASKS}")


def assign_label(record, task, label_space):
    """Class index of a manifest record, or ``None`` when the task excludes it."""
    if task == "detection":
        return int(record.kind == "adversarial")
    if record.kind == "benign":
        return label_space.index("benign") if "benign" in label_space else None
    key = record.attack_label if task == "attack-type" else record.victim_id
    if key not in label_space:
        return None
    return label_space.index(key)


class SignatureNet(nn.Module):
    def __init__(self, arch_id, n_classes, feature_config=None, embedding_dim=EMBEDDING_DIM):
        super().__init__()
        if arch_id not in SIG_ARCHS:
            raise ConfigurationError(f"unknown classifier architecture {arch_id!r}; expected one of {SIG_ARCHS}")
        fc = feature_config or SIGNATURE_FEATURES
        self.frontend = LogMel(fc)
        self.norm = nn.BatchNorm1d(fc.n_mels)
        if arch_id == "lresnet34-sig":
            self.backbone = ResNet2d(fc.n_mels, channels=(8, 16, 32), blocks=(1, 1, 1), emb_dim=embedding_dim)
        else:
            self.backbone = EcapaTdnn(fc.n_mels, channels=48, emb_dim=embedding_dim)
        self.head = nn.Linear(embedding_dim, n_classes)

    def embed(self, x):
        return self.backbone(self.norm(self.frontend(x)))

    def forward(self, x):
        return self.head(self.embed(x))


@dataclass
class ClassifierConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 3e-3
    weight_decay: float = 1e-4
    seed: int = 0
    include_benign: bool = False


class SignatureClassifier:
    """Trained network plus everything needed to interpret its outputs."""

    def __init__(self, net, arch_id, task, label_space, input_mode, feature_config, config=None):
        self.net = net.eval()
        self.arch_id = arch_id
        self.task = task
        self.label_space = list(label_space)
        self.input_mode = input_mode
        self.feature_config = feature_config
        self.embedding_dim = EMBEDDING_DIM
        self.config = config or ClassifierConfig()
        self.history = []

    def metadata(self):
        return {
            "arch_id": self.arch_id,
            "task": self.task,
            "label_space": self.label_space,
            "input_mode": self.input_mode,
            "embedding_dim": self.embedding_dim,
            "feature_config": self.feature_config.to_dict(),
            "config": asdict(self.config),
            "history": self.history,
        }


def record_input(manifest, record, input_mode, estimator="oracle"):
    """Waveform fed to the classifier for one record."""
    x = manifest.waveform(record.utt_id)
    if input_mode == "raw":
        return x
    if input_mode != "delta-estimate":
        raise ConfigurationError(f"unknown input mode {input_mode!r}")
    clean = None
    if isinstance(estimator, str):
        clean = manifest.waveform(record.clean_ref_id)
    return estimate_perturbation(estimator, x, clean).delta_hat


def task_examples(manifest, task, label_space, split, input_mode, estimator="oracle"):
    """``(records, inputs (N, T) float32, labels)`` for the task-eligible records of a split."""
    recs, xs, ys = [], [], []
    for r in manifest.records:
        if r.split != split:
            continue
        y = assign_label(r, task, label_space)
        if y is None:
            continue
        recs.append(r)
        xs.append(np.asarray(record_input(manifest, r, input_mode, estimator), dtype=np.float32))
        ys.append(y)
    x = np.stack(xs) if xs else np.zeros((0, 0), dtype=np.float32)
    return recs, x, np.asarray(ys, dtype=np.int64)


@torch.no_grad()
def _forward_all(net, x, batch_size=64):
    logits, embs = [], []
    for i in range(0, len(x), batch_size):
        xb = torch.from_numpy(x[i : i + batch_size])
        e = net.embed(xb)
        embs.append(e)
        logits.append(net.head(e))
    if not logits:
        return torch.zeros(0, net.head.out_features), torch.zeros(0, net.head.in_features)
    return torch.cat(logits), torch.cat(embs)


def train_signature_classifier(manifest, task, arch_id, input_mode="raw", hyperparams=None, estimator="oracle"):
    """Train on the manifest's train split; the val split picks the best epoch.

    Class imbalance is handled with inverse-frequency weights in the
    cross-entropy. ``estimator`` is ``"oracle"`` or a trained denoiser and is
    only used in ``delta-estimate`` mode.
    """
    hp = hyperparams or ClassifierConfig()
    if task not in TASKS:
        raise ConfigurationError(f"unknown task {task!r}; expected one of {TASKS}")
    if input_mode not in INPUT_MODES:
        raise ConfigurationError(f"unknown input mode {input_mode!r}; expected one of {INPUT_MODES}")
    space = label_space_for(task, manifest, hp.include_benign)
    _, x_tr, y_tr = task_examples(manifest, task, space, "train", input_mode, estimator)
    present = np.unique(y_tr)
    if len(space) < 2 or len(present) < 2:
        raise ConfigurationError(f"task {task!r} needs at least two classes in the training split, found {len(present)}")
    _, x_va, y_va = task_examples(manifest, task, space, "val", input_mode, estimator)

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(hp.seed)
        net = SignatureNet(arch_id, len(space))
    clf = SignatureClassifier(net, arch_id, task, space, input_mode, SIGNATURE_FEATURES, hp)
    freq = np.bincount(y_tr, minlength=len(space)).astype(np.float64)
    weights = np.where(freq > 0, freq.sum() / (len(present) * np.maximum(freq, 1)), 0.0)
    w = torch.tensor(weights, dtype=torch.float32)
    gen = torch.Generator().manual_seed(hp.seed)
    opt = torch.optim.Adam(net.parameters(), lr=hp.lr, weight_decay=hp.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(1, hp.epochs))
    xt, yt = torch.from_numpy(x_tr), torch.from_numpy(y_tr)
    best_state, best_val = {k: v.clone() for k, v in net.state_dict().items()}, -1.0
    for epoch in range(hp.epochs):
        net.train()
        perm = torch.randperm(len(xt), generator=gen)
        total = 0.0
        for i in range(0, len(xt), hp.batch_size):
            idx = perm[i : i + hp.batch_size]
            if len(idx) < 2:
                continue
            loss = F.cross_entropy(net(xt[idx]), yt[idx], weight=w)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        sched.step()
        net.eval()
        if len(y_va):
            logits, _ = _forward_all(net, x_va)
            val = float((logits.argmax(1).numpy() == y_va).mean())
        else:
            val = float("nan")
        clf.history.append({"epoch": epoch + 1, "loss": total / len(xt), "val_accuracy": val})
        # without a val split the last epoch wins
        if not len(y_va) or val > best_val:
            best_val = val
            best_state = {k: v.clone() for k, v in net.state_dict().items()}
        log.debug("%s/%s epoch %d loss %.4f val %.3f", arch_id, task, epoch + 1, total / len(xt), val)
    net.load_state_dict(best_state)
    net.eval()
    return clf


def classify(classifier, x):
    """Softmax scores over ``classifier.label_space`` and the 10-d embedding of one input."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 1 or x.size == 0:
        raise DataError("classify expects one non-empty 1-D waveform")
    logits, emb = _forward_all(classifier.net, x[None])
    scores = torch.softmax(logits.double(), dim=1)[0].numpy()
    return scores, emb[0].numpy()


def score_split(classifier, manifest, split, estimator="oracle"):
    """Scores and embeddings for every task-eligible record of ``split``.

    Returns ``(records, true_idx, scores (N, K), embeddings (N, 10))``.
    """
    recs, x, y = task_examples(manifest, classifier.task, classifier.label_space, split, classifier.input_mode, estimator)
    logits, emb = _forward_all(classifier.net, x)
    scores = torch.softmax(logits.double(), dim=1).numpy()
    return recs, y, scores, emb.numpy()


def export_embeddings(classifier, manifest, split, path=None, estimator="oracle"):
    """Rows of ``(utt_id, true_label, predicted_label, e0..e9)``; written as CSV when ``path`` is given."""
    recs, y, scores, emb = score_split(classifier, manifest, split, estimator)
    rows = []
    for r, t, s, e in zip(recs, y, scores, emb):
        pred = classifier.label_space[int(np.argmax(s))]
        rows.append([r.utt_id, classifier.label_space[t], pred, *[float(v) for v in e]])
    if path is not None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["utt_id", "true_label", "predicted_label", *[f"e{i}" for i in range(EMBEDDING_DIM)]])
            for row in rows:
                w.writerow(row[:3] + [repr(v) for v in row[3:]])
    return rows


def centroid_separability(embeddings, labels):
    """Mean distance between class centroids and mean distance of points to their own centroid."""
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    classes = sorted(set(labels.tolist()))
    if len(classes) < 2:
        raise DataError("need at least two classes")
    cents = np.stack([emb[labels == c].mean(axis=0) for c in classes])
    inter = [np.linalg.norm(cents[i] - cents[j]) for i in range(len(classes)) for j in range(i + 1, len(classes))]
    intra = np.concatenate([np.linalg.norm(emb[labels == c] - cents[k], axis=1) for k, c in enumerate(classes)])
    return {"inter": float(np.mean(inter)), "intra": float(np.mean(intra))}


def save_classifier(classifier, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    torch.save(classifier.net.state_dict(), d / "classifier.pt")
    (d / "classifier.json").write_text(json.dumps(classifier.metadata(), indent=2, sort_keys=True))
    return d


def load_classifier(directory):
    d = Path(directory)
    if not (d / "classifier.json").exists():
        raise DependencyError(d / "classifier.json", "classifier checkpoint")
    meta = json.loads((d / "classifier.json").read_text())
    fc = FeatureConfig.from_dict(meta["feature_config"])
    net = SignatureNet(meta["arch_id"], len(meta["label_space"]), fc, meta["embedding_dim"])
    net.load_state_dict(torch.load(d / "classifier.pt", weights_only=True))
    clf = SignatureClassifier(
        net, meta["arch_id"], meta["task"], meta["label_space"], meta["input_mode"], fc, ClassifierConfig(**meta["config"])
    )
    clf.history = meta.get("history", [])
    return clf
