"""Attack parameterisation and the adversarial-example record."""

import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from ..errors import ConfigurationError

INF = math.inf

FAMILIES = ("fgsm", "iter-fgsm", "pgd", "cw")
VALID_NORMS = {"cw": (0, 2, INF), "fgsm": (2,), "iter-fgsm": (2,), "pgd": (1, 2, INF)}
ATTACK_LABELS = ("cw-l0", "cw-l2", "cw-linf", "fgsm", "iter-fgsm", "pgd-l1", "pgd-l2", "pgd-linf")
MULTI_VM_ATTACKS = ("cw-l2", "fgsm", "pgd-l2", "pgd-linf")


def parse_norm(p):
    """Accept 0/1/2/inf as numbers or strings like ``"l2"``, ``"linf"``, ``"inf"``."""
    if isinstance(p, str):
        s = p.lower().lstrip("l")
        if s in ("inf", "infinity"):
            return INF
        try:
            p = int(s)
        except ValueError:
            raise ConfigurationError(f"unknown norm {p!r}") from None
    if p == INF:
        return INF
    if p in (0, 1, 2):
        return int(p)
    raise ConfigurationError(f"unsupported norm {p!r}")


def norm_name(p):
    return "inf" if p == INF else str(int(p))


def label_for(family, p):
    if family in ("fgsm", "iter-fgsm"):
        return family
    return f"{family}-l{'inf' if p == INF else int(p)}"


def parse_label(label):
    """Inverse of :func:`label_for`: ``"pgd-linf"`` -> ``("pgd", inf)``."""
    if label not in ATTACK_LABELS:
        raise ConfigurationError(f"unknown attack label {label!r}; expected one of {ATTACK_LABELS}")
    if label in ("fgsm", "iter-fgsm"):
        return label, 2
    family, norm = label.split("-")
    return family, parse_norm(norm)


@dataclass(frozen=True)
class AttackSpec:
    """Full parameterisation of one attack.

    ``alpha`` defaults to ``eps / 4``. The CW fields (``kappa``, ``c_init``,
    ``c_search_steps``, ``max_cw_iters``, ``lr``, ``outer_steps``,
    ``l0_drop``) are ignored by the gradient-sign families.
    """

    family: str
    p: float
    eps: float = 0.005
    alpha: float = None
    steps: int = 10
    random_start: bool = False
    kappa: float = 0.0
    c_init: float = 1e-2
    c_search_steps: int = 6
    max_cw_iters: int = 200
    seed: int = 0
    lr: float = 1e-3
    outer_steps: int = 8
    l0_drop: float = 0.5
    l1_topk: float = 0.01
    l1_dense: bool = False

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown attack family {self.family!r}")
        object.__setattr__(self, "p", parse_norm(self.p))
        if self.p not in VALID_NORMS[self.family]:
            raise ConfigurationError(
                f"invalid (family, norm) pair ({self.family}, L{norm_name(self.p)}); "
                f"{self.family} supports {[norm_name(q) for q in VALID_NORMS[self.family]]}"
            )
        if self.eps < 0:
            raise ConfigurationError("eps must be >= 0")
        if self.alpha is None:
            object.__setattr__(self, "alpha", self.eps / 4)
        if self.steps < 0:
            raise ConfigurationError("steps must be >= 0")
        if self.alpha < 0 or (self.alpha == 0 and self.steps > 0 and self.family == "pgd"):
            raise ConfigurationError("alpha must be > 0 when steps > 0")
        if self.kappa < 0:
            raise ConfigurationError("kappa must be >= 0")

    @property
    def label(self):
        return label_for(self.family, self.p)

    @property
    def budget_norm(self):
        """Norm in which ``eps`` bounds the perturbation (sign-step attacks are L-inf bounded)."""
        return INF if self.family in ("fgsm", "iter-fgsm") else self.p

    def to_dict(self):
        d = asdict(self)
        d["p"] = norm_name(self.p)
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown AttackSpec field(s): {unknown}")
        return cls(**d)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def replace(self, **changes):
        d = asdict(self)
        d.update(changes)
        return AttackSpec(**d)


def lp_norm(v, p):
    v = np.asarray(v, dtype=np.float64).ravel()
    if p == INF:
        return float(np.max(np.abs(v))) if v.size else 0.0
    if p == 0:
        return float(np.count_nonzero(v))
    return float(np.sum(np.abs(v) ** p) ** (1.0 / p))


def snr_db(clean, delta):
    num = float(np.sum(np.asarray(clean, dtype=np.float64) ** 2))
    den = float(np.sum(np.asarray(delta, dtype=np.float64) ** 2))
    if den == 0.0:
        return INF
    if num == 0.0:
        return -INF
    return 10.0 * math.log10(num / den)


@dataclass
class AdversarialExample:
    clean_id: str
    adversarial_waveform: np.ndarray = field(repr=False)
    delta: np.ndarray = field(repr=False)
    attack_label: str
    victim_id: str
    success: bool
    true_label: int
    clean_prediction: int
    adversarial_prediction: int
    snr_db: float
    eps: float
    seed: int
    linf_norm: float = 0.0
    l2_norm: float = 0.0

    @classmethod
    def build(cls, clean, x_adv, **kw):
        """Derive delta and its norms; the stored waveform is exactly ``clean + delta``."""
        clean = np.asarray(clean, dtype=np.float64)
        delta = np.asarray(x_adv, dtype=np.float64) - clean
        adv = clean + delta
        return cls(
            adversarial_waveform=adv,
            delta=delta,
            snr_db=snr_db(clean, delta),
            linf_norm=lp_norm(delta, INF),
            l2_norm=lp_norm(delta, 2),
            **kw,
        )
