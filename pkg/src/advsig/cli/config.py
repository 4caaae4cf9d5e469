"""Experiment configs: schema, defaults, env overrides and content hashing."""

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import UsageError

SCHEMA_VERSION = 1
ENV_PREFIX = "ADVSIG_"
STAGES = ("synth", "train-victim", "gen-attacks", "train-denoiser", "train-clf", "eval", "loao", "reproduce")


@dataclass
class SynthParams:
    n_speakers: int = 20
    utts_per_speaker: int = 10
    duration_s: float = 0.5
    noise_db: float = -60.0
    test_ratio: float = 0.1
    val_ratio: float = 0.1
    ingest_csv: str = None
    sample_rate: int = 16000


@dataclass
class TrainVictimParams:
    corpus: str = None
    archs: list = field(default_factory=lambda: ["ecapatdnn", "fwseresnet", "resnet34", "lresnet34"])
    epochs: int = 20
    batch_size: int = 16
    lr: float = 3e-3


@dataclass
class GenAttacksParams:
    corpus: str = None
    victims: str = None
    recipe: str = "multivm"
    victim_ids: list = None
    attacks: list = None
    fraction: float = 0.25
    val_fraction: float = 0.1
    batch_size: int = 25
    quantize: bool = True
    cw: dict = field(
        default_factory=lambda: {"max_cw_iters": 30, "c_search_steps": 4, "outer_steps": 4, "c_init": 0.1, "kappa": 0.05}
    )


@dataclass
class TrainDenoiserParams:
    manifest: str = None
    epochs: int = 10
    batch_size: int = 16
    lr: float = 3e-3
    l1_weight: float = 1.0


@dataclass
class TrainClfParams:
    manifest: str = None
    task: str = "detection"
    arch: str = "lresnet34-sig"
    input_mode: str = "raw"
    estimator: str = "oracle"
    epochs: int = 20
    batch_size: int = 32
    lr: float = 3e-3
    include_benign: bool = False


@dataclass
class EvalParams:
    classifier: str = None
    manifest: str = None
    estimator: str = "oracle"
    split: str = "test"


@dataclass
class LoaoParams:
    manifest: str = None
    attacks: list = None
    arch: str = "lresnet34-sig"
    input_mode: str = "delta-estimate"
    estimator: str = "oracle"
    epochs: int = 5
    batch_size: int = 32
    lr: float = 3e-3


@dataclass
class ReproduceParams:
    profile: str = "toy"


PARAMS = {
    "synth": SynthParams,
    "train-victim": TrainVictimParams,
    "gen-attacks": GenAttacksParams,
    "train-denoiser": TrainDenoiserParams,
    "train-clf": TrainClfParams,
    "eval": EvalParams,
    "loao": LoaoParams,
    "reproduce": ReproduceParams,
}

# params that name input artifacts; relative paths resolve against output_dir
PATH_FIELDS = ("corpus", "victims", "manifest", "classifier", "ingest_csv")
TOP_FIELDS = ("schema_version", "stage", "seed", "output_dir", "params")


@dataclass
class ExperimentConfig:
    stage: str
    params: object
    seed: int = 0
    output_dir: str = "runs"
    schema_version: int = SCHEMA_VERSION

    def to_dict(self):
        return {
            "schema_version": self.schema_version,
            "stage": self.stage,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "params": dataclasses.asdict(self.params),
        }

    def content_hash(self):
        """sha256 over everything except ``output_dir`` (so runs relocate cleanly)."""
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def resolve(self, name):
        """Absolute path of an input artifact named by a params field."""
        value = getattr(self.params, name)
        if value is None:
            raise UsageError(f"params.{name}: required for stage {self.stage!r}")
        p = Path(value)
        return p if p.is_absolute() else Path(self.output_dir) / p


def _coerce(value, default, path):
    """Parse env/CLI strings into the type of the field default."""
    if not isinstance(value, str) or isinstance(default, str):
        return value
    try:
        return json.loads(value)
    except json.JSONDecodeError:
        if default is None:
            return value
        raise UsageError(f"{path}: cannot parse {value!r}") from None


def _check_type(value, default, path):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise UsageError(f"{path}: expected a boolean, got {value!r}")
    elif isinstance(default, (int, float)):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise UsageError(f"{path}: expected a number, got {value!r}")
        if isinstance(default, int) and not isinstance(default, bool) and float(value) != int(value):
            raise UsageError(f"{path}: expected an integer, got {value!r}")
        return type(default)(value)
    elif isinstance(default, str) and not isinstance(value, str):
        raise UsageError(f"{path}: expected a string, got {value!r}")
    elif isinstance(default, list) and not isinstance(value, list):
        raise UsageError(f"{path}: expected a list, got {value!r}")
    elif isinstance(default, dict) and not isinstance(value, dict):
        raise UsageError(f"{path}: expected an object, got {value!r}")
    return value


def build_config(raw, env=None, overrides=None):
    """Validate a raw dict and layer env and CLI overrides on top.

    Precedence: built-in defaults < ``raw`` < ``ADVSIG_*`` env vars < ``overrides``.
    Unknown fields anywhere raise :class:`UsageError` naming the field path.
    """
    raw = dict(raw or {})
    env = os.environ if env is None else env
    overrides = dict(overrides or {})
    unknown = sorted(set(raw) - set(TOP_FIELDS))
    if unknown:
        raise UsageError(f"{unknown[0]}: unknown field")
    version = raw.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise UsageError(f"schema_version: unsupported version {version!r} (expected {SCHEMA_VERSION})")
    stage = overrides.pop("stage", None) or raw.get("stage")
    if stage not in PARAMS:
        raise UsageError(f"stage: expected one of {list(PARAMS)}, got {stage!r}")
    cls = PARAMS[stage]
    defaults = cls()
    names = [f.name for f in dataclasses.fields(cls)]
    params = dict(raw.get("params") or {})
    if not isinstance(params, dict):
        raise UsageError("params: expected an object")
    bad = sorted(set(params) - set(names))
    if bad:
        raise UsageError(f"params.{bad[0]}: unknown field for stage {stage!r}")

    top = {"seed": raw.get("seed", 0), "output_dir": raw.get("output_dir", "runs")}
    for key in ("seed", "output_dir"):
        env_val = env.get(ENV_PREFIX + key.upper())
        if env_val is not None:
            top[key] = _coerce(env_val, top[key], key)
    for name in names:
        env_val = env.get(ENV_PREFIX + name.upper())
        if env_val is not None:
            params[name] = _coerce(env_val, getattr(defaults, name), f"params.{name}")
    for key, value in overrides.items():
        if value is None:
            continue
        if key in ("seed", "output_dir"):
            top[key] = value
        elif key in names:
            params[key] = _coerce(value, getattr(defaults, key), f"params.{key}")
        else:
            raise UsageError(f"params.{key}: unknown field for stage {stage!r}")
    for name in names:
        if name in params:
            params[name] = _check_type(params[name], getattr(defaults, name), f"params.{name}")
    top["seed"] = _check_type(top["seed"], 0, "seed")
    top["output_dir"] = str(_check_type(top["output_dir"], "", "output_dir"))
    return ExperimentConfig(stage, cls(**params), top["seed"], top["output_dir"])


def read_config_file(path):
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{p}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(raw, dict):
        raise UsageError(f"{p}: top level must be an object")
    return raw


def load_config(path, env=None, overrides=None):
    return build_config(read_config_file(path), env, overrides)
