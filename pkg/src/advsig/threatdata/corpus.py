"""Utterances, the synthetic speaker corpus, WAV ingestion and per-speaker splits."""

import csv
import hashlib
import json
from collections import defaultdict
from dataclasses import dataclass, field
from math import gcd
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from ..errors import DataError, DependencyError

PCM_SCALE = 32768.0
PCM_MAX = 32767.0 / PCM_SCALE


@dataclass
class Utterance:
    id: str
    speaker_id: int
    waveform: np.ndarray = field(repr=False)
    sample_rate: int = 16000

    @property
    def duration(self):
        return len(self.waveform) / self.sample_rate


def to_pcm_grid(x):
    """Round to the nearest 16-bit PCM level, as float32 in [-1, 32767/32768]."""
    q = np.clip(np.round(np.asarray(x, dtype=np.float64) * PCM_SCALE), -32768, 32767)
    # + 0.0 turns -0.0 into 0.0 so checksums survive a WAV round trip
    return (q / PCM_SCALE + 0.0).astype(np.float32)


def write_wav(path, waveform, sample_rate=16000):
    """Write mono PCM-16. Samples already on the PCM grid are stored losslessly."""
    q = np.clip(np.round(np.asarray(waveform, dtype=np.float64) * PCM_SCALE), -32768, 32767).astype(np.int16)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), sample_rate, q)


def read_wav(path):
    """Return ``(float32 waveform in [-1, 1], sample_rate)``; stereo is averaged to mono."""
    if not Path(path).exists():
        raise DependencyError(path, "wav file")
    sr, data = wavfile.read(str(path))
    if data.dtype == np.int16:
        x = data.astype(np.float32) / PCM_SCALE
    elif data.dtype == np.int32:
        x = (data.astype(np.float64) / 2**31).astype(np.float32)
    elif data.dtype == np.uint8:
        x = (data.astype(np.float32) - 128.0) / 128.0
    else:
        x = np.clip(data.astype(np.float32), -1.0, 1.0)
    if x.ndim == 2:
        x = x.mean(axis=1).astype(np.float32)
    return x, sr


def corpus_checksum(corpus):
    h = hashlib.sha256()
    for u in corpus:
        h.update(f"{u.id}|{u.speaker_id}|{u.sample_rate}|".encode())
        h.update(np.asarray(u.waveform, dtype=np.float32).tobytes())
    return h.hexdigest()


# -- synthetic speakers -----------------------------------------------------


def _speaker_profile(rng, index, n_speakers):
    # fundamentals spread log-uniformly over 80-320 Hz so neighbours differ
    lo, hi = np.log(80.0), np.log(320.0)
    frac = (index + 0.5) / max(n_speakers, 1)
    f0 = float(np.exp(lo + (hi - lo) * frac) * rng.uniform(0.99, 1.01))
    formants = np.array(
        [rng.uniform(300, 900), rng.uniform(1000, 2400), rng.uniform(2500, 3800)]
    )
    bandwidths = rng.uniform(60, 200, size=3)
    gains = rng.uniform(0.4, 1.0, size=3)
    tilt = rng.uniform(0.5, 1.5)
    return {"f0": f0, "formants": formants, "bandwidths": bandwidths, "gains": gains, "tilt": tilt}


def _envelope(freqs, prof):
    f = np.asarray(freqs)[..., None]
    peaks = prof["gains"] / (1.0 + ((f - prof["formants"]) / prof["bandwidths"]) ** 2)
    return peaks.sum(-1) * (1.0 + f[..., 0] / 1000.0) ** (-prof["tilt"]) + 0.01


def _synth_utterance(rng, prof, n_samples, sample_rate, noise_db=-60.0):
    t = np.arange(n_samples) / sample_rate
    jitter = rng.uniform(0.985, 1.015)
    vib_rate, vib_depth = rng.uniform(3.0, 6.0), rng.uniform(0.005, 0.02)
    f0_t = prof["f0"] * jitter * (1.0 + vib_depth * np.sin(2 * np.pi * vib_rate * t + rng.uniform(0, 2 * np.pi)))
    phase = 2 * np.pi * np.cumsum(f0_t) / sample_rate
    n_harm = int((0.45 * sample_rate) // (prof["f0"] * 1.05))
    k = np.arange(1, n_harm + 1)
    amps = _envelope(k * prof["f0"] * jitter, prof)
    offsets = rng.uniform(0, 2 * np.pi, size=n_harm)
    x = (amps[:, None] * np.sin(k[:, None] * phase[None, :] + offsets[:, None])).sum(0)
    syll = rng.uniform(2.0, 4.5)
    env = 0.65 + 0.35 * np.sin(2 * np.pi * syll * t + rng.uniform(0, 2 * np.pi))
    x = x * env
    x = x / (np.max(np.abs(x)) + 1e-12)
    x = x + rng.normal(0.0, 10 ** (noise_db / 20) / np.sqrt(2), size=n_samples)
    x = x / np.max(np.abs(x)) * rng.uniform(0.45, 0.75)
    return to_pcm_grid(x)


def synth_corpus(n_speakers, utts_per_speaker, duration_s=0.5, seed=0, sample_rate=16000, noise_db=-60.0):
    """Harmonic-source speakers with distinct pitch and formants.

    Deterministic in ``seed``; every sample sits on the 16-bit PCM grid so the
    corpus round-trips through WAV files unchanged.
    """
    if n_speakers < 1:
        raise DataError("n_speakers must be >= 1")
    n_samples = int(round(duration_s * sample_rate))
    corpus = []
    for s in range(n_speakers):
        prof = _speaker_profile(np.random.default_rng([seed, s, 0]), s, n_speakers)
        for u in range(utts_per_speaker):
            rng = np.random.default_rng([seed, s, u + 1])
            wave = _synth_utterance(rng, prof, n_samples, sample_rate, noise_db)
            corpus.append(Utterance(f"spk{s:03d}_utt{u:03d}", s, wave, sample_rate))
    return corpus


# -- splits ---------------------------------------------------------------


def _stable_int(*parts):
    return int.from_bytes(hashlib.sha256("|".join(map(str, parts)).encode()).digest()[:8], "little")


def split_per_speaker(corpus, ratio, seed=0):
    """Split every speaker's utterances into ``floor(ratio * n)`` vs the rest.

    Each side keeps at least one utterance of a speaker that has two or more.
    Returns ``(part_a, part_b)`` preserving corpus order.
    """
    if not corpus:
        raise DataError("cannot split an empty corpus")
    if not 0.0 < ratio < 1.0:
        raise DataError(f"ratio must be in (0, 1), got {ratio}")
    by_spk = defaultdict(list)
    for u in corpus:
        by_spk[u.speaker_id].append(u.id)
    chosen = set()
    for spk, ids in by_spk.items():
        n = len(ids)
        n_a = int(np.floor(ratio * n + 1e-9))
        if n >= 2:
            n_a = min(max(n_a, 1), n - 1)
        order = np.random.default_rng(_stable_int(seed, spk)).permutation(n)
        chosen.update(ids[i] for i in order[:n_a])
    part_a = [u for u in corpus if u.id in chosen]
    part_b = [u for u in corpus if u.id not in chosen]
    return part_a, part_b


# -- persistence ------------------------------------------------------------


def save_corpus(corpus, directory, splits=None, meta=None):
    """Write ``wav/<id>.wav``, ``speakers.csv`` and optionally ``splits.csv``."""
    d = Path(directory)
    (d / "wav").mkdir(parents=True, exist_ok=True)
    with open(d / "speakers.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["utt_id", "speaker_id", "path"])
        for u in corpus:
            rel = f"wav/{u.id}.wav"
            write_wav(d / rel, u.waveform, u.sample_rate)
            w.writerow([u.id, u.speaker_id, rel])
    if splits is not None:
        with open(d / "splits.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["utt_id", "split"])
            for uid in sorted(splits):
                w.writerow([uid, splits[uid]])
    info = dict(meta or {})
    info.update({"n_utterances": len(corpus), "n_speakers": len({u.speaker_id for u in corpus}),
                 "checksum": corpus_checksum(corpus)})
    (d / "corpus.json").write_text(json.dumps(info, indent=2, sort_keys=True))
    return d


def ingest_corpus(csv_path, sample_rate=16000, duration_s=None):
    """Load a labelled WAV tree described by a ``utt_id,speaker_id,path`` CSV.

    Paths are relative to the CSV's directory. Audio is resampled to
    ``sample_rate``; with ``duration_s`` every utterance is centre-cropped or
    zero-padded to that length (batched training needs equal lengths).
    """
    csv_path = Path(csv_path)
    if not csv_path.exists():
        raise DependencyError(csv_path, "speaker-label CSV")
    corpus, seen = [], set()
    with open(csv_path, newline="") as fh:
        for lineno, row in enumerate(csv.DictReader(fh), start=2):
            try:
                uid, spk, rel = row["utt_id"], int(row["speaker_id"]), row["path"]
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{csv_path}:{lineno}: bad row ({exc})") from None
            if uid in seen:
                raise DataError(f"{csv_path}:{lineno}: duplicate utt_id {uid}")
            seen.add(uid)
            x, sr = read_wav(csv_path.parent / rel)
            if sr != sample_rate:
                g = gcd(sr, sample_rate)
                x = resample_poly(x, sample_rate // g, sr // g).astype(np.float32)
            if duration_s is not None:
                n = int(round(duration_s * sample_rate))
                if len(x) >= n:
                    start = (len(x) - n) // 2
                    x = x[start : start + n]
                else:
                    x = np.pad(x, (0, n - len(x)))
            corpus.append(Utterance(uid, spk, to_pcm_grid(x), sample_rate))
    return corpus


def load_corpus(directory):
    d = Path(directory)
    corpus = ingest_corpus(d / "speakers.csv")
    splits = None
    if (d / "splits.csv").exists():
        with open(d / "splits.csv", newline="") as fh:
            splits = {row["utt_id"]: row["split"] for row in csv.DictReader(fh)}
    return corpus, splits


def victim_splits(corpus, seed=0, test_ratio=0.1, val_ratio=0.1):
    """Per-speaker train/val/test assignment used for victim training.

    The corpus is split 90/10 per speaker into train and test first, then
    validation is carved per speaker out of the train part.
    """
    train_all, test = split_per_speaker(corpus, 1.0 - test_ratio, seed)
    train, val = split_per_speaker(train_all, 1.0 - val_ratio, seed + 1)
    out = {u.id: "train" for u in train}
    out.update({u.id: "val" for u in val})
    out.update({u.id: "test" for u in test})
    return out
