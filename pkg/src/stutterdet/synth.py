"""Deterministic tone-sequence corpus with one audible signature per class.

Every clip is a run of short tones over a faint noise floor:

* Fluent: back-to-back tones of changing pitch, 0.15-0.35 s each.
* Repetition: the fluent run is interrupted by 2-4 identical short bursts
  separated by silent gaps.
* Prolongation: one tone held for 1.5-2.0 s.
* Block: at least 0.8 s of leading silence before the tones start.
* Interjection: a rising-then-falling two-tone chirp in a high register
  inserted into the run.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import Waveform, save_wav
from .data import Label, Manifest, SegmentRecord, write_manifest

logger = logging.getLogger(__name__)

NOISE_FLOOR = 0.003
FADE_S = 0.01
PITCH_RATIOS = (1.0, 9 / 8, 5 / 4, 4 / 3, 3 / 2, 5 / 3)


@dataclass
class SynthSpec:
    n_per_class: int = 40
    clip_s: float = 3.0
    rate: int = 16000
    n_podcasts: int = 10
    seed: int = 0
    class_imbalance: dict = field(default_factory=dict)
    # fraction in [0, 1): shrinks each signature toward the fluent pattern
    ambiguity: float = 0.0

    def __post_init__(self):
        if self.n_per_class < 1:
            raise ValueError("n_per_class must be >= 1")
        if self.n_podcasts < 1:
            raise ValueError("n_podcasts must be >= 1")
        if not 0 <= self.ambiguity < 1:
            raise ValueError("ambiguity must lie in [0, 1)")
        imbalance = {}
        for key, mult in self.class_imbalance.items():
            label = key if isinstance(key, Label) else Label[key]
            imbalance[label] = mult
        self.class_imbalance = imbalance

    def count(self, label):
        return int(round(self.n_per_class * self.class_imbalance.get(label, 1)))


def _tone(freq, dur, rate, amp, phase=0.0):
    n = int(round(dur * rate))
    t = np.arange(n) / rate
    y = amp * (np.sin(2 * np.pi * freq * t + phase) + 0.3 * np.sin(4 * np.pi * freq * t))
    return _fade(y, rate)


def _chirp(f_start, f_end, dur, rate, amp):
    n = int(round(dur * rate))
    t = np.arange(n) / rate
    inst = f_start + (f_end - f_start) * t / dur
    phase = 2 * np.pi * np.cumsum(inst) / rate
    return _fade(amp * np.sin(phase), rate)


def _fade(y, rate):
    k = min(int(FADE_S * rate), len(y) // 2)
    if k > 0:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(k) / k)
        y[:k] *= ramp
        y[-k:] *= ramp[::-1]
    return y


class _Builder:
    def __init__(self, rng, rate, n_samples, base):
        self.rng, self.rate, self.n = rng, rate, n_samples
        self.base = base
        self.parts = []
        self.last_ratio = None

    @property
    def length(self):
        return sum(len(p) for p in self.parts)

    def silence(self, dur):
        self.parts.append(np.zeros(int(round(dur * self.rate))))

    def amp(self):
        return self.rng.uniform(0.3, 0.6)

    def fluent(self, dur):
        """Back-to-back tones until ``dur`` seconds have been added."""
        target = self.length + int(round(dur * self.rate))
        while self.length < target:
            ratios = [r for r in PITCH_RATIOS if r != self.last_ratio]
            ratio = ratios[self.rng.integers(len(ratios))]
            self.last_ratio = ratio
            seg = self.rng.uniform(0.15, 0.35)
            self.parts.append(_tone(self.base * ratio, seg, self.rate, self.amp()))

    def finish(self):
        y = np.concatenate(self.parts) if self.parts else np.zeros(0)
        if len(y) < self.n:
            y = np.concatenate([y, np.zeros(self.n - len(y))])
        return y[: self.n]


def synth_clip(label, rng, rate=16000, clip_s=3.0, ambiguity=0.0):
    """Render one clip of class ``label`` as a float waveform."""
    n = int(round(clip_s * rate))
    base = rng.uniform(160.0, 320.0)
    b = _Builder(rng, rate, n, base)
    strength = 1.0 - ambiguity * rng.uniform(0.0, 1.0)
    if label == Label.Fluent:
        b.fluent(clip_s)
    elif label == Label.Block:
        b.silence(0.05 + strength * rng.uniform(0.75, 1.15))
        b.fluent(clip_s)
    elif label == Label.Prolongation:
        b.fluent(rng.uniform(0.2, 0.6))
        held = 0.35 + strength * rng.uniform(1.15, 1.65)
        b.parts.append(_tone(base * PITCH_RATIOS[rng.integers(len(PITCH_RATIOS))],
                             held, rate, b.amp()))
        b.fluent(clip_s)
    elif label == Label.Repetition:
        b.fluent(rng.uniform(0.3, 0.8))
        freq = base * PITCH_RATIOS[rng.integers(len(PITCH_RATIOS))]
        burst, amp = rng.uniform(0.15, 0.25), b.amp()
        for _ in range(int(rng.integers(2, 5))):
            b.parts.append(_tone(freq, burst, rate, amp))
            b.silence(strength * rng.uniform(0.1, 0.2))
        b.fluent(clip_s)
    elif label == Label.Interjection:
        b.fluent(rng.uniform(0.5, 1.8))
        lo = rng.uniform(800.0, 1000.0)
        hi = lo * (1.0 + strength * rng.uniform(0.6, 1.0))
        amp = b.amp()
        b.parts.append(_chirp(lo, hi, 0.15, rate, amp))
        b.parts.append(_chirp(hi, lo, 0.15, rate, amp))
        b.fluent(clip_s)
    else:
        raise ValueError(f"unknown label {label!r}")
    y = b.finish() * rng.uniform(0.5, 1.0)
    y += NOISE_FLOOR * rng.standard_normal(n)
    return np.clip(y, -1.0, 1.0)


def generate(spec, out_dir):
    """Write WAV clips under ``out_dir/audio`` and return the corpus manifest.

    The manifest is also saved as ``out_dir/manifest.csv``. Podcast ids are
    dealt round-robin within each class so every podcast holds a mix of
    labels.
    """
    out_dir = Path(out_dir)
    audio_dir = out_dir / "audio"
    audio_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for label in Label:
        for i in range(spec.count(label)):
            rng = np.random.default_rng([spec.seed, int(label), i])
            y = synth_clip(label, rng, spec.rate, spec.clip_s, spec.ambiguity)
            rid = f"{label.name.lower()}_{i:04d}"
            path = audio_dir / f"{rid}.wav"
            try:
                save_wav(path, Waveform(y, spec.rate))
            except OSError as exc:
                raise OSError(f"cannot write {path}: {exc}") from exc
            records.append(SegmentRecord(
                id=rid, audio_path=str(path.resolve()), offset_s=0.0,
                duration_s=spec.clip_s, label=label,
                podcast_id=f"pod{i % spec.n_podcasts:02d}",
            ))
    manifest = Manifest(records, source_name="synthetic")
    write_manifest(manifest, out_dir / "manifest.csv")
    logger.info("wrote %d clips to %s", len(records), out_dir)
    return manifest
