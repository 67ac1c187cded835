"""Additive-noise and reverberation augmentation with exact SNR control."""

import itertools
import logging
import math
import re
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import fftconvolve

from .audio import TARGET_RATE, Waveform, load_audio, save_wav
from .data import Manifest, with_augmentation
from .exceptions import (
    AudioDecodeError,
    DegenerateSignalError,
    EmptyInputError,
    PoolError,
)

logger = logging.getLogger(__name__)

SPEED_OF_SOUND = 343.0
MAX_POOL_RETRIES = 8
AUGMENTATIONS = ("music", "noise", "babble", "reverb")


@dataclass(frozen=True)
class SnrSpec:
    min_db: float
    max_db: float

    def __post_init__(self):
        if self.min_db > self.max_db:
            raise ValueError("min_db must not exceed max_db")

    def draw(self, rng):
        return float(rng.uniform(self.min_db, self.max_db))


MUSIC_SNR = SnrSpec(5.0, 15.0)
NOISE_SNR = SnrSpec(0.0, 15.0)
BABBLE_SNR = SnrSpec(13.0, 20.0)
BABBLE_SPEAKERS = (3, 7)


@dataclass(frozen=True)
class RoomConfig:
    dims: tuple
    source: tuple
    mic: tuple
    absorption: float = 0.3
    max_order: int = 3


@dataclass
class NoisePool:
    music: list = field(default_factory=list)
    noises: list = field(default_factory=list)
    speech: list = field(default_factory=list)
    rirs: list = field(default_factory=list)

    @classmethod
    def from_listing(cls, path):
        """Parse a sectioned listing file.

        Sections are ``[music]``, ``[noise]``, ``[speech]`` and ``[rir]``
        with one entry per line; relative paths resolve against the listing.
        A ``[rir]`` entry may instead be a room description such as
        ``room dims=6,4,3 source=1,1,1.5 mic=4,2.5,1.2 absorption=0.4 max_order=4``.
        """
        path = Path(path)
        pool, section = cls(), None
        slots = {"music": pool.music, "noise": pool.noises, "noises": pool.noises,
                 "speech": pool.speech, "rir": pool.rirs, "rirs": pool.rirs}
        for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            m = re.fullmatch(r"\[(\w+)\]", line)
            if m:
                section = m.group(1).lower()
                if section not in slots:
                    raise PoolError(f"{path}:{lineno}: unknown section [{section}]")
                continue
            if section is None:
                raise PoolError(f"{path}:{lineno}: entry before any section header")
            if section in ("rir", "rirs") and line.startswith("room"):
                slots[section].append(_parse_room(line, f"{path}:{lineno}"))
                continue
            entry = Path(line)
            slots[section].append(str(entry if entry.is_absolute() else path.parent / entry))
        return pool

    @classmethod
    def from_directory(cls, root):
        """Scan ``music/``, ``noise/``, ``speech/`` and ``rir/`` subdirectories for WAVs."""
        root = Path(root)

        def scan(name):
            d = root / name
            return sorted(str(p) for p in d.rglob("*.wav")) if d.is_dir() else []

        return cls(scan("music"), scan("noise"), scan("speech"), scan("rir"))

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.exists():
            raise PoolError(f"noise pool {path} does not exist")
        return cls.from_directory(path) if path.is_dir() else cls.from_listing(path)


def _parse_room(line, where):
    fields = dict(kv.split("=", 1) for kv in line.split()[1:])
    try:
        vec = lambda key: tuple(float(v) for v in fields[key].split(","))  # noqa: E731
        return RoomConfig(
            dims=vec("dims"), source=vec("source"), mic=vec("mic"),
            absorption=float(fields.get("absorption", 0.3)),
            max_order=int(fields.get("max_order", 3)),
        )
    except (KeyError, ValueError) as exc:
        raise PoolError(f"{where}: bad room description ({exc})") from None


def as_rng(rng):
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def power(x):
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean(x * x))


def snr_gain(p_clean, p_interferer, snr_db):
    return math.sqrt(p_clean / (p_interferer * 10.0 ** (snr_db / 10.0)))


def measured_snr(clean, scaled_interferer):
    return 10.0 * math.log10(power(clean) / power(scaled_interferer))


def _mix(clean, interferer, snr_db):
    p_c, p_i = power(clean), power(interferer)
    if p_i == 0.0:
        raise DegenerateSignalError("interferer has zero power")
    return clean + snr_gain(p_c, p_i, snr_db) * interferer


def mix_at_snr(clean, interferer, snr_db):
    """Return ``clean + g * interferer`` with g chosen so the clip-level SNR is ``snr_db``."""
    c = np.asarray(getattr(clean, "samples", clean), dtype=np.float64)
    i = np.asarray(getattr(interferer, "samples", interferer), dtype=np.float64)
    if isinstance(clean, Waveform) and isinstance(interferer, Waveform):
        if clean.sample_rate != interferer.sample_rate:
            raise ValueError("sample rates differ")
    if c.shape != i.shape:
        raise ValueError(f"length mismatch: clean {c.shape[0]} vs interferer {i.shape[0]}")
    if power(c) == 0.0:
        raise DegenerateSignalError("clean signal has zero power")
    out = _mix(c, i, snr_db)
    if isinstance(clean, Waveform):
        return Waveform(out, clean.sample_rate)
    return out


def fit_length(x, n, rng=None):
    """Loop ``x`` end to end or cut a random contiguous slice so it has ``n`` samples."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) < n:
        reps = -(-n // len(x))
        return np.tile(x, reps)[:n]
    if len(x) == n:
        return x.copy()
    start = 0 if rng is None else int(rng.integers(0, len(x) - n + 1))
    return x[start:start + n].copy()


def _load_from(entries, rng, rate, what):
    """Pick a readable file from ``entries``, retrying a bounded number of times."""
    if not entries:
        raise PoolError(f"{what} pool is empty")
    for _ in range(MAX_POOL_RETRIES):
        choice = entries[int(rng.integers(len(entries)))]
        try:
            return load_audio(choice, rate).samples
        except (AudioDecodeError, EmptyInputError) as exc:
            logger.warning("skipping unreadable %s file: %s", what, exc)
    raise PoolError(f"{what} pool exhausted after {MAX_POOL_RETRIES} unreadable picks")


def music_augment(clean, pool, rng, return_info=False):
    rng = as_rng(rng)
    music = _load_from(pool.music, rng, clean.sample_rate, "music")
    snr = MUSIC_SNR.draw(rng)
    interferer = fit_length(music, len(clean), rng)
    out = Waveform(_mix(clean.samples.astype(np.float64), interferer, snr), clean.sample_rate)
    return (out, {"snr_db": snr}) if return_info else out


def noise_intervals(n_samples, rate, interval_s=1.0):
    """Tile [0, n_samples) with back-to-back intervals; the last may be partial."""
    step = int(round(interval_s * rate))
    return [(s, min(s + step, n_samples)) for s in range(0, n_samples, step)]


def noise_augment(clean, pool, rng, per_interval_snr=True, return_info=False):
    """Add an independently drawn noise clip to every 1-second interval.

    Each interval gets its own SNR from [0, 15] dB measured against that
    interval's clean power (or the whole clip's power when
    ``per_interval_snr`` is False). Silent intervals are left untouched.
    """
    rng = as_rng(rng)
    x = clean.samples.astype(np.float64)
    out = x.copy()
    clip_power = power(x)
    placements = []
    for start, stop in noise_intervals(len(x), clean.sample_rate):
        noise = _load_from(pool.noises, rng, clean.sample_rate, "noise")
        snr = NOISE_SNR.draw(rng)
        seg = fit_length(noise, stop - start, rng)
        ref = power(x[start:stop]) if per_interval_snr else clip_power
        p_n = power(seg)
        if ref == 0.0 or p_n == 0.0:
            placements.append({"start": start, "stop": stop, "snr_db": snr, "skipped": True})
            continue
        out[start:stop] = x[start:stop] + snr_gain(ref, p_n, snr) * seg
        placements.append({"start": start, "stop": stop, "snr_db": snr, "skipped": False})
    wave = Waveform(out, clean.sample_rate)
    return (wave, {"placements": placements}) if return_info else wave


def babble_augment(clean, pool, rng, return_info=False):
    rng = as_rng(rng)
    lo, hi = BABBLE_SPEAKERS
    if len(pool.speech) < hi:
        raise PoolError(f"babble needs at least {hi} speech files, pool has {len(pool.speech)}")
    k = int(rng.integers(lo, hi + 1))
    picks = [int(i) for i in rng.choice(len(pool.speech), size=k, replace=False)]
    babble = np.zeros(len(clean))
    for i in picks:
        try:
            speech = load_audio(pool.speech[i], clean.sample_rate).samples
        except (AudioDecodeError, EmptyInputError) as exc:
            raise PoolError(f"unreadable speech file in babble pool: {exc}") from exc
        babble += fit_length(speech, len(clean), rng)
    snr = BABBLE_SNR.draw(rng)
    out = Waveform(_mix(clean.samples.astype(np.float64), babble, snr), clean.sample_rate)
    info = {"n_speakers": k, "files": [pool.speech[i] for i in picks], "snr_db": snr,
            "babble": babble}
    return (out, info) if return_info else out


def reverberate(samples, rir, normalize=True):
    """Convolve, truncate to the input length and match the input's peak."""
    x = np.asarray(samples, dtype=np.float64)
    h = np.asarray(rir, dtype=np.float64)
    if h.size == 0 or not np.any(h):
        raise DegenerateSignalError("impulse response is all zeros")
    full = fftconvolve(x, h)
    # fftconvolve leaves ~1e-16 residue where the exact result is zero
    full[np.abs(full) < 1e-12 * max(np.abs(full).max(), 1e-300)] = 0.0
    out = full[: len(x)]
    if normalize:
        peak_out = np.abs(out).max()
        if peak_out > 0:
            out = out * (np.abs(x).max() / peak_out)
    return out


def simulate_rir(room, rate=TARGET_RATE):
    """Image-source impulse response of a shoebox room.

    Every image with at most ``max_order`` reflections along each axis
    contributes ``beta ** n_reflections / distance`` at sample
    ``round(distance / c * rate)``, where ``beta = sqrt(1 - absorption)``.
    The response ends at the last contributing image.
    """
    dims = np.asarray(room.dims, dtype=np.float64)
    src = np.asarray(room.source, dtype=np.float64)
    mic = np.asarray(room.mic, dtype=np.float64)
    if dims.shape != (3,) or src.shape != (3,) or mic.shape != (3,):
        raise ValueError("room dims, source and mic must be 3-vectors")
    if not 0 < room.absorption <= 1:
        raise ValueError("absorption must lie in (0, 1]")
    if room.max_order < 0:
        raise ValueError("max_order must be >= 0")
    for name, p in (("source", src), ("mic", mic)):
        if np.any(p <= 0) or np.any(p >= dims):
            raise ValueError(f"{name} must lie strictly inside the room")
    if np.allclose(src, mic):
        raise DegenerateSignalError("source and mic coincide (zero distance)")
    beta = math.sqrt(1.0 - room.absorption)
    n = room.max_order
    # per-axis image coordinate and reflection count for (mirror q, period m)
    axis_images = []
    for d in range(3):
        imgs = []
        for q, m in itertools.product((0, 1), range(-n, n + 1)):
            order = abs(m - q) + abs(m)
            if order <= n:
                imgs.append(((1 - 2 * q) * src[d] + 2 * m * dims[d], order))
        axis_images.append(imgs)
    taps = []
    for (x, ox), (y, oy), (z, oz) in itertools.product(*axis_images):
        order = ox + oy + oz
        amp = beta**order
        if amp == 0.0:
            continue
        dist = math.dist((x, y, z), mic)
        taps.append((int(round(dist / SPEED_OF_SOUND * rate)), amp / dist))
    length = max(delay for delay, _ in taps) + 1
    h = np.zeros(length)
    for delay, amp in taps:
        h[delay] += amp
    return h


def _rir_samples(entry, rate):
    if isinstance(entry, RoomConfig):
        return simulate_rir(entry, rate)
    file_rate, data = wavfile.read(entry)
    h = data.astype(np.float64)
    if h.ndim == 2:
        h = h[:, 0]
    if file_rate != rate:
        from .audio import resample

        h = resample(h, file_rate, rate)
    return h


def reverb_augment(clean, pool, rng, return_info=False):
    rng = as_rng(rng)
    if not pool.rirs:
        raise PoolError("rir pool is empty")
    entry = pool.rirs[int(rng.integers(len(pool.rirs)))]
    try:
        h = _rir_samples(entry, clean.sample_rate)
    except (ValueError, OSError) as exc:
        if isinstance(exc, DegenerateSignalError):
            raise
        raise PoolError(f"cannot read impulse response {entry}: {exc}") from exc
    out = Waveform(reverberate(clean.samples, h), clean.sample_rate)
    return (out, {"rir": str(entry)}) if return_info else out


AUGMENTERS = {
    "music": music_augment,
    "noise": noise_augment,
    "babble": babble_augment,
    "reverb": reverb_augment,
}


def record_rng(seed, record_id, kind):
    """Independent stream per (seed, record, augmentation)."""
    key = zlib.crc32(f"{record_id}\0{kind}".encode("utf-8"))
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, key])


def expand_manifest(clean_manifest, pool, seed, out_dir, types=AUGMENTATIONS):
    """Materialize augmented copies of every record next to the clean originals.

    The returned manifest holds each clean record plus one copy per entry in
    ``types`` (the full set gives 5x the input), ordered by (source id,
    augmentation). Copies inherit label and podcast id and are written as
    16 kHz mono PCM under ``out_dir/<augmentation>/``.
    """
    types = tuple(types)
    unknown = set(types) - set(AUGMENTERS)
    if unknown:
        raise ValueError(f"unknown augmentation types {sorted(unknown)}")
    if not clean_manifest.records:
        return Manifest([], source_name=clean_manifest.source_name)
    out_dir = Path(out_dir)
    try:
        for kind in types:
            (out_dir / kind).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc
    rows = []
    for rec in sorted(clean_manifest.records, key=lambda r: r.id):
        rows.append((rec.id, rec.augmentation, rec))
        wave = load_audio(rec.audio_path, TARGET_RATE, rec.offset_s, rec.duration_s)
        for kind in types:
            aug = AUGMENTERS[kind](wave, pool, record_rng(seed, rec.id, kind))
            peak = np.abs(aug.samples).max()
            if peak > 1.0:
                # uniform rescale keeps the mixing SNR intact
                aug = Waveform(aug.samples * (0.99 / peak), aug.sample_rate)
            path = out_dir / kind / f"{_safe_name(rec.id)}.wav"
            save_wav(path, aug)
            aug_rec = with_augmentation(rec, f"{rec.id}__{kind}", path.resolve(), kind)
            rows.append((rec.id, kind, aug_rec))
    rows.sort(key=lambda row: row[:2])
    return Manifest([row[2] for row in rows], source_name=f"{clean_manifest.source_name}_aug")


def _safe_name(record_id):
    return re.sub(r"[^A-Za-z0-9._-]", "_", record_id)
