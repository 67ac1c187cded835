"""Audio loading and the MFCC front-end consumed by the encoder."""

import math
import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import signal
from scipy.fft import dct, rfft
from scipy.io import wavfile
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import AudioDecodeError, EmptyInputError, TooShortError

TARGET_RATE = 16000

SKFT_MAGIC = b"SKFT"
SKFT_VERSION = 1


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 1:
            raise ValueError("waveform must be mono (1-D)")
        if self.samples.size == 0:
            raise EmptyInputError("waveform has no samples")
        if int(self.sample_rate) <= 0:
            raise ValueError("sample_rate must be positive")
        self.sample_rate = int(self.sample_rate)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self):
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class FeatureConfig:
    """MFCC front-end settings.

    Defaults give 20 coefficients from 20 ms Hamming windows every 10 ms,
    a 40-band mel filterbank over a 512-point FFT, 0.97 pre-emphasis and
    per-utterance mean normalization. ``use_energy`` swaps coefficient 0
    for the frame log-energy.
    """

    n_mfcc: int = 20
    win_ms: float = 20.0
    hop_ms: float = 10.0
    n_mels: int = 40
    fft_size: int = 512
    preemphasis: float = 0.97
    cmn: bool = True
    sample_rate: int = TARGET_RATE
    log_floor: float = 1e-10
    use_energy: bool = False

    def __post_init__(self):
        if not self.win_ms > self.hop_ms > 0:
            raise ValueError("require win_ms > hop_ms > 0")
        if not 1 <= self.n_mfcc <= self.n_mels:
            raise ValueError("require 1 <= n_mfcc <= n_mels")
        if not 0 <= self.preemphasis < 1:
            raise ValueError("preemphasis must lie in [0, 1)")
        if self.fft_size < self.win_length:
            raise ValueError("fft_size shorter than the analysis window")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")

    @property
    def win_length(self):
        return int(round(self.win_ms * self.sample_rate / 1000))

    @property
    def hop_length(self):
        return int(round(self.hop_ms * self.sample_rate / 1000))

    def n_frames(self, n_samples):
        if n_samples < self.win_length:
            return 0
        return 1 + (n_samples - self.win_length) // self.hop_length


@dataclass
class FeatureMatrix:
    values: np.ndarray
    frame_hop_ms: float = 10.0

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise ValueError("feature matrix must be T x D with T >= 1")

    @property
    def shape(self):
        return self.values.shape


def _to_float(data):
    if data.dtype == np.uint8:
        return (data.astype(np.float64) - 128.0) / 128.0
    if data.dtype == np.int16:
        return data.astype(np.float64) / 32768.0
    if data.dtype == np.int32:
        return data.astype(np.float64) / 2147483648.0
    if np.issubdtype(data.dtype, np.floating):
        return data.astype(np.float64)
    raise AudioDecodeError(f"unsupported sample type {data.dtype}")


def resample(samples, orig_rate, target_rate):
    """Polyphase resampling (Kaiser-windowed FIR, scipy.signal.resample_poly)."""
    if orig_rate == target_rate:
        return samples
    ratio = Fraction(int(target_rate), int(orig_rate))
    out = signal.resample_poly(samples, ratio.numerator, ratio.denominator)
    expected = int(round(len(samples) * target_rate / orig_rate))
    return out[:expected]


def load_audio(path, target_rate=TARGET_RATE, offset_s=0.0, duration_s=None):
    """Read a WAV file as a mono :class:`Waveform` at ``target_rate``.

    Multi-channel audio is averaged across channels. ``offset_s`` and
    ``duration_s`` select a segment (in seconds of the source file) before
    resampling.
    """
    path = Path(path)
    if not path.is_file():
        raise AudioDecodeError(f"no such audio file: {path}")
    try:
        rate, data = wavfile.read(path)
    except (ValueError, OSError, EOFError) as exc:
        raise AudioDecodeError(f"cannot decode {path}: {exc}") from exc
    samples = _to_float(data)
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    start = int(round(offset_s * rate))
    stop = None if duration_s is None else start + int(round(duration_s * rate))
    samples = samples[start:stop]
    if samples.size == 0:
        raise EmptyInputError(f"{path}: no audio in the requested range")
    return Waveform(resample(samples, rate, target_rate), target_rate)


def save_wav(path, wave):
    """Write a waveform as 16-bit PCM, clipping to [-1, 1]."""
    pcm = np.clip(np.asarray(wave.samples, dtype=np.float64), -1.0, 1.0)
    pcm = np.round(pcm * 32767.0).astype(np.int16)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(path, wave.sample_rate, pcm)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels, fft_size, sample_rate, fmin=0.0, fmax=None):
    """Triangular HTK-mel filters, shape (n_mels, fft_size // 2 + 1)."""
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.linspace(0, sample_rate / 2, fft_size // 2 + 1)
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lower) / (center - lower)
    falling = (upper - freqs) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def frame_signal(x, win, hop):
    n = 1 + (len(x) - win) // hop
    idx = np.arange(win)[None, :] + hop * np.arange(n)[:, None]
    return x[idx]


def cmn(values):
    """Subtract the per-coefficient mean over time."""
    values = np.asarray(values, dtype=np.float64)
    return values - values.mean(axis=0, keepdims=True)


def mfcc(wave, cfg=None):
    """Compute a (T, n_mfcc) MFCC matrix with no edge padding.

    T = 1 + (L - win) // hop. Pipeline: pre-emphasis, Hamming-windowed
    frames, magnitude spectrum, mel filterbank, floored log, orthonormal
    DCT-II keeping coefficients 0..n_mfcc-1, then optional CMN.
    """
    cfg = cfg or FeatureConfig()
    if wave.sample_rate != cfg.sample_rate:
        raise ValueError(
            f"waveform at {wave.sample_rate} Hz, config expects {cfg.sample_rate} Hz"
        )
    x = np.asarray(wave.samples, dtype=np.float64)
    win, hop = cfg.win_length, cfg.hop_length
    if len(x) < win:
        raise TooShortError(f"clip of {len(x)} samples is shorter than one window ({win})")
    if cfg.preemphasis > 0:
        x = np.concatenate([x[:1], x[1:] - cfg.preemphasis * x[:-1]])
    frames = frame_signal(x, win, hop) * signal.get_window("hamming", win)
    spec = np.abs(rfft(frames, n=cfg.fft_size, axis=1))
    fbank = mel_filterbank(cfg.n_mels, cfg.fft_size, cfg.sample_rate)
    logmel = np.log(np.maximum(spec @ fbank.T, cfg.log_floor))
    coeffs = dct(logmel, type=2, norm="ortho", axis=1)[:, : cfg.n_mfcc]
    if cfg.use_energy:
        energy = np.sum(frames**2, axis=1)
        coeffs[:, 0] = np.log(np.maximum(energy, cfg.log_floor))
    if cfg.cmn:
        coeffs = cmn(coeffs)
    return FeatureMatrix(coeffs, frame_hop_ms=cfg.hop_ms)


def write_features(path, feats):
    values = np.ascontiguousarray(np.asarray(getattr(feats, "values", feats)), dtype="<f4")
    t, d = values.shape
    with open(path, "wb") as fh:
        fh.write(SKFT_MAGIC)
        fh.write(struct.pack("<III", SKFT_VERSION, t, d))
        fh.write(values.tobytes(order="C"))


def read_features(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != SKFT_MAGIC:
        raise AudioDecodeError(f"{path}: not a feature container")
    version, t, d = struct.unpack("<III", blob[4:16])
    if version != SKFT_VERSION:
        raise AudioDecodeError(f"{path}: unsupported container version {version}")
    body = blob[16:]
    if len(body) != 4 * t * d:
        raise AudioDecodeError(f"{path}: truncated payload")
    return FeatureMatrix(np.frombuffer(body, dtype="<f4").reshape(t, d).copy())


class MFCCTransformer(BaseEstimator, TransformerMixin):
    """Turn waveforms (arrays or :class:`Waveform`) into a (N, T, D) float32 array.

    Clips of unequal length are cropped to the shortest frame count, so the
    output stacks cleanly; the transformer is stateless.
    """

    def __init__(self, n_mfcc=20, win_ms=20.0, hop_ms=10.0, n_mels=40,
                 fft_size=512, preemphasis=0.97, cmn=True, sample_rate=TARGET_RATE):
        self.n_mfcc = n_mfcc
        self.win_ms = win_ms
        self.hop_ms = hop_ms
        self.n_mels = n_mels
        self.fft_size = fft_size
        self.preemphasis = preemphasis
        self.cmn = cmn
        self.sample_rate = sample_rate

    def feature_config(self):
        return FeatureConfig(
            n_mfcc=self.n_mfcc, win_ms=self.win_ms, hop_ms=self.hop_ms,
            n_mels=self.n_mels, fft_size=self.fft_size,
            preemphasis=self.preemphasis, cmn=self.cmn, sample_rate=self.sample_rate,
        )

    def fit(self, X, y=None):
        self.feature_config()
        return self

    def transform(self, X):
        cfg = self.feature_config()
        mats = []
        for item in X:
            wave = item if isinstance(item, Waveform) else Waveform(item, cfg.sample_rate)
            mats.append(mfcc(wave, cfg).values)
        if not mats:
            return np.zeros((0, 0, cfg.n_mfcc), dtype=np.float32)
        t = min(m.shape[0] for m in mats)
        return np.stack([m[:t] for m in mats]).astype(np.float32)


def frames_for_duration(seconds, cfg=None):
    cfg = cfg or FeatureConfig()
    return cfg.n_frames(int(math.floor(seconds * cfg.sample_rate)))
