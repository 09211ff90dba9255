"""Audio feature pipeline: waveform -> log-mel spectrogram and back.

Forward path: peak normalization, Hann-windowed STFT (1024-point FFT,
64 ms window, 16 ms hop at 16 kHz), an 80-channel triangular mel
filterbank on the magnitudes, dynamic-range clipping at 1e-5 and natural
log compression.

Inverse path: mel pseudo-inversion (least-norm solve through the
filterbank) followed by Griffin-Lim phase reconstruction -- the
deterministic stand-in for a neural vocoder.

All functions are pure; FFTs go through numpy.fft.
"""

from __future__ import annotations

import math
import struct
import wave
from dataclasses import dataclass, field

import numpy as np

from .errors import AudioError, ConfigError, DataError

CLIP_FLOOR = 1e-5
LOG_CLIP_FLOOR = math.log(CLIP_FLOOR)


@dataclass
class AudioSignal:
    """Mono waveform with samples nominally in [-1, 1]."""
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    fft_size: int = 1024
    win_length: int = 1024       # 64 ms at 16 kHz
    hop: int = 256               # 16 ms at 16 kHz
    sample_rate: int = 16000

    def __post_init__(self):
        if not (0 < self.hop <= self.win_length <= self.fft_size):
            raise ConfigError(
                f"require hop <= win_length <= fft_size, got "
                f"hop={self.hop} win={self.win_length} fft={self.fft_size}")

    @property
    def bins(self) -> int:
        return self.fft_size // 2 + 1


def hann(n: int) -> np.ndarray:
    """Periodic Hann window (sums to a constant under hop = n/2 overlap)."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def normalize(audio: AudioSignal) -> AudioSignal:
    """Divide samples by the max absolute value; all-zero input unchanged."""
    if len(audio.samples) == 0:
        raise AudioError("cannot normalize an empty signal")
    peak = np.abs(audio.samples).max()
    if peak == 0.0:
        return AudioSignal(audio.samples.copy(), audio.sample_rate)
    return AudioSignal(audio.samples / peak, audio.sample_rate)


def _reflect_pad(x: np.ndarray, pad: int) -> np.ndarray:
    if len(x) > pad:
        return np.pad(x, pad, mode="reflect")
    # degenerate short signals: reflect what exists, zero-fill the rest
    out = np.zeros(len(x) + 2 * pad)
    out[pad:pad + len(x)] = x
    k = len(x) - 1
    if k > 0:
        out[pad - k:pad] = x[1:k + 1][::-1]
        out[pad + len(x):pad + len(x) + k] = x[-k - 1:-1][::-1]
    return out


def _frame(x: np.ndarray, win: int, hop: int) -> np.ndarray:
    n_frames = 1 + (len(x) - win) // hop
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    return x[idx]


def stft(audio, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """Complex spectrogram, shape (1 + len//hop, fft_size/2 + 1).

    The signal is center-padded by win_length/2 reflected samples at both
    ends before framing.
    """
    x = audio.samples if isinstance(audio, AudioSignal) else np.asarray(audio, dtype=np.float64)
    if len(x) < 1:
        raise AudioError("stft needs at least one sample")
    pad = cfg.win_length // 2
    xp = _reflect_pad(x, pad)
    frames = _frame(xp, cfg.win_length, cfg.hop)
    return np.fft.rfft(frames * hann(cfg.win_length), n=cfg.fft_size, axis=1)


def istft(frames: np.ndarray, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """Overlap-add inverse with Hann-squared window normalization.

    Returns (T-1)*hop samples, the center portion matching what stft saw.
    Exact reconstruction wherever the window-square sum is well
    conditioned (always true for hop = win/4 Hann away from the trimmed
    padding).
    """
    frames = np.asarray(frames)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise AudioError(f"istft expects a (T, bins) matrix, got {frames.shape}")
    t = frames.shape[0]
    win = cfg.win_length
    w = hann(win)
    total = (t - 1) * cfg.hop + win
    ola = np.zeros(total)
    wsum = np.zeros(total)
    time_frames = np.fft.irfft(frames, n=cfg.fft_size, axis=1)[:, :win] * w
    for k in range(t):
        start = k * cfg.hop
        ola[start:start + win] += time_frames[k]
        wsum[start:start + win] += w * w
    lo = win // 2
    hi = lo + (t - 1) * cfg.hop
    core_wsum = wsum[lo:hi]
    if core_wsum.size and core_wsum.min() < 1e-8:
        raise AudioError(
            "istft: window-square sum vanishes inside the output range "
            f"(min {core_wsum.min():.3e}); hop/window combination is not invertible")
    return ola[lo:hi] / np.where(core_wsum == 0, 1.0, core_wsum)


# ---------------------------------------------------------------------------
# mel scale
# ---------------------------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass
class MelFilterbank:
    """Triangular filters with centers uniformly spaced on the mel scale."""
    weights: np.ndarray            # (n_mels, bins), non-negative
    f_min: float
    f_max: float
    centers_hz: np.ndarray = field(repr=False, default=None)

    @property
    def n_mels(self) -> int:
        return self.weights.shape[0]


def mel_filterbank(n_mels: int = 80, cfg: StftConfig = StftConfig(),
                   f_min: float = 0.0, f_max: float | None = None) -> MelFilterbank:
    if f_max is None:
        f_max = cfg.sample_rate / 2.0
    if not (0.0 <= f_min < f_max <= cfg.sample_rate / 2.0):
        raise ConfigError(f"need 0 <= f_min < f_max <= Nyquist, got {f_min}, {f_max}")
    pts_mel = np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2)
    pts_hz = mel_to_hz(pts_mel)
    bin_hz = np.arange(cfg.bins) * cfg.sample_rate / cfg.fft_size
    lower, center, upper = pts_hz[:-2], pts_hz[1:-1], pts_hz[2:]
    up = (bin_hz[None, :] - lower[:, None]) / (center - lower)[:, None]
    down = (upper[:, None] - bin_hz[None, :]) / (upper - center)[:, None]
    weights = np.maximum(0.0, np.minimum(up, down))
    return MelFilterbank(weights=weights, f_min=f_min, f_max=f_max, centers_hz=center)


def log_mel(audio, cfg: StftConfig = StftConfig(),
            fb: MelFilterbank | None = None) -> np.ndarray:
    """(T, n_mels) matrix of log-compressed mel energies, floored at log(1e-5)."""
    if fb is None:
        fb = mel_filterbank(cfg=cfg)
    mag = np.abs(stft(audio, cfg))
    mel = mag @ fb.weights.T
    return np.log(np.maximum(mel, CLIP_FLOOR))


def mel_to_linear(mel_frames: np.ndarray, fb: MelFilterbank,
                  clamp: bool = True) -> np.ndarray:
    """Least-norm magnitude estimate: rows solve fb @ s = m; negative
    values are clamped to zero unless clamp=False.

    Input must already be de-logged (linear mel energies).
    """
    mel_frames = np.asarray(mel_frames, dtype=np.float64)
    if mel_frames.ndim != 2 or mel_frames.shape[1] != fb.n_mels:
        raise AudioError(f"expected (T, {fb.n_mels}) mel frames, got {mel_frames.shape}")
    gram = fb.weights @ fb.weights.T
    # valid triangular banks always give a positive-definite gram matrix
    projector = np.linalg.solve(gram, fb.weights)
    magnitude = mel_frames @ projector
    return np.maximum(magnitude, 0.0) if clamp else magnitude


def griffin_lim(magnitude: np.ndarray, cfg: StftConfig = StftConfig(),
                iters: int = 60) -> AudioSignal:
    """Phase reconstruction from a magnitude spectrogram, starting at zero
    phase; the iteration count includes the initial inversion.  Output is
    peak-normalized (all-zero magnitudes come back as silence)."""
    if iters < 1:
        raise ConfigError(f"griffin_lim needs iters >= 1, got {iters}")
    magnitude = np.asarray(magnitude, dtype=np.float64)
    if np.any(magnitude < 0):
        raise AudioError("griffin_lim magnitude must be non-negative")
    x = istft(magnitude.astype(np.complex128), cfg)
    for _ in range(iters - 1):
        z = stft(x, cfg)
        x = istft(magnitude * np.exp(1j * np.angle(z)), cfg)
    out = AudioSignal(x, cfg.sample_rate)
    if np.abs(out.samples).max() == 0.0:
        return out
    return normalize(out)


def spectral_convergence(magnitude: np.ndarray, audio, cfg: StftConfig = StftConfig()) -> float:
    """|| |STFT(x)| - M ||_F / ||M||_F, the Griffin-Lim progress measure."""
    ref = np.linalg.norm(magnitude)
    got = np.abs(stft(audio, cfg))
    n = min(got.shape[0], magnitude.shape[0])
    return float(np.linalg.norm(got[:n] - magnitude[:n]) / ref)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def write_wav(path, audio: AudioSignal) -> None:
    """Mono 16-bit PCM RIFF."""
    pcm = np.clip(audio.samples, -1.0, 1.0)
    pcm = np.round(pcm * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(audio.sample_rate)
        fh.writeframes(pcm.tobytes())


def read_wav(path) -> AudioSignal:
    try:
        with wave.open(str(path), "rb") as fh:
            if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
                raise DataError(
                    f"{path}: expected mono 16-bit PCM, got "
                    f"{fh.getnchannels()} ch x {8 * fh.getsampwidth()} bit")
            sr = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except wave.Error as exc:
        raise DataError(f"{path}: not a readable WAV file: {exc}") from exc
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0
    return AudioSignal(samples, sr)


def wav_frame_count(path) -> tuple[int, int]:
    """(n_samples, sample_rate) from the header only."""
    try:
        with wave.open(str(path), "rb") as fh:
            return fh.getnframes(), fh.getframerate()
    except (wave.Error, EOFError) as exc:
        raise DataError(f"{path}: not a readable WAV file: {exc}") from exc


MEL_MAGIC = b"MELF"
MEL_VERSION = 1


def write_mel(path, mel: np.ndarray) -> None:
    """{magic, version, T, n_mels, little-endian float32 row-major}."""
    mel = np.asarray(mel)
    if mel.ndim != 2:
        raise DataError(f"mel matrix must be 2-d, got {mel.shape}")
    with open(path, "wb") as fh:
        fh.write(MEL_MAGIC)
        fh.write(struct.pack("<III", MEL_VERSION, mel.shape[0], mel.shape[1]))
        fh.write(mel.astype("<f4").tobytes())


def read_mel(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MEL_MAGIC:
        raise DataError(f"{path}: bad mel file magic")
    version, t, n = struct.unpack_from("<III", raw, 4)
    if version != MEL_VERSION:
        raise DataError(f"{path}: unsupported mel file version {version}")
    data = np.frombuffer(raw, dtype="<f4", offset=16)
    if data.size != t * n:
        raise DataError(f"{path}: truncated mel file")
    return data.reshape(t, n).astype(np.float64)
