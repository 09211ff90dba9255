"""Objective evaluation: ESTOI intelligibility, mel-domain MSE, and
WER/CER via Levenshtein edit distance.

ESTOI operates at 10 kHz on one-third-octave band envelopes: silent
frames are removed (judged on the clean signal), short-time segments of
30 frames are row- then column-normalized, and the score is the average
inner product of the normalized envelope columns, in [-1, 1].
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.signal import resample_poly

from .dsp import AudioSignal, hann
from .errors import AudioError, ConfigError, ShapeError


@dataclass(frozen=True)
class EstoiConfig:
    sample_rate: int = 10000
    frame_len: int = 256          # 50% overlap
    hop: int = 128
    fft_size: int = 512
    n_bands: int = 15
    band_start_hz: float = 150.0
    segment_len: int = 30
    silence_db: float = 40.0      # keep frames within this of the loudest

    def __post_init__(self):
        edges = self.band_edges()
        if not np.all(np.diff(edges) > 0):
            raise ConfigError("third-octave band edges must be strictly increasing")
        if edges[-1] > self.sample_rate / 2:
            raise ConfigError(
                f"highest band edge {edges[-1]:.1f} Hz exceeds Nyquist "
                f"{self.sample_rate / 2:.1f} Hz")

    def band_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """(lower, upper) edges of the one-third-octave bands; adjacent
        bands tile contiguously (upper[j] == lower[j+1])."""
        j = np.arange(self.n_bands)
        cf = self.band_start_hz * 2.0 ** (j / 3.0)
        return cf * 2.0 ** (-1.0 / 6.0), cf * 2.0 ** (1.0 / 6.0)

    def band_edges(self) -> np.ndarray:
        """The n_bands + 1 distinct band boundaries, strictly increasing."""
        lo, hi = self.band_bounds()
        return np.concatenate([lo[:1], hi])


def _octave_band_matrix(cfg: EstoiConfig) -> np.ndarray:
    freqs = np.arange(cfg.fft_size // 2 + 1) * cfg.sample_rate / cfg.fft_size
    lo, hi = cfg.band_bounds()
    obm = np.zeros((cfg.n_bands, len(freqs)))
    for j in range(cfg.n_bands):
        obm[j, (freqs >= lo[j]) & (freqs < hi[j])] = 1.0
    return obm


def _frames(x: np.ndarray, cfg: EstoiConfig) -> np.ndarray:
    n = 1 + (len(x) - cfg.frame_len) // cfg.hop
    idx = np.arange(cfg.frame_len)[None, :] + cfg.hop * np.arange(n)[:, None]
    return x[idx]


def _remove_silent_frames(clean: np.ndarray, degraded: np.ndarray,
                          cfg: EstoiConfig) -> tuple[np.ndarray, np.ndarray]:
    """Drop frames whose clean-signal energy is more than silence_db below
    the loudest frame; both signals are rebuilt by overlap-add."""
    w = hann(cfg.frame_len)
    xf = _frames(clean, cfg) * w
    yf = _frames(degraded, cfg) * w
    energy = 20.0 * np.log10(np.linalg.norm(xf, axis=1) + 1e-16)
    keep = energy > energy.max() - cfg.silence_db
    xf, yf = xf[keep], yf[keep]
    n = len(xf)
    out_len = (n - 1) * cfg.hop + cfg.frame_len if n else 0
    xs = np.zeros(out_len)
    ys = np.zeros(out_len)
    for k in range(n):
        s = k * cfg.hop
        xs[s:s + cfg.frame_len] += xf[k]
        ys[s:s + cfg.frame_len] += yf[k]
    return xs, ys


def _band_envelopes(x: np.ndarray, obm: np.ndarray, cfg: EstoiConfig) -> np.ndarray:
    frames = _frames(x, cfg) * hann(cfg.frame_len)
    spec = np.fft.rfft(frames, n=cfg.fft_size, axis=1)
    return np.sqrt(obm @ (np.abs(spec) ** 2).T)            # (bands, frames)


def _row_col_normalize(m: np.ndarray) -> np.ndarray:
    m = m - m.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    m = np.where(norms > 0, m / np.where(norms == 0, 1.0, norms), 0.0)
    m = m - m.mean(axis=0, keepdims=True)
    norms = np.linalg.norm(m, axis=0, keepdims=True)
    return np.where(norms > 0, m / np.where(norms == 0, 1.0, norms), 0.0)


def _resample(x: np.ndarray, sr: int, target: int) -> np.ndarray:
    if sr == target:
        return x
    g = math.gcd(sr, target)
    return resample_poly(x, target // g, sr // g)


def estoi(clean: AudioSignal, degraded: AudioSignal,
          cfg: EstoiConfig = EstoiConfig()) -> float:
    """Extended short-time objective intelligibility of `degraded` against
    time-aligned `clean`; higher is better, identical signals give 1."""
    if clean.sample_rate != degraded.sample_rate:
        raise AudioError(
            f"sample rates differ: {clean.sample_rate} vs {degraded.sample_rate}")
    n = min(len(clean.samples), len(degraded.samples))
    x = _resample(clean.samples[:n], clean.sample_rate, cfg.sample_rate)
    y = _resample(degraded.samples[:n], degraded.sample_rate, cfg.sample_rate)

    min_samples = (cfg.segment_len - 1) * cfg.hop + cfg.frame_len
    if len(x) < min_samples:
        raise AudioError(
            f"signals too short for ESTOI: need >= {min_samples} samples "
            f"({min_samples / cfg.sample_rate:.2f} s) at {cfg.sample_rate} Hz")
    x, y = _remove_silent_frames(x, y, cfg)
    if len(x) < min_samples:
        raise AudioError(
            f"too little speech after silence removal: need >= {min_samples} "
            f"samples ({min_samples / cfg.sample_rate:.2f} s) at {cfg.sample_rate} Hz")

    obm = _octave_band_matrix(cfg)
    ex = _band_envelopes(x, obm, cfg)
    ey = _band_envelopes(y, obm, cfg)

    n_frames = ex.shape[1]
    scores = []
    for m in range(cfg.segment_len, n_frames + 1):
        seg_x = _row_col_normalize(ex[:, m - cfg.segment_len:m])
        seg_y = _row_col_normalize(ey[:, m - cfg.segment_len:m])
        scores.append(float((seg_x * seg_y).sum()) / cfg.segment_len)
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# mel-domain MSE
# ---------------------------------------------------------------------------

def mel_mse(a: np.ndarray, b: np.ndarray) -> float:
    """Mean squared difference of two mel matrices; lengths may differ by
    truncation (with a warning), channel counts may not."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"mel channel mismatch: {a.shape} vs {b.shape}")
    if a.shape[0] != b.shape[0]:
        warnings.warn(
            f"mel lengths differ ({a.shape[0]} vs {b.shape[0]}); truncating",
            stacklevel=2)
        n = min(a.shape[0], b.shape[0])
        a, b = a[:n], b[:n]
    d = a - b
    return float((d * d).mean())


# ---------------------------------------------------------------------------
# edit distance / WER / CER
# ---------------------------------------------------------------------------

@dataclass
class EditOps:
    substitutions: int
    deletions: int
    insertions: int
    ref_len: int

    @property
    def distance(self) -> int:
        return self.substitutions + self.deletions + self.insertions


def edit_distance(ref: Sequence, hyp: Sequence) -> EditOps:
    """Levenshtein alignment with unit costs.

    Backtracking prefers substitution over insertion over deletion on
    ties, so the S/D/I split is deterministic (the total never changes).
    """
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            ins = d[i, j - 1] + 1
            dele = d[i - 1, j] + 1
            d[i, j] = min(sub, ins, dele)

    s = dels = ins_count = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            if ref[i - 1] != hyp[j - 1]:
                s += 1
            i, j = i - 1, j - 1
        elif j > 0 and d[i, j] == d[i, j - 1] + 1:
            ins_count += 1
            j -= 1
        else:
            dels += 1
            i -= 1
    return EditOps(substitutions=s, deletions=dels, insertions=ins_count, ref_len=n)


def wer_cer(ref: str, hyp: str, unit: str = "word") -> float:
    """(S + D + I) / len(ref tokens); may exceed 1.0."""
    if unit == "word":
        ref_tokens: Sequence = ref.split()
        hyp_tokens: Sequence = hyp.split()
    elif unit == "char":
        ref_tokens = [c for c in ref if not c.isspace()]
        hyp_tokens = [c for c in hyp if not c.isspace()]
    else:
        raise ConfigError(f"unit must be 'word' or 'char', got {unit!r}")
    if not ref_tokens:
        raise AudioError("empty reference transcript")
    ops = edit_distance(ref_tokens, hyp_tokens)
    return ops.distance / ops.ref_len


# ---------------------------------------------------------------------------
# evaluation report
# ---------------------------------------------------------------------------

REPORT_FIELDS = ("clip_id", "estoi", "mel_mse", "wer", "cer")
SUMMARY_ID = "__summary__"


def write_report(path, rows: list[dict]) -> dict:
    """Line-delimited records in fixed field order plus a summary row whose
    metrics are the arithmetic means of the per-clip values.  Rows with an
    'error' key count as failed and are excluded from the means.  Returns
    the summary row."""
    summary: dict = {"clip_id": SUMMARY_ID}
    for metric in REPORT_FIELDS[1:]:
        vals = [r[metric] for r in rows
                if "error" not in r and r.get(metric) is not None]
        summary[metric] = float(np.mean(vals)) if vals else None
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            if "error" in r:
                fh.write(json.dumps({"clip_id": r["clip_id"], "error": r["error"]}) + "\n")
            else:
                fh.write(json.dumps({k: r.get(k) for k in REPORT_FIELDS}) + "\n")
        fh.write(json.dumps({k: summary.get(k) for k in REPORT_FIELDS}) + "\n")
    return summary


def read_report(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
