"""Dataset plumbing: frame containers, manifests, the synthetic
audio-visual corpus, preprocessing, augmentation, and batching.

The synthetic corpus renders each symbol of a small alphabet as (a) a
bright ellipse whose vertical position and aperture encode the symbol
and (b) a tone whose frequency and amplitude encode the same symbol, so
video and audio carry the same message and a small model can genuinely
learn the crossmodal map.  Every clip ends with a short rest (closed
ellipse, silence) ahead of the all-255 visual period appended at
preprocessing time.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dsp
from .errors import ConfigError, DataError

FRAME_MAGIC = b"FRMC"
FRAME_VERSION = 1

MANIFEST_FORMAT = "lipsynth-manifest"
MANIFEST_VERSION = 1


# ---------------------------------------------------------------------------
# frame container
# ---------------------------------------------------------------------------

def write_frames(path, frames: np.ndarray) -> None:
    """Store uint8 frames, layout (T, H, W, C)."""
    frames = np.asarray(frames)
    if frames.ndim == 3:
        frames = frames[..., None]
    if frames.ndim != 4 or frames.dtype != np.uint8:
        raise DataError(f"frames must be uint8 (T, H, W, C), got {frames.dtype} {frames.shape}")
    t, h, w, c = frames.shape
    with open(path, "wb") as fh:
        fh.write(FRAME_MAGIC)
        fh.write(struct.pack("<IIIII", FRAME_VERSION, t, h, w, c))
        fh.write(np.ascontiguousarray(frames).tobytes())


def read_frames(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != FRAME_MAGIC:
        raise DataError(f"{path}: bad frame container magic")
    version, t, h, w, c = struct.unpack_from("<IIIII", raw, 4)
    if version != FRAME_VERSION:
        raise DataError(f"{path}: unsupported frame container version {version}")
    data = np.frombuffer(raw, dtype=np.uint8, offset=24)
    if data.size != t * h * w * c:
        raise DataError(f"{path}: truncated frame container "
                        f"(expected {t * h * w * c} bytes, got {data.size})")
    return data.reshape(t, h, w, c).copy()


def frame_container_header(path) -> tuple[int, int, int, int]:
    """(T, H, W, C) without reading the payload."""
    with open(path, "rb") as fh:
        head = fh.read(24)
    if len(head) < 24 or head[:4] != FRAME_MAGIC:
        raise DataError(f"{path}: not a frame container")
    _, t, h, w, c = struct.unpack_from("<IIIII", head, 4)
    return t, h, w, c


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

@dataclass
class ClipRecord:
    id: str
    video_path: str
    audio_path: str
    transcript: str | None
    fps: float
    duration: float


def write_manifest(path, records: list[ClipRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION}) + "\n")
        for r in records:
            fh.write(json.dumps({
                "id": r.id,
                "video_path": r.video_path,
                "audio_path": r.audio_path,
                "transcript": r.transcript,
                "fps": r.fps,
                "duration": r.duration,
            }) + "\n")


def load_manifest(path, validate: bool = True) -> list[ClipRecord]:
    """Parse a manifest; paths are resolved relative to the manifest file.

    With validate=True, checks that referenced files exist and that frame
    and sample counts are consistent with fps * duration.
    """
    path = Path(path)
    base = path.parent
    records: list[ClipRecord] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        lines = fh.readlines()
    if lines:
        try:
            header = json.loads(lines[0])
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:1: malformed header: {exc}") from exc
        if header.get("format") != MANIFEST_FORMAT:
            raise DataError(f"{path}:1: not a {MANIFEST_FORMAT} file")
        if header.get("version") != MANIFEST_VERSION:
            raise DataError(f"{path}:1: unsupported manifest version {header.get('version')}")
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            rec = ClipRecord(
                id=obj["id"],
                video_path=str(base / obj["video_path"]),
                audio_path=str(base / obj["audio_path"]),
                transcript=obj.get("transcript"),
                fps=float(obj["fps"]),
                duration=float(obj["duration"]),
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}:{lineno}: malformed record: {exc}") from exc
        if rec.id in seen:
            raise DataError(f"{path}:{lineno}: duplicate clip id {rec.id!r}")
        seen.add(rec.id)
        if validate:
            _validate_record(rec)
        records.append(rec)
    return records


def _validate_record(rec: ClipRecord, hop: int = 256) -> None:
    for p in (rec.video_path, rec.audio_path):
        if not Path(p).exists():
            raise DataError(f"clip {rec.id}: missing file {p}")
    t, _, _, _ = frame_container_header(rec.video_path)
    expected_frames = rec.fps * rec.duration
    if abs(t - expected_frames) > 1.0:
        raise DataError(
            f"clip {rec.id}: {t} frames but fps*duration = {expected_frames:.2f}")
    n, sr = dsp.wav_frame_count(rec.audio_path)
    expected_samples = sr * rec.duration
    if abs(n - expected_samples) > hop:
        raise DataError(
            f"clip {rec.id}: {n} samples but sr*duration = {expected_samples:.0f}")


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

SYMBOL_LETTERS = "abcdefghij"
REST = -1


@dataclass
class SynthSpec:
    """Desk-scale synthetic audio-visual corpus description.

    balanced=True makes every clip a permutation of one shared symbol
    multiset (all clips the same length, no symbol repeated back to
    back), so clip identity is invisible to an attention-averaged
    context and the crossmodal map has to be read frame by frame.
    """
    n_clips: int = 8
    fps: float = 25.0
    sample_rate: int = 16000
    duration_min: float = 0.9
    duration_max: float = 1.3
    alphabet: list[tuple[float, float]] = field(default_factory=lambda: default_alphabet())
    seed: int = 0
    image_size: int = 112
    symbol_frames: int = 5        # 0.2 s per symbol at 25 fps
    rest_frames: int = 3          # trailing closed-mouth silence
    balanced: bool = False

    def validate(self):
        if self.n_clips < 1 or not self.alphabet:
            raise ConfigError("synth spec needs n_clips >= 1 and a non-empty alphabet")
        if not 0 < self.duration_min <= self.duration_max:
            raise ConfigError("need 0 < duration_min <= duration_max")
        if len(self.alphabet) > len(SYMBOL_LETTERS):
            raise ConfigError(f"alphabet limited to {len(SYMBOL_LETTERS)} symbols")

    def to_dict(self) -> dict:
        return {
            "n_clips": self.n_clips, "fps": self.fps, "sample_rate": self.sample_rate,
            "duration_min": self.duration_min, "duration_max": self.duration_max,
            "alphabet": [list(a) for a in self.alphabet], "seed": self.seed,
            "image_size": self.image_size, "symbol_frames": self.symbol_frames,
            "rest_frames": self.rest_frames, "balanced": self.balanced,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        spec = cls()
        for k, v in d.items():
            if not hasattr(spec, k):
                raise ConfigError(f"unknown synth spec key {k!r}")
            if k == "alphabet":
                v = [(float(f), float(a)) for f, a in v]
            setattr(spec, k, v)
        spec.validate()
        return spec


def default_alphabet(n: int = 5) -> list[tuple[float, float]]:
    freqs = np.geomspace(350.0, 2400.0, n)
    amps = [0.85 if k % 2 == 0 else 0.6 for k in range(n)]
    return [(float(f), a) for f, a in zip(freqs, amps)]


def _symbol_pose(symbol: int, n_symbols: int, size: int) -> tuple[float, float]:
    """(row center, vertical semi-axis) of the ellipse for a symbol."""
    if symbol == REST:
        return size / 2.0, 1.5
    span = max(n_symbols - 1, 1)
    row = 0.25 * size + 0.5 * size * symbol / span
    aperture = 5.0 + 8.0 * symbol / span
    return row, aperture


def render_symbol_frame(symbol: int, n_symbols: int, size: int = 112) -> np.ndarray:
    """One grayscale face-proxy frame: bright ellipse on dark background."""
    row_c, b = _symbol_pose(symbol, n_symbols, size)
    col_c = (size - 1) / 2.0
    a = 0.18 * size                     # horizontal semi-axis
    rows = np.arange(size)[:, None]
    cols = np.arange(size)[None, :]
    mask = ((rows - row_c) / b) ** 2 + ((cols - col_c) / a) ** 2 <= 1.0
    frame = np.full((size, size), 20, dtype=np.uint8)
    frame[mask] = 235
    return frame


def _balanced_sequence(n_sym: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """Permutation of the fixed multiset {0..k-1} cycled to length n_sym,
    reshuffled until no symbol repeats back to back."""
    base = np.arange(n_sym) % k
    for _ in range(1000):
        perm = rng.permutation(base)
        if n_sym == 1 or np.all(perm[1:] != perm[:-1]):
            return perm
    return perm     # pathological alphabet/length combinations keep the last draw


def _tone(freq: float, amp: float, n: int, sr: int) -> np.ndarray:
    t = np.arange(n) / sr
    x = amp * np.sin(2.0 * np.pi * freq * t)
    fade = min(int(0.004 * sr), n // 2)
    if fade > 0:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(fade) / fade)
        x[:fade] *= ramp
        x[-fade:] *= ramp[::-1]
    return x


def synth_generate(spec: SynthSpec, out_dir) -> Path:
    """Write WAVs, frame containers, and a manifest; returns the manifest path."""
    spec.validate()
    out_dir = Path(out_dir)
    clips_dir = out_dir / "clips"
    try:
        clips_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {clips_dir}: {exc}") from exc
    rng = np.random.default_rng(spec.seed)
    k = len(spec.alphabet)
    sym_samples = int(round(spec.symbol_frames / spec.fps * spec.sample_rate))
    rest_samples = int(round(spec.rest_frames / spec.fps * spec.sample_rate))

    frame_cache = {s: render_symbol_frame(s, k, spec.image_size)
                   for s in list(range(k)) + [REST]}
    records = []
    for i in range(spec.n_clips):
        if spec.balanced:
            duration = spec.duration_min
        else:
            duration = rng.uniform(spec.duration_min, spec.duration_max)
        n_sym = max(1, int(round((duration * spec.fps - spec.rest_frames)
                                 / spec.symbol_frames)))
        if spec.balanced:
            symbols = _balanced_sequence(n_sym, k, rng)
        else:
            symbols = rng.integers(0, k, size=n_sym)

        frames = []
        audio = []
        for s in symbols:
            frames.extend([frame_cache[int(s)]] * spec.symbol_frames)
            freq, amp = spec.alphabet[int(s)]
            audio.append(_tone(freq, amp, sym_samples, spec.sample_rate))
        frames.extend([frame_cache[REST]] * spec.rest_frames)
        audio.append(np.zeros(rest_samples))
        video = np.stack(frames)[..., None]
        wav = np.concatenate(audio)

        clip_id = f"clip{i:04d}"
        write_frames(clips_dir / f"{clip_id}.frames", video)
        dsp.write_wav(clips_dir / f"{clip_id}.wav",
                      dsp.AudioSignal(wav, spec.sample_rate))
        records.append(ClipRecord(
            id=clip_id,
            video_path=f"clips/{clip_id}.frames",
            audio_path=f"clips/{clip_id}.wav",
            transcript=" ".join(SYMBOL_LETTERS[int(s)] for s in symbols),
            fps=spec.fps,
            duration=len(video) / spec.fps,
        ))
    manifest = out_dir / "manifest.jsonl"
    write_manifest(manifest, records)
    return manifest


def decode_video_symbols(frames: np.ndarray, spec: SynthSpec) -> str:
    """Rule-based video decoder: classify each symbol slot by ellipse pose."""
    if frames.ndim == 4:
        frames = frames[..., 0]
    k = len(spec.alphabet)
    n_sym = (frames.shape[0] - spec.rest_frames) // spec.symbol_frames
    poses = [_symbol_pose(s, k, spec.image_size) for s in range(k)]
    out = []
    for s in range(n_sym):
        mid = frames[s * spec.symbol_frames + spec.symbol_frames // 2]
        bright = np.argwhere(mid > 128)
        if len(bright) == 0:
            continue
        row = bright[:, 0].mean()
        extent = (bright[:, 0].max() - bright[:, 0].min()) / 2.0
        dists = [abs(row - r) + abs(extent - b) for r, b in poses]
        out.append(SYMBOL_LETTERS[int(np.argmin(dists))])
    return " ".join(out)


def decode_audio_symbols(samples: np.ndarray, spec: SynthSpec) -> str:
    """Rule-based audio decoder: FFT peak per symbol slot."""
    k = len(spec.alphabet)
    sym_samples = int(round(spec.symbol_frames / spec.fps * spec.sample_rate))
    n_sym = (len(samples) - int(round(spec.rest_frames / spec.fps * spec.sample_rate))) \
        // sym_samples
    freqs = np.array([f for f, _ in spec.alphabet])
    out = []
    for s in range(n_sym):
        seg = samples[s * sym_samples:(s + 1) * sym_samples]
        if np.sqrt(np.mean(seg ** 2)) < 0.02:
            continue
        spec_mag = np.abs(np.fft.rfft(seg * dsp.hann(len(seg))))
        peak_hz = spec_mag.argmax() * spec.sample_rate / len(seg)
        out.append(SYMBOL_LETTERS[int(np.argmin(np.abs(freqs - peak_hz)))])
    return " ".join(out)


# ---------------------------------------------------------------------------
# preprocessing / augmentation / batching
# ---------------------------------------------------------------------------

def frames_to_model_input(raw: np.ndarray, input_channels: int = 1) -> np.ndarray:
    """uint8 (T, H, W, C) frames -> float (C, T+1, H, W) in [0, 1] with the
    all-ones visual period frame appended."""
    x = raw.astype(np.float64) / 255.0
    c_in = x.shape[-1]
    if c_in == 3 and input_channels == 1:
        x = (0.299 * x[..., 0] + 0.587 * x[..., 1] + 0.114 * x[..., 2])[..., None]
    elif c_in == 1 and input_channels == 3:
        x = np.repeat(x, 3, axis=-1)
    elif c_in != input_channels:
        raise DataError(
            f"container has {c_in} channels, model wants {input_channels}")
    frames = np.ascontiguousarray(x.transpose(3, 0, 1, 2))     # (C, T, H, W)
    period = np.ones((frames.shape[0], 1) + frames.shape[2:])
    return np.concatenate([frames, period], axis=1)


def preprocess_clip(record: ClipRecord, input_channels: int = 1,
                    stft_cfg: dsp.StftConfig | None = None,
                    fb: dsp.MelFilterbank | None = None
                    ) -> tuple[np.ndarray, np.ndarray]:
    """(frames, mel_target) for one clip.

    Frames come back as float (C, T+1, H, W) in [0, 1] with the all-ones
    visual period appended; the mel target is the normalized audio run
    through the log-mel pipeline.
    """
    if stft_cfg is None:
        stft_cfg = dsp.StftConfig()
    try:
        raw = read_frames(record.video_path)                   # (T, H, W, C)
        frames = frames_to_model_input(raw, input_channels)
    except DataError as exc:
        raise DataError(f"clip {record.id}: {exc}") from exc

    try:
        audio = dsp.read_wav(record.audio_path)
    except DataError as exc:
        raise DataError(f"clip {record.id}: {exc}") from exc
    mel = dsp.log_mel(dsp.normalize(audio), stft_cfg, fb)
    return frames, mel


def augment_hflip(frames: np.ndarray, p: float = 0.5,
                  rng: np.random.Generator | None = None) -> np.ndarray:
    """Mirror every frame of the clip left-right with probability p
    (one decision per clip, preserving temporal coherence)."""
    if p > 0 and (rng or np.random.default_rng()).random() < p:
        return np.ascontiguousarray(frames[..., ::-1])
    return frames


@dataclass
class Batch:
    frames: np.ndarray          # (B, C, T_max, H, W), zero padded
    mels: np.ndarray            # (B, m_max, n_mels), zero padded
    frame_lengths: np.ndarray   # (B,)
    mel_lengths: np.ndarray     # (B,)
    frame_mask: np.ndarray      # (B, T_max) bool
    mel_mask: np.ndarray        # (B, m_max) bool

    def __len__(self):
        return self.frames.shape[0]

    def clip(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """Un-padded views of clip i (bitwise what went in)."""
        t = self.frame_lengths[i]
        m = self.mel_lengths[i]
        return self.frames[i, :, :t], self.mels[i, :m]


def batch_collate(items: list[tuple[np.ndarray, np.ndarray]]) -> Batch:
    """Zero-pad to per-batch maxima, sorted by descending frame length."""
    if not items:
        raise DataError("cannot collate an empty batch")
    items = sorted(items, key=lambda it: -it[0].shape[1])
    b = len(items)
    c, _, h, w = items[0][0].shape
    t_max = max(f.shape[1] for f, _ in items)
    m_max = max(m.shape[0] for _, m in items)
    n_mels = items[0][1].shape[1]
    frames = np.zeros((b, c, t_max, h, w))
    mels = np.zeros((b, m_max, n_mels))
    f_len = np.zeros(b, dtype=np.int64)
    m_len = np.zeros(b, dtype=np.int64)
    for i, (f, m) in enumerate(items):
        frames[i, :, :f.shape[1]] = f
        mels[i, :m.shape[0]] = m
        f_len[i] = f.shape[1]
        m_len[i] = m.shape[0]
    frame_mask = np.arange(t_max)[None, :] < f_len[:, None]
    mel_mask = np.arange(m_max)[None, :] < m_len[:, None]
    return Batch(frames, mels, f_len, m_len, frame_mask, mel_mask)


def masked_mse(pred: np.ndarray, target: np.ndarray, mask: np.ndarray) -> float:
    """MSE over real entries only; denominator = count of unmasked values."""
    diff = (pred - target) ** 2
    w = mask[..., None].astype(np.float64)
    return float((diff * w).sum() / (w.sum() * pred.shape[-1]))
