"""Video-to-mel sequence-to-sequence network.

Encoder: three (Conv3D -> BatchNorm -> ReLU -> MaxPool3D -> Dropout)
blocks over (C, T, 112, 112) face frames, spatial stride only (time
length is preserved), flattened channel-major per timestep and fed to
two bidirectional LSTM layers.

Attention (location-sensitive): at each decoder step t,

    x   = AttentionLSTM([h . a_{t-1}, prenet(previous frame)])
    y   = Conv1D over stacked (a_{t-1}, cumulative sum of a_i)
    e   = W . tanh(M.h + Q.x + L.y)
    a_t = softmax(e),    v_t = a_t . h

The energy path is bias-free, matching the matrix form above; prenet and
projection are standard affine layers.

Decoder: prenet on the previous mel frame, decoder LSTM over
[v_t, x], linear projection to 80 mel channels, one frame per step.
A 5-layer Conv1D postnet (tanh + batch norm, linear final layer,
zero-initialized by default so training starts at the identity) refines
the sequence residually.

Free-running decoding stops when attention mass on the final encoder
position (the all-ones visual period) exceeds a threshold for a few
consecutive steps, with a hard cap as fallback.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as tz
from .config import format_config
from .errors import ConfigError, ShapeError
from .tensor import Tensor

GO_FRAME = 0.0      # step-0 prenet input is an all-zeros mel frame


@dataclass
class ModelConfig:
    # encoder
    input_channels: int = 1
    image_size: int = 112
    conv_channels: tuple = (32, 64, 128)
    conv_kernels: tuple = ((5, 3, 3), (5, 3, 3), (5, 3, 3))
    conv_strides: tuple = ((1, 2, 2), (1, 2, 2), (1, 1, 1))
    conv_paddings: tuple = ((2, 0, 0), (2, 0, 0), (2, 0, 0))
    pool_windows: tuple = ((1, 2, 2), (1, 2, 2), (1, 2, 2))
    pool_strides: tuple = ((1, 2, 2), (1, 2, 2), (1, 2, 2))
    encoder_lstm_size: int = 128
    encoder_lstm_layers: int = 2
    # attention
    attention_lstm_size: int = 1024
    attention_dim: int = 128
    location_channels: int = 32
    location_kernel: int = 31
    # decoder
    prenet_sizes: tuple = (512, 256)
    decoder_lstm_size: int = 1024
    n_mels: int = 80
    # postnet
    postnet_channels: int = 512
    postnet_layers: int = 5
    postnet_kernel: int = 5
    postnet_zero_init_final: bool = True
    # dropout
    encoder_dropout: float = 0.1       # training only
    prenet_dropout: float = 0.5        # active in training and inference
    # decoding
    max_decoder_steps: int = 1000
    stop_threshold: float = 0.5
    stop_patience: int = 3
    # build
    dtype: str = "float32"
    seed: int = 0

    @property
    def encoder_dim(self) -> int:
        return 2 * self.encoder_lstm_size

    @property
    def n_blocks(self) -> int:
        return len(self.conv_channels)

    def validate(self) -> None:
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        geoms = (self.conv_kernels, self.conv_strides, self.conv_paddings,
                 self.pool_windows, self.pool_strides)
        if not all(len(g) == self.n_blocks for g in geoms):
            raise ConfigError("encoder block lists must all have the same length")
        for name, value in (("attention_lstm_size", self.attention_lstm_size),
                            ("attention_dim", self.attention_dim),
                            ("location_channels", self.location_channels),
                            ("decoder_lstm_size", self.decoder_lstm_size),
                            ("n_mels", self.n_mels),
                            ("encoder_lstm_size", self.encoder_lstm_size),
                            ("max_decoder_steps", self.max_decoder_steps)):
            if value < 1:
                raise ConfigError(f"{name} must be positive, got {value}")
        if self.location_kernel % 2 != 1:
            raise ConfigError("location_kernel must be odd (length-preserving padding)")
        if self.postnet_kernel % 2 != 1:
            raise ConfigError("postnet_kernel must be odd (length-preserving padding)")
        if self.postnet_layers < 1:
            raise ConfigError("postnet needs at least one layer")
        encoder_shape_trace(self)      # raises on impossible geometry

    def to_dict(self) -> dict:
        def plain(v):
            if isinstance(v, tuple):
                return [plain(x) for x in v]
            return v
        return {k: plain(getattr(self, k)) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        cfg = cls()
        tuple_fields = {"conv_channels", "conv_kernels", "conv_strides",
                        "conv_paddings", "pool_windows", "pool_strides",
                        "prenet_sizes"}
        for k, v in d.items():
            if k not in cfg.__dataclass_fields__:
                raise ConfigError(f"unknown model config key {k!r}")
            if k in tuple_fields:
                v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
            setattr(cfg, k, v)
        cfg.validate()
        return cfg

    def config_text(self) -> str:
        return format_config(self.to_dict())

    def config_hash(self) -> str:
        return hashlib.sha256(self.config_text().encode("utf-8")).hexdigest()

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


def encoder_shape_trace(cfg: ModelConfig) -> dict:
    """Closed-form conv/pool arithmetic for the encoder stack.

    Returns the spatial trace (input plus per-stage outputs, conv and
    pool interleaved), the per-stage time lengths for a nominal input,
    and the per-timestep flatten width.
    """
    h = cfg.image_size
    spatial = [h]
    for i in range(cfg.n_blocks):
        h = tz.conv_out_len(h, cfg.conv_kernels[i][1], cfg.conv_strides[i][1],
                            cfg.conv_paddings[i][1])
        if h < 1:
            raise ConfigError(f"encoder block {i}: conv collapses spatial dim to {h}")
        spatial.append(h)
        h = tz.conv_out_len(h, cfg.pool_windows[i][1], cfg.pool_strides[i][1], 0)
        if h < 1:
            raise ConfigError(f"encoder block {i}: pool collapses spatial dim to {h}")
        spatial.append(h)
    flatten = cfg.conv_channels[-1] * h * h
    return {"spatial": spatial, "final_spatial": h, "flatten": flatten}


@dataclass
class AttentionState:
    """Recurrent attention bundle: previous weights a_{t-1}, cumulative
    weights over all produced steps, and the attention-LSTM state."""
    a_prev: Tensor          # (1, n), on the probability simplex
    a_cum: Tensor           # (1, n), running sum of produced weights
    h: Tensor               # (1, attention_lstm_size)
    c: Tensor               # (1, attention_lstm_size)


@dataclass
class DecoderOutput:
    o_dec: Tensor           # (m, n_mels) pre-postnet
    o_post: Tensor          # (m, n_mels) post-postnet
    alignments: np.ndarray  # (m, n) attention weights
    stop_reason: str        # period-detected | max-steps | target-length
    attention_state: Optional[AttentionState] = field(default=None, repr=False)


def loss(o_dec: Tensor, o_post: Tensor, m_tar: np.ndarray) -> Tensor:
    """Dual MSE objective: MSE(o_dec, target) + MSE(o_post, target)."""
    m_tar = np.asarray(m_tar)
    if o_dec.shape != m_tar.shape or o_post.shape != m_tar.shape:
        raise ShapeError(
            f"loss: shapes disagree: dec {o_dec.shape}, post {o_post.shape}, "
            f"target {m_tar.shape}")
    return tz.add(tz.mse(o_dec, m_tar), tz.mse(o_post, m_tar))


class SpeechSynthesizer:
    """The full network with a flat parameter table.

    One instance is single-writer during training; frozen instances are
    safe for concurrent read-only inference.
    """

    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.training = True
        self._build()

    # -- construction ---------------------------------------------------
    def _xavier(self, name: str, shape, gain: float) -> Tensor:
        t = tz.xavier_uniform(shape, gain, self.rng, dtype=self.cfg.np_dtype)
        self.params[name] = t
        return t

    def _zeros_param(self, name: str, shape) -> Tensor:
        t = tz.zeros(shape, dtype=self.cfg.np_dtype)
        self.params[name] = t
        return t

    def _ones_param(self, name: str, shape) -> Tensor:
        t = tz.ones(shape, dtype=self.cfg.np_dtype)
        self.params[name] = t
        return t

    def _lstm_params(self, prefix: str, in_dim: int, hidden: int) -> None:
        self._xavier(f"{prefix}.w_ih", (in_dim, 4 * hidden), 1.0)
        self._xavier(f"{prefix}.w_hh", (hidden, 4 * hidden), 1.0)
        self._zeros_param(f"{prefix}.b", (4 * hidden,))

    def _build(self) -> None:
        cfg = self.cfg
        conv_gain = tz.TANH_GAIN
        c_in = cfg.input_channels
        for i in range(cfg.n_blocks):
            c_out = cfg.conv_channels[i]
            self._xavier(f"enc.block{i}.conv.w", (c_out, c_in) + tuple(cfg.conv_kernels[i]),
                         conv_gain)
            self._zeros_param(f"enc.block{i}.conv.b", (c_out,))
            self._ones_param(f"enc.block{i}.bn.gamma", (c_out,))
            self._zeros_param(f"enc.block{i}.bn.beta", (c_out,))
            self.buffers[f"enc.block{i}.bn.mean"] = np.zeros(c_out, dtype=cfg.np_dtype)
            self.buffers[f"enc.block{i}.bn.var"] = np.ones(c_out, dtype=cfg.np_dtype)
            c_in = c_out

        flatten = encoder_shape_trace(cfg)["flatten"]
        in_dim = flatten
        for layer in range(cfg.encoder_lstm_layers):
            for direction in ("fwd", "bwd"):
                self._lstm_params(f"enc.lstm{layer}.{direction}", in_dim,
                                  cfg.encoder_lstm_size)
            in_dim = cfg.encoder_dim

        enc_dim = cfg.encoder_dim
        self._lstm_params("att.lstm", enc_dim + cfg.prenet_sizes[-1],
                          cfg.attention_lstm_size)
        self._xavier("att.query.w", (cfg.attention_lstm_size, cfg.attention_dim), 1.0)
        self._xavier("att.memory.w", (enc_dim, cfg.attention_dim), 1.0)
        self._xavier("att.location_conv.w",
                     (cfg.location_channels, 2, cfg.location_kernel), conv_gain)
        self._xavier("att.location.w", (cfg.location_channels, cfg.attention_dim), 1.0)
        self._xavier("att.energy.w", (cfg.attention_dim, 1), 1.0)

        prev = cfg.n_mels
        for j, width in enumerate(cfg.prenet_sizes):
            self._xavier(f"dec.prenet{j}.w", (prev, width), 1.0)
            self._zeros_param(f"dec.prenet{j}.b", (width,))
            prev = width
        self._lstm_params("dec.lstm", enc_dim + cfg.attention_lstm_size,
                          cfg.decoder_lstm_size)
        self._xavier("dec.proj.w", (cfg.decoder_lstm_size, cfg.n_mels), 1.0)
        self._zeros_param("dec.proj.b", (cfg.n_mels,))

        channels = [cfg.postnet_channels] * (cfg.postnet_layers - 1) + [cfg.n_mels]
        prev = cfg.n_mels
        for i, c_out in enumerate(channels):
            final = i == cfg.postnet_layers - 1
            if final and cfg.postnet_zero_init_final:
                self._zeros_param(f"post.conv{i}.w", (c_out, prev, cfg.postnet_kernel))
            else:
                self._xavier(f"post.conv{i}.w", (c_out, prev, cfg.postnet_kernel),
                             conv_gain)
            self._zeros_param(f"post.conv{i}.b", (c_out,))
            if not final:
                self._ones_param(f"post.bn{i}.gamma", (c_out,))
                self._zeros_param(f"post.bn{i}.beta", (c_out,))
                self.buffers[f"post.bn{i}.mean"] = np.zeros(c_out, dtype=cfg.np_dtype)
                self.buffers[f"post.bn{i}.var"] = np.ones(c_out, dtype=cfg.np_dtype)
            prev = c_out

    # -- mode switches ----------------------------------------------------
    def train(self) -> "SpeechSynthesizer":
        self.training = True
        return self

    def eval(self) -> "SpeechSynthesizer":
        self.training = False
        return self

    # -- encoder ----------------------------------------------------------
    def encode(self, frames: np.ndarray) -> Tensor:
        """(C, T, H, W) uint-scaled floats -> (T, 2*encoder_lstm_size)."""
        cfg = self.cfg
        frames = np.asarray(frames, dtype=cfg.np_dtype)
        if frames.ndim != 4 or frames.shape[0] != cfg.input_channels \
                or frames.shape[2] != cfg.image_size or frames.shape[3] != cfg.image_size:
            raise ShapeError(
                f"encode: expected ({cfg.input_channels}, T, {cfg.image_size}, "
                f"{cfg.image_size}), got {frames.shape}")
        x = Tensor(frames)
        p = self.params
        for i in range(cfg.n_blocks):
            x = tz.conv3d(x, p[f"enc.block{i}.conv.w"], p[f"enc.block{i}.conv.b"],
                          cfg.conv_strides[i], cfg.conv_paddings[i])
            x = tz.batchnorm(x, p[f"enc.block{i}.bn.gamma"], p[f"enc.block{i}.bn.beta"],
                             self.buffers[f"enc.block{i}.bn.mean"],
                             self.buffers[f"enc.block{i}.bn.var"],
                             training=self.training)
            x = tz.relu(x)
            x = tz.maxpool3d(x, cfg.pool_windows[i], cfg.pool_strides[i])
            x = tz.dropout(x, cfg.encoder_dropout, self.rng, active=self.training)
        t = x.shape[1]
        x = tz.transpose(x, (1, 0, 2, 3))               # (T, C, H', W')
        x = tz.reshape(x, (t, x.size // t))             # channel-major flatten
        for layer in range(cfg.encoder_lstm_layers):
            x = self._bilstm(x, layer)
        return x

    def _bilstm(self, x: Tensor, layer: int) -> Tensor:
        hsz = self.cfg.encoder_lstm_size
        t = x.shape[0]
        rows = [tz.narrow(x, 0, i, 1) for i in range(t)]
        outputs = []
        for direction in ("fwd", "bwd"):
            p = self.params
            w_ih = p[f"enc.lstm{layer}.{direction}.w_ih"]
            w_hh = p[f"enc.lstm{layer}.{direction}.w_hh"]
            b = p[f"enc.lstm{layer}.{direction}.b"]
            h = tz.zeros((1, hsz), dtype=self.cfg.np_dtype, requires_grad=False)
            c = tz.zeros((1, hsz), dtype=self.cfg.np_dtype, requires_grad=False)
            seq = rows if direction == "fwd" else rows[::-1]
            hs = []
            for r in seq:
                h, c = tz.lstm_cell(r, h, c, w_ih, w_hh, b)
                hs.append(h)
            if direction == "bwd":
                hs = hs[::-1]
            outputs.append(tz.concat(hs, axis=0))       # (T, hsz)
        return tz.concat(outputs, axis=1)               # (T, 2*hsz)

    # -- attention ----------------------------------------------------------
    def initial_attention_state(self, n: int) -> AttentionState:
        dt = self.cfg.np_dtype
        uniform = np.full((1, n), 1.0 / n, dtype=dt)
        return AttentionState(
            a_prev=Tensor(uniform),
            a_cum=tz.zeros((1, n), dtype=dt, requires_grad=False),
            h=tz.zeros((1, self.cfg.attention_lstm_size), dtype=dt, requires_grad=False),
            c=tz.zeros((1, self.cfg.attention_lstm_size), dtype=dt, requires_grad=False),
        )

    def processed_memory(self, h_enc: Tensor) -> Tensor:
        return tz.matmul(h_enc, self.params["att.memory.w"])

    def attention_step(self, h_enc: Tensor, state: AttentionState,
                       prenet_out: Tensor, memory_proj: Tensor | None = None
                       ) -> tuple[Tensor, Tensor, AttentionState]:
        """One location-sensitive attention step; returns (v_t, a_t, state)."""
        p = self.params
        cfg = self.cfg
        context = tz.matmul(state.a_prev, h_enc)                       # h . a_{t-1}
        x_in = tz.concat([context, prenet_out], axis=1)
        h_att, c_att = tz.lstm_cell(x_in, state.h, state.c,
                                    p["att.lstm.w_ih"], p["att.lstm.w_hh"],
                                    p["att.lstm.b"])
        loc_in = tz.concat([state.a_prev, state.a_cum], axis=0)        # (2, n)
        loc = tz.conv1d(loc_in, p["att.location_conv.w"], None,
                        stride=1, padding=(cfg.location_kernel - 1) // 2)
        loc = tz.matmul(tz.transpose(loc), p["att.location.w"])        # (n, A)
        if memory_proj is None:
            memory_proj = self.processed_memory(h_enc)
        query = tz.matmul(h_att, p["att.query.w"])                     # (1, A)
        pre = tz.add(tz.add(memory_proj, query), loc)
        energies = tz.matmul(tz.tanh(pre), p["att.energy.w"])          # (n, 1)
        a_col = tz.softmax(energies, axis=0)
        a_t = tz.transpose(a_col)                                      # (1, n)
        v_t = tz.matmul(a_t, h_enc)                                    # (1, enc_dim)
        new_state = AttentionState(a_prev=a_t, a_cum=tz.add(state.a_cum, a_t),
                                   h=h_att, c=c_att)
        return v_t, a_t, new_state

    # -- decoder ----------------------------------------------------------
    def prenet(self, frame) -> Tensor:
        """Bottleneck on the previous mel frame; dropout stays active at
        inference (the standard trick that keeps autoregression robust)."""
        x = frame if isinstance(frame, Tensor) else Tensor(
            np.asarray(frame, dtype=self.cfg.np_dtype).reshape(1, -1))
        for j in range(len(self.cfg.prenet_sizes)):
            x = tz.linear(x, self.params[f"dec.prenet{j}.w"], self.params[f"dec.prenet{j}.b"])
            x = tz.relu(x)
            x = tz.dropout(x, self.cfg.prenet_dropout, self.rng, active=True)
        return x

    def decode_step(self, v_t: Tensor, x_att: Tensor,
                    dec_state: tuple[Tensor, Tensor]
                    ) -> tuple[Tensor, tuple[Tensor, Tensor]]:
        """Decoder LSTM over [v_t, attention-LSTM output], projected to mels."""
        p = self.params
        d_in = tz.concat([v_t, x_att], axis=1)
        h, c = tz.lstm_cell(d_in, dec_state[0], dec_state[1],
                            p["dec.lstm.w_ih"], p["dec.lstm.w_hh"], p["dec.lstm.b"])
        frame = tz.linear(h, p["dec.proj.w"], p["dec.proj.b"])
        return frame, (h, c)

    def initial_decoder_state(self) -> tuple[Tensor, Tensor]:
        dt = self.cfg.np_dtype
        return (tz.zeros((1, self.cfg.decoder_lstm_size), dtype=dt, requires_grad=False),
                tz.zeros((1, self.cfg.decoder_lstm_size), dtype=dt, requires_grad=False))

    def postnet(self, o_dec: Tensor) -> Tensor:
        """Residual Conv1D refinement; time length is preserved."""
        cfg = self.cfg
        pad = (cfg.postnet_kernel - 1) // 2
        x = tz.transpose(o_dec)                        # (n_mels, m)
        for i in range(cfg.postnet_layers):
            final = i == cfg.postnet_layers - 1
            x = tz.conv1d(x, self.params[f"post.conv{i}.w"],
                          self.params[f"post.conv{i}.b"], stride=1, padding=pad)
            if not final:
                x = tz.batchnorm(x, self.params[f"post.bn{i}.gamma"],
                                 self.params[f"post.bn{i}.beta"],
                                 self.buffers[f"post.bn{i}.mean"],
                                 self.buffers[f"post.bn{i}.var"],
                                 training=self.training)
                x = tz.tanh(x)
        return tz.add(o_dec, tz.transpose(x))

    # -- end-to-end ----------------------------------------------------------
    def forward_teacher_forced(self, frames: np.ndarray, m_tar: np.ndarray,
                               tf_ratio: float = 1.0,
                               ss_rng: np.random.Generator | None = None
                               ) -> DecoderOutput:
        """Run exactly len(m_tar) decoder steps; step t's prenet input is
        the ground-truth frame t-1 (all-zeros go frame at t=0), except
        that with probability 1 - tf_ratio a step feeds back the model's
        own previous output (scheduled sampling, drawn per step)."""
        m_tar = np.asarray(m_tar, dtype=self.cfg.np_dtype)
        if m_tar.ndim != 2 or m_tar.shape[1] != self.cfg.n_mels or m_tar.shape[0] < 1:
            raise ShapeError(f"target must be (m>=1, {self.cfg.n_mels}), got {m_tar.shape}")
        rng = ss_rng if ss_rng is not None else self.rng
        h_enc = self.encode(frames)
        memory_proj = self.processed_memory(h_enc)
        att = self.initial_attention_state(h_enc.shape[0])
        dec = self.initial_decoder_state()
        prev_frame: np.ndarray | Tensor = np.full(
            (1, self.cfg.n_mels), GO_FRAME, dtype=self.cfg.np_dtype)
        frames_out, align_rows = [], []
        m = m_tar.shape[0]
        for t in range(m):
            pn = self.prenet(prev_frame)
            v_t, a_t, att = self.attention_step(h_enc, att, pn, memory_proj)
            frame, dec = self.decode_step(v_t, att.h, dec)
            frames_out.append(frame)
            align_rows.append(a_t.data)
            use_truth = tf_ratio >= 1.0 or rng.random() < tf_ratio
            # fed-back predictions are detached: scheduled sampling trains
            # the current step, not the whole feedback chain
            prev_frame = m_tar[t:t + 1] if use_truth else frame.data
        o_dec = tz.concat(frames_out, axis=0)
        o_post = self.postnet(o_dec)
        return DecoderOutput(o_dec=o_dec, o_post=o_post,
                             alignments=np.concatenate(align_rows, axis=0),
                             stop_reason="target-length", attention_state=att)

    def infer(self, frames: np.ndarray) -> DecoderOutput:
        """Free-running decode; stops when the attention mass on the final
        (visual period) encoder position exceeds stop_threshold for
        stop_patience consecutive steps, else at max_decoder_steps."""
        cfg = self.cfg
        with tz.no_grad():
            h_enc = self.encode(frames)
            memory_proj = self.processed_memory(h_enc)
            att = self.initial_attention_state(h_enc.shape[0])
            dec = self.initial_decoder_state()
            prev_frame: np.ndarray | Tensor = np.full(
                (1, cfg.n_mels), GO_FRAME, dtype=cfg.np_dtype)
            frames_out, align_rows = [], []
            consecutive = 0
            stop_reason = "max-steps"
            for _ in range(cfg.max_decoder_steps):
                pn = self.prenet(prev_frame)
                v_t, a_t, att = self.attention_step(h_enc, att, pn, memory_proj)
                frame, dec = self.decode_step(v_t, att.h, dec)
                frames_out.append(frame)
                align_rows.append(a_t.data)
                prev_frame = frame.data
                if a_t.data[0, -1] > cfg.stop_threshold:
                    consecutive += 1
                    if consecutive >= cfg.stop_patience:
                        stop_reason = "period-detected"
                        break
                else:
                    consecutive = 0
            o_dec = tz.concat(frames_out, axis=0)
            o_post = self.postnet(o_dec)
        return DecoderOutput(o_dec=o_dec, o_post=o_post,
                             alignments=np.concatenate(align_rows, axis=0),
                             stop_reason=stop_reason, attention_state=att)

    # -- persistence ----------------------------------------------------------
    def state_entries(self) -> dict[str, np.ndarray]:
        entries = {f"param/{k}": t.data for k, t in self.params.items()}
        entries.update({f"buffer/{k}": v for k, v in self.buffers.items()})
        return entries

    def load_state_entries(self, entries: dict[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            arr = entries[f"param/{k}"]
            if arr.shape != t.data.shape:
                raise ShapeError(f"checkpoint entry {k}: shape {arr.shape} != {t.data.shape}")
            t.data = arr.astype(self.cfg.np_dtype, copy=True)
        for k in self.buffers:
            self.buffers[k] = entries[f"buffer/{k}"].astype(self.cfg.np_dtype, copy=True)

    def save(self, path) -> None:
        tz.save_archive(path, self.state_entries(), {
            "format": "lipsynth-model",
            "config": self.cfg.config_text(),
            "config_hash": self.cfg.config_hash(),
        })

    @classmethod
    def load(cls, path) -> "SpeechSynthesizer":
        from .config import parse_config_text
        entries, meta = tz.load_archive(path)
        if meta.get("format") != "lipsynth-model":
            raise ConfigError(f"{path}: not a model checkpoint")
        cfg = ModelConfig.from_dict(parse_config_text(meta["config"]))
        if cfg.config_hash() != meta.get("config_hash"):
            raise ConfigError(f"{path}: config hash mismatch (corrupt header)")
        model = cls(cfg)
        model.load_state_entries(entries)
        return model


def micro_config() -> ModelConfig:
    """Tiny geometry for finite-difference checks of the whole network:
    8x8 frames, channels 2/2/4, every hidden size 8, 64-bit, dropout off,
    random postnet final layer so gradients reach all postnet weights."""
    return ModelConfig(
        input_channels=1,
        image_size=8,
        conv_channels=(2, 2, 4),
        conv_kernels=((3, 3, 3), (3, 3, 3), (3, 1, 1)),
        conv_strides=((1, 1, 1), (1, 1, 1), (1, 1, 1)),
        conv_paddings=((1, 0, 0), (1, 0, 0), (1, 0, 0)),
        pool_windows=((1, 2, 2), (1, 1, 1), (1, 1, 1)),
        pool_strides=((1, 2, 2), (1, 1, 1), (1, 1, 1)),
        encoder_lstm_size=8,
        encoder_lstm_layers=2,
        attention_lstm_size=8,
        attention_dim=8,
        location_channels=2,
        location_kernel=5,
        prenet_sizes=(8, 8),
        decoder_lstm_size=8,
        n_mels=8,
        postnet_channels=4,
        postnet_layers=3,
        postnet_kernel=3,
        postnet_zero_init_final=False,
        encoder_dropout=0.0,
        prenet_dropout=0.0,
        max_decoder_steps=16,
        dtype="float64",
        seed=1,
    )
