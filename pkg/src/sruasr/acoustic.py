"""Multistream CNN acoustic model: forward path, SpecAugment, context analysis.

Layout: a stack of 3x3 2D convolutions over (time, frequency) with ReLU,
flattened per frame into an embedding; several streams of factorized TDNN
layers read that embedding, each stream with its own dilation; stream
outputs are concatenated, passed through ReLU, batch norm and dropout, and
two fully connected layers produce per-frame logits.

A factorized TDNN layer with dilation ``r`` is::

    y = Dropout(BN(skip(x) + conv_{0,+r}(conv_{-r,0}(x))))

so one layer sees frames ``t - r .. t + r`` and a stack of ``n`` layers sees
``+-n*r``.  The skip term is the identity when input and output widths match
and absent otherwise (the first layer of a stream usually changes width).
No output frame subsampling is applied.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigurationError, DataError, DimensionError
from .tensor import Rng, batchnorm_inference, conv1d_ctx, conv2d_3x3, dropout, mm, relu

SUBSAMPLING_RATE = 3
MODES = ("train", "inference")


def check_dilation(r: int) -> int:
    if not isinstance(r, (int, np.integer)) or r <= 0 or r % SUBSAMPLING_RATE:
        raise ConfigurationError(
            f"dilation {r!r} must be a positive multiple of the {SUBSAMPLING_RATE}-frame subsampling rate"
        )
    return int(r)


@dataclass
class FrontendConfig:
    filters: tuple[int, ...] = (128, 256, 256, 256, 256)
    # 0-based indices of layers that halve the frequency axis
    freq_subsample_layers: tuple[int, ...] = (1, 3)

    def stride(self, layer: int) -> int:
        return 2 if layer in self.freq_subsample_layers else 1

    def out_bins(self, feat_dim: int) -> int:
        bins = feat_dim
        for i in range(len(self.filters)):
            bins = -(-bins // self.stride(i))
        return bins

    def out_dim(self, feat_dim: int) -> int:
        if not self.filters:
            return feat_dim
        return self.out_bins(feat_dim) * self.filters[-1]


@dataclass
class MultistreamConfig:
    feat_dim: int = 40
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    dilations: tuple[int, ...] = (6, 9, 12)
    layers_per_stream: int = 17
    width: int = 512
    bottleneck: int = 128
    head_hidden: int = 512
    output_dim: int = 512
    dropout: float = 0.0
    bn_eps: float = 1e-5

    def validate(self):
        if not self.dilations:
            raise ConfigurationError("a multistream model needs at least one stream")
        for r in self.dilations:
            check_dilation(r)
        min_bins = 2 ** len([i for i in range(len(self.frontend.filters)) if self.frontend.stride(i) == 2])
        if self.frontend.filters and self.feat_dim < min_bins:
            raise ConfigurationError(
                f"{self.feat_dim} frequency bins cannot be subsampled by the front-end (need >= {min_bins})"
            )
        if self.layers_per_stream < 1:
            raise ConfigurationError("each stream needs at least one layer")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["frontend"] = {k: list(v) for k, v in out["frontend"].items()}
        out["dilations"] = list(self.dilations)
        return out

    @classmethod
    def from_dict(cls, payload: dict) -> "MultistreamConfig":
        payload = dict(payload)
        fe = payload.pop("frontend", None)
        frontend = FrontendConfig(
            tuple(fe["filters"]), tuple(fe["freq_subsample_layers"])
        ) if fe is not None else FrontendConfig()
        payload["dilations"] = tuple(payload.get("dilations", (6, 9, 12)))
        return cls(frontend=frontend, **payload)


@dataclass
class BatchNorm:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def identity(cls, d: int) -> "BatchNorm":
        return cls(np.ones(d), np.zeros(d), np.zeros(d), np.ones(d))

    def __call__(self, x, eps):
        return batchnorm_inference(x, self.gamma, self.beta, self.mean, self.var, eps)


@dataclass
class TdnnfLayer:
    r: int
    a_w: np.ndarray  # (2 * d_in, bottleneck), offsets {-r, 0}
    a_b: np.ndarray
    b_w: np.ndarray  # (2 * bottleneck, d_out), offsets {0, +r}
    b_b: np.ndarray
    bn: BatchNorm
    dropout: float = 0.0
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.r = check_dilation(self.r)
        if self.a_w.shape[0] % 2 or self.b_w.shape[0] != 2 * self.a_w.shape[1]:
            raise DimensionError(f"factor shapes {self.a_w.shape} and {self.b_w.shape} do not chain")

    @property
    def in_dim(self) -> int:
        return self.a_w.shape[0] // 2

    @property
    def out_dim(self) -> int:
        return self.b_w.shape[1]

    @classmethod
    def init(cls, r, d_in, bottleneck, d_out, rng: Rng, positive=False, dropout=0.0, bn_eps=1e-5):
        def weights(shape, fan_in):
            w = rng.normal(shape, 1.0 / np.sqrt(fan_in))
            return np.abs(w) if positive else w

        return cls(
            r=r,
            a_w=weights((2 * d_in, bottleneck), 2 * d_in),
            a_b=np.zeros(bottleneck),
            b_w=weights((2 * bottleneck, d_out), 2 * bottleneck),
            b_b=np.zeros(d_out),
            bn=BatchNorm.identity(d_out),
            dropout=dropout,
            bn_eps=bn_eps,
        )


def tdnnf_forward(x, layer: TdnnfLayer, mode: str = "inference", rng: Rng | None = None) -> np.ndarray:
    if mode not in MODES:
        raise ConfigurationError(f"mode must be one of {MODES}, got {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1] != layer.in_dim:
        raise DimensionError(f"input width {x.shape[1]} does not match layer width {layer.in_dim}")
    hidden = conv1d_ctx(x, [-layer.r, 0], layer.a_w, layer.a_b)
    y = conv1d_ctx(hidden, [0, layer.r], layer.b_w, layer.b_b)
    if layer.in_dim == layer.out_dim:
        y = x + y
    y = layer.bn(y, layer.bn_eps)
    if mode == "train":
        y = dropout(y, layer.dropout, rng)
    return y


@dataclass
class Stream:
    r: int
    layers: list[TdnnfLayer]


def stream_forward(x, stream: Stream, mode: str = "inference", rng: Rng | None = None) -> np.ndarray:
    for layer in stream.layers:
        x = tdnnf_forward(x, layer, mode, rng)
    return x


@dataclass
class Dense:
    w: np.ndarray
    b: np.ndarray

    def __call__(self, x):
        return mm(x, self.w) + self.b


class MultistreamModel:
    def __init__(self, config: MultistreamConfig, frontend, streams, fusion_bn, fc1, fc2):
        config.validate()
        self.config = config
        self.frontend: list[tuple[np.ndarray, np.ndarray]] = frontend
        self.streams: list[Stream] = streams
        self.fusion_bn: BatchNorm = fusion_bn
        self.fc1: Dense = fc1
        self.fc2: Dense = fc2

    @classmethod
    def init(cls, config: MultistreamConfig | None = None, seed: int = 0, positive: bool = False):
        """Random weights, zero biases and identity batch norm.

        ``positive=True`` draws absolute values so that an impulse can never
        cancel out; it is meant for receptive-field probes.
        """
        config = config or MultistreamConfig()
        config.validate()
        rng = Rng(seed)

        def weights(shape, fan_in):
            w = rng.normal(shape, 1.0 / np.sqrt(fan_in))
            return np.abs(w) if positive else w

        frontend = []
        c_in = 1
        for c_out in config.frontend.filters:
            frontend.append((weights((3, 3, c_in, c_out), 9 * c_in), np.zeros(c_out)))
            c_in = c_out
        d = config.frontend.out_dim(config.feat_dim)
        streams = []
        for r in config.dilations:
            layers = []
            d_in = d
            for _ in range(config.layers_per_stream):
                layers.append(
                    TdnnfLayer.init(
                        r, d_in, config.bottleneck, config.width, rng, positive, config.dropout, config.bn_eps
                    )
                )
                d_in = config.width
            streams.append(Stream(r, layers))
        fused = config.width * len(config.dilations)
        fc1 = Dense(weights((fused, config.head_hidden), fused), np.zeros(config.head_hidden))
        fc2 = Dense(weights((config.head_hidden, config.output_dim), config.head_hidden), np.zeros(config.output_dim))
        return cls(config, frontend, streams, BatchNorm.identity(fused), fc1, fc2)

    # flat parameter view used by checkpoints
    def named_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (k, b) in enumerate(self.frontend):
            out[f"frontend{i}.kernels"] = k
            out[f"frontend{i}.bias"] = b
        for m, stream in enumerate(self.streams):
            for j, layer in enumerate(stream.layers):
                pre = f"stream{m}.layer{j}"
                out[f"{pre}.a_w"] = layer.a_w
                out[f"{pre}.a_b"] = layer.a_b
                out[f"{pre}.b_w"] = layer.b_w
                out[f"{pre}.b_b"] = layer.b_b
                for name in ("gamma", "beta", "mean", "var"):
                    out[f"{pre}.bn_{name}"] = getattr(layer.bn, name)
        for name in ("gamma", "beta", "mean", "var"):
            out[f"fusion.bn_{name}"] = getattr(self.fusion_bn, name)
        out["fc1.w"], out["fc1.b"] = self.fc1.w, self.fc1.b
        out["fc2.w"], out["fc2.b"] = self.fc2.w, self.fc2.b
        return out

    @classmethod
    def from_tensors(cls, config: MultistreamConfig, t: dict[str, np.ndarray]) -> "MultistreamModel":
        try:
            frontend = [
                (t[f"frontend{i}.kernels"], t[f"frontend{i}.bias"]) for i in range(len(config.frontend.filters))
            ]
            streams = []
            for m, r in enumerate(config.dilations):
                layers = []
                for j in range(config.layers_per_stream):
                    pre = f"stream{m}.layer{j}"
                    bn = BatchNorm(*(t[f"{pre}.bn_{n}"] for n in ("gamma", "beta", "mean", "var")))
                    layers.append(
                        TdnnfLayer(
                            r, t[f"{pre}.a_w"], t[f"{pre}.a_b"], t[f"{pre}.b_w"], t[f"{pre}.b_b"],
                            bn, config.dropout, config.bn_eps,
                        )
                    )
                streams.append(Stream(r, layers))
            fusion = BatchNorm(*(t[f"fusion.bn_{n}"] for n in ("gamma", "beta", "mean", "var")))
            return cls(config, frontend, streams, fusion, Dense(t["fc1.w"], t["fc1.b"]), Dense(t["fc2.w"], t["fc2.b"]))
        except KeyError as exc:
            raise DataError(f"acoustic checkpoint is missing tensor {exc}") from exc


def frontend_forward(feat, model: MultistreamModel) -> np.ndarray:
    """``(T, F)`` log-mel features to ``(T, bins * channels)`` embeddings."""
    feat = np.asarray(feat, dtype=np.float64)
    cfg = model.config
    if feat.ndim != 2 or feat.shape[1] != cfg.feat_dim:
        raise DimensionError(f"features of shape {feat.shape} do not have {cfg.feat_dim} bins")
    if not model.frontend:
        return feat
    x = feat[:, :, None]
    for i, (kernels, bias) in enumerate(model.frontend):
        x = relu(conv2d_3x3(x, kernels, bias, cfg.frontend.stride(i)))
    # frequency-major flattening: column f * channels + c
    return x.reshape(x.shape[0], -1)


def multistream_forward(feat, model: MultistreamModel, mode: str = "inference", rng: Rng | None = None):
    """Per-frame logits ``(T, output_dim)``."""
    if mode not in MODES:
        raise ConfigurationError(f"mode must be one of {MODES}, got {mode!r}")
    x = frontend_forward(feat, model)
    ys = [stream_forward(x, s, mode, rng) for s in model.streams]
    z = relu(np.concatenate(ys, axis=1))
    z = model.fusion_bn(z, model.config.bn_eps)
    if mode == "train":
        z = dropout(z, model.config.dropout, rng)
    return model.fc2(model.fc1(z))


def receptive_field(config: MultistreamConfig | MultistreamModel) -> tuple[int, int]:
    """Frames of context on each side of an output frame (symmetric)."""
    if isinstance(config, MultistreamModel):
        config = config.config
    config.validate()
    widest = max(config.layers_per_stream * r for r in config.dilations)
    ctx = len(config.frontend.filters) + widest
    return ctx, ctx


def impulse_support(model: MultistreamModel, T: int, t0: int) -> tuple[int, int]:
    """Measured context: how far before and after ``t0`` an impulse changes the logits.

    The impulse sets every bin of frame ``t0`` to 1; the response is the
    difference from the all-zero input.
    """
    zeros = np.zeros((T, model.config.feat_dim))
    impulse = zeros.copy()
    impulse[t0] = 1.0
    diff = multistream_forward(impulse, model) - multistream_forward(zeros, model)
    frames = np.flatnonzero(np.any(diff != 0.0, axis=1))
    if frames.size == 0:
        return 0, 0
    return int(t0 - frames[0]), int(frames[-1] - t0)


@dataclass
class SpecAugmentConfig:
    n_time_masks: int = 2
    max_time_width: int = 20
    n_freq_masks: int = 2
    max_freq_width: int = 8

    def validate(self, T: int, F: int):
        if min(self.n_time_masks, self.max_time_width, self.n_freq_masks, self.max_freq_width) < 0:
            raise ConfigurationError("mask counts and widths must be non-negative")
        if self.n_time_masks and self.max_time_width > T:
            raise ConfigurationError(f"time mask width {self.max_time_width} exceeds {T} frames")
        if self.n_freq_masks and self.max_freq_width > F:
            raise ConfigurationError(f"frequency mask width {self.max_freq_width} exceeds {F} bins")


def spec_augment(feat, cfg: SpecAugmentConfig, rng: Rng) -> np.ndarray:
    """Zero out random time bands, then random frequency bands.

    Each width is uniform on ``[0, max_width]`` and each start uniform over
    positions where the band fits.
    """
    feat = np.array(feat, dtype=np.float64)
    T, F = feat.shape
    cfg.validate(T, F)
    for _ in range(cfg.n_time_masks):
        w = rng.integers(cfg.max_time_width + 1)
        start = rng.integers(T - w + 1)
        feat[start : start + w, :] = 0.0
    for _ in range(cfg.n_freq_masks):
        w = rng.integers(cfg.max_freq_width + 1)
        start = rng.integers(F - w + 1)
        feat[:, start : start + w] = 0.0
    return feat


# files ----------------------------------------------------------------------

def read_features(path) -> list[tuple[str, np.ndarray]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                frames = np.asarray(rec["frames"], dtype=np.float64)
                utt = str(rec["utt"])
            except (ValueError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{n}: bad feature record ({exc})") from exc
            if frames.ndim != 2:
                raise DataError(f"{path}:{n}: frames must be a list of equal-length rows")
            out.append((utt, frames))
    return out


def write_matrices(path, items: Sequence[tuple[str, np.ndarray]], key: str = "frames") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for utt, mat in items:
            fh.write(json.dumps({"utt": utt, key: np.asarray(mat).tolist()}) + "\n")


def save_acoustic(directory, model: MultistreamModel, seed: int | None = None) -> Path:
    manifest = {
        "format": "sruasr-checkpoint/1",
        "kind": "multistream_am",
        "config": model.config.to_dict(),
        "seed": seed,
    }
    return save_checkpoint(directory, manifest, model.named_tensors())


def load_acoustic(directory) -> MultistreamModel:
    manifest, tensors = load_checkpoint(directory)
    if manifest.get("kind") != "multistream_am":
        raise DataError(f"{directory} is not an acoustic-model checkpoint")
    return MultistreamModel.from_tensors(MultistreamConfig.from_dict(manifest["config"]), tensors)
