"""Multi-stream network architectures with a recurrent head.

Three architecture families share one frame pipeline: per-stream conv blocks
(conv, tanh, downsampler), a spatial fusion point joining the streams, shared
conv blocks after fusion, and a 1x1-convolution embedding head with global
average pooling in place of any fully connected layer.  Per-frame embeddings
feed a vanilla tanh recurrent cell; sequences are compared after temporal
pooling.  One ``Network`` instance serves as both branches of the Siamese
pair, so parameter sharing holds by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .fusion import FUSION_KINDS, fuse
from .layers import Conv2dParams, PoolParams, conv2d, global_avg_pool, multiscale_branch, pool2d, upsample_zero_pad

ARCHITECTURES = ("baseline", "two_stream_multiscale", "three_stream_multiscale")
DOWNSAMPLERS = ("max_pool", "avg_pool", "strided_conv", "dilated_max", "dilated_avg")
TEMPORAL_POOLS = ("mean", "attentive")

_POOL_FOR_DOWNSAMPLER = {
    "max_pool": dict(kind="max", window=2, stride=2),
    "avg_pool": dict(kind="average", window=2, stride=2),
    "dilated_max": dict(kind="dilated_max", window=2, stride=2, dilation=2),
    "dilated_avg": dict(kind="dilated_average", window=2, stride=2, dilation=2),
}


class ConfigError(ValueError):
    """Raised when a network configuration is invalid or shape-incompatible."""


@dataclass
class StreamSpec:
    """One stream's downsampling strategy."""

    downsampler: str

    def __post_init__(self):
        if self.downsampler not in DOWNSAMPLERS:
            raise ConfigError(
                f"unknown downsampler {self.downsampler!r}, expected one of {DOWNSAMPLERS}"
            )


@dataclass
class NetworkConfig:
    """Declarative description of one architecture variant.

    ``streams`` lists per-stream downsamplers in fusion order.  ``fusion_layer``
    indexes the conv block (1-based) after which the streams are merged; the
    multi-scale variants override its meaning as documented in ``build``.
    ``conv_channels`` fixes the number of blocks and their widths.
    """

    architecture: str = "baseline"
    streams: tuple[str, ...] = ("max_pool", "avg_pool", "strided_conv")
    fusion_kind: str = "width"
    fusion_layer: int = 3
    embedding_dim: int = 128
    rnn_hidden: int = 128
    temporal_pool: str = "mean"
    input_channels: int = 5
    conv_channels: tuple[int, ...] = (16, 32, 32, 64)
    kernel_size: int = 5

    @property
    def num_blocks(self) -> int:
        return len(self.conv_channels)

    @property
    def scales(self) -> tuple[int, ...]:
        if self.architecture == "two_stream_multiscale":
            return (1, 2)
        if self.architecture == "three_stream_multiscale":
            return (1, 2, 4)
        return tuple(1 for _ in self.streams)

    def validate(self) -> None:
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        if not 1 <= len(self.streams) <= 4:
            raise ConfigError(f"stream count must be 1..4, got {len(self.streams)}")
        for s in self.streams:
            if s not in DOWNSAMPLERS:
                raise ConfigError(f"unknown downsampler {s!r}, expected one of {DOWNSAMPLERS}")
        if self.fusion_kind not in FUSION_KINDS:
            raise ConfigError(f"unknown fusion kind {self.fusion_kind!r}")
        if not 1 <= self.fusion_layer <= self.num_blocks:
            raise ConfigError(
                f"fusion_layer must be in 1..{self.num_blocks} (Conv1..Conv{self.num_blocks}), "
                f"got {self.fusion_layer}"
            )
        if self.temporal_pool not in TEMPORAL_POOLS:
            raise ConfigError(f"unknown temporal pool {self.temporal_pool!r}")
        if self.architecture == "two_stream_multiscale" and len(self.streams) != 2:
            raise ConfigError("two_stream_multiscale requires exactly 2 streams")
        if self.architecture == "three_stream_multiscale" and len(self.streams) != 3:
            raise ConfigError("three_stream_multiscale requires exactly 3 streams")
        if self.kernel_size % 2 != 1:
            raise ConfigError("kernel_size must be odd so padding can preserve extent")
        if min(self.embedding_dim, self.rnn_hidden, self.input_channels) < 1:
            raise ConfigError("embedding_dim, rnn_hidden, input_channels must be positive")
        if any(c < 1 for c in self.conv_channels):
            raise ConfigError("conv channel widths must be positive")


def default_config(architecture: str = "baseline", **overrides) -> NetworkConfig:
    """NetworkConfig with per-architecture stream defaults filled in."""
    defaults = {
        "baseline": ("max_pool", "avg_pool", "strided_conv"),
        "two_stream_multiscale": ("max_pool", "max_pool"),
        "three_stream_multiscale": ("max_pool", "max_pool", "max_pool"),
    }
    if architecture not in defaults:
        raise ConfigError(f"unknown architecture {architecture!r}")
    kwargs = {"architecture": architecture, "streams": defaults[architecture]}
    kwargs.update(overrides)
    return NetworkConfig(**kwargs)


def _xavier(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Network:
    """A built multi-stream network: parameters plus the forward pipeline."""

    def __init__(self, config: NetworkConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    # -- parameter access ---------------------------------------------------

    def parameters(self) -> list[tuple[str, Tensor]]:
        return sorted(self.params.items())

    def param(self, name: str) -> Tensor:
        return self.params[name]

    def _conv_params(self, prefix: str, stride: int = 1) -> Conv2dParams:
        pad = (self.config.kernel_size - 1) // 2
        return Conv2dParams(
            kernel=self.params[f"{prefix}.kernel"],
            bias=self.params[f"{prefix}.bias"],
            stride=stride,
            padding=pad,
        )

    # -- frame pipeline -----------------------------------------------------

    def _block(self, prefix: str, downsampler: str, x: Tensor, stream_label: str, layer: int) -> Tensor:
        try:
            if downsampler == "strided_conv":
                return ad.tanh(conv2d(x, self._conv_params(prefix, stride=2)))
            y = ad.tanh(conv2d(x, self._conv_params(prefix)))
            return pool2d(y, PoolParams(**_POOL_FOR_DOWNSAMPLER[downsampler]))
        except ShapeError as e:
            raise ConfigError(f"{stream_label} at conv{layer}: {e}") from e

    def _fuse(self, maps: list[Tensor], layer: int, project: Optional[str]) -> Tensor:
        try:
            y = fuse(self.config.fusion_kind, maps).y
        except ShapeError as e:
            shapes = ", ".join(f"stream {i + 1}: {list(m.shape)}" for i, m in enumerate(maps))
            raise ConfigError(f"{self.config.fusion_kind} fusion at conv{layer} failed ({shapes}): {e}") from e
        if project is not None:
            y = conv2d(y, Conv2dParams(kernel=self.params[f"{project}.kernel"],
                                       bias=self.params[f"{project}.bias"]))
        return y

    def _squash(self, x: Tensor) -> Tensor:
        head = Conv2dParams(kernel=self.params["head.kernel"], bias=self.params["head.bias"])
        return global_avg_pool(conv2d(x, head))

    def frame_features(self, x: Tensor) -> Tensor:
        """Frames [T,H,W,Din] (or one frame [H,W,Din]) -> embeddings [T, embedding_dim]."""
        cfg = self.config
        if x.data.shape[-1] != cfg.input_channels:
            raise ShapeError(
                f"expected {cfg.input_channels} input channels, got {x.data.shape[-1]}"
            )
        if cfg.architecture == "two_stream_multiscale":
            out = self._forward_two_stream_multiscale(x)
        else:
            out = self._forward_single_fusion(x)
        feats = self._squash(out)
        if feats.data.ndim == 1:
            feats = ad.stack_rows([feats])
        return feats

    def _forward_single_fusion(self, x: Tensor) -> Tensor:
        """Baseline and three-stream multi-scale: one fusion point."""
        cfg = self.config
        scales = cfg.scales
        branches = multiscale_branch(x, list(scales))
        maps = []
        for i, (spec, branch) in enumerate(zip(cfg.streams, branches)):
            cur = branch
            for layer in range(1, cfg.fusion_layer + 1):
                cur = self._block(f"stream{i}.conv{layer}", spec, cur, f"stream {i + 1} ({spec})", layer)
            if scales[i] > 1:
                cur = upsample_zero_pad(cur, scales[i])
            maps.append(cur)
        if len(maps) == 1:
            cur = maps[0]
        else:
            project = "fusion.project" if "fusion.project.kernel" in self.params else None
            cur = self._fuse(maps, cfg.fusion_layer, project)
        for layer in range(cfg.fusion_layer + 1, cfg.num_blocks + 1):
            cur = self._block(f"shared.conv{layer}", "max_pool", cur, "shared", layer)
        return cur

    def _forward_two_stream_multiscale(self, x: Tensor) -> Tensor:
        """Scales (1, 2) with a fusion point after every block except the last.

        After each fusion the merged map continues as the fine path and is
        average-pooled back down to seed the coarse path, so both streams see
        the union features.  The final block is shared.
        """
        cfg = self.config
        fine, coarse = multiscale_branch(x, [1, 2])
        spec_f, spec_c = cfg.streams
        n = cfg.num_blocks
        for layer in range(1, n):
            fine = self._block(f"stream0.conv{layer}", spec_f, fine, f"stream 1 ({spec_f})", layer)
            coarse = self._block(f"stream1.conv{layer}", spec_c, coarse, f"stream 2 ({spec_c})", layer)
            project = f"fusion.project{layer}" if f"fusion.project{layer}.kernel" in self.params else None
            fine = self._fuse([fine, upsample_zero_pad(coarse, 2)], layer, project)
            if layer < n - 1:
                coarse = pool2d(fine, PoolParams(kind="average", window=2, stride=2))
        return self._block(f"shared.conv{n}", "max_pool", fine, "shared", n)

    # -- sequence pipeline --------------------------------------------------

    def forward_sequence(self, frames) -> Tensor:
        """Ordered frames -> per-frame recurrent features [T, rnn_hidden].

        Accepts a list of [H,W,D] tensors/arrays or a single [T,H,W,D] tensor.
        The recurrent state starts at zero and is never carried across calls.
        """
        x = _frames_tensor(frames, self.config.input_channels)
        feats = self.frame_features(x)
        w_in, w_rec, bias = self.params["rnn.w_in"], self.params["rnn.w_rec"], self.params["rnn.bias"]
        state = Tensor(np.zeros(self.config.rnn_hidden))
        outputs = []
        for t in range(feats.shape[0]):
            pre = ad.add(ad.add(ad.matvec(w_in, ad.take_row(feats, t)), ad.matvec(w_rec, state)), bias)
            state = ad.tanh(pre)
            outputs.append(state)
        return ad.stack_rows(outputs)

    def sequence_feature(self, frames) -> Tensor:
        """Mean-pooled sequence descriptor [rnn_hidden]."""
        return ad.mean_rows(self.forward_sequence(frames))

    # -- identity classifier ------------------------------------------------

    def ensure_classifier(self, num_ids: int, seed: int = 0) -> None:
        """Create (or re-create) the softmax identity head for num_ids classes."""
        if num_ids < 2:
            raise ConfigError("identity classifier needs at least 2 classes")
        w = self.params.get("classifier.weight")
        if w is not None and w.shape == (num_ids, self.config.rnn_hidden):
            return
        rng = np.random.default_rng(seed + 0x5EED)
        d = self.config.rnn_hidden
        self.params["classifier.weight"] = Tensor(_xavier(rng, (num_ids, d), d, num_ids), requires_grad=True)
        self.params["classifier.bias"] = Tensor(np.zeros(num_ids), requires_grad=True)

    def classify(self, v: Tensor) -> Tensor:
        if "classifier.weight" not in self.params:
            raise ConfigError("classifier head not initialized; call ensure_classifier first")
        return ad.add(ad.matvec(self.params["classifier.weight"], v), self.params["classifier.bias"])


def _frames_tensor(frames, channels: int) -> Tensor:
    if isinstance(frames, Tensor):
        x = frames
        if x.data.ndim == 3:
            x = Tensor(x.data[None], x.requires_grad)
        if x.data.ndim != 4:
            raise ShapeError(f"expected [T,H,W,{channels}] frames, got shape {list(x.shape)}")
        return x
    arrs = []
    ref = None
    for i, f in enumerate(frames):
        a = f.data if isinstance(f, Tensor) else np.asarray(f, dtype=np.float64)
        if a.ndim != 3:
            raise ShapeError(f"frame {i} must be [H,W,D], got shape {list(a.shape)}")
        if ref is None:
            ref = a.shape
        elif a.shape != ref:
            raise ShapeError(f"frame {i} shape {list(a.shape)} drifts from frame 0 shape {list(ref)}")
        arrs.append(a)
    if not arrs:
        raise ShapeError("a sequence needs at least one frame")
    return Tensor(np.stack(arrs))


# ---------------------------------------------------------------------------
# Builder
# ---------------------------------------------------------------------------

def build(config: NetworkConfig, seed: int = 0) -> Network:
    """Initialize all parameters for a configuration (deterministic per seed).

    Streams have independent conv weights up to the fusion point; blocks after
    it are shared.  Channel fusion inserts a trainable 1x1 projection back to
    the per-stream width whenever more conv blocks follow the fusion.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    k = config.kernel_size

    def add_conv(name: str, cin: int, cout: int, kh: int = None) -> None:
        kh = k if kh is None else kh
        fan_in, fan_out = cin * kh * kh, cout * kh * kh
        params[f"{name}.kernel"] = Tensor(_xavier(rng, (cout, cin, kh, kh), fan_in, fan_out), requires_grad=True)
        params[f"{name}.bias"] = Tensor(np.zeros(cout), requires_grad=True)

    widths = [config.input_channels] + list(config.conv_channels)
    n = config.num_blocks
    if config.architecture == "two_stream_multiscale":
        per_stream_blocks = n - 1
        shared_from = n
        fusion_points = list(range(1, n))
    else:
        per_stream_blocks = config.fusion_layer
        shared_from = config.fusion_layer + 1
        fusion_points = [config.fusion_layer] if len(config.streams) >= 2 else []

    for i in range(len(config.streams)):
        for layer in range(1, per_stream_blocks + 1):
            add_conv(f"stream{i}.conv{layer}", widths[layer - 1], widths[layer])
    for layer in range(shared_from, n + 1):
        add_conv(f"shared.conv{layer}", widths[layer - 1], widths[layer])

    head_in = config.conv_channels[-1]
    if config.fusion_kind == "channel" and len(config.streams) >= 2:
        s1 = len(config.streams)
        if config.architecture == "two_stream_multiscale":
            for p in fusion_points:
                add_conv(f"fusion.project{p}", 2 * widths[p], widths[p], kh=1)
        elif config.fusion_layer < n:
            add_conv("fusion.project", s1 * widths[config.fusion_layer], widths[config.fusion_layer], kh=1)
        else:
            head_in = s1 * config.conv_channels[-1]
    add_conv("head", head_in, config.embedding_dim, kh=1)

    d_in, d_h = config.embedding_dim, config.rnn_hidden
    params["rnn.w_in"] = Tensor(_xavier(rng, (d_h, d_in), d_in, d_h), requires_grad=True)
    params["rnn.w_rec"] = Tensor(_xavier(rng, (d_h, d_h), d_h, d_h), requires_grad=True)
    params["rnn.bias"] = Tensor(np.zeros(d_h), requires_grad=True)
    if config.temporal_pool == "attentive":
        params["attn.u"] = Tensor(_xavier(rng, (d_h, d_h), d_h, d_h), requires_grad=True)
    return Network(config, params)


# ---------------------------------------------------------------------------
# Temporal pooling
# ---------------------------------------------------------------------------

@dataclass
class AttentionParams:
    """Shared square attention matrix scoring probe frames against gallery frames."""

    u: Tensor

    def __post_init__(self):
        s = self.u.shape
        if len(s) != 2 or s[0] != s[1]:
            raise ShapeError(f"attention matrix must be square, got shape {list(s)}")


def temporal_pool(mode: str, p: Tensor, q: Optional[Tensor] = None,
                  attn: Optional[AttentionParams] = None) -> tuple[Tensor, Optional[Tensor]]:
    """Pool per-frame features [T, d] down to sequence vectors [d].

    mean: each sequence is pooled independently (q may be omitted).
    attentive: scores A = tanh(P U Q^T); row maxima are softmaxed into probe
    frame weights and column maxima into gallery frame weights, and each
    sequence is the weighted sum of its frames.
    """
    if mode not in TEMPORAL_POOLS:
        raise ValueError(f"unknown temporal pool mode {mode!r}")
    if p.data.ndim != 2:
        raise ShapeError(f"temporal_pool expects [T, d] features, got shape {list(p.shape)}")
    if mode == "mean":
        return ad.mean_rows(p), (ad.mean_rows(q) if q is not None else None)
    if q is None or attn is None:
        raise ShapeError("attentive pooling requires both sequences and attention parameters")
    if q.data.ndim != 2 or q.shape[1] != p.shape[1]:
        raise ShapeError(
            f"attentive pooling: feature dims differ, {list(p.shape)} vs {list(q.shape)}"
        )
    if attn.u.shape[0] != p.shape[1]:
        raise ShapeError(
            f"attention matrix dim {attn.u.shape[0]} does not match feature dim {p.shape[1]}"
        )
    scores = ad.tanh(ad.matmul(ad.matmul(p, attn.u), ad.transpose(q)))
    wp = ad.softmax(ad.axis_max(scores, axis=1))
    wq = ad.softmax(ad.axis_max(scores, axis=0))
    return ad.matvec(ad.transpose(p), wp), ad.matvec(ad.transpose(q), wq)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(net: Network, path) -> None:
    """Write all parameters as a flat named-tensor archive (.npz)."""
    np.savez(path, **{name: t.data for name, t in net.params.items()})


def load_checkpoint(net: Network, path) -> None:
    """Restore parameters in place; names and shapes must match the network.

    A classifier head present in the archive but not in the network is
    created; any other unknown or misshapen entry is an error.
    """
    with np.load(path) as archive:
        stored = {name: archive[name] for name in archive.files}
    if "classifier.weight" in stored and "classifier.weight" not in net.params:
        net.ensure_classifier(stored["classifier.weight"].shape[0])
    for name, arr in stored.items():
        if name not in net.params:
            raise ConfigError(f"checkpoint entry {name!r} does not exist in this network")
        if net.params[name].shape != arr.shape:
            raise ConfigError(
                f"checkpoint entry {name!r} has shape {list(arr.shape)}, "
                f"network expects {list(net.params[name].shape)}"
            )
        net.params[name].data = np.ascontiguousarray(arr, dtype=np.float64)
    missing = set(net.params) - set(stored)
    if missing:
        raise ConfigError(f"checkpoint is missing entries: {sorted(missing)}")
