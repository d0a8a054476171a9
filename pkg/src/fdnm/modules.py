"""Network building blocks: the amplitude-guided phase gate (AGP), the
amplitude nuances mining branches (ANM), a toy two-stream backbone and the
global/part embedding head with a modality-shared BN neck.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fourier
from .numerics import ops
from .numerics.ops import BatchNormState
from .numerics.params import ParamStore
from .numerics.tensor import ShapeError, Tensor

VIS, IR = 0, 1


class ConfigError(ValueError):
    pass


@dataclass
class BackboneConfig:
    in_channels: int = 3
    channels: tuple[int, ...] = (16, 32, 64, 128)
    # last stage keeps resolution so the final map is tall enough for 4 stripes
    strides: tuple[int, ...] = (2, 2, 2, 1)
    stream_split: int = 1
    agp_after: tuple[int, ...] = (1, 2)
    agp_k: int = 4
    agp_gate_bias: float = -4.0  # gate starts nearly shut: AGP begins close to identity
    parts: int = 4
    use_anm: bool = True
    use_local: bool = True

    @property
    def embed_dim(self) -> int:
        return self.channels[-1]

    def validate(self, height: int | None = None, width: int | None = None) -> None:
        n = len(self.channels)
        if len(self.strides) != n:
            raise ConfigError("channels and strides must have the same length")
        if not 0 <= self.stream_split <= n:
            raise ConfigError(f"stream_split {self.stream_split} outside 0..{n}")
        for b in self.agp_after:
            if not 1 <= b <= n:
                raise ConfigError(f"agp_after block {b} outside 1..{n}")
            if self.channels[b - 1] % self.agp_k:
                raise ConfigError(
                    f"AGP after block {b}: {self.channels[b - 1]} channels not divisible by K={self.agp_k}"
                )
        if self.parts < 1:
            raise ConfigError("parts must be positive")
        if height is not None and width is not None:
            fh, _ = self.feature_size(height, width)
            if self.use_local and fh % self.parts:
                raise ConfigError(f"parts={self.parts} does not divide final feature height {fh}")

    def feature_size(self, height: int, width: int) -> tuple[int, int]:
        h, w = height, width
        for s in self.strides:
            if h % s or w % s:
                raise ConfigError(f"image {height}x{width} incompatible with stride plan {self.strides}")
            h, w = h // s, w // s
        return h, w


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


@dataclass
class Norm:
    """Affine parameters plus running statistics of one batch-norm layer."""

    gamma: Tensor
    beta: Tensor
    state: BatchNormState

    @classmethod
    def create(cls, store: ParamStore, prefix: str, channels: int, dtype) -> "Norm":
        return cls(
            store.add(f"{prefix}.gamma", np.ones(channels), dtype=dtype),
            store.add(f"{prefix}.beta", np.zeros(channels), dtype=dtype),
            BatchNormState(channels, dtype=dtype),
        )

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.state, training)


# -- AGP ----------------------------------------------------------------------
@dataclass
class AgpParams:
    k: int
    weights: list[Tensor]
    biases: list[Tensor]

    @property
    def channels(self) -> int:
        return self.weights[0].shape[1]

    @classmethod
    def create(cls, store: ParamStore, prefix: str, channels: int, k: int,
               rng: np.random.Generator, dtype=np.float64, gate_bias: float = 0.0) -> "AgpParams":
        if channels % k:
            raise ConfigError(f"AGP: {channels} channels not divisible by K={k}")
        ws, bs = [], []
        for j in range(k):
            ws.append(store.add(f"{prefix}.conv{j}.weight",
                                he_normal(rng, (channels // k, channels), channels), dtype=dtype))
            bs.append(store.add(f"{prefix}.conv{j}.bias", np.full(channels // k, gate_bias),
                                dtype=dtype))
        return cls(k, ws, bs)


def amplitude_gate(amp: Tensor, p: AgpParams) -> Tensor:
    """Sigmoid of the K concatenated 1x1 convs over the pooled amplitude."""
    pooled = ops.gap(amp)
    return ops.sigmoid(ops.concat_channels([ops.conv1x1(pooled, w, b)
                                            for w, b in zip(p.weights, p.biases)]))


def agp_forward(x_spa: Tensor, p: AgpParams) -> Tensor:
    """Amplitude-guided phase: ``pha' = s * pha + pha``, then back to space."""
    c = x_spa.shape[-3]
    if c % p.k or c != p.channels:
        raise ConfigError(f"AGP expects {p.channels} channels (K={p.k}), got {c}")
    spec = fourier.fft2(x_spa)
    gate = amplitude_gate(spec.amp, p)
    guided = gate * spec.pha + spec.pha
    return fourier.ifft2(fourier.recombine(spec.amp, guided), force_real=True)


# -- ANM ----------------------------------------------------------------------
@dataclass
class AnmParams:
    res1_w: Tensor
    res1_b: Tensor
    res2_w: Tensor
    res2_b: Tensor
    bn_shared: Norm
    use_in: bool = True

    @classmethod
    def create(cls, store: ParamStore, prefix: str, channels: int,
               rng: np.random.Generator, dtype=np.float64) -> "AnmParams":
        def conv(name):
            return (
                store.add(f"{prefix}.{name}.weight", he_normal(rng, (channels, channels), channels),
                          dtype=dtype),
                store.add(f"{prefix}.{name}.bias", np.zeros(channels), dtype=dtype),
            )

        w1, b1 = conv("res1")
        w2, b2 = conv("res2")
        return cls(w1, b1, w2, b2, Norm.create(store, f"{prefix}.bn", channels, dtype))


def anm_forward(f_spa: Tensor, p: AnmParams, training: bool) -> tuple[Tensor, Tensor]:
    """Two amplitude branches sharing the input phase and one BN layer."""
    spec = fourier.fft2(f_spa)
    out = []
    for w, b in ((p.res1_w, p.res1_b), (p.res2_w, p.res2_b)):
        amp = ops.conv1x1(spec.amp, w, b)
        if p.use_in:
            amp = ops.instance_norm(amp)
        spatial = fourier.ifft2(fourier.recombine(amp, spec.pha, signed=True), force_real=True)
        out.append(p.bn_shared(spatial, training))
    return out[0], out[1]


# -- backbone -----------------------------------------------------------------
@dataclass
class _Stage:
    weight: Tensor
    bias: Tensor
    norm: Norm
    stride: int

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        y = ops.conv2d(x, self.weight, self.bias, stride=self.stride, pad=1)
        return ops.relu(self.norm(y, training))


class Backbone:
    """Stack of 3x3 conv-BN-ReLU stages; the first ``stream_split`` stages
    hold separate VIS and IR parameters."""

    def __init__(self, cfg: BackboneConfig, store: ParamStore, rng: np.random.Generator,
                 dtype=np.float64, agp_rng: np.random.Generator | None = None):
        cfg.validate()
        agp_rng = rng if agp_rng is None else agp_rng
        self.cfg = cfg
        self.stages: list[dict[int, _Stage]] = []
        self.agp: dict[int, AgpParams] = {}
        c_in = cfg.in_channels
        for i, (c_out, stride) in enumerate(zip(cfg.channels, cfg.strides), start=1):
            streams = {VIS: "vis", IR: "ir"} if i <= cfg.stream_split else {None: None}
            stage = {}
            for key, tag in streams.items():
                prefix = f"block{i}" + (f".{tag}" if tag else "")
                stage[key] = _Stage(
                    store.add(f"{prefix}.conv.weight",
                              he_normal(rng, (c_out, c_in, 3, 3), c_in * 9), dtype=dtype),
                    store.add(f"{prefix}.conv.bias", np.zeros(c_out), dtype=dtype),
                    Norm.create(store, f"{prefix}.bn", c_out, dtype),
                    stride,
                )
            self.stages.append(stage)
            if i in cfg.agp_after:
                self.agp[i] = AgpParams.create(store, f"agp{i}", c_out, cfg.agp_k, agp_rng, dtype,
                                               cfg.agp_gate_bias)
            c_in = c_out

    def norms(self) -> dict[str, Norm]:
        out = {}
        for i, stage in enumerate(self.stages, start=1):
            for key, st in stage.items():
                tag = {VIS: ".vis", IR: ".ir", None: ""}[key]
                out[f"block{i}{tag}.bn"] = st.norm
        return out

    def __call__(self, images: Tensor, modality: np.ndarray, training: bool) -> Tensor:
        self.cfg.feature_size(images.shape[-2], images.shape[-1])
        modality = np.asarray(modality)
        x = images
        for i, stage in enumerate(self.stages, start=1):
            if None in stage:
                x = stage[None](x, training)
            else:
                x = _two_stream(stage, x, modality, training)
            if i in self.agp:
                x = agp_forward(x, self.agp[i])
        return x


def _two_stream(stage: dict, x: Tensor, modality: np.ndarray, training: bool) -> Tensor:
    groups = [(m, np.flatnonzero(modality == m)) for m in (VIS, IR)]
    groups = [(m, idx) for m, idx in groups if idx.size]
    if len(groups) == 1:
        m, idx = groups[0]
        return stage[m](x if idx.size == x.shape[0] else x[idx], training)
    outs = [stage[m](x[idx], training) for m, idx in groups]
    order = np.concatenate([idx for _, idx in groups])
    inverse = np.empty_like(order)
    inverse[order] = np.arange(order.size)
    return ops.concat(outs, axis=0)[inverse]


# -- head ---------------------------------------------------------------------
@dataclass
class HeadOutput:
    pooled: list[Tensor]       # pre-BN GAP features, global first then parts
    embeddings: list[Tensor]   # post-BN features used for retrieval
    logits: list[Tensor]

    @property
    def global_embedding(self) -> Tensor:
        return self.embeddings[0]

    @property
    def local_embeddings(self) -> list[Tensor]:
        return self.embeddings[1:]


def stripe_pool(fmap: Tensor, parts: int) -> list[Tensor]:
    """GAP over ``parts`` equal horizontal stripes of an ``N x C x H x W`` map."""
    h = fmap.shape[-2]
    if parts < 1 or h % parts:
        raise ShapeError(f"{parts} stripes do not divide feature height {h}")
    step = h // parts
    n, c = fmap.shape[0], fmap.shape[1]
    return [ops.gap(fmap[:, :, i * step:(i + 1) * step, :]).reshape(n, c) for i in range(parts)]


class EmbedHead:
    def __init__(self, dim: int, num_classes: int, parts: int, use_local: bool,
                 store: ParamStore, rng: np.random.Generator, dtype=np.float64):
        self.parts = parts if use_local else 0
        names = ["global"] + [f"part{i}" for i in range(self.parts)]
        self.norms: dict[str, Norm] = {}
        self.classifiers: dict[str, Tensor] = {}
        for name in names:
            self.norms[name] = Norm.create(store, f"head.{name}.bn", dim, dtype)
            self.classifiers[name] = store.add(
                f"head.{name}.classifier", rng.normal(0.0, 0.01, size=(num_classes, dim)),
                dtype=dtype,
            )

    def __call__(self, fmap: Tensor, training: bool) -> HeadOutput:
        n, c = fmap.shape[0], fmap.shape[1]
        pooled = [ops.gap(fmap).reshape(n, c)]
        if self.parts:
            pooled += stripe_pool(fmap, self.parts)
        embeddings, logits = [], []
        for name, feat in zip(self.norms, pooled):
            emb = self.norms[name](feat, training)
            embeddings.append(emb)
            logits.append(ops.linear(emb, self.classifiers[name]))
        return HeadOutput(pooled, embeddings, logits)


def embed_head(fmap: Tensor, head: EmbedHead, training: bool = False) -> HeadOutput:
    return head(fmap, training)


# -- full model ---------------------------------------------------------------
@dataclass
class ModelOutput:
    head: HeadOutput
    anm: tuple[Tensor, Tensor] | None = None   # per-branch GAP embeddings, N x D
    feature_map: Tensor | None = field(default=None, repr=False)


class FDNMModel:
    def __init__(self, cfg: BackboneConfig, num_classes: int, seed: int = 0, dtype=np.float64):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.num_classes = num_classes
        # one init stream per part, so toggling a module leaves the others unchanged
        rngs = [np.random.default_rng(np.random.SeedSequence([seed, part])) for part in range(4)]
        self.params = ParamStore()
        self.backbone = Backbone(cfg, self.params, rngs[0], dtype, agp_rng=rngs[1])
        self.anm = (AnmParams.create(self.params, "anm", cfg.embed_dim, rngs[2], dtype)
                    if cfg.use_anm else None)
        self.head = EmbedHead(cfg.embed_dim, num_classes, cfg.parts, cfg.use_local,
                              self.params, rngs[3], dtype)

    def norms(self) -> dict[str, Norm]:
        out = self.backbone.norms()
        if self.anm is not None:
            out["anm.bn"] = self.anm.bn_shared
        for name, norm in self.head.norms.items():
            out[f"head.{name}.bn"] = norm
        return out

    def forward(self, images, modality, training: bool = True) -> ModelOutput:
        if not isinstance(images, Tensor):
            images = Tensor(np.asarray(images, dtype=self.dtype), dtype=self.dtype)
        fmap = self.backbone(images, modality, training)
        anm_emb = None
        if self.anm is not None:
            b1, b2 = anm_forward(fmap, self.anm, training)
            n, c = fmap.shape[0], fmap.shape[1]
            anm_emb = (ops.gap(b1).reshape(n, c), ops.gap(b2).reshape(n, c))
        return ModelOutput(self.head(fmap, training), anm_emb, fmap)

    __call__ = forward

    # -- state ------------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        """Parameters followed by BN running statistics, in a stable order."""
        out = dict(self.params.arrays())
        for name, norm in self.norms().items():
            out[f"{name}.running_mean"] = norm.state.running_mean
            out[f"{name}.running_var"] = norm.state.running_var
        return out

    def load_state_arrays(self, arrays) -> None:
        self.params.load_arrays(arrays)
        for name, norm in self.norms().items():
            for attr in ("running_mean", "running_var"):
                key = f"{name}.{attr}"
                if key not in arrays:
                    raise KeyError(f"checkpoint is missing buffer {key!r}")
                setattr(norm.state, attr, np.asarray(arrays[key], dtype=self.dtype).copy())
