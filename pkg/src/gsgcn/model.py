"""GS-GCN network: per-person MS-G3D extractors, distance-gated embedding, fusion block, FC head.

All activations use the layout (N, C, T, K): batch, channels, frames, joints.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import AdjacencySet, build_adjacency_set, build_skeleton_graph


@dataclass(frozen=True)
class StgcBlockConfig:
    in_channels: int
    out_channels: int
    temporal_stride: int = 1
    spatial_scales: int = 8
    g3d_windows: tuple[int, ...] = (3, 5)

    def __post_init__(self):
        branches = len(self.g3d_windows) + 1
        if self.out_channels % branches:
            raise ValueError(
                f"out_channels={self.out_channels} must be divisible by {branches} "
                f"(one share per G3D window plus the factorized branch)"
            )
        if self.temporal_stride not in (1, 2):
            raise ValueError("temporal_stride must be 1 or 2")
        for tau in self.g3d_windows:
            if tau < 1 or tau % 2 == 0:
                raise ValueError(f"G3D window {tau} must be a positive odd integer")

    @property
    def branch_channels(self) -> int:
        return self.out_channels // (len(self.g3d_windows) + 1)


@dataclass(frozen=True)
class ModelConfig:
    num_persons: int = 3
    in_channels: int = 5
    num_frames: int = 64
    layout: str = "crowdpose14"
    channels: tuple[int, int] = (96, 192)
    fusion_channels: int = 384
    num_classes: int = 14
    spatial_scales: int = 8
    g3d_windows: tuple[int, ...] = (3, 5)
    distance_embedding: bool = True

    def __post_init__(self):
        if self.num_frames % 4:
            raise ValueError(f"num_frames={self.num_frames} must be divisible by 4 (strides 1, 2, 2)")
        if self.num_persons < 1:
            raise ValueError("num_persons must be >= 1")
        if self.in_channels not in (3, 5):
            raise ValueError("in_channels must be 5 (x, y, c, vx, vy) or 3 (x, y, c)")

    @property
    def with_speed(self) -> bool:
        return self.in_channels == 5

    def blocks(self) -> list[StgcBlockConfig]:
        c1, c2 = self.channels
        kw = dict(spatial_scales=self.spatial_scales, g3d_windows=tuple(self.g3d_windows))
        return [
            StgcBlockConfig(self.in_channels, c1, 1, **kw),
            StgcBlockConfig(c1, c2, 2, **kw),
        ]

    def fusion_block(self) -> StgcBlockConfig:
        return StgcBlockConfig(
            self.channels[1] * self.num_persons, self.fusion_channels, 2,
            spatial_scales=self.spatial_scales, g3d_windows=tuple(self.g3d_windows),
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["g3d_windows"] = list(self.g3d_windows)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "channels" in d:
            d["channels"] = tuple(d["channels"])
        if "g3d_windows" in d:
            d["g3d_windows"] = tuple(d["g3d_windows"])
        return cls(**d)


DEFAULT_CONFIG = ModelConfig()
MICRO_CONFIG = ModelConfig(
    num_persons=2, num_frames=8, layout="path3", channels=(6, 12), fusion_channels=12, num_classes=3,
)


class ModelParams:
    """Ordered learnable tensors plus non-learnable buffers (BN running statistics)."""

    def __init__(self):
        self.tensors: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __setitem__(self, name: str, value: Tensor) -> None:
        self.tensors[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    def values(self) -> list[Tensor]:
        return list(self.tensors.values())

    def count(self, prefix: str = "") -> int:
        return sum(t.data.size for n, t in self.tensors.items() if n.startswith(prefix))

    def arrays(self) -> dict[str, np.ndarray]:
        """Every learnable and buffer array by name (buffers prefixed ``buffer:``)."""
        out = {n: t.data for n, t in self.tensors.items()}
        out.update({f"buffer:{n}": b for n, b in self.buffers.items()})
        return out

    def copy(self) -> "ModelParams":
        p = ModelParams()
        p.tensors = {n: Tensor(t.data.copy(), requires_grad=True, name=n) for n, t in self.tensors.items()}
        p.buffers = {n: b.copy() for n, b in self.buffers.items()}
        return p


# ---------------------------------------------------------------- initialization


class _Init:
    def __init__(self, params: ModelParams, rng: np.random.Generator):
        self.p = params
        self.rng = rng
        self.dtype = ad.get_dtype()

    def weight(self, name, shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        data = self.rng.uniform(-bound, bound, size=shape).astype(self.dtype)
        self.p[name] = Tensor(data, requires_grad=True, name=name)

    def zeros(self, name, shape):
        self.p[name] = Tensor(np.zeros(shape, dtype=self.dtype), requires_grad=True, name=name)

    def bn(self, name, channels):
        self.p[f"{name}.gamma"] = Tensor(np.ones(channels, dtype=self.dtype), requires_grad=True, name=f"{name}.gamma")
        self.zeros(f"{name}.beta", (channels,))
        self.p.buffers[f"{name}.mean"] = np.zeros(channels, dtype=self.dtype)
        self.p.buffers[f"{name}.var"] = np.ones(channels, dtype=self.dtype)

    def block(self, prefix, cfg: StgcBlockConfig, K: int):
        S, bc = cfg.spatial_scales, cfg.branch_channels
        for tau in cfg.g3d_windows:
            self.zeros(f"{prefix}.g3d{tau}.mask", (S, tau * K, tau * K))
            self.weight(f"{prefix}.g3d{tau}.weight", (bc, S * cfg.in_channels), S * cfg.in_channels)
            self.bn(f"{prefix}.g3d{tau}.bn", bc)
        self.zeros(f"{prefix}.msgcn.mask", (S, K, K))
        self.weight(f"{prefix}.msgcn.weight", (bc, S * cfg.in_channels), S * cfg.in_channels)
        self.bn(f"{prefix}.msgcn.bn", bc)
        self.weight(f"{prefix}.tconv.weight", (bc, 3 * bc), 3 * bc)
        self.bn(f"{prefix}.tconv.bn", bc)
        if cfg.in_channels != cfg.out_channels or cfg.temporal_stride != 1:
            self.weight(f"{prefix}.res.weight", (cfg.out_channels, cfg.in_channels), cfg.in_channels)
            self.bn(f"{prefix}.res.bn", cfg.out_channels)


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Fresh parameters: U(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases and masks."""
    graph = build_skeleton_graph(config.layout)
    K = graph.num_joints
    init = _Init(ModelParams(), np.random.default_rng(seed))
    c1 = config.channels[1]
    for k in range(config.num_persons):
        init.bn(f"person{k}.data_bn", config.in_channels)
        for b, bcfg in enumerate(config.blocks(), start=1):
            init.block(f"person{k}.block{b}", bcfg, K)
    if config.distance_embedding:
        for k in range(1, config.num_persons):
            init.weight(f"mlp{k}.weight", (c1, 1), 1)
            init.zeros(f"mlp{k}.bias", (c1,))
            init.bn(f"mlp{k}.bn", c1)
    init.block("fusion", config.fusion_block(), K)
    init.weight("fc.weight", (config.fusion_channels, config.num_classes), config.fusion_channels)
    init.zeros("fc.bias", (config.num_classes,))
    return init.p


def expected_param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Parameter and buffer shapes implied by ``config`` (buffers prefixed ``buffer:``)."""
    with ad.precision("float64"):
        p = init_params(config, seed=0)
    return {n: tuple(a.shape) for n, a in p.arrays().items()}


# ---------------------------------------------------------------- building blocks


def _bn(x: Tensor, params: ModelParams, name: str, training: bool, update_stats: bool) -> Tensor:
    return ad.batchnorm(
        x, params[f"{name}.gamma"], params[f"{name}.beta"],
        params.buffers[f"{name}.mean"], params.buffers[f"{name}.var"],
        training, channel_axis=1, update_stats=update_stats,
    )


def _project_scales(agg: Tensor, weight: Tensor, S: int) -> Tensor:
    """(N, C, T, S*K) scale-wise aggregates -> (N, C_out, T, K) via one channel contraction."""
    N, C, T, SK = agg.shape
    K = SK // S
    x = agg.reshape(N, C, T, S, K).transpose(0, 3, 1, 2, 4).reshape(N, S * C, T * K)
    if weight.shape[1] != S * C:
        raise ad.ShapeError(f"projection expects {weight.shape[1]} input channels, got {S * C}")
    return (weight @ x).reshape(N, weight.shape[0], T, K)


def ms_gcn_forward(
    X: Tensor,
    adjacency: np.ndarray,
    mask: Tensor | None,
    weight: Tensor,
    params: ModelParams,
    bn_name: str,
    training: bool = True,
    update_stats: bool = True,
) -> Tensor:
    """Multi-scale spatial graph convolution: ``relu(bn(sum_s X A_s W_s))``.

    ``adjacency`` is (S, K, K); ``mask`` the additive learnable (S, K, K) residual.
    """
    S, K, _ = adjacency.shape
    if X.shape[-1] != K:
        raise ad.ShapeError(f"ms_gcn: input has {X.shape[-1]} joints, adjacency {K}")
    A = Tensor(adjacency)
    if mask is not None:
        A = A + mask
    A = A.transpose(1, 0, 2).reshape(K, S * K)
    y = _project_scales(X @ A, weight, S)
    return ad.relu(_bn(y, params, bn_name, training, update_stats))


def _unfold_time(X: Tensor, tau: int, stride: int) -> Tensor:
    """(N, C, T, K) -> (N, C, T_out, tau*K): zero-padded tau-frame windows centred every ``stride`` frames."""
    N, C, T, K = X.shape
    pad = (tau - 1) // 2
    T_out = -(-T // stride)
    Xp = ad.pad_zero(X, [(0, 0), (0, 0), (pad, pad), (0, 0)]) if pad else X
    stop = stride * (T_out - 1) + 1
    if tau == 1:
        return Xp[:, :, 0:stop:stride, :]
    return ad.concat([Xp[:, :, a:a + stop:stride, :] for a in range(tau)], axis=-1)


def g3d_aggregate(X: Tensor, windowed: np.ndarray, mask: Tensor | None, tau: int, stride: int) -> Tensor:
    """Window aggregation averaged over the window: (N, C, T, K) -> (N, C, T_out, S*K).

    Averaging the tau output slots of ``X_win @ A_win`` is linear, so it is
    folded into the adjacency first: (S, tau*K, tau*K) -> (tau*K, S*K).
    """
    S, TK, _ = windowed.shape
    K = TK // tau
    A = Tensor(windowed)
    if mask is not None:
        A = A + mask
    # mean over output slots, then 1/tau for the sum over input slots
    A = ad.mean(A.reshape(S, TK, tau, K), axes=2) * (1.0 / tau)
    A = A.transpose(1, 0, 2).reshape(TK, S * K)
    return _unfold_time(X, tau, stride) @ A


def g3d_pathway_forward(
    X: Tensor,
    tau: int,
    stride: int,
    windowed: np.ndarray,
    mask: Tensor | None,
    weight: Tensor,
    params: ModelParams,
    bn_name: str,
    training: bool = True,
    update_stats: bool = True,
) -> Tensor:
    """Unified spatial-temporal graph convolution over tau-frame windows."""
    S = windowed.shape[0]
    agg = g3d_aggregate(X, windowed, mask, tau, stride)
    y = _project_scales(agg, weight, S)
    return ad.relu(_bn(y, params, bn_name, training, update_stats))


def temporal_conv(X: Tensor, weight: Tensor, stride: int) -> Tensor:
    """Per-joint temporal convolution, kernel 3, zero padding 1."""
    N, C, T, K = X.shape
    T_out = -(-T // stride)
    Xp = ad.pad_zero(X, [(0, 0), (0, 0), (1, 1), (0, 0)])
    stop = stride * (T_out - 1) + 1
    x = ad.concat([Xp[:, :, a:a + stop:stride, :] for a in range(3)], axis=1)
    y = weight @ x.reshape(N, 3 * C, T_out * K)
    return y.reshape(N, weight.shape[0], T_out, K)


class AdjacencyCache:
    def __init__(self, adj: AdjacencySet, windows: Sequence[int]):
        self.scales = adj.scales
        self.windowed = {tau: adj.windowed_stack(tau) for tau in windows}


def stgc_block_forward(
    X: Tensor,
    cfg: StgcBlockConfig,
    params: ModelParams,
    prefix: str,
    adj: AdjacencyCache,
    training: bool = True,
    update_stats: bool = True,
) -> Tensor:
    """``relu(residual(X) + concat[G3D(tau) for each window, ms_gcn -> temporal conv])``."""
    if X.shape[1] != cfg.in_channels:
        raise ad.ShapeError(f"{prefix}: expected {cfg.in_channels} channels, got {X.shape[1]}")
    s = cfg.temporal_stride
    branches = []
    for tau in cfg.g3d_windows:
        branches.append(g3d_pathway_forward(
            X, tau, s, adj.windowed[tau], params[f"{prefix}.g3d{tau}.mask"],
            params[f"{prefix}.g3d{tau}.weight"], params, f"{prefix}.g3d{tau}.bn",
            training, update_stats,
        ))
    h = ms_gcn_forward(
        X, adj.scales, params[f"{prefix}.msgcn.mask"], params[f"{prefix}.msgcn.weight"],
        params, f"{prefix}.msgcn.bn", training, update_stats,
    )
    h = temporal_conv(h, params[f"{prefix}.tconv.weight"], s)
    branches.append(_bn(h, params, f"{prefix}.tconv.bn", training, update_stats))
    out = ad.concat(branches, axis=1)
    if f"{prefix}.res.weight" in params:
        N, C, T, K = X.shape
        xs = X[:, :, ::s, :] if s > 1 else X
        w = params[f"{prefix}.res.weight"]
        r = (w @ xs.reshape(N, C, xs.shape[2] * K)).reshape(N, w.shape[0], xs.shape[2], K)
        r = _bn(r, params, f"{prefix}.res.bn", training, update_stats)
    else:
        r = X
    return ad.relu(out + r)


# ---------------------------------------------------------------- the network


@dataclass
class ForwardResult:
    probabilities: Tensor  # (N, num_classes)
    logits: Tensor
    features: list[Tensor] = field(default_factory=list)  # f^k, (N, C1, T/2, K)
    embedded: list[Tensor] = field(default_factory=list)  # distance-embedded f^k
    fused: Tensor | None = None  # (N, C2, T/4, K)


class GSGCN:
    """Binds a config to its skeleton graph and adjacency set."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.graph = build_skeleton_graph(config.layout)
        self.adjacency = build_adjacency_set(self.graph, config.spatial_scales, config.g3d_windows)
        self._adj = AdjacencyCache(self.adjacency, config.g3d_windows)

    @property
    def num_joints(self) -> int:
        return self.graph.num_joints

    def init_params(self, seed: int = 0) -> ModelParams:
        return init_params(self.config, seed)

    def extract_person_features(self, z: Tensor, params: ModelParams, k: int,
                                training: bool = True, update_stats: bool = True) -> Tensor:
        """G^k: data BN then the two STGC blocks; (N, C_in, T, K) -> (N, C1, T/2, K)."""
        if z.shape[2] % 2:
            raise ad.ShapeError(f"person {k}: T={z.shape[2]} must be divisible by 2")
        x = _bn(z, params, f"person{k}.data_bn", training, update_stats)
        for b, bcfg in enumerate(self.config.blocks(), start=1):
            x = stgc_block_forward(x, bcfg, params, f"person{k}.block{b}", self._adj, training, update_stats)
        return x

    def distance_embed(self, f: Tensor, d: Tensor | None, params: ModelParams | None, k: int,
                       present: np.ndarray | None = None, training: bool = True,
                       update_stats: bool = True) -> Tensor:
        """Gate ``f`` by ``relu(bn(W e^{-d} + b))`` for k >= 1; the reference passes through untouched."""
        if k == 0:
            if params is not None:
                raise ValueError("the reference person (k=0) has no distance MLP; pass params=None")
            return f
        N, C, T2, K = f.shape
        if self.config.distance_embedding:
            if d is None or d.shape[-2:] != (T2, K):
                raise ad.ShapeError(f"distance tensor {None if d is None else d.shape} vs features {f.shape}")
            w = params[f"mlp{k}.weight"]
            e = ad.exp(-d).reshape(N, 1, T2 * K)
            h = (w @ e) + params[f"mlp{k}.bias"].reshape(C, 1)
            gate = ad.relu(_bn(h.reshape(N, C, T2, K), params, f"mlp{k}.bn", training, update_stats))
            f = f * gate
        if present is not None:
            f = f * Tensor(np.asarray(present, dtype=np.float64).reshape(N, 1, 1, 1))
        return f

    def fuse_and_classify(self, embedded: Sequence[Tensor], params: ModelParams,
                          training: bool = True, update_stats: bool = True) -> tuple[Tensor, Tensor]:
        """Channel concat -> fusion STGC -> global average pool -> affine head. Returns (logits, fused)."""
        shapes = {tuple(e.shape) for e in embedded}
        if len(shapes) != 1:
            raise ad.ShapeError(f"embedded features disagree in shape: {sorted(shapes)}")
        x = ad.concat(list(embedded), axis=1) if len(embedded) > 1 else embedded[0]
        fused = stgc_block_forward(x, self.config.fusion_block(), params, "fusion", self._adj,
                                   training, update_stats)
        pooled = ad.mean(fused, axes=(2, 3))
        logits = pooled @ params["fc.weight"] + params["fc.bias"]
        return logits, fused

    def forward(self, inputs, distances, present, params: ModelParams, training: bool = False,
                update_stats: bool = True) -> ForwardResult:
        """Batched forward on (N, M, C_in, T, K) inputs and (N, M, 1, T/2, K) distances."""
        inputs = np.asarray(inputs.data if isinstance(inputs, Tensor) else inputs)
        distances = np.asarray(distances.data if isinstance(distances, Tensor) else distances)
        present = np.asarray(present, dtype=bool)
        cfg = self.config
        N, M, C, T, K = inputs.shape
        if (M, C, K) != (cfg.num_persons, cfg.in_channels, self.num_joints):
            raise ad.ShapeError(
                f"input (M, C_in, K) = {(M, C, K)} does not match config "
                f"{(cfg.num_persons, cfg.in_channels, self.num_joints)}"
            )
        if T % 4:
            raise ad.ShapeError(f"T={T} must be divisible by 4")
        feats, embedded = [], []
        for k in range(M):
            f = self.extract_person_features(Tensor(inputs[:, k]), params, k, training, update_stats)
            feats.append(f)
            if k == 0:
                embedded.append(self.distance_embed(f, None, None, 0))
            else:
                embedded.append(self.distance_embed(
                    f, Tensor(distances[:, k]), params, k, present[:, k], training, update_stats))
        logits, fused = self.fuse_and_classify(embedded, params, training, update_stats)
        probs = ad.softmax(logits, axis=1)
        return ForwardResult(probs, logits, feats, embedded, fused)

    def predict_proba(self, inputs, distances, present, params: ModelParams,
                      batch_size: int = 32) -> np.ndarray:
        """Eval-mode class probabilities, (N, num_classes)."""
        out = []
        with ad.no_grad():
            for i in range(0, len(inputs), batch_size):
                sl = slice(i, i + batch_size)
                r = self.forward(inputs[sl], distances[sl], present[sl], params, training=False)
                out.append(r.probabilities.data)
        return np.concatenate(out)


def model_forward(model: GSGCN, inputs, distances, present, params: ModelParams,
                  mode: str = "eval") -> np.ndarray:
    """Single-sample convenience: (M, C_in, T, K) -> (num_classes,) probabilities."""
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    r = model.forward(np.asarray(inputs)[None], np.asarray(distances)[None],
                      np.asarray(present)[None], params, training=(mode == "train"))
    return r.probabilities.data[0]


def ablation_config(base: ModelConfig, variant: str) -> ModelConfig:
    """Config for one ablation variant."""
    if variant == "full":
        return base
    if variant == "no_multi_person":
        return replace(base, num_persons=1)
    if variant == "no_speed":
        return replace(base, in_channels=3)
    if variant == "no_distance_embedding":
        return replace(base, distance_embedding=False)
    raise ValueError(f"unknown ablation variant {variant!r}")
