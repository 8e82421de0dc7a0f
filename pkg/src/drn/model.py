"""Distilling-with-residual network: configuration, parameters, forward and
backward passes.

The forward graph is a fixed pipeline, so backward is written out explicitly
in reverse order rather than through a tape. Each ``*_forward`` returns the
output plus a cache; the matching ``*_backward`` consumes that cache and
accumulates parameter gradients into the :class:`ParamStore`.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import numpy as np

from .tensor import (
    ConvSpec,
    TensorShapeError,
    add,
    check_tensor,
    concat_channels,
    conv2d_backward,
    conv2d_forward_cached,
    elu_backward,
    elu_forward,
    pixel_shuffle,
    pixel_shuffle_backward,
    split_channels,
)


class ConfigError(ValueError):
    pass


class BackwardBeforeForwardError(RuntimeError):
    pass


@dataclass(frozen=True)
class DrnConfig:
    scale: int = 4
    base_channels: int = 64
    groups: int = 6
    blocks_per_group: int = 9
    rd_units_per_block: int = 2
    distill_width: int = 8
    elu_alpha: float = 0.2
    per_block_fusion: bool = True
    ablate_rdb: bool = False

    def __post_init__(self):
        for name in ("scale", "base_channels", "groups", "blocks_per_group",
                     "rd_units_per_block", "distill_width"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                raise ConfigError(f"{name} must be an integer, got {value!r}")
            if value < 1:
                raise ConfigError(f"{name} must be >= 1, got {value}")
        if not self.elu_alpha > 0:
            raise ConfigError(f"elu_alpha must be > 0, got {self.elu_alpha}")

    def to_json_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json_dict(cls, data: dict) -> "DrnConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown DrnConfig keys: {', '.join(unknown)}")
        return cls(**data)


class ConvLayer(NamedTuple):
    name: str
    c_in: int
    c_out: int
    k: int

    @property
    def spec(self) -> ConvSpec:
        return ConvSpec.for_kernel(self.k)


def layer_specs(cfg: DrnConfig) -> list[ConvLayer]:
    """Every conv in the network, in execution order. Parameter names and
    shapes are a pure function of the config."""
    C, d, L = cfg.base_channels, cfg.distill_width, cfg.rd_units_per_block
    layers = [ConvLayer("lfe", 3, C, 3)]
    for g in range(1, cfg.groups + 1):
        width = C
        for k in range(1, cfg.blocks_per_group + 1):
            prefix = f"g{g}.b{k}"
            if cfg.ablate_rdb:
                layers += [ConvLayer(f"{prefix}.plain{i}", C, C, 3) for i in range(1, L + 1)]
                continue
            block_in = width
            for i in range(1, L + 1):
                u = f"{prefix}.u{i}"
                layers += [
                    ConvLayer(f"{u}.conv1", width, C, 1),
                    ConvLayer(f"{u}.conv2", C, C, 3),
                    ConvLayer(f"{u}.conv3", C, width + d, 1),
                ]
                width += d
                if width != block_in + i * d:
                    raise AssertionError(f"{u}: channel count {width} != {block_in} + {i}*{d}")
            if cfg.per_block_fusion:
                layers.append(ConvLayer(f"{prefix}.fuse", width, C, 1))
                width = C
        layers.append(ConvLayer(f"g{g}.compress", width, C, 1))
    M = cfg.scale
    layers += [ConvLayer("head.up", C, C * M * M, 3), ConvLayer("head.out", C, 3, 3)]
    return layers


class ParamStore:
    """Named parameters with parallel gradient and Adam moment slots."""

    def __init__(self, shapes: "OrderedDict[str, tuple]", dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.params: OrderedDict[str, np.ndarray] = OrderedDict(
            (name, np.zeros(shape, self.dtype)) for name, shape in shapes.items()
        )
        self.grads: OrderedDict[str, np.ndarray] = OrderedDict()
        self.exp_avg = OrderedDict((n, np.zeros(p.shape)) for n, p in self.params.items())
        self.exp_avg_sq = OrderedDict((n, np.zeros(p.shape)) for n, p in self.params.items())

    def __getitem__(self, name):
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self):
        self.grads = OrderedDict((n, np.zeros_like(p)) for n, p in self.params.items())

    def accumulate(self, name: str, grad: np.ndarray):
        if name not in self.grads:
            self.grads[name] = np.zeros_like(self.params[name])
        self.grads[name] += grad

    def set(self, name: str, value: np.ndarray):
        target = self.params[name]
        if value.shape != target.shape:
            raise TensorShapeError(f"{name}: shape {value.shape} != expected {target.shape}")
        target[...] = value

    def count(self) -> int:
        return int(sum(p.size for p in self.params.values()))


# ---------------------------------------------------------------- layer helpers


def _conv(x, store: ParamStore, layer: str, k: int):
    """Returns the conv output and a cache entry ``(x, columns)``; 1x1 convs
    keep no columns since rebuilding them is a cast."""
    spec = ConvSpec.for_kernel(k)
    out, cols = conv2d_forward_cached(x, store[layer + ".weight"], store[layer + ".bias"], spec)
    return out, (x, cols if k > 1 else None)


def _conv_back(grad, saved, store: ParamStore, layer: str, k: int):
    x, cols = saved
    gx, gw, gb = conv2d_backward(grad, x, store[layer + ".weight"], ConvSpec.for_kernel(k), cols)
    store.accumulate(layer + ".weight", gw)
    store.accumulate(layer + ".bias", gb)
    return gx


def rd_unit_forward(x, store: ParamStore, prefix: str, alpha: float):
    """Bottleneck 1x1 -> 3x3 -> 1x1; the first ``D_i`` output channels are a
    residual update of ``x``, the remaining ``d`` are new distilled channels."""
    width = x.shape[1]
    expected = store[prefix + ".conv1.weight"].shape[1]
    if expected != width:
        raise TensorShapeError(f"{prefix}: expected {expected} input channels, got {width}", axis="c")
    p1, s1 = _conv(x, store, prefix + ".conv1", 1)
    a1 = elu_forward(p1, alpha)
    p2, s2 = _conv(a1, store, prefix + ".conv2", 3)
    a2 = elu_forward(p2, alpha)
    p3, s3 = _conv(a2, store, prefix + ".conv3", 1)
    residual, distilled = split_channels(p3, width)
    out = concat_channels(add(residual, x), distilled)
    return out, (s1, p1, s2, p2, s3)


def rd_unit_backward(grad, cache, store: ParamStore, prefix: str, alpha: float):
    s1, p1, s2, p2, s3 = cache
    width = s1[0].shape[1]
    # out = concat(residual + x, distilled) with (residual, distilled) = split(p3),
    # so grad flows to p3 unchanged and to x through the first `width` channels
    g_a2 = _conv_back(grad, s3, store, prefix + ".conv3", 1)
    g_a1 = _conv_back(elu_backward(g_a2, p2, alpha), s2, store, prefix + ".conv2", 3)
    g_x = _conv_back(elu_backward(g_a1, p1, alpha), s1, store, prefix + ".conv1", 1)
    return g_x + grad[:, :width]


def rdb_forward(x, store: ParamStore, prefix: str, cfg: DrnConfig):
    """L RD units then the 1x1 fusion back to the base width; with
    ``ablate_rdb`` a plain stack of 3x3 convs plus a residual add."""
    alpha = cfg.elu_alpha
    L = cfg.rd_units_per_block
    caches = []
    if cfg.ablate_rdb:
        h = x
        for i in range(1, L + 1):
            p, saved = _conv(h, store, f"{prefix}.plain{i}", 3)
            caches.append((saved, p))
            h = elu_forward(p, alpha)
        return add(h, x), caches

    h = x
    for i in range(1, L + 1):
        h, c = rd_unit_forward(h, store, f"{prefix}.u{i}", alpha)
        caches.append(c)
    fuse_cache = None
    if cfg.per_block_fusion:
        p, saved = _conv(h, store, prefix + ".fuse", 1)
        fuse_cache = (saved, p)
        h = elu_forward(p, alpha)
    return h, (caches, fuse_cache)


def rdb_backward(grad, cache, store: ParamStore, prefix: str, cfg: DrnConfig):
    alpha = cfg.elu_alpha
    if cfg.ablate_rdb:
        g = grad
        for i in range(len(cache), 0, -1):
            saved, p = cache[i - 1]
            g = _conv_back(elu_backward(g, p, alpha), saved, store, f"{prefix}.plain{i}", 3)
        return g + grad

    caches, fuse_cache = cache
    g = grad
    if fuse_cache is not None:
        saved, p = fuse_cache
        g = _conv_back(elu_backward(g, p, alpha), saved, store, prefix + ".fuse", 1)
    for i in range(len(caches), 0, -1):
        g = rd_unit_backward(g, caches[i - 1], store, f"{prefix}.u{i}", alpha)
    return g


def rdg_forward(y_prev, store: ParamStore, g: int, cfg: DrnConfig):
    """K blocks, 1x1 compression with ELU, then the long skip back to the
    group input."""
    if y_prev.shape[1] != cfg.base_channels:
        raise TensorShapeError(f"g{g}: expected {cfg.base_channels} channels, got {y_prev.shape[1]}",
                               axis="c")
    h, caches = y_prev, []
    for k in range(1, cfg.blocks_per_group + 1):
        h, c = rdb_forward(h, store, f"g{g}.b{k}", cfg)
        caches.append(c)
    p, saved = _conv(h, store, f"g{g}.compress", 1)
    out = add(elu_forward(p, cfg.elu_alpha), y_prev)
    return out, (caches, saved, p)


def rdg_backward(grad, cache, store: ParamStore, g: int, cfg: DrnConfig):
    caches, saved, p = cache
    gh = _conv_back(elu_backward(grad, p, cfg.elu_alpha), saved, store, f"g{g}.compress", 1)
    for k in range(len(caches), 0, -1):
        gh = rdb_backward(gh, caches[k - 1], store, f"g{g}.b{k}", cfg)
    return gh + grad


# ---------------------------------------------------------------- full network


class DRN:
    """LFE conv -> G residual distilling groups -> global residual add ->
    conv, pixel shuffle, conv."""

    def __init__(self, config: DrnConfig, dtype=np.float32):
        self.config = config
        self.layers = layer_specs(config)
        shapes = OrderedDict()
        for layer in self.layers:
            shapes[layer.name + ".weight"] = (layer.c_out, layer.c_in, layer.k, layer.k)
            shapes[layer.name + ".bias"] = (layer.c_out,)
        self.params = ParamStore(shapes, dtype)
        self._cache = None

    @property
    def dtype(self):
        return self.params.dtype

    def __call__(self, x):
        return self.forward(x, record=False)

    def forward(self, x, record: bool = True, return_features: bool = False):
        cfg = self.config
        check_tensor(x, "i_lr")
        if x.shape[1] != 3:
            raise TensorShapeError(f"input must have 3 channels, got {x.shape[1]}", axis="c")
        x = x.astype(self.dtype, copy=False)
        p0, s0 = _conv(x, self.params, "lfe", 3)
        y0 = elu_forward(p0, cfg.elu_alpha)
        h, group_caches = y0, []
        for g in range(1, cfg.groups + 1):
            h, c = rdg_forward(h, self.params, g, cfg)
            group_caches.append(c)
        y_df = add(y0, h)
        u, s_up = _conv(y_df, self.params, "head.up", 3)
        out, s_out = _conv(pixel_shuffle(u, cfg.scale), self.params, "head.out", 3)
        if record:
            self._cache = (s0, p0, group_caches, s_up, s_out)
        if return_features:
            return out, {"y0": y0, "y_rdgs": h, "y_df": y_df}
        return out

    def backward(self, grad_out):
        if self._cache is None:
            raise BackwardBeforeForwardError("backward called before a recorded forward pass")
        cfg = self.config
        s0, p0, group_caches, s_up, s_out = self._cache
        grad_out = grad_out.astype(self.dtype, copy=False)
        g_s = _conv_back(grad_out, s_out, self.params, "head.out", 3)
        g_u = pixel_shuffle_backward(g_s, cfg.scale)
        g_df = _conv_back(g_u, s_up, self.params, "head.up", 3)
        g_h = g_df
        for g in range(cfg.groups, 0, -1):
            g_h = rdg_backward(g_h, group_caches[g - 1], self.params, g, cfg)
        g_y0 = g_df + g_h
        g_p0 = elu_backward(g_y0, p0, cfg.elu_alpha)
        return _conv_back(g_p0, s0, self.params, "lfe", 3)


def build_model(config: DrnConfig, dtype=np.float32) -> DRN:
    if not isinstance(config, DrnConfig):
        raise ConfigError("build_model expects a DrnConfig")
    return DRN(config, dtype)


def init_params(model: DRN, seed: int) -> None:
    """He fan-in normal weights, zero biases.

    Each weight tensor draws from its own Philox-4x32 stream keyed by
    ``(seed, layer index)``; Philox is counter-based, so the draws depend
    only on the seed and the layer position, never on platform or call order.
    """
    for index, layer in enumerate(model.layers):
        bitgen = np.random.Philox(np.random.SeedSequence([seed, index]))
        rng = np.random.Generator(bitgen)
        std = np.sqrt(2.0 / (layer.k * layer.k * layer.c_in))
        shape = (layer.c_out, layer.c_in, layer.k, layer.k)
        model.params.set(layer.name + ".weight", (rng.standard_normal(shape) * std).astype(model.dtype))
        model.params.set(layer.name + ".bias", np.zeros(layer.c_out, model.dtype))


def param_count(model: DRN) -> int:
    return model.params.count()
