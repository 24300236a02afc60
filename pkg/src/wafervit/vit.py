"""Vision Transformer family for wafer maps.

Layout follows the usual ViT recipe: optional grayscale->RGB 1x1 adapter,
non-overlapping patches projected to ``hidden_size``, a learned [CLS] row
prepended, learned absolute position embeddings, ``layers`` encoder blocks,
a final layer norm and a dense head reading the CLS row.
"""

from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
import math
from typing import Dict, Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

# Table of model variants.  ``micro`` is not a published variant; it exists
# so training experiments fit on a laptop CPU.
PRESETS = {
    "tiny": dict(layers=12, hidden_size=192, heads=3, mlp_size=768),
    "small": dict(layers=12, hidden_size=384, heads=6, mlp_size=1536),
    "base": dict(layers=12, hidden_size=768, heads=12, mlp_size=3072),
    "large": dict(layers=24, hidden_size=1024, heads=16, mlp_size=4096),
    "huge": dict(layers=32, hidden_size=1280, heads=16, mlp_size=5120),
    "micro": dict(layers=4, hidden_size=64, heads=4, mlp_size=256, patch_size=8, image_size=32),
}
DESK_SCALE_PRESETS = frozenset({"micro"})

HEAD_MODES = ("multilabel", "multiclass")
NORM_PLACEMENTS = ("pre", "post")
RGB_CHANNELS = 3
INIT_STD = 0.02


@dataclass(frozen=True)
class VitConfig:
    image_size: int = 224
    patch_size: int = 16
    in_channels: int = 1
    hidden_size: int = 192
    layers: int = 12
    heads: int = 3
    mlp_size: int = 768
    dropout: float = 0.0
    num_outputs: int = 8
    head_mode: str = "multilabel"
    norm_placement: str = "pre"
    ln_eps: float = 1e-5

    def __post_init__(self):
        for name in ("image_size", "patch_size", "hidden_size", "heads", "mlp_size", "num_outputs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.layers < 0:
            raise ConfigError(f"layers must be >= 0, got {self.layers}")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        if self.hidden_size % self.heads:
            raise ConfigError(f"hidden_size {self.hidden_size} is not divisible by heads {self.heads}")
        if self.in_channels not in (1, RGB_CHANNELS):
            raise ConfigError(f"in_channels must be 1 or 3, got {self.in_channels}")
        if self.head_mode not in HEAD_MODES:
            raise ConfigError(f"head_mode must be one of {HEAD_MODES}, got {self.head_mode!r}")
        if self.norm_placement not in NORM_PLACEMENTS:
            raise ConfigError(
                f"norm_placement must be one of {NORM_PLACEMENTS}, got {self.norm_placement!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    @classmethod
    def preset(cls, name: str, **overrides) -> "VitConfig":
        try:
            base = dict(PRESETS[name])
        except KeyError:
            raise ConfigError(f"unknown variant {name!r}; choose from {sorted(PRESETS)}") from None
        base.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**base)

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * RGB_CHANNELS

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "VitConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def param_shapes(config: VitConfig) -> "OrderedDict[str, tuple]":
    """Name -> shape for every learnable tensor, in canonical order."""
    D, U = config.hidden_size, config.mlp_size
    shapes = OrderedDict()
    if config.in_channels == 1:
        shapes["rgb_adapter.weight"] = (RGB_CHANNELS,)
        shapes["rgb_adapter.bias"] = (RGB_CHANNELS,)
    shapes["patch_embed.weight"] = (config.patch_dim, D)
    shapes["patch_embed.bias"] = (D,)
    shapes["cls_token"] = (1, D)
    shapes["pos_embed"] = (config.num_patches + 1, D)
    for i in range(config.layers):
        p = f"layers.{i}."
        shapes[p + "ln1.gamma"] = (D,)
        shapes[p + "ln1.beta"] = (D,)
        for proj in ("q", "k", "v", "o"):
            shapes[p + f"attn.w{proj}"] = (D, D)
            shapes[p + f"attn.b{proj}"] = (D,)
        shapes[p + "ln2.gamma"] = (D,)
        shapes[p + "ln2.beta"] = (D,)
        shapes[p + "mlp.w1"] = (D, U)
        shapes[p + "mlp.b1"] = (U,)
        shapes[p + "mlp.w2"] = (U, D)
        shapes[p + "mlp.b2"] = (D,)
    shapes["final_ln.gamma"] = (D,)
    shapes["final_ln.beta"] = (D,)
    shapes["head.weight"] = (D, config.num_outputs)
    shapes["head.bias"] = (config.num_outputs,)
    return shapes


def count_params(config: VitConfig) -> int:
    """Closed-form learnable parameter count."""
    D, U, L = config.hidden_size, config.mlp_size, config.layers
    adapter = 2 * RGB_CHANNELS if config.in_channels == 1 else 0
    embed = config.patch_dim * D + D + D + (config.num_patches + 1) * D
    per_layer = 2 * D + 4 * (D * D + D) + 2 * D + (D * U + U) + (U * D + D)
    head = 2 * D + D * config.num_outputs + config.num_outputs
    return adapter + embed + L * per_layer + head


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


class VitModel:
    """Parameters plus forward pass of one ViT instance."""

    def __init__(self, config: VitConfig, params: Dict[str, Tensor]):
        expected = param_shapes(config)
        if list(params) != list(expected):
            missing = set(expected) - set(params)
            extra = set(params) - set(expected)
            raise ConfigError(f"parameter set mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {params[name].shape}")
            params[name].requires_grad = True
            params[name].name = name
        self.config = config
        self.params = params

    def parameters(self):
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def num_elements(self) -> int:
        return sum(p.size for p in self.params.values())

    def layer_params(self, i: int) -> Dict[str, Tensor]:
        prefix = f"layers.{i}."
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self.params.items())

    def load_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            p.data = np.array(arrays[k], dtype=p.dtype, copy=True).reshape(p.shape)

    def copy(self) -> "VitModel":
        return VitModel(self.config, OrderedDict(
            (k, Tensor(v.data, dtype=v.dtype)) for k, v in self.params.items()))

    def __call__(self, images, training: bool = False, rng: Optional[np.random.Generator] = None):
        return forward(images, self, training=training, rng=rng)


def init_weights(config: VitConfig, seed: int, dtype=None) -> VitModel:
    """Seeded initialization.

    Dense weights use a normal(0, 0.02) truncated at two standard deviations,
    biases and layer-norm shifts start at 0, scales at 1; CLS and position
    embeddings are plain normal(0, 0.02).  The RGB adapter starts as
    ``v -> (v/3, v/3, v/3)``.
    """
    rng = np.random.default_rng(seed)
    params = OrderedDict()
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "rgb_adapter.weight":
            arr = np.full(shape, 1.0 / 3.0)
        elif name in ("cls_token", "pos_embed"):
            arr = rng.normal(0.0, INIT_STD, size=shape)
        elif leaf == "gamma":
            arr = np.ones(shape)
        elif leaf.startswith("b"):
            arr = np.zeros(shape)
        else:
            arr = _trunc_normal(rng, shape, INIT_STD)
        params[name] = Tensor(arr, dtype=dtype)
    return VitModel(config, params)


# -- building blocks (functional; each works on a batch) ---------------------

def _batched(x: Tensor, core_ndim: int):
    if x.ndim == core_ndim:
        return T.reshape(x, (1,) + x.shape), True
    return x, False


def rgb_adapter(images: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """1x1 convolution from one channel to three: ``[B,1,H,W] -> [B,3,H,W]``."""
    B, C, H, W = images.shape
    x = T.reshape(images, (B, H, W, 1))
    y = T.add(T.matmul(x, T.reshape(weight, (1, RGB_CHANNELS))), bias)
    return T.transpose(y, (0, 3, 1, 2))


def patchify(image: Tensor, patch_size: int) -> Tensor:
    """Split ``[C,H,W]`` (or ``[B,C,H,W]``) into rows of flattened patches.

    Each row holds one patch flattened channel-major, then row-major; patches
    are ordered row-major over the patch grid.
    """
    x, squeeze = _batched(image, 3)
    B, C, H, W = x.shape
    P = patch_size
    if H != W or H % P:
        raise ShapeError(f"patchify: image {H}x{W} is not square or not divisible by patch {P}")
    n = H // P
    x = T.reshape(x, (B, C, n, P, n, P))
    x = T.transpose(x, (0, 2, 4, 1, 3, 5))
    x = T.reshape(x, (B, n * n, C * P * P))
    return T.reshape(x, x.shape[1:]) if squeeze else x


def unpatchify(patches: np.ndarray, channels: int, patch_size: int) -> np.ndarray:
    """Inverse of :func:`patchify` on raw arrays (single image)."""
    N, _ = patches.shape
    n = math.isqrt(N)
    P = patch_size
    x = patches.reshape(n, n, channels, P, P).transpose(2, 0, 3, 1, 4)
    return x.reshape(channels, n * P, n * P)


def embed(patches: Tensor, model: VitModel) -> Tensor:
    """Project patches, prepend CLS and add position embeddings: ``[..., N+1, D]``."""
    p = model.params
    cfg = model.config
    x, squeeze = _batched(patches, 2)
    B, N, F = x.shape
    if F != cfg.patch_dim or N != cfg.num_patches:
        raise ShapeError(
            f"embed: patches {tuple(x.shape[1:])} do not match config "
            f"({cfg.num_patches}, {cfg.patch_dim})")
    tokens = T.add(T.matmul(x, p["patch_embed.weight"]), p["patch_embed.bias"])
    cls = T.broadcast_to(T.reshape(p["cls_token"], (1, 1, cfg.hidden_size)), (B, 1, cfg.hidden_size))
    z = T.add(T.concat([cls, tokens], axis=1), p["pos_embed"])
    return T.reshape(z, z.shape[1:]) if squeeze else z


def attention(x: Tensor, lp: Dict[str, Tensor], heads: int, dropout: float = 0.0,
              training: bool = False, rng=None, return_weights: bool = False):
    """Multi-head self-attention over ``[T, D]`` or ``[B, T, D]``.

    ``lp`` holds ``attn.wq .. attn.bo``.  With ``return_weights`` the
    ``[B, heads, T, T]`` attention matrix is returned as well.
    """
    x, squeeze = _batched(x, 2)
    B, Tn, D = x.shape
    dk = D // heads

    def split(name):
        h = T.add(T.matmul(x, lp[f"attn.w{name}"]), lp[f"attn.b{name}"])
        return T.transpose(T.reshape(h, (B, Tn, heads, dk)), (0, 2, 1, 3))

    q, k, v = split("q"), split("k"), split("v")
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(dk))
    weights = T.softmax(scores, axis=-1)
    ctx = T.matmul(weights, v)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (B, Tn, D))
    out = T.add(T.matmul(ctx, lp["attn.wo"]), lp["attn.bo"])
    out = T.dropout(out, dropout, rng, training)
    if squeeze:
        out = T.reshape(out, (Tn, D))
    return (out, weights) if return_weights else out


def feed_forward(x: Tensor, lp: Dict[str, Tensor], dropout: float = 0.0,
                 training: bool = False, rng=None) -> Tensor:
    h = T.gelu(T.add(T.matmul(x, lp["mlp.w1"]), lp["mlp.b1"]))
    h = T.dropout(h, dropout, rng, training)
    return T.add(T.matmul(h, lp["mlp.w2"]), lp["mlp.b2"])


def encoder_layer(x: Tensor, lp: Dict[str, Tensor], config: VitConfig,
                  training: bool = False, rng=None) -> Tensor:
    """One encoder block; ``config.norm_placement`` picks pre- or post-norm."""
    eps, R = config.ln_eps, config.dropout
    ln1 = lambda t: T.layer_norm(t, lp["ln1.gamma"], lp["ln1.beta"], eps)  # noqa: E731
    ln2 = lambda t: T.layer_norm(t, lp["ln2.gamma"], lp["ln2.beta"], eps)  # noqa: E731
    msa = lambda t: attention(t, lp, config.heads, R, training, rng)  # noqa: E731
    ffn = lambda t: feed_forward(t, lp, R, training, rng)  # noqa: E731
    if config.norm_placement == "pre":
        z = T.add(x, msa(ln1(x)))
        return T.add(z, ffn(ln2(z)))
    z = ln1(T.add(x, msa(x)))
    return ln2(T.add(z, ffn(z)))


def encode(images, model: VitModel, training: bool = False, rng=None) -> Tensor:
    """Run everything up to (and including) the final layer norm: ``[B, N+1, D]``."""
    cfg = model.config
    p = model.params
    x = T.as_tensor(images)
    x, _ = _batched(x, 3)
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeError(
            f"forward: expected input [B, {cfg.in_channels}, {cfg.image_size}, {cfg.image_size}], "
            f"got {x.shape}")
    if x.shape[2] != cfg.image_size or x.shape[3] != cfg.image_size:
        raise ShapeError(
            f"forward: spatial size {x.shape[2:]} != configured image_size {cfg.image_size}")
    if cfg.in_channels == 1:
        x = rgb_adapter(x, p["rgb_adapter.weight"], p["rgb_adapter.bias"])
    z = embed(patchify(x, cfg.patch_size), model)
    for i in range(cfg.layers):
        z = encoder_layer(z, model.layer_params(i), cfg, training, rng)
    return T.layer_norm(z, p["final_ln.gamma"], p["final_ln.beta"], cfg.ln_eps)


def forward(images, model: VitModel, training: bool = False, rng=None) -> Tensor:
    """Logits ``[B, num_outputs]`` (or ``[num_outputs]`` for one unbatched image).

    No output activation is applied; callers pick sigmoid or softmax
    according to ``config.head_mode``.
    """
    single = T.as_tensor(images).ndim == 3
    z = encode(images, model, training, rng)
    cls = T.slice_(z, (slice(None), 0, slice(None)))
    logits = T.add(T.matmul(cls, model.params["head.weight"]), model.params["head.bias"])
    return T.reshape(logits, (model.config.num_outputs,)) if single else logits
