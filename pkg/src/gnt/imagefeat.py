"""Convolutional image encoder producing per-view feature grids.

The encoder is a small U-shaped network: a chain of stride-2
convolutions downsamples the image, then nearest-neighbor upsampling
stages (each followed by a skip concatenation and a stride-1
convolution) bring the grid back up. With the default three downs and
two ups the output sits at half the input resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    ContractError,
    ShapeError,
    Tensor,
    concat,
    gather_rows,
    matmul,
    pad2d,
    relu,
    reshape,
)

__all__ = [
    "EncoderConfig",
    "FeatureMap",
    "conv2d",
    "upsample_nearest",
    "encode_image",
    "init_encoder_params",
    "MIN_IMAGE_SIDE",
]

MIN_IMAGE_SIDE = 16


@dataclass(frozen=True)
class EncoderConfig:
    """Channel plan for the encoder.

    ``down_channels`` lists the output width of each stride-2 stage and
    ``up_channels`` of each upsampling stage; the final stage's width is
    the feature dimension ``out_dim``. The output grid sits at
    1 / 2^(len(down) - len(up)) of the input resolution.
    """

    down_channels: tuple = (16, 32, 64)
    up_channels: tuple = (32, 32)
    out_dim: int = 32
    kernel: int = 3

    def __post_init__(self):
        if not self.down_channels:
            raise ContractError("encoder needs at least one downsampling stage")
        if len(self.up_channels) >= len(self.down_channels):
            raise ContractError("encoder needs fewer up stages than down stages")
        if self.kernel % 2 != 1 or self.kernel < 1:
            raise ContractError(f"kernel size must be odd, got {self.kernel}")
        last = self.up_channels[-1] if self.up_channels else self.down_channels[-1]
        if last != self.out_dim:
            raise ContractError(
                f"final stage width {last} must equal out_dim {self.out_dim}"
            )

    @property
    def downscale(self) -> int:
        return 2 ** (len(self.down_channels) - len(self.up_channels))


@dataclass(frozen=True)
class FeatureMap:
    """Feature grid of one source view, stored flat for row gathering.

    ``grid`` has shape (height * width, dim), row-major, so the feature
    at grid coords (u, v) is row v * width + u.
    """

    grid: Tensor
    height: int
    width: int
    dim: int
    source_view_id: int = -1

    def __post_init__(self):
        if self.grid.shape != (self.height * self.width, self.dim):
            raise ShapeError(
                f"grid shape {self.grid.shape} does not match "
                f"{self.height}x{self.width}x{self.dim}"
            )

    def array(self) -> np.ndarray:
        """Detached (H, W, d) copy."""
        return self.grid.data.reshape(self.height, self.width, self.dim).copy()


_PATCH_INDEX_CACHE: dict = {}


def _patch_indices(hp: int, wp: int, k: int, stride: int) -> tuple:
    """Flat row indices of every kxk patch over a padded (hp, wp) grid."""
    key = (hp, wp, k, stride)
    hit = _PATCH_INDEX_CACHE.get(key)
    if hit is not None:
        return hit
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    base_v = stride * np.arange(ho)
    base_u = stride * np.arange(wo)
    off_v, off_u = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
    rows = (base_v[:, None, None, None] + off_v) * wp
    cols = base_u[None, :, None, None] + off_u
    idx = (rows + cols).reshape(-1)
    result = (idx, ho, wo)
    if len(_PATCH_INDEX_CACHE) > 64:
        _PATCH_INDEX_CACHE.clear()
    _PATCH_INDEX_CACHE[key] = result
    return result


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """2-D convolution of an (H, W, Cin) tensor with a (k, k, Cin, Cout)
    kernel, implemented as patch gathering plus one matmul."""
    if x.ndim != 3:
        raise ShapeError(f"conv2d input must be (H, W, C), got {x.shape}")
    if w.ndim != 4 or w.shape[0] != w.shape[1]:
        raise ShapeError(f"conv2d kernel must be (k, k, Cin, Cout), got {w.shape}")
    k = w.shape[0]
    if k % 2 != 1:
        raise ContractError(f"kernel size must be odd, got {k}")
    if w.shape[2] != x.shape[2]:
        raise ShapeError(
            f"kernel expects {w.shape[2]} input channels, image has {x.shape[2]}"
        )
    if padding == "same":
        xp = pad2d(x, k // 2)
    elif padding == "valid":
        xp = x
    else:
        raise ContractError(f"padding must be 'same' or 'valid', got {padding!r}")
    hp, wp, cin = xp.shape
    if hp < k or wp < k:
        raise ShapeError(f"input {x.shape} smaller than kernel {k}x{k}")
    idx, ho, wo = _patch_indices(hp, wp, k, stride)
    flat = reshape(xp, (hp * wp, cin))
    patches = reshape(gather_rows(flat, idx), (ho * wo, k * k * cin))
    w2d = reshape(w, (k * k * cin, w.shape[3]))
    return reshape(matmul(patches, w2d), (ho, wo, w.shape[3]))


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbor upsampling of an (H, W, C) tensor."""
    if x.ndim != 3:
        raise ShapeError(f"upsample input must be (H, W, C), got {x.shape}")
    h, w, c = x.shape
    vs = np.repeat(np.arange(h), factor)
    us = np.repeat(np.arange(w), factor)
    idx = (vs[:, None] * w + us[None, :]).reshape(-1)
    flat = reshape(x, (h * w, c))
    return reshape(gather_rows(flat, idx), (h * factor, w * factor, c))


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32) -> dict:
    """Xavier-uniform kernels, zero biases; names carry the 'encoder.' prefix."""
    params: dict[str, Tensor] = {}
    k = cfg.kernel

    def make_conv(name: str, cin: int, cout: int):
        limit = np.sqrt(6.0 / (k * k * cin + k * k * cout))
        wdata = rng.uniform(-limit, limit, (k, k, cin, cout))
        params[f"{name}.w"] = Tensor(wdata.astype(dtype), requires_grad=True)
        params[f"{name}.b"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)

    cin = 3
    for i, cout in enumerate(cfg.down_channels):
        make_conv(f"encoder.down{i}", cin, cout)
        cin = cout
    n_down = len(cfg.down_channels)
    for i, cout in enumerate(cfg.up_channels):
        skip_level = n_down - 2 - i
        skip_ch = cfg.down_channels[skip_level] if skip_level >= 0 else 3
        make_conv(f"encoder.up{i}", cin + skip_ch, cout)
        cin = cout
    return params


def encode_image(
    img: np.ndarray,
    cfg: EncoderConfig,
    params: dict,
    source_view_id: int = -1,
) -> FeatureMap:
    """Encode an (H, W, 3) image in [0, 1] into a FeatureMap.

    H and W must be multiples of 2^len(down_channels) and at least
    MIN_IMAGE_SIDE; smaller images violate the receptive-field contract.
    """
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ContractError(f"image must be (H, W, 3), got {img.shape}")
    h, w = img.shape[:2]
    if min(h, w) < MIN_IMAGE_SIDE:
        raise ContractError(
            f"image {w}x{h} below the {MIN_IMAGE_SIDE} px receptive-field minimum"
        )
    div = 2 ** len(cfg.down_channels)
    if h % div or w % div:
        raise ContractError(f"image dims {w}x{h} must be multiples of {div}")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ContractError("image values must lie in [0, 1]")
    dtype = params[next(iter(params))].data.dtype
    x = Tensor(img.astype(dtype))
    stages = len(cfg.down_channels) + len(cfg.up_channels)
    skips = [x]
    stage = 0
    for i in range(len(cfg.down_channels)):
        stage += 1
        x = conv2d(x, params[f"encoder.down{i}.w"], stride=2) + params[f"encoder.down{i}.b"]
        if stage < stages:
            x = relu(x)
        skips.append(x)
    n_down = len(cfg.down_channels)
    for i in range(len(cfg.up_channels)):
        stage += 1
        x = upsample_nearest(x)
        x = concat([x, skips[n_down - 1 - i]], axis=-1)
        x = conv2d(x, params[f"encoder.up{i}.w"], stride=1) + params[f"encoder.up{i}.b"]
        if stage < stages:
            x = relu(x)
    ho, wo, d = x.shape
    if d != cfg.out_dim:
        raise ShapeError(f"encoder produced {d} channels, expected {cfg.out_dim}")
    return FeatureMap(
        grid=reshape(x, (ho * wo, d)),
        height=ho,
        width=wo,
        dim=d,
        source_view_id=source_view_id,
    )
