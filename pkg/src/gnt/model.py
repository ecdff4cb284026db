"""View and ray transformers plus parameter management.

The model turns per-point multi-view feature tokens into a pixel color
in three stages, repeated for a configurable number of blocks:

- view aggregation: for every sample point, single-head cross-attention
  over its source-view tokens. Attention logits are per-channel
  subtractive (key minus query plus a direction-offset term), and the
  aggregated value is the token value plus that same offset term,
  weighted channel-wise.
- ray aggregation: multi-head dot-product self-attention over the
  sample points of each ray, after fusing the running token with the
  encoded point position and ray direction.
- readout: layernorm, mean over the ray's points, and a small MLP to
  RGB (sigmoid-squashed by default).

Both attention stages are wrapped pre-layernorm with residual
connections and a two-layer ReLU FFN. Two auxiliary heads share the
trunk: a per-point color/density head for classic volume rendering and
an autoregressive far-to-near decoder; their parameters are always
created so checkpoints stay complete regardless of the renderer used.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .tensor import (
    ContractError,
    ShapeError,
    Tensor,
    concat,
    layernorm,
    matmul,
    narrow,
    relu,
    reshape,
    sigmoid,
    softmax,
    softplus,
    swapaxes,
    tmax,
    tmean,
)

__all__ = [
    "GNTConfig",
    "ModelParams",
    "AttentionRecord",
    "init_params",
    "view_attention",
    "ray_attention",
    "trunk_features",
    "gnt_forward",
    "gnt_forward_batch",
    "view_aggregate_batch",
    "volumetric_head",
    "save_checkpoint",
    "load_checkpoint",
    "MASK_BIAS",
]

MASK_BIAS = -1e30


@dataclass(frozen=True)
class GNTConfig:
    """Transformer hyperparameters.

    ``dim`` is the shared token width; ``ray_heads`` must divide it.
    ``view_heads`` exists for config completeness but the subtractive
    view attention is per-channel and only supports one head.
    ``share_view_weights`` reuses one set of view-attention parameters
    across blocks; ``reuse_kv`` additionally computes keys and values
    once (it requires sharing, since otherwise every block has its own
    projections).
    """

    dim: int = 64
    ffn_hidden: int = 256
    ray_heads: int = 4
    view_heads: int = 1
    n_blocks: int = 4
    pos_enc_L: int = 10
    rgb_sigmoid: bool = True
    share_view_weights: bool = False
    reuse_kv: bool = False
    ar_blocks: int = 2

    def __post_init__(self):
        if self.view_heads != 1:
            raise ContractError("view attention is single-head; view_heads must be 1")
        if self.dim % self.ray_heads != 0:
            raise ContractError(
                f"ray_heads {self.ray_heads} must divide dim {self.dim}"
            )
        if self.n_blocks < 1 or self.ar_blocks < 1:
            raise ContractError("need at least one block")
        if self.reuse_kv and not self.share_view_weights:
            raise ContractError("reuse_kv requires share_view_weights")

    @property
    def pos_dim(self) -> int:
        return 3 * (2 * self.pos_enc_L + 1)


class ModelParams:
    """Ordered name-to-Tensor mapping for every learnable parameter."""

    def __init__(self, tensors: dict[str, Tensor]):
        self.tensors: dict[str, Tensor] = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self.tensors[name]
        except KeyError:
            raise KeyError(f"no parameter named {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self):
        return list(self.tensors)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    @property
    def n_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def astype(self, dtype) -> "ModelParams":
        """Independent copy in another precision (for gradient checks)."""
        return ModelParams(
            {
                name: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad)
                for name, t in self.tensors.items()
            }
        )


@dataclass
class AttentionRecord:
    """Post-softmax attention captured per block during one forward pass.

    view[l] has shape (R, M, N, dim): per-channel weight of source view
    n for point m. ray[l] has shape (R, H, M, M): weight of key point
    j for query point i in head h. ts is filled by the renderer.
    """

    view: list = field(default_factory=list)
    ray: list = field(default_factory=list)
    ts: np.ndarray | None = None


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, (fan_in, fan_out)).astype(dtype)


def _add_linear(params: dict, rng, name: str, fan_in: int, fan_out: int, dtype) -> None:
    params[f"{name}.w"] = Tensor(_xavier(rng, fan_in, fan_out, dtype), requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True)


def _add_layernorm(params: dict, name: str, dim: int, dtype) -> None:
    params[f"{name}.g"] = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)


def _add_attention_ffn(params: dict, rng, prefix: str, dim: int, ffn: int, dtype) -> None:
    _add_layernorm(params, f"{prefix}.ln1", dim, dtype)
    for proj in ("q", "k", "v", "out"):
        _add_linear(params, rng, f"{prefix}.{proj}", dim, dim, dtype)
    _add_layernorm(params, f"{prefix}.ln2", dim, dtype)
    _add_linear(params, rng, f"{prefix}.ffn1", dim, ffn, dtype)
    _add_linear(params, rng, f"{prefix}.ffn2", ffn, dim, dtype)


def init_params(
    cfg: GNTConfig,
    enc_cfg=None,
    seed: int = 0,
    dtype=np.float32,
) -> ModelParams:
    """Create all parameters: encoder (when an encoder config is given),
    token input projection, per-block attention stacks, readout heads."""
    from .imagefeat import EncoderConfig, init_encoder_params

    if enc_cfg is None:
        enc_cfg = EncoderConfig()
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    params.update(init_encoder_params(enc_cfg, rng, dtype))
    dim = cfg.dim
    pe = cfg.pos_dim
    _add_linear(params, rng, "input.proj", enc_cfg.out_dim, dim, dtype)
    view_prefixes = (
        ["view_shared"] if cfg.share_view_weights else [f"view{l}" for l in range(cfg.n_blocks)]
    )
    for prefix in view_prefixes:
        _add_attention_ffn(params, rng, prefix, dim, cfg.ffn_hidden, dtype)
        _add_linear(params, rng, f"{prefix}.pos", 4, dim, dtype)
    for l in range(cfg.n_blocks):
        _add_linear(params, rng, f"ray{l}.fuse", dim + 2 * pe, dim, dtype)
        _add_attention_ffn(params, rng, f"ray{l}", dim, cfg.ffn_hidden, dtype)
    _add_layernorm(params, "final.ln", dim, dtype)
    _add_linear(params, rng, "rgb.fc1", dim, dim, dtype)
    _add_linear(params, rng, "rgb.fc2", dim, 3, dtype)
    _add_linear(params, rng, "vol.fc1", dim, dim, dtype)
    _add_linear(params, rng, "vol.fc2", dim, 4, dtype)
    _add_linear(params, rng, "ar.token", dim + pe, dim, dtype)
    _add_linear(params, rng, "ar.dir", pe, dim, dtype)
    for l in range(cfg.ar_blocks):
        _add_attention_ffn(params, rng, f"ar{l}", dim, cfg.ffn_hidden, dtype)
    _add_layernorm(params, "ar.final_ln", dim, dtype)
    _add_linear(params, rng, "ar.rgb1", dim, dim, dtype)
    _add_linear(params, rng, "ar.rgb2", dim, 3, dtype)
    return ModelParams(params)


def _linear(x: Tensor, params: ModelParams, name: str) -> Tensor:
    return matmul(x, params[f"{name}.w"]) + params[f"{name}.b"]


def _ffn_residual(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    h = layernorm(x, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    h = relu(_linear(h, params, f"{prefix}.ffn1"))
    return x + _linear(h, params, f"{prefix}.ffn2")


def view_attention(
    x0: Tensor,
    keys: Tensor,
    values: Tensor,
    pos: Tensor,
    mask_bias: Tensor,
    params: ModelParams,
    prefix: str,
):
    """Subtractive single-head cross-attention over source views.

    x0 (R, M, dim) is the normalized query token; keys/values
    (R, M, N, dim) are projections of the view tokens; pos (R, M, N, dim)
    is the projected direction offset. Logits are per-channel
    key - query + pos (plus the mask bias), softmaxed over views, and
    weight values + pos. Returns (output (R, M, dim), attention
    (R, M, N, dim) post-softmax).
    """
    r, m, dim = x0.shape
    q = _linear(x0, params, f"{prefix}.q")
    q = reshape(q, (r, m, 1, dim))
    logits = keys - q + pos + mask_bias
    attn = softmax(logits, axis=2)
    gathered = ((values + pos) * attn).sum(axis=2)
    return _linear(gathered, params, f"{prefix}.out"), attn


def _view_block(
    x0: Tensor,
    tokens: Tensor,
    delta_dir: Tensor,
    mask_bias: Tensor,
    params: ModelParams,
    prefix: str,
    kv_cache: dict | None,
):
    """Pre-layernorm residual wrapper around view_attention plus FFN.

    The layernorm applies to the query stream; keys/values/pos come
    from the raw tokens and direction offsets so they can be cached
    across blocks when weights are shared.
    """
    if kv_cache is not None and "k" in kv_cache:
        keys, values, pos = kv_cache["k"], kv_cache["v"], kv_cache["p"]
    else:
        keys = _linear(tokens, params, f"{prefix}.k")
        values = _linear(tokens, params, f"{prefix}.v")
        pos = _linear(delta_dir, params, f"{prefix}.pos")
        if kv_cache is not None:
            kv_cache.update(k=keys, v=values, p=pos)
    h = layernorm(x0, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    out, attn = view_attention(h, keys, values, pos, mask_bias, params, prefix)
    x0 = x0 + out
    return _ffn_residual(x0, params, prefix), attn


def ray_attention(
    x: Tensor,
    params: ModelParams,
    prefix: str,
    heads: int,
    attn_bias: Tensor | None = None,
):
    """Multi-head dot-product self-attention along a point sequence.

    x (R, M, dim) is the normalized input. Scores are scaled by
    1/sqrt(dim / heads) and softmaxed over keys; an optional additive
    bias (e.g. a causal mask) is applied before the softmax. Returns
    (output (R, M, dim), attention (R, heads, M, M)).
    """
    r, m, dim = x.shape
    if dim % heads:
        raise ShapeError(f"heads {heads} must divide dim {dim}")
    hd = dim // heads

    def split(t: Tensor) -> Tensor:
        return swapaxes(reshape(t, (r, m, heads, hd)), 1, 2)

    q = split(_linear(x, params, f"{prefix}.q"))
    k = split(_linear(x, params, f"{prefix}.k"))
    v = split(_linear(x, params, f"{prefix}.v"))
    scores = matmul(q, swapaxes(k, -1, -2)) * float(1.0 / np.sqrt(hd))
    if attn_bias is not None:
        scores = scores + attn_bias
    attn = softmax(scores, axis=-1)
    mixed = matmul(attn, v)
    merged = reshape(swapaxes(mixed, 1, 2), (r, m, dim))
    return _linear(merged, params, f"{prefix}.out"), attn


def _ray_block(
    x0: Tensor,
    d_enc: Tensor,
    x_enc: Tensor,
    params: ModelParams,
    prefix: str,
    heads: int,
):
    """Fuse token with encoded direction and position, then pre-layernorm
    residual self-attention along the ray plus FFN."""
    fused = _linear(concat([x0, d_enc, x_enc], axis=-1), params, f"{prefix}.fuse")
    h = layernorm(fused, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    out, attn = ray_attention(h, params, prefix, heads)
    x = fused + out
    return _ffn_residual(x, params, prefix), attn


def _prepare_view_inputs(tokens, valid, delta_d, params, dtype):
    """Project raw tokens, build mask bias and the pooled initial token.

    valid (R, M, N) marks usable view samples. Attention logits get
    MASK_BIAS on invalid entries; a point with no valid view keeps a
    zero bias everywhere (uniform attention over zero tokens) so
    outputs stay finite. The initial token is the per-channel max over
    valid views, zero when none are valid.
    """
    r, m, n = valid.shape
    any_valid = valid.any(axis=2)
    bias = np.where(valid, 0.0, MASK_BIAS)
    bias[~any_valid] = 0.0
    mask_bias = Tensor(bias[..., None].astype(dtype))
    projected = _linear(tokens, params, "input.proj")
    pool_bias = Tensor(np.where(valid, 0.0, MASK_BIAS)[..., None].astype(dtype))
    pooled = tmax(projected + pool_bias, axis=2)
    keep = Tensor((any_valid[..., None]).astype(dtype))
    x0 = pooled * keep
    return projected, mask_bias, x0


def _check_forward_inputs(tokens, valid, delta_d, x_enc, d_enc, cfg):
    r, m, n, _ = tokens.shape
    if valid.shape != (r, m, n):
        raise ShapeError(f"valid shape {valid.shape} does not match tokens {tokens.shape}")
    if delta_d.shape != (r, m, n, 4):
        raise ShapeError(f"delta_d shape {delta_d.shape} must be (R, M, N, 4)")
    pe = cfg.pos_dim
    if x_enc.shape != (r, m, pe):
        raise ShapeError(f"x_enc shape {x_enc.shape} must be ({r}, {m}, {pe})")
    if d_enc.shape != (r, pe):
        raise ShapeError(f"d_enc shape {d_enc.shape} must be ({r}, {pe})")


def trunk_features(
    tokens: Tensor,
    valid: np.ndarray,
    delta_d: np.ndarray,
    x_enc: np.ndarray,
    d_enc: np.ndarray,
    cfg: GNTConfig,
    params: ModelParams,
    capture_attn: bool = False,
):
    """Alternating view/ray blocks plus the final layernorm.

    Returns per-point features (R, M, dim) and the attention record
    (None unless capture_attn). Shared by the pooled readout and the
    autoregressive decoder.
    """
    _check_forward_inputs(tokens, valid, delta_d, x_enc, d_enc, cfg)
    dtype = params["final.ln.g"].dtype
    r, m, _, _ = tokens.shape
    projected, mask_bias, x0 = _prepare_view_inputs(tokens, valid, delta_d, params, dtype)
    delta_t = Tensor(delta_d.astype(dtype))
    x_enc_t = Tensor(x_enc.astype(dtype))
    d_enc_t = Tensor(np.broadcast_to(d_enc[:, None, :], (r, m, d_enc.shape[-1])).astype(dtype))
    record = AttentionRecord() if capture_attn else None
    kv_cache: dict | None = {} if cfg.reuse_kv else None
    for l in range(cfg.n_blocks):
        prefix = "view_shared" if cfg.share_view_weights else f"view{l}"
        x0, v_attn = _view_block(
            x0, projected, delta_t, mask_bias, params, prefix, kv_cache
        )
        x0, r_attn = _ray_block(x0, d_enc_t, x_enc_t, params, f"ray{l}", cfg.ray_heads)
        if record is not None:
            record.view.append(v_attn.numpy())
            record.ray.append(r_attn.numpy())
    x0 = layernorm(x0, params["final.ln.g"], params["final.ln.b"])
    return x0, record


def gnt_forward_batch(
    tokens: Tensor,
    valid: np.ndarray,
    delta_d: np.ndarray,
    x_enc: np.ndarray,
    d_enc: np.ndarray,
    cfg: GNTConfig,
    params: ModelParams,
    capture_attn: bool = False,
):
    """Full model over a batch of rays.

    tokens (R, M, N, token_dim) are gathered view features for M points
    on each of R rays from N source views; valid flags unusable
    samples; delta_d (R, M, N, 4) packs view-direction offsets; x_enc
    (R, M, pe) and d_enc (R, pe) are positional encodings of sample
    points and ray directions. Returns (rgb Tensor (R, 3),
    AttentionRecord or None).
    """
    feats, record = trunk_features(
        tokens, valid, delta_d, x_enc, d_enc, cfg, params, capture_attn
    )
    pooled = tmean(feats, axis=1)
    h = relu(_linear(pooled, params, "rgb.fc1"))
    rgb = _linear(h, params, "rgb.fc2")
    if cfg.rgb_sigmoid:
        rgb = sigmoid(rgb)
    return rgb, record


def gnt_forward(
    tokens: Tensor,
    valid: np.ndarray,
    delta_d: np.ndarray,
    x_enc: np.ndarray,
    d_enc: np.ndarray,
    cfg: GNTConfig,
    params: ModelParams,
    capture_attn: bool = False,
):
    """Single-ray wrapper: tokens (M, N, token_dim) to rgb Tensor (3,)."""
    m, n, td = tokens.shape
    rgb, record = gnt_forward_batch(
        reshape(tokens, (1, m, n, td)),
        valid[None],
        delta_d[None],
        x_enc[None],
        d_enc[None],
        cfg,
        params,
        capture_attn,
    )
    return reshape(rgb, (3,)), record


def view_aggregate_batch(
    tokens: Tensor,
    valid: np.ndarray,
    delta_d: np.ndarray,
    cfg: GNTConfig,
    params: ModelParams,
    capture_attn: bool = False,
):
    """View-aggregation-only trunk: the n_blocks view blocks chained
    without ray mixing, then the final layernorm. Returns per-point
    features (R, M, dim) for the volumetric head."""
    r, m, n, _ = tokens.shape
    if valid.shape != (r, m, n) or delta_d.shape != (r, m, n, 4):
        raise ShapeError("valid / delta_d shapes do not match tokens")
    dtype = params["final.ln.g"].dtype
    projected, mask_bias, x0 = _prepare_view_inputs(tokens, valid, delta_d, params, dtype)
    delta_t = Tensor(delta_d.astype(dtype))
    record = AttentionRecord() if capture_attn else None
    kv_cache: dict | None = {} if cfg.reuse_kv else None
    for l in range(cfg.n_blocks):
        prefix = "view_shared" if cfg.share_view_weights else f"view{l}"
        x0, v_attn = _view_block(
            x0, projected, delta_t, mask_bias, params, prefix, kv_cache
        )
        if record is not None:
            record.view.append(v_attn.numpy())
    x0 = layernorm(x0, params["final.ln.g"], params["final.ln.b"])
    return x0, record


def volumetric_head(features: Tensor, cfg: GNTConfig, params: ModelParams):
    """Per-point color and density from aggregated features.

    Density uses softplus so it stays non-negative with usable
    gradients around zero; color is sigmoid-squashed when the config
    asks for bounded rgb. Returns (colors (R, M, 3), sigmas (R, M)).
    """
    h = relu(_linear(features, params, "vol.fc1"))
    raw = _linear(h, params, "vol.fc2")
    rgb = narrow(raw, -1, 0, 3)
    if cfg.rgb_sigmoid:
        rgb = sigmoid(rgb)
    sigmas = softplus(reshape(narrow(raw, -1, 3, 1), raw.shape[:-1]))
    return rgb, sigmas


def save_checkpoint(directory, params: ModelParams, meta: dict) -> None:
    """Write manifest.json plus weights.bin (float32 little-endian).

    The manifest lists every tensor's name, shape, dtype and byte
    offset; ``meta`` travels alongside (configs, renderer, step)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    blobs = []
    offset = 0
    for name, t in params.items():
        data = np.ascontiguousarray(t.data.astype("<f4"))
        nbytes = data.nbytes
        entries.append(
            {
                "name": name,
                "shape": list(t.shape),
                "dtype": "float32",
                "offset": offset,
                "nbytes": nbytes,
            }
        )
        blobs.append(data.tobytes())
        offset += nbytes
    manifest = {"format": 1, "total_bytes": offset, "tensors": entries, "meta": meta}
    (directory / "weights.bin").write_bytes(b"".join(blobs))
    with open(directory / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=False)
        f.write("\n")


def load_checkpoint(directory):
    """Read a checkpoint; returns (ModelParams, meta dict)."""
    directory = Path(directory)
    with open(directory / "manifest.json") as f:
        manifest = json.load(f)
    raw = (directory / "weights.bin").read_bytes()
    if len(raw) != manifest["total_bytes"]:
        raise ContractError(
            f"weights.bin holds {len(raw)} bytes, manifest expects {manifest['total_bytes']}"
        )
    tensors: dict[str, Tensor] = {}
    for entry in manifest["tensors"]:
        if entry["dtype"] != "float32":
            raise ContractError(f"unsupported dtype {entry['dtype']!r} in checkpoint")
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        data = np.frombuffer(
            raw, dtype="<f4", count=count, offset=entry["offset"]
        ).reshape(entry["shape"])
        tensors[entry["name"]] = Tensor(data.astype(np.float32), requires_grad=True)
    return ModelParams(tensors), manifest.get("meta", {})
