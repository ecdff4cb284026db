"""Ray rendering drivers and readouts.

Three renderers share the epipolar gather and the transformer trunk:

- gnt: full alternating view/ray attention, readout by mean-pool + MLP.
- volumetric: view aggregation only, a per-point color/density head,
  and classic emission-absorption quadrature along the ray.
- gnt-ar: the trunk's per-point features decoded far-to-near by a
  causal autoregressive decoder instead of the pooled readout.

Quadrature convention: for ordered samples t_1 < ... < t_M inside
[t_near, t_far], segment lengths are delta_i = t_{i+1} - t_i with the
last segment closed by the far plane, delta_M = t_far - t_M.
Transmittance is the exponential of the negative exclusive running sum
of sigma * delta, and sample weights are transmittance times alpha.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import (
    Camera,
    Ray,
    SampleSet,
    epipolar_gather_batch,
    positional_encode,
    rays_for_pixels,
    sample_uniform_batch,
)
from .imagefeat import EncoderConfig, FeatureMap, encode_image
from .model import (
    AttentionRecord,
    GNTConfig,
    ModelParams,
    gnt_forward_batch,
    ray_attention,
    trunk_features,
    view_aggregate_batch,
    volumetric_head,
)
from .tensor import (
    ContractError,
    Tensor,
    concat,
    cumsum,
    exp,
    gather_rows,
    layernorm,
    matmul,
    narrow,
    neg,
    relu,
    reshape,
    sigmoid,
)

__all__ = [
    "RadianceSample",
    "RenderOutput",
    "SamplerConfig",
    "Source",
    "RENDERERS",
    "n_workers",
    "prepare_sources",
    "volume_render_quadrature",
    "volume_render_batch",
    "render_rays",
    "render_pixel_gnt",
    "render_pixel_volumetric",
    "render_image",
    "depth_from_weights",
    "depth_from_ray_attention",
    "ray_attention_weights",
    "view_importance",
    "ar_decode",
    "fine_sample",
]

RENDERERS = ("gnt", "volumetric", "gnt-ar")


def n_workers() -> int:
    """Worker count for render tiling, from the GNT_THREADS env var."""
    try:
        return max(1, int(os.environ.get("GNT_THREADS", "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class RadianceSample:
    """Color and density of one point sample; color in [0, 1]."""

    color: np.ndarray
    sigma: float

    def __post_init__(self):
        c = np.asarray(self.color, dtype=np.float64).reshape(3)
        if self.sigma < 0:
            raise ContractError(f"density must be non-negative, got {self.sigma}")
        if c.min() < 0.0 or c.max() > 1.0:
            raise ContractError("sample color must lie in [0, 1]")
        object.__setattr__(self, "color", c)


@dataclass
class RenderOutput:
    rgb: np.ndarray
    depth: float | None = None
    view_choice: int | None = None
    attn: AttentionRecord | None = None


@dataclass(frozen=True)
class SamplerConfig:
    """Ray sampling plan: interval, coarse count, optional fine count."""

    near: float
    far: float
    n_coarse: int = 192
    n_fine: int = 0
    stratified: bool = False

    def __post_init__(self):
        if not (0.0 < self.near < self.far):
            raise ContractError(f"need 0 < near < far, got ({self.near}, {self.far})")
        if self.n_coarse < 1 or self.n_fine < 0:
            raise ContractError("need n_coarse >= 1 and n_fine >= 0")


@dataclass(frozen=True)
class Source:
    """One source view: its camera and encoded feature grid."""

    camera: Camera
    features: FeatureMap


def prepare_sources(
    cams: Sequence[Camera],
    images: Sequence[np.ndarray],
    enc_cfg: EncoderConfig,
    params: ModelParams,
) -> list[Source]:
    """Encode each source image once; reused across all rendered rays."""
    if len(cams) != len(images):
        raise ContractError("one image per source camera required")
    return [
        Source(cam, encode_image(img, enc_cfg, params, source_view_id=i))
        for i, (cam, img) in enumerate(zip(cams, images))
    ]


def volume_render_quadrature(samples: Sequence[RadianceSample], ts, t_far: float):
    """Emission-absorption quadrature for one ray (plain numpy).

    Returns (rgb (3,), weights (M,), transmittance (M,)) where
    transmittance[i] is the survival probability up to sample i and
    weights sum to at most 1.
    """
    ts = np.asarray(ts, dtype=np.float64).reshape(-1)
    if len(samples) != ts.shape[0]:
        raise ContractError("one sample per t required")
    if ts.shape[0] == 0:
        raise ContractError("need at least one sample")
    if np.any(np.diff(ts) <= 0):
        raise ContractError("ts must be strictly increasing")
    if t_far < ts[-1]:
        raise ContractError(f"t_far {t_far} precedes last sample {ts[-1]}")
    sigmas = np.array([s.sigma for s in samples], dtype=np.float64)
    colors = np.stack([s.color for s in samples])
    deltas = np.empty_like(ts)
    deltas[:-1] = np.diff(ts)
    deltas[-1] = t_far - ts[-1]
    tau = sigmas * deltas
    acc = np.concatenate([[0.0], np.cumsum(tau)[:-1]])
    trans = np.exp(-acc)
    alphas = 1.0 - np.exp(-tau)
    weights = trans * alphas
    rgb = (weights[:, None] * colors).sum(axis=0)
    return rgb, weights, trans


def volume_render_batch(colors: Tensor, sigmas: Tensor, ts: np.ndarray, t_far: float):
    """Differentiable quadrature over a batch: colors (R, M, 3), sigmas
    (R, M), ts (R, M). Returns (rgb Tensor (R, 3), weights Tensor (R, M))."""
    r, m = sigmas.shape
    deltas = np.empty_like(ts)
    deltas[:, :-1] = np.diff(ts, axis=1)
    deltas[:, -1] = t_far - ts[:, -1]
    dtype = sigmas.dtype
    tau = sigmas * Tensor(deltas.astype(dtype))
    trans = exp(neg(cumsum(tau, axis=1, exclusive=True)))
    alphas = 1.0 - exp(neg(tau))
    weights = trans * alphas
    rgb = (reshape(weights, (r, m, 1)) * colors).sum(axis=1)
    return rgb, weights


def _gather_ray_batch(origins, dirs, ts, sources: Sequence[Source], cfg: GNTConfig):
    """Epipolar tokens and encodings for K rays with M samples each."""
    k, m = ts.shape
    points = origins[:, None, :] + ts[..., None] * dirs[:, None, :]
    flat_pts = points.reshape(k * m, 3)
    flat_dirs = np.repeat(dirs, m, axis=0)
    cams = [s.camera for s in sources]
    fms = [s.features for s in sources]
    tokens, valid, delta = epipolar_gather_batch(flat_pts, flat_dirs, cams, fms)
    n = len(sources)
    d = fms[0].dim
    tokens = reshape(tokens, (k, m, n, d))
    valid = valid.reshape(k, m, n)
    delta = delta.reshape(k, m, n, 4)
    x_enc = positional_encode(points, cfg.pos_enc_L)
    d_enc = positional_encode(dirs, cfg.pos_enc_L)
    return tokens, valid, delta, x_enc, d_enc


def ray_attention_weights(record: AttentionRecord) -> np.ndarray:
    """Per-point weights from the last ray-attention block: average over
    heads and query points, renormalized to sum to one per ray."""
    if not record.ray:
        raise ContractError("record holds no ray attention")
    last = record.ray[-1]
    w = last.mean(axis=1).mean(axis=1)
    return w / np.maximum(w.sum(axis=1, keepdims=True), 1e-12)


def depth_from_weights(weights: np.ndarray, ts: np.ndarray) -> np.ndarray:
    """Expected ray parameter under (re)normalized per-point weights."""
    w = weights / np.maximum(weights.sum(axis=1, keepdims=True), 1e-12)
    return (w * ts).sum(axis=1)


def depth_from_ray_attention(record: AttentionRecord, ts: np.ndarray | None = None) -> np.ndarray:
    """Depth readout: expected sample parameter under the last block's
    renormalized ray-attention weights."""
    if ts is None:
        ts = record.ts
    if ts is None:
        raise ContractError("no sample parameters available for depth")
    return (ray_attention_weights(record) * ts).sum(axis=1)


def view_importance(record: AttentionRecord) -> np.ndarray:
    """Dominant source view per ray from the last view-attention block.

    Per point, attention is averaged over channels and the strongest
    view taken; per ray, the most frequent choice wins. Ties resolve to
    the lowest view index at both stages.
    """
    if not record.view:
        raise ContractError("record holds no view attention")
    last = record.view[-1]
    per_point = last.mean(axis=3).argmax(axis=2)
    r, _ = per_point.shape
    n = last.shape[2]
    counts = np.zeros((r, n), dtype=np.int64)
    for j in range(n):
        counts[:, j] = (per_point == j).sum(axis=1)
    return counts.argmax(axis=1)


def _sample_pdf_rows(ts, weights, n_fine, t_near, t_far, rng) -> np.ndarray:
    """Row-wise inverse-CDF draws from the piecewise-constant weight
    distribution whose bins are the coarse samples' midpoint cells,
    closed by the near/far planes."""
    k, m = ts.shape
    edges = np.empty((k, m + 1))
    edges[:, 0] = t_near
    edges[:, -1] = t_far
    edges[:, 1:-1] = 0.5 * (ts[:, :-1] + ts[:, 1:])
    pdf = np.asarray(weights, dtype=np.float64) + 1e-8
    pdf = pdf / pdf.sum(axis=1, keepdims=True)
    cdf = np.concatenate([np.zeros((k, 1)), np.cumsum(pdf, axis=1)], axis=1)
    cdf[:, -1] = 1.0
    u = rng.random((k, n_fine))
    idx = (cdf[:, None, :-1] <= u[:, :, None]).sum(axis=2) - 1
    idx = np.clip(idx, 0, m - 1)
    c0 = np.take_along_axis(cdf, idx, axis=1)
    c1 = np.take_along_axis(cdf, idx + 1, axis=1)
    e0 = np.take_along_axis(edges, idx, axis=1)
    e1 = np.take_along_axis(edges, idx + 1, axis=1)
    frac = np.where(c1 > c0, (u - c0) / np.maximum(c1 - c0, 1e-12), 0.5)
    return e0 + frac * (e1 - e0)


def _strictly_increasing_rows(merged: np.ndarray) -> np.ndarray:
    # Exact collisions after merging are vanishingly rare but would
    # break interval math downstream.
    for row in merged:
        for i in range(1, row.size):
            if row[i] <= row[i - 1]:
                row[i] = np.nextafter(row[i - 1], np.inf)
    return merged


def fine_sample(ray: Ray, ts: np.ndarray, weights: np.ndarray, n_fine: int, rng) -> SampleSet:
    """Importance-sample n_fine extra ts by inverse-CDF over the coarse
    weight distribution, merged with the coarse ts into one SampleSet."""
    ts = np.asarray(ts, dtype=np.float64).reshape(-1)
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    if ts.shape != weights.shape:
        raise ContractError("ts and weights disagree in length")
    if n_fine < 1:
        raise ContractError("need n_fine >= 1")
    fine = _sample_pdf_rows(ts[None], weights[None], n_fine, ray.t_near, ray.t_far, rng)
    merged = _strictly_increasing_rows(
        np.sort(np.concatenate([ts[None], fine], axis=1), axis=1)
    )[0]
    return SampleSet(merged, ray.at(merged))


def _ar_forward(tokens, valid, delta, x_enc, d_enc, ts, cfg, params, capture_attn):
    """Trunk features then autoregressive decode (full causal pass)."""
    feats, record = trunk_features(
        tokens, valid, delta, x_enc, d_enc, cfg, params, capture_attn
    )
    rgb = ar_decode(feats, x_enc, d_enc, ts, cfg, params, mode="full")
    return rgb, record


def _ar_readout(h_last: Tensor, cfg: GNTConfig, params: ModelParams) -> Tensor:
    h = layernorm(h_last, params["ar.final_ln.g"], params["ar.final_ln.b"])
    h = relu(matmul(h, params["ar.rgb1.w"]) + params["ar.rgb1.b"])
    rgb = matmul(h, params["ar.rgb2.w"]) + params["ar.rgb2.b"]
    return sigmoid(rgb) if cfg.rgb_sigmoid else rgb


def _ar_sequence(feats, x_enc, d_enc, ts, cfg, params):
    """Build the decoder input sequence: per-point tokens ordered far to
    near, then the encoded ray direction as the final query token."""
    r, m, dim = feats.shape
    dtype = params["final.ln.g"].dtype
    order = np.argsort(-np.asarray(ts), axis=1, kind="stable")
    flat_order = (order + np.arange(r)[:, None] * m).reshape(-1)
    feats_flat = reshape(feats, (r * m, dim))
    feats_sorted = reshape(gather_rows(feats_flat, flat_order), (r, m, dim))
    xe = np.take_along_axis(np.asarray(x_enc), order[..., None], axis=1)
    token_in = concat([feats_sorted, Tensor(xe.astype(dtype))], axis=-1)
    tokens = matmul(token_in, params["ar.token.w"]) + params["ar.token.b"]
    dir_tok = matmul(Tensor(d_enc.astype(dtype)), params["ar.dir.w"]) + params["ar.dir.b"]
    seq = concat([tokens, reshape(dir_tok, (r, 1, dim))], axis=1)
    return seq


def ar_decode(
    feats: Tensor,
    x_enc: np.ndarray,
    d_enc: np.ndarray,
    ts: np.ndarray,
    cfg: GNTConfig,
    params: ModelParams,
    mode: str = "full",
) -> Tensor:
    """Autoregressive color decode over a ray's per-point features.

    The decoder consumes the points farthest-first and finishes with a
    query token built from the encoded ray direction; that token's
    output becomes the color. Modes:

    - 'full': one causal pass over the whole sequence (training path).
    - 'cached': incremental decoding with per-layer key/value caches,
      O(sequence) work per step (inference path).
    - 'naive': re-runs the full prefix at every step; the reference the
      cache is checked against.

    All three produce the same color up to float reduction order.
    """
    if mode not in ("full", "cached", "naive"):
        raise ContractError(f"unknown ar_decode mode {mode!r}")
    seq = _ar_sequence(feats, x_enc, d_enc, ts, cfg, params)
    r, s, dim = seq.shape
    if mode == "full":
        out = _ar_causal_pass(seq, cfg, params)
        last = reshape(narrow(out, 1, s - 1, 1), (r, dim))
        return _ar_readout(last, cfg, params)
    if mode == "naive":
        last = None
        for k in range(1, s + 1):
            prefix = narrow(seq, 1, 0, k)
            out = _ar_causal_pass(prefix, cfg, params)
            last = reshape(narrow(out, 1, k - 1, 1), (r, dim))
        return _ar_readout(last, cfg, params)
    return _ar_readout(_ar_cached_pass(seq, cfg, params), cfg, params)


def _causal_bias(s: int, dtype) -> Tensor:
    bias = np.triu(np.full((s, s), -1e30), k=1).astype(dtype)
    return Tensor(bias)


def _ar_causal_pass(seq: Tensor, cfg: GNTConfig, params: ModelParams) -> Tensor:
    r, s, dim = seq.shape
    bias = _causal_bias(s, seq.dtype)
    x = seq
    for l in range(cfg.ar_blocks):
        h = layernorm(x, params[f"ar{l}.ln1.g"], params[f"ar{l}.ln1.b"])
        out, _ = ray_attention(h, params, f"ar{l}", cfg.ray_heads, attn_bias=bias)
        x = x + out
        h2 = layernorm(x, params[f"ar{l}.ln2.g"], params[f"ar{l}.ln2.b"])
        h2 = relu(matmul(h2, params[f"ar{l}.ffn1.w"]) + params[f"ar{l}.ffn1.b"])
        x = x + matmul(h2, params[f"ar{l}.ffn2.w"]) + params[f"ar{l}.ffn2.b"]
    return x


def _ar_cached_pass(seq: Tensor, cfg: GNTConfig, params: ModelParams) -> Tensor:
    """Incremental causal decode with per-layer K/V caches (numpy only;
    inference path). Returns the final token's output (R, dim)."""
    data = seq.data
    r, s, dim = data.shape
    heads = cfg.ray_heads
    hd = dim // heads
    scale = float(1.0 / np.sqrt(hd))

    def p(name):
        return params[name].data

    caches = [
        {"k": np.zeros((r, heads, 0, hd), data.dtype), "v": np.zeros((r, heads, 0, hd), data.dtype)}
        for _ in range(cfg.ar_blocks)
    ]

    def ln(x, g, b, eps=1e-5):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        return xc / np.sqrt(var + eps) * g + b

    last = None
    for i in range(s):
        x = data[:, i : i + 1, :]
        for l in range(cfg.ar_blocks):
            h = ln(x, p(f"ar{l}.ln1.g"), p(f"ar{l}.ln1.b"))
            q = (h @ p(f"ar{l}.q.w") + p(f"ar{l}.q.b")).reshape(r, 1, heads, hd).swapaxes(1, 2)
            kn = (h @ p(f"ar{l}.k.w") + p(f"ar{l}.k.b")).reshape(r, 1, heads, hd).swapaxes(1, 2)
            vn = (h @ p(f"ar{l}.v.w") + p(f"ar{l}.v.b")).reshape(r, 1, heads, hd).swapaxes(1, 2)
            cache = caches[l]
            cache["k"] = np.concatenate([cache["k"], kn], axis=2)
            cache["v"] = np.concatenate([cache["v"], vn], axis=2)
            scores = (q @ cache["k"].swapaxes(-1, -2)) * scale
            scores -= scores.max(axis=-1, keepdims=True)
            e = np.exp(scores)
            attn = e / e.sum(axis=-1, keepdims=True)
            mixed = (attn @ cache["v"]).swapaxes(1, 2).reshape(r, 1, dim)
            x = x + mixed @ p(f"ar{l}.out.w") + p(f"ar{l}.out.b")
            h2 = ln(x, p(f"ar{l}.ln2.g"), p(f"ar{l}.ln2.b"))
            h2 = np.maximum(h2 @ p(f"ar{l}.ffn1.w") + p(f"ar{l}.ffn1.b"), 0.0)
            x = x + h2 @ p(f"ar{l}.ffn2.w") + p(f"ar{l}.ffn2.b")
        last = x
    return Tensor(last.reshape(r, dim))


def render_rays(
    origins: np.ndarray,
    dirs: np.ndarray,
    sources: Sequence[Source],
    cfg: GNTConfig,
    params: ModelParams,
    sampler: SamplerConfig,
    renderer: str = "gnt",
    capture_attn: bool = False,
    rng=None,
):
    """Render a batch of rays; returns (rgb Tensor (K, 3), aux dict).

    aux carries 'ts' (K, M), 'record' (AttentionRecord or None), and
    'weights' (K, M numpy) for the volumetric renderer. When the
    sampler requests a fine pass, the coarse pass supplies the proposal
    distribution (quadrature weights for volumetric, renormalized ray
    attention otherwise) and the final pass runs on the merged samples.
    """
    if renderer not in RENDERERS:
        raise ContractError(f"unknown renderer {renderer!r}; choose from {RENDERERS}")
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    ts, _ = sample_uniform_batch(
        origins, dirs, sampler.near, sampler.far, sampler.n_coarse,
        sampler.stratified, rng,
    )
    if sampler.n_fine > 0:
        need_attn = renderer != "volumetric"
        _, coarse_aux = _render_rays_at(
            origins, dirs, ts, sources, cfg, params, sampler.far, renderer, need_attn
        )
        if renderer == "volumetric":
            proposal = coarse_aux["weights"]
        else:
            proposal = ray_attention_weights(coarse_aux["record"])
        if rng is None:
            rng = np.random.default_rng(0)
        fine = _sample_pdf_rows(ts, proposal, sampler.n_fine, sampler.near, sampler.far, rng)
        ts = _strictly_increasing_rows(
            np.sort(np.concatenate([ts, fine], axis=1), axis=1)
        )
    return _render_rays_at(
        origins, dirs, ts, sources, cfg, params, sampler.far, renderer, capture_attn
    )


def _render_rays_at(origins, dirs, ts, sources, cfg, params, t_far, renderer, capture_attn):
    tokens, valid, delta, x_enc, d_enc = _gather_ray_batch(origins, dirs, ts, sources, cfg)
    aux: dict = {"ts": ts, "record": None}
    if renderer == "gnt":
        rgb, record = gnt_forward_batch(
            tokens, valid, delta, x_enc, d_enc, cfg, params, capture_attn
        )
    elif renderer == "volumetric":
        feats, record = view_aggregate_batch(tokens, valid, delta, cfg, params, capture_attn)
        colors, sigmas = volumetric_head(feats, cfg, params)
        rgb, weights = volume_render_batch(colors, sigmas, ts, t_far)
        aux["weights"] = weights.data.copy()
    else:
        rgb, record = _ar_forward(tokens, valid, delta, x_enc, d_enc, ts, cfg, params, capture_attn)
    if record is not None:
        record.ts = ts
    aux["record"] = record
    return rgb, aux


def _pixel_output(rgb, aux, renderer) -> RenderOutput:
    record = aux["record"]
    depth = None
    view_choice = None
    if renderer == "volumetric" and "weights" in aux:
        depth = float(depth_from_weights(aux["weights"], aux["ts"])[0])
    if record is not None:
        if record.ray:
            depth = float(depth_from_ray_attention(record)[0])
        if record.view:
            view_choice = int(view_importance(record)[0])
    return RenderOutput(
        rgb=rgb.data[0].copy(), depth=depth, view_choice=view_choice, attn=record
    )


def render_pixel_gnt(
    cam: Camera,
    u: float,
    v: float,
    sources: Sequence[Source],
    cfg: GNTConfig,
    params: ModelParams,
    sampler: SamplerConfig,
    capture_attn: bool = False,
    rng=None,
) -> RenderOutput:
    """Render one pixel with the attention readout."""
    origins, dirs = rays_for_pixels(cam, np.array([u]), np.array([v]))
    rgb, aux = render_rays(
        origins, dirs, sources, cfg, params, sampler, "gnt", capture_attn, rng
    )
    return _pixel_output(rgb, aux, "gnt")


def render_pixel_volumetric(
    cam: Camera,
    u: float,
    v: float,
    sources: Sequence[Source],
    cfg: GNTConfig,
    params: ModelParams,
    sampler: SamplerConfig,
    capture_attn: bool = False,
    rng=None,
) -> RenderOutput:
    """Render one pixel with the per-point density head and quadrature."""
    origins, dirs = rays_for_pixels(cam, np.array([u]), np.array([v]))
    rgb, aux = render_rays(
        origins, dirs, sources, cfg, params, sampler, "volumetric", capture_attn, rng
    )
    return _pixel_output(rgb, aux, "volumetric")


def render_image(
    cam: Camera,
    sources: Sequence[Source],
    cfg: GNTConfig,
    params: ModelParams,
    sampler: SamplerConfig,
    renderer: str = "gnt",
    capture: bool = False,
    chunk: int = 1024,
    rng=None,
):
    """Render a full image in ray chunks; returns (rgb (H, W, 3), aux).

    With capture=True aux gains 'depth' (H, W) and, for attention
    renderers, 'view_importance' (H, W) maps. Chunks are distributed
    over GNT_THREADS workers; results are written into preallocated
    buffers so the worker count never changes the output.
    """
    h, w = cam.height, cam.width
    us, vs = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    origins, dirs = rays_for_pixels(cam, us.reshape(-1), vs.reshape(-1))
    n = origins.shape[0]
    img = np.zeros((n, 3), dtype=np.float64)
    depth = np.zeros(n, dtype=np.float64) if capture else None
    view_map = np.zeros(n, dtype=np.int64) if capture else None
    spans = [(s, min(s + chunk, n)) for s in range(0, n, chunk)]

    def run(span):
        s, e = span
        rgb, aux = render_rays(
            origins[s:e], dirs[s:e], sources, cfg, params, sampler,
            renderer, capture, rng,
        )
        img[s:e] = rgb.data
        if capture:
            record = aux["record"]
            if renderer == "volumetric":
                depth[s:e] = depth_from_weights(aux["weights"], aux["ts"])
            elif record is not None and record.ray:
                depth[s:e] = depth_from_ray_attention(record)
            if record is not None and record.view:
                view_map[s:e] = view_importance(record)

    workers = n_workers()
    if workers > 1 and len(spans) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, spans))
    else:
        for span in spans:
            run(span)
    aux_out = {}
    if capture:
        aux_out["depth"] = depth.reshape(h, w)
        if renderer != "volumetric":
            aux_out["view_importance"] = view_map.reshape(h, w)
    return img.reshape(h, w, 3), aux_out
