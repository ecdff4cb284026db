"""Training loop: view sampling, MSE loss, Adam, exponential lr decay.

Per step a target view and a handful of nearby source views are drawn,
a batch of random target pixels is rendered with the chosen renderer
and the squared error against the ground-truth pixels is backpropped
through the whole stack, image encoder included. The encoder and the
rest of the model form two optimizer groups with separate base
learning rates.
"""

from __future__ import annotations

import json
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset
from .geometry import rays_for_pixels
from .imagefeat import EncoderConfig
from .model import GNTConfig, ModelParams, init_params, save_checkpoint
from .render import RENDERERS, SamplerConfig, n_workers, prepare_sources, render_rays
from .tensor import ContractError, Graph, NumericError, ShapeError, Tensor, tsum


@dataclass
class TrainConfig:
    """Optimization settings. Desk-scale defaults; the larger published
    settings (4096 rays, 250k steps, views from [8,12]) stay reachable
    through the same fields."""

    rays_per_step: int = 512
    total_steps: int = 2000
    lr_encoder: float = 1e-3
    lr_gnt: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    k_range: tuple = (1.0, 3.0)
    n_views_range: tuple = (2, 4)
    n_coarse: int = 32
    n_fine: int = 0
    fine_every: int = 1
    stratified: bool = True
    renderer: str = "gnt"
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.rays_per_step < 1 or self.total_steps < 1:
            raise ContractError("rays_per_step and total_steps must be positive")
        # Zero freezes a group; negative rates are always a mistake.
        if self.lr_encoder < 0 or self.lr_gnt < 0:
            raise ContractError("learning rates must be nonnegative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise ContractError("invalid adam constants")
        if len(self.k_range) != 2 or self.k_range[0] > self.k_range[1] or self.k_range[0] < 1:
            raise ContractError(f"bad k_range {self.k_range}")
        n_lo, n_hi = self.n_views_range
        if n_lo > n_hi or n_lo < 1:
            raise ContractError(f"bad n_views_range {self.n_views_range}")
        if self.renderer not in RENDERERS:
            raise ContractError(f"renderer must be one of {RENDERERS}, got {self.renderer!r}")
        if self.n_coarse < 1 or self.n_fine < 0:
            raise ContractError("bad sample counts")
        if self.fine_every < 1:
            raise ContractError("fine_every must be >= 1")


@dataclass
class RayBatch:
    """Rays with their ground-truth pixel colors from one target view."""

    origins: np.ndarray
    directions: np.ndarray
    colors: np.ndarray
    target_view: int
    us: np.ndarray = field(default=None, repr=False)
    vs: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.colors.min() < 0.0 or self.colors.max() > 1.0:
            raise ContractError("target colors must lie in [0, 1]")
        if len(self.origins) != len(self.colors):
            raise ShapeError("ray count does not match color count")

    @property
    def n_rays(self) -> int:
        return len(self.origins)


def lr_at(step: int, cfg: TrainConfig) -> tuple[float, float]:
    """Exponential decay to a tenth of the base rate at total_steps."""
    factor = 0.1 ** (step / cfg.total_steps)
    return cfg.lr_encoder * factor, cfg.lr_gnt * factor


def is_fine_step(step: int, cfg: TrainConfig) -> bool:
    """Whether this step renders with the two-pass hierarchical sampler.

    With n_fine > 0 every fine_every-th step resamples along the ray
    from the coarse pass before the supervised render; the remaining
    steps use the plain coarse sampler. The two-pass step costs several
    times a coarse one, so spacing them out buys exposure to the
    resampled point layout without blowing up the wallclock budget.
    """
    return cfg.n_fine > 0 and (step + 1) % cfg.fine_every == 0


def mse_loss(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Mean squared error over rays and channels."""
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} does not match targets {gt.shape}")
    diff = pred - Tensor(gt.astype(pred.dtype))
    return (diff * diff).mean()


def _optical_axes(ds: Dataset) -> np.ndarray:
    return np.stack([cam.rotation[:, 2] for cam in ds.cameras])


def sample_source_target(ds: Dataset, cfg: TrainConfig, rng: np.random.Generator):
    """Pick a target view and N source views from its angular neighborhood.

    N is uniform over n_views_range and the pool holds the ceil(k*N)
    views nearest in optical-axis angle, k uniform over k_range. The
    target itself is never a source.
    """
    n_lo, n_hi = cfg.n_views_range
    if ds.n_views <= n_hi:
        raise ContractError(
            f"dataset has {ds.n_views} views; need more than max n_views {n_hi}"
        )
    target = int(rng.integers(ds.n_views))
    n = int(rng.integers(n_lo, n_hi + 1))
    k = float(rng.uniform(*cfg.k_range))
    axes = _optical_axes(ds)
    cos = np.clip(axes @ axes[target], -1.0, 1.0)
    order = [i for i in np.argsort(np.arccos(cos), kind="stable") if i != target]
    pool = order[: math.ceil(k * n)]
    if len(pool) < n:
        warnings.warn(f"source pool {len(pool)} smaller than N={n}; using all candidates")
        pool = order
    sources = rng.choice(np.array(pool), size=n, replace=False)
    return target, [int(i) for i in sources]


def sample_ray_batch(ds: Dataset, target: int, n_rays: int, rng: np.random.Generator) -> RayBatch:
    """Uniformly random pixels of the target view."""
    us = rng.integers(0, ds.width, n_rays)
    vs = rng.integers(0, ds.height, n_rays)
    origins, dirs = rays_for_pixels(ds.cameras[target], us.astype(float), vs.astype(float))
    colors = ds.images[target][vs, us].astype(np.float64)
    return RayBatch(origins, dirs, colors, target, us=us, vs=vs)


@dataclass
class AdamState:
    """First/second moment estimates per parameter plus the step count."""

    m: dict
    v: dict
    t: int = 0

    @classmethod
    def for_params(cls, params: ModelParams) -> "AdamState":
        return cls(
            m={name: np.zeros_like(p.data) for name, p in params.items()},
            v={name: np.zeros_like(p.data) for name, p in params.items()},
        )


def adam_step(
    params: ModelParams,
    grads: dict,
    state: AdamState,
    lrs: tuple[float, float],
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place.

    grads maps parameter names to gradient arrays; parameters without
    an entry are left alone. Names starting with "encoder." take the
    first learning rate, everything else the second.
    """
    lr_enc, lr_gnt = lrs
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} vs parameter {p.data.shape} for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        lr = lr_enc if name.startswith("encoder.") else lr_gnt
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype)


def _shard_slices(n: int, shards: int) -> list:
    return [s for s in np.array_split(np.arange(n), shards) if len(s)]


def train_step(
    ds: Dataset,
    params: ModelParams,
    model_cfg: GNTConfig,
    enc_cfg: EncoderConfig,
    cfg: TrainConfig,
    sampler: SamplerConfig,
    rng: np.random.Generator,
) -> tuple[float, RayBatch]:
    """Sample one batch, accumulate gradients into param.grad, return loss.

    With several workers configured the ray batch is split into shards
    processed in a fixed order, so gradient accumulation stays
    deterministic for a given shard count.
    """
    target, source_ids = sample_source_target(ds, cfg, rng)
    batch = sample_ray_batch(ds, target, cfg.rays_per_step, rng)
    cams = [ds.cameras[i] for i in source_ids]
    imgs = [ds.images[i] for i in source_ids]
    total = batch.n_rays * 3
    loss_value = 0.0
    for idx in _shard_slices(batch.n_rays, n_workers()):
        with Graph() as g:
            sources = prepare_sources(cams, imgs, enc_cfg, params)
            rgb, _ = render_rays(
                batch.origins[idx],
                batch.directions[idx],
                sources,
                model_cfg,
                params,
                sampler,
                cfg.renderer,
                rng=rng,
            )
            diff = rgb - Tensor(batch.colors[idx].astype(rgb.dtype))
            loss = tsum(diff * diff) * (1.0 / total)
            g.backward(loss, accumulate=True)
        loss_value += float(loss.item())
    return loss_value, batch


def _dump_diagnostics(path: Path, step: int, batch: RayBatch, loss: float, sources) -> None:
    payload = {
        "step": step,
        "loss": repr(loss),
        "target_view": batch.target_view,
        "source_views": list(sources) if sources else None,
        "us": batch.us.tolist() if batch.us is not None else None,
        "vs": batch.vs.tolist() if batch.vs is not None else None,
    }
    path.write_text(json.dumps(payload, indent=2))


def train_loop(
    ds: Dataset,
    model_cfg: GNTConfig,
    enc_cfg: EncoderConfig,
    cfg: TrainConfig,
    out_dir,
    params: ModelParams | None = None,
) -> tuple[ModelParams, Path]:
    """Full optimization run. Returns the final parameters and log path.

    Writes one JSON line per step to log.jsonl, the resolved
    configs to config.json, periodic checkpoints when
    cfg.checkpoint_every > 0 and always a final one. A non-finite loss
    aborts with a diagnostic dump of the offending batch.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        params = init_params(model_cfg, enc_cfg, seed=cfg.seed)
    state = AdamState.for_params(params)
    fine_sampler = SamplerConfig(
        near=ds.near, far=ds.far, n_coarse=cfg.n_coarse, n_fine=cfg.n_fine,
        stratified=cfg.stratified,
    )
    coarse_sampler = SamplerConfig(
        near=ds.near, far=ds.far, n_coarse=cfg.n_coarse, n_fine=0,
        stratified=cfg.stratified,
    )
    meta = {
        "model": asdict(model_cfg),
        "encoder": asdict(enc_cfg),
        "train": asdict(cfg),
    }
    (out / "config.json").write_text(json.dumps(meta, indent=2, default=list))
    log_path = out / "log.jsonl"
    with open(log_path, "w") as log:
        for step in range(cfg.total_steps):
            t0 = time.perf_counter()
            params.zero_grad()
            sampler = fine_sampler if is_fine_step(step, cfg) else coarse_sampler
            loss, batch = train_step(ds, params, model_cfg, enc_cfg, cfg, sampler, rng)
            if not math.isfinite(loss):
                _dump_diagnostics(out / "diagnostic_dump.json", step, batch, loss, None)
                raise NumericError(f"non-finite loss {loss!r} at step {step}; batch dumped")
            lrs = lr_at(step, cfg)
            grads = {name: p.grad for name, p in params.items() if p.grad is not None}
            adam_step(params, grads, state, lrs, cfg.beta1, cfg.beta2, cfg.eps)
            line = {
                "step": step,
                "loss": loss,
                "lr_enc": lrs[0],
                "lr_gnt": lrs[1],
                "wallclock_ms": (time.perf_counter() - t0) * 1e3,
            }
            log.write(json.dumps(line) + "\n")
            log.flush()
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(out / f"ckpt_{step + 1:06d}", params, {**meta, "step": step + 1})
    save_checkpoint(out / "ckpt_final", params, {**meta, "step": cfg.total_steps})
    return params, log_path
