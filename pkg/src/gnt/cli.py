"""Command line entry point.

Subcommands: make-dataset, train, render, eval, attn-viz, gradcheck.
Exit codes: 0 success, 2 usage or input error, 3 numeric failure.
Options can also come from a JSON file via --config; explicit flags
win over the file, the file wins over built-in defaults. GNT_THREADS
caps worker counts everywhere.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .data import generate_scene, load_dataset, make_dataset, save_dataset, write_pfm, write_ppm
from .geometry import rays_for_pixels
from .imagefeat import EncoderConfig
from .metrics import MetricReport, avg_metric, compare
from .model import GNTConfig, init_params, load_checkpoint
from .render import RENDERERS, SamplerConfig, prepare_sources, render_image
from .tensor import ContractError, NumericError, ShapeError, grad_check
from .train import TrainConfig, mse_loss, train_loop

# View-index colors for the importance map, in [0, 1] rgb. View i uses
# entry i mod 12: red, blue, green, purple, orange, yellow, brown,
# pink, gray, cyan, olive, navy.
PALETTE = np.array(
    [
        (0.894, 0.102, 0.110),
        (0.216, 0.494, 0.722),
        (0.302, 0.686, 0.290),
        (0.596, 0.306, 0.639),
        (1.000, 0.498, 0.000),
        (1.000, 1.000, 0.200),
        (0.651, 0.337, 0.157),
        (0.969, 0.506, 0.749),
        (0.600, 0.600, 0.600),
        (0.000, 0.749, 0.769),
        (0.604, 0.604, 0.196),
        (0.000, 0.000, 0.502),
    ]
)

_TRAIN_DEFAULTS = {
    "steps": 2000,
    "rays": 512,
    "renderer": "gnt",
    "dim": 32,
    "ffn": 64,
    "heads": 4,
    "blocks": 3,
    "pos_l": 10,
    "ar_blocks": 2,
    "enc_down": "8,16",
    "enc_up": "16",
    "enc_dim": 16,
    "lr_encoder": 1e-3,
    "lr_gnt": 5e-4,
    "n_coarse": 32,
    "n_fine": 0,
    "fine_every": 1,
    "k_range": "1,3",
    "n_views_range": "2,4",
    "checkpoint_every": 0,
    "stratified": True,
    "seed": 0,
}

_DATASET_DEFAULTS = {
    "seed": 0,
    "n_views": 12,
    "prims": 3,
    "dims": "32x32",
    "shading": "lambertian",
    "specular": False,
    "ring_radius": 2.5,
}


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """Layer explicit flags over --config file values over defaults."""
    merged = dict(defaults)
    if getattr(args, "config", None):
        loaded = json.loads(Path(args.config).read_text())
        unknown = set(loaded) - set(defaults)
        if unknown:
            raise ContractError(f"unknown config keys {sorted(unknown)}")
        merged.update(loaded)
    for key in defaults:
        val = getattr(args, key, None)
        if val is not None:
            merged[key] = val
    return merged


def _int_tuple(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    return tuple(int(v) for v in str(text).split(",") if v != "")


def _float_tuple(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(float(v) for v in text)
    return tuple(float(v) for v in str(text).split(",") if v != "")


def _configs_from_meta(meta: dict) -> tuple[GNTConfig, EncoderConfig, dict]:
    m = dict(meta["model"])
    e = dict(meta["encoder"])
    e["down_channels"] = tuple(e["down_channels"])
    e["up_channels"] = tuple(e["up_channels"])
    return GNTConfig(**m), EncoderConfig(**e), meta.get("train", {})


def _sources_for(ds, exclude, enc_cfg, params):
    ids = [i for i in range(ds.n_views) if i not in exclude]
    cams = [ds.cameras[i] for i in ids]
    imgs = [ds.images[i] for i in ids]
    return prepare_sources(cams, imgs, enc_cfg, params)


def cmd_make_dataset(args) -> int:
    opt = _resolve(args, _DATASET_DEFAULTS)
    if opt["n_views"] < 2:
        print("need at least 2 views: one target plus sources", file=sys.stderr)
        return 2
    try:
        width, height = (int(v) for v in str(opt["dims"]).lower().split("x"))
    except ValueError:
        print(f"bad --dims {opt['dims']!r}, expected WxH like 32x32", file=sys.stderr)
        return 2
    scene = generate_scene(
        seed=opt["seed"], n_prims=opt["prims"], shading=opt["shading"],
        specular=opt["specular"],
    )
    ds = make_dataset(
        scene, n_views=opt["n_views"], ring_radius=opt["ring_radius"],
        width=width, height=height,
    )
    save_dataset(ds, args.out)
    summary = {
        "out": str(args.out),
        "n_views": ds.n_views,
        "width": ds.width,
        "height": ds.height,
        "near": ds.near,
        "far": ds.far,
        "n_prims": len(scene.primitives),
        "hit_fraction": float(np.mean([float((d < ds.far).mean()) for d in ds.depths])),
    }
    print(json.dumps(summary))
    return 0


def cmd_train(args) -> int:
    opt = _resolve(args, _TRAIN_DEFAULTS)
    ds = load_dataset(args.data)
    enc_cfg = EncoderConfig(
        down_channels=_int_tuple(opt["enc_down"]),
        up_channels=_int_tuple(opt["enc_up"]),
        out_dim=opt["enc_dim"],
    )
    model_cfg = GNTConfig(
        dim=opt["dim"], ffn_hidden=opt["ffn"], ray_heads=opt["heads"],
        n_blocks=opt["blocks"], pos_enc_L=opt["pos_l"], ar_blocks=opt["ar_blocks"],
    )
    train_cfg = TrainConfig(
        rays_per_step=opt["rays"], total_steps=opt["steps"],
        lr_encoder=opt["lr_encoder"], lr_gnt=opt["lr_gnt"],
        k_range=_float_tuple(opt["k_range"]),
        n_views_range=_int_tuple(opt["n_views_range"]),
        n_coarse=opt["n_coarse"], n_fine=opt["n_fine"], fine_every=opt["fine_every"],
        stratified=bool(opt["stratified"]), renderer=opt["renderer"],
        seed=opt["seed"], checkpoint_every=opt["checkpoint_every"],
    )
    train_loop(ds, model_cfg, enc_cfg, train_cfg, args.out)
    print(json.dumps({"out": str(args.out), "steps": train_cfg.total_steps}))
    return 0


def _load_for_render(args):
    ds = load_dataset(args.data)
    params, meta = load_checkpoint(args.ckpt)
    model_cfg, enc_cfg, train_meta = _configs_from_meta(meta)
    return ds, params, model_cfg, enc_cfg, train_meta


def cmd_render(args) -> int:
    ds, params, model_cfg, enc_cfg, train_meta = _load_for_render(args)
    if not 0 <= args.view < ds.n_views:
        print(f"view {args.view} outside dataset with {ds.n_views} views", file=sys.stderr)
        return 2
    renderer = args.renderer or train_meta.get("renderer", "gnt")
    n_fine = args.fine or 0
    sampler = SamplerConfig(
        near=ds.near, far=ds.far,
        n_coarse=args.coarse or train_meta.get("n_coarse", 32), n_fine=n_fine,
    )
    sources = _sources_for(ds, {args.view}, enc_cfg, params)
    rng = np.random.default_rng(args.seed) if n_fine else None
    img, aux = render_image(
        ds.cameras[args.view], sources, model_cfg, params, sampler, renderer,
        capture=bool(args.depth), rng=rng,
    )
    write_ppm(args.out, img)
    if args.depth:
        write_pfm(args.depth, aux["depth"].astype(np.float32))
    print(json.dumps({"out": str(args.out), "view": args.view, "renderer": renderer}))
    return 0


def cmd_eval(args) -> int:
    ds, params, model_cfg, enc_cfg, train_meta = _load_for_render(args)
    holdout = list(_int_tuple(args.holdout))
    bad = [k for k in holdout if not 0 <= k < ds.n_views]
    if bad:
        print(f"holdout views {bad} outside dataset with {ds.n_views} views", file=sys.stderr)
        return 2
    lpips_map = {}
    if args.lpips_file:
        raw = json.loads(Path(args.lpips_file).read_text())
        if isinstance(raw, dict):
            lpips_map = {int(k): float(v) for k, v in raw.items()}
        else:
            lpips_map = {k: float(raw) for k in holdout}
    renderer = args.renderer or train_meta.get("renderer", "gnt")
    sampler = SamplerConfig(
        near=ds.near, far=ds.far, n_coarse=args.coarse or train_meta.get("n_coarse", 32),
    )
    per_view = {}
    for k in holdout:
        if args.debug_gt:
            img = ds.images[k]
        else:
            sources = _sources_for(ds, set(holdout), enc_cfg, params)
            img, _ = render_image(ds.cameras[k], sources, model_cfg, params, sampler, renderer)
        per_view[k] = compare(img, ds.images[k], lpips_map.get(k))
    mean_psnr = float(np.mean([r.psnr for r in per_view.values()]))
    mean_ssim = float(np.mean([r.ssim for r in per_view.values()]))
    if lpips_map:
        mean_lpips = float(np.mean([r.lpips for r in per_view.values()]))
        mean = MetricReport(
            mean_psnr, mean_ssim, mean_lpips, avg_metric(mean_psnr, mean_ssim, mean_lpips)
        )
    else:
        mean = MetricReport(mean_psnr, mean_ssim)
    report = {
        "views": {str(k): r.to_dict() for k, r in per_view.items()},
        "mean": mean.to_dict(),
        "renderer": renderer,
    }
    print(json.dumps(report))
    return 0


def cmd_attn_viz(args) -> int:
    ds, params, model_cfg, enc_cfg, train_meta = _load_for_render(args)
    if not 0 <= args.view < ds.n_views:
        print(f"view {args.view} outside dataset with {ds.n_views} views", file=sys.stderr)
        return 2
    renderer = args.renderer or train_meta.get("renderer", "gnt")
    sampler = SamplerConfig(
        near=ds.near, far=ds.far, n_coarse=args.coarse or train_meta.get("n_coarse", 32),
    )
    sources = _sources_for(ds, {args.view}, enc_cfg, params)
    _, aux = render_image(
        ds.cameras[args.view], sources, model_cfg, params, sampler, renderer, capture=True
    )
    colors = PALETTE[aux["view_importance"] % len(PALETTE)]
    prefix = str(args.out_prefix)
    write_ppm(prefix + "_viewimportance.ppm", colors)
    write_pfm(prefix + "_depth.pfm", aux["depth"].astype(np.float32))
    print(json.dumps({
        "viewimportance": prefix + "_viewimportance.ppm",
        "depth": prefix + "_depth.pfm",
    }))
    return 0


GRADCHECK_GROUPS = (
    "encoder", "view blocks", "ray blocks", "rgb head", "volumetric head", "ar decoder"
)


def _gradcheck_group(name: str) -> str:
    if name.startswith("encoder."):
        return "encoder"
    if name.startswith(("view", "input.proj")):
        return "view blocks"
    if name.startswith(("ray", "final.ln")):
        return "ray blocks"
    if name.startswith("rgb."):
        return "rgb head"
    if name.startswith("vol."):
        return "volumetric head"
    if name.startswith("ar"):
        return "ar decoder"
    raise ContractError(f"parameter {name!r} belongs to no gradcheck group")


def run_gradcheck_tiny(seed: int = 0, tol: float = 1e-4, param_filter=None):
    """Finite-difference check of every parameter in 64-bit.

    One ray, 4 samples, 2 source views. The trunk runs once per loss
    evaluation and feeds all three readouts (pooled rgb, volumetric,
    autoregressive) so every parameter group gets a gradient without
    paying for three trunk passes. param_filter restricts which
    parameters get the finite-difference sweep (tests use it to probe a
    single group quickly); the CLI always sweeps everything. Returns
    (per-group report, passed).
    """
    from .data import ring_cameras
    from .geometry import sample_uniform_batch
    from .model import _linear, trunk_features, volumetric_head
    from .render import _gather_ray_batch, ar_decode, volume_render_batch
    from .tensor import relu, sigmoid, tmean

    enc_cfg = EncoderConfig(down_channels=(4, 8), up_channels=(8,), out_dim=8)
    model_cfg = GNTConfig(
        dim=8, ffn_hidden=16, ray_heads=2, n_blocks=2, pos_enc_L=4, ar_blocks=1
    )
    params = init_params(model_cfg, enc_cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    cams = ring_cameras(3, ring_radius=2.5, width=16, height=16, fov=0.9)
    imgs = [rng.random((16, 16, 3)) for _ in range(2)]
    origins, dirs = rays_for_pixels(cams[2], np.array([7.5]), np.array([7.5]))
    t_near, t_far = 1.5, 3.5
    ts, _ = sample_uniform_batch(origins, dirs, t_near, t_far, 4)
    targets = {renderer: rng.random((1, 3)) for renderer in RENDERERS}

    def loss_fn():
        sources = prepare_sources(cams[:2], imgs, enc_cfg, params)
        tokens, valid, delta, x_enc, d_enc = _gather_ray_batch(
            origins, dirs, ts, sources, model_cfg
        )
        feats, _ = trunk_features(tokens, valid, delta, x_enc, d_enc, model_cfg, params)
        pooled = tmean(feats, axis=1)
        rgb = sigmoid(_linear(relu(_linear(pooled, params, "rgb.fc1")), params, "rgb.fc2"))
        total = mse_loss(rgb, targets["gnt"])
        colors, sigmas = volumetric_head(feats, model_cfg, params)
        vol_rgb, _ = volume_render_batch(colors, sigmas, ts, t_far)
        total = total + mse_loss(vol_rgb, targets["volumetric"])
        ar_rgb = ar_decode(feats, x_enc, d_enc, ts, model_cfg, params, "full")
        return total + mse_loss(ar_rgb, targets["gnt-ar"])

    checked = {
        name: p
        for name, p in params.items()
        if param_filter is None or param_filter(name)
    }
    report = grad_check(loss_fn, checked, tol=tol)
    groups = {}
    for name, err in report.per_param.items():
        group = _gradcheck_group(name)
        worst_name, worst_err = groups.get(group, (None, -1.0))
        if err > worst_err:
            groups[group] = (name, err)
    return groups, report.passed


def cmd_gradcheck(args) -> int:
    if args.profile != "tiny":
        print(f"unknown gradcheck config {args.profile!r}", file=sys.stderr)
        return 2
    t0 = time.perf_counter()
    groups, passed = run_gradcheck_tiny(seed=args.seed or 0)
    elapsed = time.perf_counter() - t0
    worst_group = max(groups, key=lambda g: groups[g][1])
    for group in GRADCHECK_GROUPS:
        name, err = groups[group]
        status = "ok" if err < 1e-4 else "FAIL"
        print(f"{status:4s} {group:16s} worst {name} rel_err {err:.3e}")
    print(
        f"{'PASS' if passed else 'FAIL'} worst offender: {groups[worst_group][0]} "
        f"rel_err {groups[worst_group][1]:.3e} ({elapsed:.1f}s)"
    )
    return 0 if passed else 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gnt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-dataset", help="generate and save a synthetic ring dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-views", dest="n_views", type=int)
    p.add_argument("--prims", type=int)
    p.add_argument("--dims")
    p.add_argument("--shading", choices=("flat", "lambertian"))
    p.add_argument("--specular", action="store_true", default=None)
    p.add_argument("--ring-radius", dest="ring_radius", type=float)
    p.set_defaults(func=cmd_make_dataset)

    p = sub.add_parser("train", help="optimize a model on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--steps", type=int)
    p.add_argument("--rays", type=int)
    p.add_argument("--renderer", choices=RENDERERS)
    p.add_argument("--dim", type=int)
    p.add_argument("--ffn", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--blocks", type=int)
    p.add_argument("--pos-l", dest="pos_l", type=int)
    p.add_argument("--ar-blocks", dest="ar_blocks", type=int)
    p.add_argument("--enc-down", dest="enc_down")
    p.add_argument("--enc-up", dest="enc_up")
    p.add_argument("--enc-dim", dest="enc_dim", type=int)
    p.add_argument("--lr-encoder", dest="lr_encoder", type=float)
    p.add_argument("--lr-gnt", dest="lr_gnt", type=float)
    p.add_argument("--n-coarse", dest="n_coarse", type=int)
    p.add_argument("--n-fine", dest="n_fine", type=int)
    p.add_argument("--fine-every", dest="fine_every", type=int)
    p.add_argument("--k-range", dest="k_range")
    p.add_argument("--n-views-range", dest="n_views_range")
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument(
        "--no-stratified", dest="stratified", action="store_false", default=None
    )
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render one view from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--view", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--depth")
    p.add_argument("--fine", type=int)
    p.add_argument("--coarse", type=int)
    p.add_argument("--renderer", choices=RENDERERS)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="metrics for held-out views")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--holdout", required=True)
    p.add_argument("--lpips-file", dest="lpips_file")
    p.add_argument("--debug-gt", dest="debug_gt", action="store_true")
    p.add_argument("--coarse", type=int)
    p.add_argument("--renderer", choices=RENDERERS)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attn-viz", help="view-importance and attention-depth maps")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--view", type=int, required=True)
    p.add_argument("--out-prefix", dest="out_prefix", required=True)
    p.add_argument("--coarse", type=int)
    p.add_argument("--renderer", choices=RENDERERS)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_attn_viz)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--config", dest="profile", default="tiny")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ContractError, ShapeError, FileNotFoundError, NotADirectoryError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
