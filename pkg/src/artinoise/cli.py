"""``artinoise`` command line.

Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 check-suite failure.
``ARTINOISE_THREADS`` sets the torch thread count.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3

log = logging.getLogger("artinoise")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _overrides(pairs) -> dict[str, str]:
    out = {}
    for item in pairs or ():
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _config(args, manifest: dict | None = None):
    """Effective configuration: ``--config`` file (or the one stored in a
    checkpoint manifest, or defaults) plus ``--set`` overrides."""
    from .config import _SECTIONS, load_config, parse_config

    overrides = _overrides(args.set)
    # bare keys resolve to whichever section owns them
    owner = {name: sec for sec, names in _SECTIONS.items() for name in names}
    resolved = {}
    for k, v in overrides.items():
        if "." not in k:
            k = f"{owner.get(k, 'train')}.{k}"
        resolved[k] = v
    try:
        if args.config is None and manifest and "config" in manifest:
            return parse_config(manifest["config"], resolved)
        return load_config(args.config, resolved)
    except (KeyError, ValueError) as exc:
        raise UsageError(f"bad configuration: {exc}") from exc


def _checkpoint(args):
    """Load the checkpoint named on the command line (or in the defaults)."""
    from .config import RunConfig
    from .diffusion import load_checkpoint

    path = args.checkpoint or (RunConfig().checkpoint if args.config is None else _config(args).checkpoint)
    if not Path(path).exists():
        raise FileNotFoundError(f"missing checkpoint {path}")
    denoiser, _, schedule, manifest = load_checkpoint(path)
    return denoiser, schedule, _config(args, manifest)


def _load_image(path: str) -> np.ndarray:
    from .numeric import load_tensor
    from .raster import read_ppm

    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(path)
    if p.suffix.lower() in (".ppm", ".pnm"):
        return read_ppm(p)
    arr = load_tensor(p)
    return arr[0] if arr.ndim == 4 else arr


def cmd_gen_data(args) -> int:
    from .pipeline import gen_data

    cfg = _config(args)
    out = gen_data(cfg, args.out or cfg.data_dir, args.clips, args.seed)
    print(f"wrote dataset to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from dataclasses import replace

    from .config import dump_config
    from .pipeline import train_model

    cfg = _config(args)
    if args.preset:
        cfg = replace(cfg, preset=args.preset)
    data_dir = args.data or cfg.data_dir
    if not (Path(data_dir) / "manifest.json").exists():
        raise FileNotFoundError(f"no dataset at {data_dir}; run gen-data first")
    cfg = replace(cfg, data_dir=str(data_dir))
    ckpt = Path(args.checkpoint or cfg.checkpoint)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    log_path = ckpt.with_suffix(".log.csv")
    if log_path.exists():
        log_path.unlink()
    (ckpt.parent / (ckpt.stem + ".config.ini")).write_text(dump_config(cfg))
    _, _, _, history = train_model(cfg, checkpoint=ckpt, log_path=log_path)
    last = history[-1]
    print(f"trained {cfg.preset} for {len(history)} steps: total={last['total']:.4f} "
          f"l_diff={last['l_diff']:.4f} -> {ckpt}")
    return EXIT_OK


def cmd_animate(args) -> int:
    from .body import PoseSequence, load_skeleton
    from .numeric import load_tensor
    from .pipeline import animate, scene, write_video

    denoiser, schedule, cfg = _checkpoint(args)
    skeleton = load_skeleton(args.skeleton) if args.skeleton else scene(cfg)[0]
    poses = PoseSequence.from_array(load_tensor(args.poses))
    reference = _load_image(args.reference)
    result = animate(denoiser, schedule, reference, poses, skeleton, cfg,
                     gamma=args.gamma, seed=args.seed)
    out = write_video(args.out or cfg.output_dir, result["frames"], result["latent"])
    print(f"wrote {len(result['frames'])} frames to {out}")
    return EXIT_OK


def _write_rows(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def cmd_eval(args) -> int:
    from .metrics import MetricReport, evaluate_clip
    from .numeric import load_tensor
    from .pipeline import load_dataset

    cfg = _config(args)
    truth = load_dataset(args.truth)
    gen_root = Path(args.generated)
    report = MetricReport()
    for clip in truth:
        path = gen_root / clip["name"] / "video.anwt"
        if not path.exists():
            raise FileNotFoundError(f"missing generated clip {path}")
        report.clips.append(evaluate_clip(clip["name"], load_tensor(path), clip.video, clip.motion,
                                          texture_size=cfg.texture_size))
    out = Path(args.out or Path(cfg.output_dir) / "metrics.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    report.to_csv(out)
    agg = report.aggregate()
    print(f"{len(report.clips)} clips: l1={agg.l1:.4f} ssim={agg.ssim:.4f} "
          f"iou={agg.silhouette_iou:.4f} flicker={agg.flicker:.5f} -> {out}")
    return EXIT_OK


def cmd_sweep_gamma(args) -> int:
    from .pipeline import load_dataset, sweep_gamma

    try:
        gammas = [float(g) for g in args.gammas.split(",")]
    except ValueError as exc:
        raise UsageError(f"bad gamma list {args.gammas!r}") from exc
    if any(not 0.0 <= g <= 1.0 for g in gammas):
        raise UsageError("gammas must lie in [0, 1]")
    denoiser, schedule, cfg = _checkpoint(args)
    clips = load_dataset(args.truth)
    rows = sweep_gamma(denoiser, schedule, clips, cfg, gammas, seed=args.seed)
    out = Path(args.out or Path(cfg.output_dir) / "gamma_sweep.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_rows(out, rows)
    best = max(rows, key=lambda r: r["ssim"])
    summary = {"best_ssim_gamma": best["gamma"], "best_ssim": best["ssim"], "rows": len(rows)}
    out.with_suffix(".summary.json").write_text(json.dumps(summary, indent=2))
    for r in rows:
        print(f"gamma={r['gamma']:.2f} ssim={r['ssim']:.4f} iou={r['silhouette_iou']:.4f} "
              f"l1={r['l1']:.4f}")
    print(f"best ssim at gamma={best['gamma']}")
    return EXIT_OK


def cmd_check(args) -> int:
    from .checks import run_checks

    results = run_checks(args.only)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} property groups passed")
    return EXIT_CHECK if failed or not results else EXIT_OK


def cmd_dump_noise(args) -> int:
    """Write warped-noise frames as pixmaps, three channels at a time."""
    from .body import PoseSequence, load_skeleton
    from .noisefield import sample_noise_texture, warp
    from .numeric import load_tensor, save_tensor, seed_rng
    from .raster import rasterize_sequence, write_ppm
    from .pipeline import scene

    cfg = _config(args)
    skeleton = load_skeleton(args.skeleton) if args.skeleton else scene(cfg)[0]
    poses = PoseSequence.from_array(load_tensor(args.poses))
    rng = seed_rng(cfg.seed if args.seed is None else args.seed).stream("dump")
    texture = sample_noise_texture(rng.stream("texture"), cfg.texture_u, cfg.texture_v, cfg.channels)
    noise = warp(texture, rasterize_sequence(skeleton, poses, cfg.height, cfg.width),
                 rng.stream("background"), cfg.static_background)
    out = Path(args.out or Path(cfg.output_dir) / "noise")
    out.mkdir(parents=True, exist_ok=True)
    save_tensor(out / "noise.anwt", noise)
    save_tensor(out / "texture.anwt", texture.values)
    triads = max(1, cfg.channels // 3)
    for k, frame in enumerate(noise):
        for g in range(triads):
            rgb = frame[..., 3 * g:3 * g + 3]
            if rgb.shape[-1] < 3:
                rgb = np.pad(rgb, ((0, 0), (0, 0), (0, 3 - rgb.shape[-1])))
            write_ppm(out / f"frame_{k:03d}_c{3 * g}.ppm", (np.clip(rgb, -3, 3) + 3) / 6)
    print(f"wrote {len(noise)} noise frames to {out}")
    return EXIT_OK


def cmd_show_config(args) -> int:
    from .config import dump_config

    sys.stdout.write(dump_config(_config(args)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="artinoise", description="Articulated noise warping for video diffusion.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, fn, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="INI run configuration")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (section.key or bare key)")
        p.set_defaults(func=fn)
        return p

    p = add("gen-data", cmd_gen_data, "render a synthetic articulated-puppet dataset")
    p.add_argument("--out")
    p.add_argument("--clips", type=int)
    p.add_argument("--seed", type=int)

    p = add("train", cmd_train, "train denoiser and motion decoder")
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--preset", choices=["base", "jaml", "full"])

    p = add("animate", cmd_animate, "animate a reference image along a pose sequence")
    p.add_argument("--checkpoint")
    p.add_argument("--reference", required=True, help="P6 pixmap or ANWT frame")
    p.add_argument("--poses", required=True, help="ANWT pose sequence")
    p.add_argument("--skeleton")
    p.add_argument("--gamma", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = add("eval", cmd_eval, "score generated clips against ground truth")
    p.add_argument("--generated", required=True, help="directory with <clip>/video.anwt")
    p.add_argument("--truth", required=True, help="dataset directory")
    p.add_argument("--out")

    p = add("sweep-gamma", cmd_sweep_gamma, "animate and score held-out clips per degradation level")
    p.add_argument("--checkpoint")
    p.add_argument("--truth", required=True, help="held-out dataset directory")
    p.add_argument("--gammas", default="0.0,0.1,0.5,1.0")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = add("check", cmd_check, "run the invariant self-check suite")
    p.add_argument("--only", action="append", help="run a single property group")

    p = add("dump-noise", cmd_dump_noise, "write warped noise visualizations")
    p.add_argument("--poses", required=True)
    p.add_argument("--skeleton")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    add("show-config", cmd_show_config, "print the effective configuration")
    return parser


def main(argv=None) -> int:
    threads = os.environ.get("ARTINOISE_THREADS")
    if threads:
        import torch
        torch.set_num_threads(int(threads))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing command")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
