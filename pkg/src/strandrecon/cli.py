"""Command-line entry point: `strandrecon <subcommand> [--config F] [--out DIR] ...`."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from . import io
from .diffrast import render_channels
from .mesh import MeshError, read_obj, write_obj
from .metrics import format_table, sample_strands, score, write_table_csv
from .optimize import fit_children, fit_guides
from .pipeline import (ConfigError, ContractError, estimate_orientation, grow_children,
                       laplace_init, load_config, load_targets, make_targets, save_targets,
                       synthetic_rig, toy_aa)
from .strandinit import DomainError
from .strands import ScalpSurface, StrandError, generate_synthetic_scene

logger = logging.getLogger("strandrecon")

SUBCOMMANDS = ("synth", "orient", "init", "fit-guides", "fit-children", "render", "eval",
               "toy-aa", "all")
EXIT_OK, EXIT_CONFIG, EXIT_CONTRACT = 0, 2, 3


def _path(cfg, key, out, default):
    v = getattr(cfg, key)
    return Path(v) if v else out / default


def _scene_files(cfg, out):
    scalp = ScalpSurface(read_obj(_path(cfg, "scalp", out, "scalp.obj")))
    head = read_obj(_path(cfg, "head", out, "head.obj"))
    shell = read_obj(_path(cfg, "shell", out, "shell.obj"))
    return scalp, head, shell


def _cameras(cfg, out):
    return io.read_cameras(_path(cfg, "cameras", out, "cameras.json"))


def _targets(cfg, out):
    return load_targets(_path(cfg, "targets", out, "targets.npz"), _cameras(cfg, out))


def stage_synth(cfg, out):
    scene = generate_synthetic_scene(cfg.style, cfg.n_guides, cfg.n_children, cfg.seed)
    write_obj(out / "scalp.obj", scene.scalp.mesh)
    write_obj(out / "head.obj", scene.head)
    write_obj(out / "shell.obj", scene.shell)
    io.write_hair(out / "gt.hair", scene.children)
    io.write_hair(out / "gt_guides.hair", scene.guides)
    cams = synthetic_rig(cfg.views, cfg.resolution, scene.shell_radius)
    io.write_cameras(out / "cameras.json", cams)
    targets = make_targets(scene.children, cams, scene.head, cfg.width_mm, cfg.target_noise,
                           cfg.seed)
    save_targets(out / "targets.npz", targets)
    io.write_png(out / "target_mask_0.png", targets[0].mask, 0.0, 1.0)


def stage_orient(cfg, out):
    info = {}
    cloud = estimate_orientation(_targets(cfg, out), cfg, info)
    io.write_ply(out / "cloud.ply", cloud)
    for i, m in enumerate(info["maps"]):
        io.write_pfm(out / f"orient_{i:02d}.pfm", np.stack([m.angle, m.confidence], axis=-1))
    logger.info("oriented cloud: %d points (%d representatives)", len(cloud),
                info["n_representatives"])


def stage_init(cfg, out):
    cloud = io.read_ply(out / "cloud.ply")
    scalp, head, shell = _scene_files(cfg, out)
    info = {}
    guides, vol = laplace_init(cloud, scalp, head, shell, cfg, info)
    io.write_ovol(out / "volume.ovol", vol)
    io.write_hair(out / "init.hair", guides)
    scalp_children = grow_children(guides, scalp, cfg.n_children, cfg.seed)
    io.write_hair(out / "init_children.hair", scalp_children)
    logger.info("SOR converged in %d sweeps", info["sor_iterations"])


def stage_fit_guides(cfg, out):
    init = io.read_hair(out / "init.hair").strands
    guides = fit_guides(init, _targets(cfg, out), cfg.weights(), cfg.stage(),
                        log_path=out / "guides_log.csv", checkpoint_dir=out)
    io.write_hair(out / "guides.hair", guides)


def stage_fit_children(cfg, out):
    guides = io.read_hair(out / "guides.hair").strands
    scalp, _, _ = _scene_files(cfg, out)
    children = grow_children(guides, scalp, cfg.n_children, cfg.seed)
    fitted = fit_children(children, _targets(cfg, out), cfg.weights(), cfg.stage(),
                          log_path=out / "children_log.csv", checkpoint_dir=out)
    io.write_hair(out / "children.hair", fitted)


def stage_render(cfg, out, src=None):
    strands = io.read_hair(Path(src) if src else out / "children.hair").strands
    for i, cam in enumerate(_cameras(cfg, out)):
        r = render_channels(strands, cam, cfg.width_mm, ("silhouette", "depth"))
        io.write_png(out / f"render_{i:02d}.png", r["silhouette"][..., 0], 0.0, 1.0)
        io.write_pfm(out / f"render_{i:02d}.pfm", r.aa.color)


def stage_eval(cfg, out, src=None, dst=None):
    recon = io.read_hair(Path(src) if src else out / "children.hair").strands
    gt = io.read_hair(Path(dst) if dst else out / "gt.hair").strands
    a = sample_strands(recon, cfg.sample_spacing)
    b = sample_strands(gt, cfg.sample_spacing)
    rows = {}
    with open(out / "metrics.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["mode", "d_mm", "a_deg", "precision", "recall", "f1"])
        for mode in ("deg360", "deg180"):
            rows[mode] = [score(a, b, d, ang, mode) for d, ang in cfg.thresholds]
            for r in rows[mode]:
                w.writerow([mode, r.d_mm, r.a_deg, f"{r.precision:.6f}", f"{r.recall:.6f}",
                            f"{r.f1:.6f}"])
    print(format_table(rows))


def stage_toy(cfg, out):
    with open(out / "toy_aa.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["width_px", "iteration", "loss", "tip_x", "tip_y"])
        for width in (1.0, 0.8, 0.6):
            res = toy_aa(width)
            for i, (l, t) in enumerate(zip(res.losses, res.tips)):
                if i % 50 == 0 or i == len(res.losses) - 1:
                    w.writerow([width, i, f"{l:.8g}", f"{t[0]:.4f}", f"{t[1]:.4f}"])
            print(f"width {width:.1f}px: tip error {res.tip_error:.2f}px, loss reduced "
                  f"{100 * res.loss_reduction:.1f}% in {res.iterations} iterations "
                  f"({res.seconds:.0f}s)")


STAGES = {
    "synth": stage_synth, "orient": stage_orient, "init": stage_init,
    "fit-guides": stage_fit_guides, "fit-children": stage_fit_children,
    "render": stage_render, "eval": stage_eval, "toy-aa": stage_toy,
}
ALL_ORDER = ("synth", "orient", "init", "fit-guides", "fit-children", "eval")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="strandrecon", description=__doc__)
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--seed", type=int)
    p.add_argument("--views", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--stage", choices=ALL_ORDER,
                   help="with 'all': resume from this stage")
    p.add_argument("--src", help="strand file to render / evaluate")
    p.add_argument("--dst", help="ground-truth strand file for eval")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        over = {k: getattr(args, k) for k in ("seed", "views", "out") if getattr(args, k) is not None}
        cfg = cfg.replace(**over)
    except (ConfigError, OSError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(out / ".strandrecon.lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        print(f"output directory {out} is locked by another run", file=sys.stderr)
        return EXIT_CONTRACT
    try:
        if args.subcommand == "all":
            order = ALL_ORDER[ALL_ORDER.index(args.stage):] if args.stage else ALL_ORDER
            for name in order:
                logger.info("stage %s", name)
                STAGES[name](cfg, out)
        elif args.subcommand == "render":
            stage_render(cfg, out, args.src)
        elif args.subcommand == "eval":
            stage_eval(cfg, out, args.src, args.dst)
        else:
            STAGES[args.subcommand](cfg, out)
        (out / "config_used.txt").write_text(cfg.dumps())
    except FileNotFoundError as e:
        print(f"missing input: {e.filename}", file=sys.stderr)
        return EXIT_CONFIG
    except (ContractError, DomainError, StrandError, MeshError, io.FormatError, ValueError) as e:
        print(f"contract violation: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_CONTRACT
    finally:
        lock.release()
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
