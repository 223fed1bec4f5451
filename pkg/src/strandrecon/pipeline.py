"""Configuration, target synthesis, the end-to-end synthetic harness and the AA toy benchmark."""

from __future__ import annotations

import dataclasses
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import Camera, hemisphere_rig
from .diffrast import render_channels, render_channels_backward, render_depth
from .mesh import TriMesh
from .metrics import DEFAULT_THRESHOLDS, sample_strands, score
from .optimize import LossWeights, StageConfig, TargetView, fit_children, fit_guides
from .orientation import (OrientedPointCloud, apply_signs, disambiguate_mst, downsample,
                          gabor_orientation, gravity_flip, lift_orientations, meanshift_denoise,
                          propagate_and_filter)
from .strandinit import (INTERIOR, label_at, set_boundary, solve_laplace_sor, trace_strands,
                         voxelize_domain)
from .strands import (ScalpSurface, StrandSet, generate_synthetic_scene, interpolate_children,
                      nearest_four_guides, resample_polyline, sample_child_roots)

logger = logging.getLogger(__name__)

ENV_PREFIX = "STRANDRECON_"


class ConfigError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


@dataclass
class PipelineConfig:
    # scene / data
    style: str = "straight"
    n_guides: int = 100
    n_children: int = 2000
    views: int = 58
    resolution: int = 256
    seed: int = 0
    target_noise: float = 0.0
    scalp: str = ""
    head: str = ""
    shell: str = ""
    cameras: str = ""
    targets: str = ""
    out: str = "out"
    # orientation
    gabor_orientations: int = 32
    gabor_wavelengths: tuple = (2.0, 4.0, 6.0, 8.0)
    gabor_floor: float = 0.02
    lift_candidates: int = 256
    lift_stride: int = 2
    lift_depth_tol: float = 3.0
    lift_agreement: float = 0.7
    meanshift_radius: float = 4.0
    meanshift_iterations: int = 3
    downsample_voxel: float = 5.0
    mst_k: int = 8
    mst_restarts: int = 100
    mst_perturbation: float = 0.1
    noise_cutoff_deg: float = 45.0
    # strand init
    grid_h: float = 2.0
    sor_omega: float = 1.8
    sor_tol: float = 1e-5
    sor_max_iter: int = 5000
    guide_vertices: int = 17
    # optimization
    K_g: int = 4
    K_c: int = 4
    I_g: int = 2000
    I_c0: int = 2000
    I_c1: int = 1000
    lr: float = 0.001
    lam: float = 50.0
    width_mm: float = 0.2
    guide_width_mm: float = 0.2
    batch_views: int = 4
    subdivision: int = 1
    w_stick: float = 0.1
    w_root: float = 1.0
    w_c: float = 0.01
    w_d: float = 0.01
    w_m: float = 1.0
    w_t: float = 1.0
    w_o: float = 1.0
    checkpoint_every: int = 0
    # evaluation
    sample_spacing: float = 1.0
    thresholds: tuple = DEFAULT_THRESHOLDS

    def stage(self) -> StageConfig:
        return StageConfig(K_g=self.K_g, K_c=self.K_c, I_g=self.I_g, I_c0=self.I_c0,
                           I_c1=self.I_c1, lr=self.lr, lam=self.lam, width_mm=self.width_mm,
                           guide_width_mm=self.guide_width_mm, batch_views=self.batch_views,
                           subdivision=self.subdivision, seed=self.seed,
                           checkpoint_every=self.checkpoint_every)

    def weights(self) -> LossWeights:
        return LossWeights(self.w_stick, self.w_root, self.w_c, self.w_d, self.w_m, self.w_t,
                           self.w_o)

    def replace(self, **kw) -> "PipelineConfig":
        return dataclasses.replace(self, **kw)

    def dumps(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            lines.append(f"{f.name} = {_format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


def _format_value(v):
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return "; ".join(",".join(f"{x:g}" for x in p) for p in v)
        return ",".join(f"{x:g}" for x in v)
    return str(v)


def _parse_value(name, text, default):
    text = text.strip()
    try:
        if name == "thresholds":
            pairs = tuple(tuple(float(x) for x in p.split(",")) for p in text.split(";") if p.strip())
            if any(len(p) != 2 for p in pairs):
                raise ValueError("expected d,a pairs")
            return pairs
        if isinstance(default, tuple):
            return tuple(float(x) for x in text.split(","))
        if isinstance(default, bool):
            return text.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError as e:
        raise ConfigError(f"bad value for {name!r}: {text!r} ({e})") from None


def parse_config(text: str, base: PipelineConfig | None = None,
                 env: dict | None = None) -> PipelineConfig:
    """Parse `key = value` lines (# comments); unknown keys are rejected.

    Environment variables named STRANDRECON_<KEY> override file values.
    """
    cfg = base or PipelineConfig()
    known = {f.name: f for f in dataclasses.fields(cfg)}
    updates = {}
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected 'key = value', got {raw!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in known:
            raise ConfigError(f"line {ln}: unknown key {k!r}")
        updates[k] = _parse_value(k, v, getattr(cfg, k))
    env = os.environ if env is None else env
    for k in known:
        ev = env.get(ENV_PREFIX + k.upper())
        if ev is not None:
            updates[k] = _parse_value(k, ev, getattr(cfg, k))
    cfg = dataclasses.replace(cfg, **updates)
    validate_config(cfg)
    return cfg


def load_config(path=None, env=None) -> PipelineConfig:
    text = Path(path).read_text() if path else ""
    return parse_config(text, env=env)


def validate_config(cfg: PipelineConfig) -> None:
    if cfg.style not in ("straight", "wavy", "curly"):
        raise ConfigError(f"unknown style {cfg.style!r}")
    positive = ("views", "resolution", "grid_h", "sor_tol", "width_mm", "guide_width_mm",
                "sample_spacing", "downsample_voxel", "meanshift_radius", "guide_vertices",
                "mst_restarts", "mst_k", "lift_candidates", "lift_stride")
    for k in positive:
        if getattr(cfg, k) <= 0:
            raise ConfigError(f"{k} must be positive")
    if not 0 < cfg.sor_omega < 2:
        raise ConfigError("sor_omega must lie in (0, 2)")
    if cfg.n_guides < 4:
        raise ConfigError("n_guides must be at least 4")
    try:
        cfg.weights()
        cfg.stage()
    except ValueError as e:
        raise ConfigError(str(e)) from None


# ---------------------------------------------------------------------------
# targets

def make_targets(gt: StrandSet, cameras, head: TriMesh | None = None, width_mm: float = 0.2,
                 noise_sigma: float = 0.0, seed: int = 0) -> list[TargetView]:
    """Self-render ground-truth target planes for every camera."""
    rng = np.random.default_rng([seed, 17])
    out = []
    for cam in cameras:
        r = render_channels(gt, cam, width_mm,
                            ("silhouette", "depth", "tangent3d", "orient2d", "id_color"))
        S = r["silhouette"][..., 0]
        safe = np.where(S > 0, S, 1.0)
        valid = S > 0.5
        depth = np.where(S > 0, r["depth"][..., 0] / safe, np.inf)
        tan = r["tangent3d"]
        tn = np.linalg.norm(tan, axis=-1, keepdims=True)
        tan = np.where(tn > 1e-12, tan / np.where(tn > 0, tn, 1), 0.0)
        ori = r["orient2d"]
        on = np.linalg.norm(ori, axis=-1, keepdims=True)
        ori = np.where(on > 1e-12, ori / np.where(on > 0, on, 1), 0.0)
        valid &= (tn[..., 0] > 1e-12) & (on[..., 0] > 1e-12)
        image = r["id_color"].mean(axis=-1)
        mask = S
        if noise_sigma > 0:
            mask = S + rng.normal(0.0, noise_sigma, S.shape)
        if head is not None:
            front = render_depth(head, cam)
            back = render_depth(head, cam, farthest=True)
        else:
            front = back = np.full(S.shape, np.inf)
        out.append(TargetView(cam, mask, depth, tan, ori, valid, front, back, image))
    return out


def save_targets(path, targets) -> None:
    arrays = {}
    for i, t in enumerate(targets):
        for name in ("mask", "depth", "tangent", "orient2d", "valid", "scalp_front",
                     "scalp_back", "image"):
            arrays[f"v{i}_{name}"] = getattr(t, name)
    arrays["n_views"] = np.array(len(targets))
    np.savez_compressed(path, **arrays)


def load_targets(path, cameras) -> list[TargetView]:
    with np.load(path) as z:
        n = int(z["n_views"])
        if n != len(cameras):
            raise ContractError(f"targets hold {n} views but {len(cameras)} cameras were given")
        return [TargetView(cameras[i], z[f"v{i}_mask"], z[f"v{i}_depth"], z[f"v{i}_tangent"],
                           z[f"v{i}_orient2d"], z[f"v{i}_valid"], z[f"v{i}_scalp_front"],
                           z[f"v{i}_scalp_back"], z[f"v{i}_image"]) for i in range(n)]


def synthetic_rig(n_views: int, resolution: int, shell_radius: float) -> list[Camera]:
    return hemisphere_rig(n_views, 4.0 * shell_radius, (0.0, 0.0, 0.25 * shell_radius),
                          fov_radius=1.05 * shell_radius, resolution=resolution,
                          min_elevation_deg=-20.0)


# ---------------------------------------------------------------------------
# stages

def estimate_orientation(targets, cfg: PipelineConfig, info: dict | None = None):
    """Gabor maps -> lifted cloud -> mean-shift -> MST signs -> gravity -> full-res filter."""
    omaps = [gabor_orientation(t.image if t.image is not None else t.mask,
                               cfg.gabor_orientations, cfg.gabor_wavelengths,
                               confidence_floor=cfg.gabor_floor) for t in targets]
    depths = [np.where(t.mask > 0.5, t.depth, np.inf) for t in targets]
    cams = [t.camera for t in targets]
    parts = [lift_orientations(depths, omaps, cams, v, cfg.lift_candidates, cfg.lift_depth_tol,
                               cfg.lift_agreement, cfg.lift_stride) for v in range(len(targets))]
    parts = [p for p in parts if len(p)]
    if not parts:
        raise ContractError("orientation lifting produced no points")
    cloud = OrientedPointCloud(np.concatenate([p.points for p in parts]),
                               np.concatenate([p.directions for p in parts]),
                               np.concatenate([p.confidences for p in parts]),
                               np.concatenate([p.view_ids for p in parts]))
    cloud = meanshift_denoise(cloud, cfg.meanshift_radius, cfg.meanshift_iterations)
    reps, back = downsample(cloud, cfg.downsample_voxel)
    signs, best = disambiguate_mst(reps, cfg.mst_k, cfg.mst_restarts, cfg.mst_perturbation,
                                   cfg.seed)
    reps = gravity_flip(apply_signs(reps, signs))
    full = propagate_and_filter(cloud, reps, back, cfg.noise_cutoff_deg)
    if info is not None:
        info.update(n_lifted=len(cloud), n_representatives=len(reps), n_kept=len(full),
                    mst_score=best, maps=omaps)
    return full


def laplace_init(cloud, scalp: ScalpSurface, head: TriMesh, shell: TriMesh, cfg: PipelineConfig,
                 info: dict | None = None):
    vol = voxelize_domain(head, shell, cfg.grid_h)
    vol = set_boundary(vol, cloud, scalp)
    vol = solve_laplace_sor(vol, cfg.sor_omega, cfg.sor_tol, cfg.sor_max_iter)
    guides, tinfo = trace_strands(vol, scalp.vertices, n_vertices=cfg.guide_vertices,
                                  return_info=True)
    if info is not None:
        info.update(tinfo, sor_iterations=vol.iterations)
    if len(tinfo["kept"]) != len(scalp.vertices):
        raise ContractError(f"{len(scalp.vertices) - len(tinfo['kept'])} guide root(s) could not "
                            "be traced; every scalp vertex needs a guide")
    return guides, vol


def straight_guides(scalp: ScalpSurface, head: TriMesh, shell: TriMesh, cfg: PipelineConfig):
    """Ablation init: straight lines along the scalp normal up to the shell."""
    vol = voxelize_domain(head, shell, cfg.grid_h)
    step = 0.5 * cfg.grid_h
    out = []
    for p, n in zip(scalp.vertices, scalp.normals):
        length = step
        while length < 1000.0:
            q = p + (length + step) * n
            if label_at(vol, q[None])[0] != INTERIOR:
                break
            length += step
        out.append(resample_polyline(np.stack([p, p + length * n]), cfg.guide_vertices))
    return StrandSet.from_list(out)


def grow_children(guides: StrandSet, scalp: ScalpSurface, n_children: int, seed: int):
    roots, _ = sample_child_roots(scalp, n_children, seed=seed + 7919)
    gmap = nearest_four_guides(guides.roots, roots)
    return interpolate_children(guides, gmap, roots)


def evaluate(recon: StrandSet, gt: StrandSet, cfg: PipelineConfig, modes=("deg360", "deg180")):
    a = sample_strands(recon, cfg.sample_spacing)
    b = sample_strands(gt, cfg.sample_spacing)
    return {m: [score(a, b, d, ang, m) for d, ang in cfg.thresholds] for m in modes}


@dataclass(eq=False)
class SyntheticRun:
    gt: StrandSet
    init_guides: StrandSet
    init_children: StrandSet
    guides: StrandSet
    children: StrandSet
    scores: dict
    init_scores: dict
    timings: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)


def run_synthetic(cfg: PipelineConfig, ablation_straight: bool = False, scene=None,
                  targets=None, cloud=None, out_dir=None) -> SyntheticRun:
    """Full round trip on a generated scene; returns strands and scores per stage."""
    t = {}
    t0 = time.perf_counter()
    if scene is None:
        scene = generate_synthetic_scene(cfg.style, cfg.n_guides, cfg.n_children, cfg.seed)
    gt = scene.children
    cams = synthetic_rig(cfg.views, cfg.resolution, scene.shell_radius)
    if targets is None:
        targets = make_targets(gt, cams, scene.head, cfg.width_mm, cfg.target_noise, cfg.seed)
    t["targets"] = time.perf_counter() - t0
    info = {}
    if ablation_straight:
        init = straight_guides(scene.scalp, scene.head, scene.shell, cfg)
    else:
        if cloud is None:
            cloud = estimate_orientation(targets, cfg, info)
        t["orientation"] = time.perf_counter() - t0
        init, _ = laplace_init(cloud, scene.scalp, scene.head, scene.shell, cfg, info)
    t["init"] = time.perf_counter() - t0
    init_children = grow_children(init, scene.scalp, cfg.n_children, cfg.seed)
    stage = cfg.stage()
    w = cfg.weights()
    log = {} if out_dir is None else {"log_path": Path(out_dir) / "guides_log.csv"}
    guides = fit_guides(init, targets, w, stage, **log)
    t["guides"] = time.perf_counter() - t0
    children0 = grow_children(guides, scene.scalp, cfg.n_children, cfg.seed)
    log = {} if out_dir is None else {"log_path": Path(out_dir) / "children_log.csv"}
    children = fit_children(children0, targets, w, stage, **log)
    t["children"] = time.perf_counter() - t0
    run = SyntheticRun(gt, init, init_children, guides, children, evaluate(children, gt, cfg),
                       evaluate(init_children, gt, cfg), t, info)
    return run


# ---------------------------------------------------------------------------
# anti-aliasing toy: grow a 2-vertex segment toward a long target strand

@dataclass(eq=False)
class ToyResult:
    width_px: float
    losses: np.ndarray
    tips: np.ndarray  # (iterations + 1, 2) tip pixel positions
    target_tip: np.ndarray
    iterations: int
    seconds: float

    @property
    def tip_error(self) -> float:
        return float(np.linalg.norm(self.tips[-1] - self.target_tip))

    @property
    def loss_reduction(self) -> float:
        return float(1.0 - self.losses[-1] / self.losses[0]) if self.losses[0] > 0 else 0.0


TOY_DEPTH = 1000.0


def _toy_camera(size: int) -> Camera:
    # one pixel spans one millimetre at the toy depth
    return Camera(TOY_DEPTH, TOY_DEPTH, size / 2.0, size / 2.0, size, size, np.eye(3), np.zeros(3))


def toy_aa(width_px: float = 1.0, iterations: int = 25000, lr: float = 1.0, size: int = 128,
           root_px=(20.3, 30.1), target_tip_px=(100.7, 95.2), init_fraction: float = 0.2,
           frames_every: int = 0, tol: float = 0.0) -> ToyResult:
    """Plain gradient descent on the tip of a 2-vertex strand under a L2 silhouette loss.

    The loss is the mean squared silhouette error over pixels and the tip is
    parameterized in normalized image coordinates ([-1, 1] across the frame).
    """
    cam = _toy_camera(size)

    def world(p):
        return np.array([(p[0] - cam.cx) * TOY_DEPTH / cam.fx,
                         (p[1] - cam.cy) * TOY_DEPTH / cam.fy, TOY_DEPTH])

    root = world(root_px)
    goal = world(target_tip_px)
    target = render_channels(StrandSet(np.stack([root, goal]), np.array([2])), cam, width_px,
                             ("silhouette",))["silhouette"][..., 0]
    # pixel -> normalized coordinate scale
    ndc = size / 2.0
    tip = np.asarray(root_px, float) + init_fraction * (np.asarray(target_tip_px, float)
                                                        - np.asarray(root_px, float))
    losses, tips = [], [tip.copy()]
    t0 = time.perf_counter()
    it = 0
    for it in range(iterations):
        r = render_channels(StrandSet(np.stack([root, world(tip)]), np.array([2])), cam,
                            width_px, ("silhouette",))
        d = r["silhouette"][..., 0] - target
        loss = float(np.mean(d * d))
        losses.append(loss)
        up = r.zeros()
        up[..., 0] = 2.0 * d / d.size
        g_world = render_channels_backward(r, up)[1]
        # tip moves in the image plane at fixed depth: d(world)/d(pixel) = depth / f
        g_px = g_world[:2] * TOY_DEPTH / cam.fx
        if lr != 0.0:
            tip = tip - lr * g_px * ndc * ndc
        tips.append(tip.copy())
        if tol > 0 and loss <= tol * losses[0]:
            break
    r = render_channels(StrandSet(np.stack([root, world(tip)]), np.array([2])), cam, width_px,
                        ("silhouette",))
    d = r["silhouette"][..., 0] - target
    losses.append(float(np.mean(d * d)))
    return ToyResult(width_px, np.array(losses), np.array(tips), np.asarray(target_tip_px, float),
                     it + 1, time.perf_counter() - t0)
