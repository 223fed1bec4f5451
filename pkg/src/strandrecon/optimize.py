"""Image losses, strand regularizers, Adam and the guide / child fitting stages."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .camera import Camera
from .diffrast import render_channels, render_channels_backward
from .reparam import build_laplacian, from_differential, pull_back_gradient, to_differential
from .strands import StrandSet

logger = logging.getLogger(__name__)

# Learning rate and the length-valued terms (depth, stick, root) are expressed
# in metres, the unit the default hyperparameters were tuned in; geometry is mm.
LENGTH_UNIT_MM = 1000.0


@dataclass
class LossWeights:
    w_stick: float = 0.1
    w_root: float = 1.0
    w_c: float = 0.01
    w_d: float = 0.01
    w_m: float = 1.0
    w_t: float = 1.0
    w_o: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{f.name} must be finite and non-negative")


@dataclass
class StageConfig:
    K_g: int = 4
    K_c: int = 4
    I_g: int = 2000
    I_c0: int = 2000
    I_c1: int = 1000
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lam: float = 50.0
    width_mm: float = 0.2
    guide_width_mm: float = 0.2
    batch_views: int = 4
    subdivision: int = 1
    seed: int = 0
    checkpoint_every: int = 0
    length_unit_mm: float = LENGTH_UNIT_MM

    def __post_init__(self):
        for name in ("I_g", "I_c0", "I_c1", "K_g", "K_c", "batch_views"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.lr < 0 or self.lam < 0:
            raise ValueError("lr and lam must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if not self.length_unit_mm > 0:
            raise ValueError("length_unit_mm must be positive")


@dataclass(eq=False)
class TargetView:
    camera: Camera
    mask: np.ndarray  # (H, W) in [0, 1]
    depth: np.ndarray  # (H, W), valid where mask > 0.5
    tangent: np.ndarray  # (H, W, 3), unit where valid
    orient2d: np.ndarray  # (H, W, 2), unit where valid
    valid: np.ndarray  # (H, W) bool, hair coverage above 0.5
    scalp_front: np.ndarray  # (H, W), inf off the head
    scalp_back: np.ndarray
    image: np.ndarray | None = None  # grayscale "photo" for orientation analysis


TargetViews = list  # list[TargetView]


# ---------------------------------------------------------------------------
# image losses on coverage-premultiplied planes. Each returns the value and
# its gradient planes.

VALID_COVERAGE = 0.5


def _safe(a):
    return np.where(a > 0, a, 1.0)


def loss_mask(sil, target):
    n = sil.size
    diff = sil - target
    return float(np.abs(diff).sum() / n), np.sign(diff) / n


def loss_depth(sil, depth_pm, target_depth, target_mask):
    """Mean L1 depth error where both rendered and target coverage exceed 0.5."""
    valid = (sil > VALID_COVERAGE) & (target_mask > VALID_COVERAGE)
    nv = int(valid.sum())
    g_s, g_d = np.zeros_like(sil), np.zeros_like(sil)
    if nv == 0:
        return 0.0, g_s, g_d
    s = _safe(sil)
    d = depth_pm / s
    diff = np.where(valid, d - np.where(valid, target_depth, 0.0), 0.0)
    sg = np.sign(diff) / nv
    g_d = sg / s
    g_s = -sg * d / s
    return float(np.abs(diff).sum() / nv), g_s, g_d


def _cosine_loss(vec_pm, target, valid):
    nv = int(valid.sum())
    g = np.zeros_like(vec_pm)
    if nv == 0:
        return 0.0, g
    n = np.linalg.norm(vec_pm, axis=-1)
    ok = valid & (n > 1e-12)
    vh = vec_pm / _safe(n)[..., None]
    dot = np.einsum("...k,...k->...", vh, target)
    val = np.where(valid, 1.0 - np.where(ok, dot, 0.0), 0.0).sum() / nv
    gv = -(target - vh * dot[..., None]) / _safe(n)[..., None] / nv
    g[ok] = gv[ok]
    return float(val), g


def loss_tangent3d(sil, tan_pm, target_tangent, target_valid):
    """Mean (1 - cos) between per-pixel normalized rendered and target 3D tangents."""
    return _cosine_loss(tan_pm, target_tangent, (sil > VALID_COVERAGE) & target_valid)


def loss_orient2d(sil, orient_pm, target_orient, target_valid):
    """Mean (1 - cos) on the doubled-angle circle, insensitive to 180 degree flips."""
    return _cosine_loss(orient_pm, target_orient, (sil > VALID_COVERAGE) & target_valid)


def reg_stick(sil, depth_pm, scalp_front, scalp_back=None):
    """Mean penetration depth past the scalp's front surface over strand pixels.

    A pixel counts as penetrating when its strand depth lies between the
    scalp's front and back surfaces; strands behind the whole head are not.
    """
    strand = sil > VALID_COVERAGE
    nv = int(strand.sum())
    g_s, g_d = np.zeros_like(sil), np.zeros_like(sil)
    if nv == 0:
        return 0.0, g_s, g_d
    s = _safe(sil)
    d = depth_pm / s
    back = np.full_like(d, np.inf) if scalp_back is None else scalp_back
    pen = strand & np.isfinite(scalp_front) & (d > scalp_front) & (d < back)
    val = np.where(pen, d - np.where(pen, scalp_front, 0.0), 0.0)
    g_d = np.where(pen, 1.0 / s, 0.0) / nv
    g_s = np.where(pen, -d / s, 0.0) / nv
    return float(val.sum() / nv), g_s, g_d


def reg_root(roots, initial_roots):
    diff = np.asarray(roots) - np.asarray(initial_roots)
    n = diff.size
    if n == 0:
        return 0.0, np.zeros_like(diff)
    return float(np.abs(diff).sum() / n), np.sign(diff) / n


def reg_curvature(strands: StrandSet):
    """Mean (1 - cos phi) over interior vertices, phi the turning angle; gradient on points."""
    P = strands.points
    g = np.zeros_like(P)
    off = strands.offsets
    idx = np.concatenate([np.arange(o + 1, o + c - 1) for o, c in zip(off, strands.counts)]) \
        if strands.n_strands else np.zeros(0, dtype=np.int64)
    idx = idx.astype(np.int64)
    if len(idx) == 0:
        return 0.0, g
    e1 = P[idx] - P[idx - 1]
    e2 = P[idx + 1] - P[idx]
    n1 = np.linalg.norm(e1, axis=1)
    n2 = np.linalg.norm(e2, axis=1)
    n1s, n2s = _safe(n1), _safe(n2)
    c = np.einsum("ij,ij->i", e1, e2) / (n1s * n2s)
    m = len(idx)
    # d(1 - c)/de1, d(1 - c)/de2
    g1 = -(e2 / (n1s * n2s)[:, None] - c[:, None] * e1 / (n1s ** 2)[:, None]) / m
    g2 = -(e1 / (n1s * n2s)[:, None] - c[:, None] * e2 / (n2s ** 2)[:, None]) / m
    np.add.at(g, idx, g1 - g2)
    np.add.at(g, idx - 1, -g1)
    np.add.at(g, idx + 1, g2)
    return float(np.mean(1.0 - c)), g


# ---------------------------------------------------------------------------
# Adam

@dataclass(eq=False)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls(np.zeros_like(params), np.zeros_like(params), 0)


def adam_step(state: AdamState, params, grads, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> np.ndarray:
    state.step += 1
    state.m = beta1 * state.m + (1 - beta1) * grads
    state.v = beta2 * state.v + (1 - beta2) * grads * grads
    mh = state.m / (1 - beta1 ** state.step)
    vh = state.v / (1 - beta2 ** state.step)
    return params - lr * mh / (np.sqrt(vh) + eps)


# ---------------------------------------------------------------------------
# loss assembly

GUIDE_CHANNELS = ("silhouette", "depth", "tangent3d")
CHILD_CHANNELS = ("silhouette", "depth", "orient2d")


def view_loss(strands: StrandSet, view: TargetView, weights: LossWeights, kind: str,
              width_mm: float, subdivision: int = 1, with_grad: bool = True,
              unit_mm: float = LENGTH_UNIT_MM):
    """Weighted image losses plus w_stick * R_stick for one view.

    Returns (total, terms dict, d(total)/d(points) or None). Terms are raw
    (mm for depth and stick); the total divides length terms by `unit_mm`.
    """
    channels = GUIDE_CHANNELS if kind == "guide" else CHILD_CHANNELS
    rend = render_channels(strands, view.camera, width_mm, channels, subdivision)
    S = rend["silhouette"][..., 0]
    D = rend["depth"][..., 0]
    up = rend.zeros()
    sl = rend.slices
    terms = {}
    lm, gm = loss_mask(S, view.mask)
    ld, gds, gdd = loss_depth(S, D, view.depth, view.mask)
    ls, gss, gsd = reg_stick(S, D, view.scalp_front, view.scalp_back)
    terms["mask"], terms["depth"], terms["stick"] = lm, ld, ls
    wd, wst = weights.w_d / unit_mm, weights.w_stick / unit_mm
    up[..., sl["silhouette"]] += (weights.w_m * gm + wd * gds + wst * gss)[..., None]
    up[..., sl["depth"]] += (wd * gdd + wst * gsd)[..., None]
    total = weights.w_m * lm + wd * ld + wst * ls
    if kind == "guide":
        lt, gt = loss_tangent3d(S, rend["tangent3d"], view.tangent, view.valid)
        terms["tangent"] = lt
        up[..., sl["tangent3d"]] += weights.w_t * gt
        total += weights.w_t * lt
    else:
        lo, go = loss_orient2d(S, rend["orient2d"], view.orient2d, view.valid)
        terms["orient"] = lo
        up[..., sl["orient2d"]] += weights.w_o * go
        total += weights.w_o * lo
    grad = render_channels_backward(rend, up) if with_grad else None
    return total, terms, grad


def total_loss(strands: StrandSet, targets, weights: LossWeights, kind: str, width_mm: float,
               initial_roots, views=None, subdivision: int = 1, with_grad: bool = True,
               unit_mm: float = LENGTH_UNIT_MM):
    """Mean of view losses over `views` (fixed order) plus R_root and R_c."""
    if not targets:
        raise ValueError("no target views")
    views = range(len(targets)) if views is None else sorted(views)
    g = np.zeros_like(strands.points)
    terms = {}
    total = 0.0
    nv = len(views)
    for v in views:
        t, tt, gv = view_loss(strands, targets[v], weights, kind, width_mm, subdivision,
                              with_grad, unit_mm)
        total += t / nv
        for k, val in tt.items():
            terms[k] = terms.get(k, 0.0) + val / nv
        if with_grad:
            g += gv / nv
    lr_, gr = reg_root(strands.roots, initial_roots)
    lc, gc = reg_curvature(strands)
    terms["root"], terms["curv"] = lr_, lc
    total += weights.w_root / unit_mm * lr_ + weights.w_c * lc
    if with_grad:
        g[strands.root_index] += weights.w_root / unit_mm * gr
        g += weights.w_c * gc
    terms["total"] = total
    return total, terms, (g if with_grad else None)


# ---------------------------------------------------------------------------
# stages

@dataclass(eq=False)
class FitResult:
    strands: StrandSet
    history: list = field(default_factory=list)


def _run_stage(strands: StrandSet, targets, weights: LossWeights, stage: StageConfig, kind: str,
               k: int, iterations: int, width_mm: float, tag: str, initial_roots=None,
               log_path=None, checkpoint_dir=None, history=None) -> StrandSet:
    if not targets:
        raise ValueError("empty targets")
    if iterations == 0:
        return strands
    initial_roots = strands.roots.copy() if initial_roots is None else initial_roots
    lap = build_laplacian(strands, k=k, lam=stage.lam)
    u = to_differential(lap, strands.points)
    adam = AdamState.zeros_like(u)
    rng = np.random.default_rng([stage.seed, sum(map(ord, tag))])
    batch = min(stage.batch_views, len(targets)) if stage.batch_views > 0 else len(targets)
    t0 = time.perf_counter()
    rows = history if history is not None else []
    cur = strands
    for it in range(iterations):
        views = np.sort(rng.choice(len(targets), size=batch, replace=False))
        x = from_differential(lap, u)
        cur = strands.with_points(x)
        _, terms, g_x = total_loss(cur, targets, weights, kind, width_mm, initial_roots, views,
                                   stage.subdivision, unit_mm=stage.length_unit_mm)
        g_u = pull_back_gradient(lap, g_x)
        u = adam_step(adam, u, g_u, stage.lr * stage.length_unit_mm, stage.beta1, stage.beta2,
                      stage.eps)
        rows.append({"stage": tag, "iteration": it, **terms,
                     "wall": time.perf_counter() - t0})
        if stage.checkpoint_every and checkpoint_dir and (it + 1) % stage.checkpoint_every == 0:
            from .io import write_hair
            write_hair(Path(checkpoint_dir) / f"{tag}_{it + 1:06d}.hair",
                       strands.with_points(from_differential(lap, u)))
    out = strands.with_points(from_differential(lap, u))
    if log_path is not None:
        write_log(log_path, rows)
    return out


def write_log(path, rows) -> None:
    keys = []
    for r in rows:
        for k in r:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys, restval="")
        w.writeheader()
        w.writerows(rows)


def fit_guides(guides: StrandSet, targets, weights: LossWeights | None = None,
               stage: StageConfig | None = None, log_path=None, checkpoint_dir=None,
               history=None) -> StrandSet:
    """Adam on u = (I + lam L) x with L built at k = K_g over the guides."""
    weights = weights or LossWeights()
    stage = stage or StageConfig()
    return _run_stage(guides, targets, weights, stage, "guide", stage.K_g, stage.I_g,
                      stage.guide_width_mm, "guides", log_path=log_path,
                      checkpoint_dir=checkpoint_dir, history=history)


def fit_children(children: StrandSet, targets, weights: LossWeights | None = None,
                 stage: StageConfig | None = None, log_path=None, checkpoint_dir=None,
                 history=None) -> StrandSet:
    """Two phases: coupled (k = K_c), then relaxed (k = 0) with only strand connectivity."""
    weights = weights or LossWeights()
    stage = stage or StageConfig()
    rows = history if history is not None else []
    roots = children.roots.copy()
    mid = _run_stage(children, targets, weights, stage, "child", stage.K_c, stage.I_c0,
                     stage.width_mm, "children0", initial_roots=roots,
                     checkpoint_dir=checkpoint_dir, history=rows)
    out = _run_stage(mid, targets, weights, stage, "child", 0, stage.I_c1, stage.width_mm,
                     "children1", initial_roots=roots, checkpoint_dir=checkpoint_dir,
                     history=rows)
    if log_path is not None:
        write_log(log_path, rows)
    return out
