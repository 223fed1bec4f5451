"""2D orientation maps, 3D orientation lifting and global sign disambiguation."""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
from scipy.signal import fftconvolve
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import breadth_first_order, connected_components, minimum_spanning_tree
from scipy.spatial import cKDTree

from .camera import Camera


@dataclass(frozen=True, eq=False)
class OrientationMap:
    angle: np.ndarray  # (H, W) radians in [0, pi), image x right / y down
    confidence: np.ndarray  # (H, W), 0 where invalid

    @property
    def valid(self) -> np.ndarray:
        return self.confidence > 0


@dataclass(frozen=True, eq=False)
class OrientedPointCloud:
    points: np.ndarray
    directions: np.ndarray
    confidences: np.ndarray
    view_ids: np.ndarray

    def __post_init__(self):
        n = len(self.points)
        for name in ("directions", "confidences", "view_ids"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} length differs from points")
        if n and np.abs(np.linalg.norm(self.directions, axis=1) - 1).max() > 1e-6:
            raise ValueError("directions must be unit length")

    def __len__(self):
        return len(self.points)

    @classmethod
    def empty(cls) -> "OrientedPointCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), np.zeros(0, np.int64))

    def subset(self, idx) -> "OrientedPointCloud":
        return OrientedPointCloud(self.points[idx], self.directions[idx], self.confidences[idx],
                                  self.view_ids[idx])

    def with_directions(self, d) -> "OrientedPointCloud":
        return OrientedPointCloud(self.points, d, self.confidences, self.view_ids)


def _unit(v):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.where(n > 0, n, 1.0)


# ---------------------------------------------------------------------------
# Gabor filtering

def gabor_kernel(theta: float, wavelength: float, sigma_scale: float = 0.5,
                 aspect: float = 2.0) -> np.ndarray:
    """Even Gabor kernel tuned to lines running at `theta`; zero mean, unit L1."""
    sigma = sigma_scale * wavelength
    half = int(np.ceil(3 * sigma * aspect))
    y, x = np.mgrid[-half:half + 1, -half:half + 1].astype(np.float64)
    along = x * np.cos(theta) + y * np.sin(theta)
    across = -x * np.sin(theta) + y * np.cos(theta)
    env = np.exp(-0.5 * (across ** 2 / sigma ** 2 + along ** 2 / (aspect * sigma) ** 2))
    k = env * np.cos(2 * np.pi * across / wavelength)
    k -= env * (k.sum() / env.sum())
    return k / np.abs(k).sum()


def gabor_orientation(image: np.ndarray, n_orientations: int = 32,
                      wavelengths=(2.0, 4.0, 6.0, 8.0), sigma_scale: float = 0.5,
                      confidence_floor: float = 0.02) -> OrientationMap:
    """Per-pixel dominant line orientation from a bank of even Gabor filters."""
    img = np.asarray(image, dtype=np.float64)
    thetas = np.arange(n_orientations) * np.pi / n_orientations
    resp = np.zeros((n_orientations,) + img.shape)
    for i, th in enumerate(thetas):
        for lam in wavelengths:
            k = gabor_kernel(th, lam, sigma_scale)
            half = k.shape[0] // 2
            padded = np.pad(img, half, mode="symmetric")
            r = np.abs(fftconvolve(padded, k, mode="valid"))
            np.maximum(resp[i], r, out=resp[i])
    best = resp.argmax(axis=0)
    conf = resp.max(axis=0) - resp.mean(axis=0)
    conf = np.where(conf >= confidence_floor, conf, 0.0)
    return OrientationMap(thetas[best], conf)


# ---------------------------------------------------------------------------
# lifting

def fibonacci_hemisphere(n: int) -> np.ndarray:
    """n unit vectors spread over the z >= 0 hemisphere."""
    i = np.arange(n) + 0.5
    z = 1.0 - i / n
    rho = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = np.pi * (3.0 - np.sqrt(5.0)) * np.arange(n)
    return np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)


@numba.njit(cache=True)
def _score(d, J, o, w):
    s = 0.0
    for v in range(J.shape[0]):
        if w[v] == 0.0:
            continue
        px = J[v, 0, 0] * d[0] + J[v, 0, 1] * d[1] + J[v, 0, 2] * d[2]
        py = J[v, 1, 0] * d[0] + J[v, 1, 1] * d[1] + J[v, 1, 2] * d[2]
        n = np.sqrt(px * px + py * py)
        if n == 0.0:
            continue
        s += w[v] * abs(px * o[v, 0] + py * o[v, 1]) / n
    return s


@numba.njit(cache=True)
def _lift_kernel(J, o, w, cand, refine_steps, out_dir, out_score):
    for p in range(J.shape[0]):
        best = -1.0
        bi = 0
        for c in range(cand.shape[0]):
            s = _score(cand[c], J[p], o[p], w[p])
            if s > best:
                best = s
                bi = c
        d = cand[bi].copy()
        step = 0.08
        for _ in range(refine_steps):
            # tangent frame at d
            if abs(d[0]) < 0.9:
                ax = np.array([1.0, 0.0, 0.0])
            else:
                ax = np.array([0.0, 1.0, 0.0])
            t1 = np.cross(d, ax)
            t1 /= np.linalg.norm(t1)
            t2 = np.cross(d, t1)
            improved = False
            for k in range(4):
                sgn = 1.0 if k % 2 == 0 else -1.0
                tt = t1 if k < 2 else t2
                cd = d + sgn * step * tt
                cd /= np.linalg.norm(cd)
                s = _score(cd, J[p], o[p], w[p])
                if s > best:
                    best = s
                    d = cd
                    improved = True
            if not improved:
                step *= 0.5
        if d[2] < 0.0:
            d = -d
        out_dir[p] = d
        out_score[p] = best


def backproject(camera: Camera, pix_xy: np.ndarray, depth: np.ndarray) -> np.ndarray:
    x = (pix_xy[:, 0] - camera.cx) / camera.fx * depth
    y = (pix_xy[:, 1] - camera.cy) / camera.fy * depth
    pc = np.stack([x, y, depth], axis=1)
    return (pc - camera.t) @ camera.R


def lift_orientations(depth_maps, orientation_maps, cameras, reference_view: int,
                      n_candidates: int = 256, depth_tolerance: float = 3.0,
                      agreement_floor: float = 0.7, stride: int = 1,
                      refine_steps: int = 12) -> OrientedPointCloud:
    """Fixed-depth orientation lifting of one reference view's valid pixels.

    Each pixel's 3D direction maximizes the confidence-weighted |cos| agreement
    between the candidate's projection and the observed 2D orientation in
    every view where the point is visible (depth-consistent and valid).
    """
    ref = cameras[reference_view]
    dref = depth_maps[reference_view]
    omap = orientation_maps[reference_view]
    ys, xs = np.nonzero(omap.valid & np.isfinite(dref))
    sel = (ys % stride == 0) & (xs % stride == 0)
    ys, xs = ys[sel], xs[sel]
    if len(ys) == 0:
        return OrientedPointCloud.empty()
    pts = backproject(ref, np.stack([xs + 0.5, ys + 0.5], axis=1), dref[ys, xs])
    V = len(cameras)
    J = np.zeros((len(pts), V, 2, 3))
    o = np.zeros((len(pts), V, 2))
    w = np.zeros((len(pts), V))
    for v, cam in enumerate(cameras):
        sxy, z = cam.project(pts)
        ix = np.floor(sxy[:, 0]).astype(np.int64)
        iy = np.floor(sxy[:, 1]).astype(np.int64)
        inb = (ix >= 0) & (ix < cam.width) & (iy >= 0) & (iy < cam.height) & (z > 0)
        ixc, iyc = np.clip(ix, 0, cam.width - 1), np.clip(iy, 0, cam.height - 1)
        dm = depth_maps[v][iyc, ixc]
        om = orientation_maps[v]
        ok = inb & np.isfinite(dm) & (np.abs(dm - z) <= depth_tolerance) & om.valid[iyc, ixc]
        if v == reference_view:
            ok = np.ones(len(pts), dtype=bool)
        th = om.angle[iyc, ixc]
        J[:, v] = cam.direction_jacobian(pts)
        o[:, v, 0], o[:, v, 1] = np.cos(th), np.sin(th)
        w[:, v] = np.where(ok, om.confidence[iyc, ixc], 0.0)
    n_views = (w > 0).sum(axis=1)
    keep = n_views >= 2
    J, o, w, pts = J[keep], o[keep], w[keep], pts[keep]
    if len(pts) == 0:
        return OrientedPointCloud.empty()
    dirs = np.zeros((len(pts), 3))
    score = np.zeros(len(pts))
    _lift_kernel(J, o, w, fibonacci_hemisphere(n_candidates), refine_steps, dirs, score)
    agreement = score / w.sum(axis=1)
    good = agreement >= agreement_floor
    conf = agreement * w.sum(axis=1) / np.maximum((w > 0).sum(axis=1), 1)
    return OrientedPointCloud(pts[good], _unit(dirs[good]), conf[good],
                              np.full(int(good.sum()), reference_view, dtype=np.int64))


# ---------------------------------------------------------------------------
# denoising and downsampling

def _aligned_mean(pairs_i, pairs_j, directions, weights, n):
    s = np.sign(np.einsum("ij,ij->i", directions[pairs_i], directions[pairs_j]))
    s[s == 0] = 1.0
    acc = np.zeros((n, 3))
    np.add.at(acc, pairs_i, (weights[pairs_j] * s)[:, None] * directions[pairs_j])
    return acc


def meanshift_denoise(cloud: OrientedPointCloud, radius_mm: float = 4.0,
                      iterations: int = 3) -> OrientedPointCloud:
    """Replace each direction with the sign-aligned weighted mean of its neighbourhood."""
    if radius_mm <= 0:
        raise ValueError("radius must be positive")
    if len(cloud) == 0:
        return cloud
    tree = cKDTree(cloud.points)
    pairs = tree.query_pairs(radius_mm, output_type="ndarray")
    n = len(cloud)
    i = np.concatenate([pairs[:, 0], pairs[:, 1], np.arange(n)])
    j = np.concatenate([pairs[:, 1], pairs[:, 0], np.arange(n)])
    d = cloud.directions.copy()
    for _ in range(iterations):
        acc = _aligned_mean(i, j, d, cloud.confidences, n)
        norm = np.linalg.norm(acc, axis=1)
        d = np.where(norm[:, None] > 1e-12, acc / np.where(norm > 0, norm, 1)[:, None], d)
    return cloud.with_directions(d)


def downsample(cloud: OrientedPointCloud, voxel_mm: float = 5.0):
    """One representative per occupied voxel and the original->representative map."""
    if voxel_mm <= 0:
        raise ValueError("voxel size must be positive")
    if len(cloud) == 0:
        return cloud, np.zeros(0, dtype=np.int64)
    keys = np.floor(cloud.points / voxel_mm).astype(np.int64)
    _, first, back = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    back = back.ravel()
    m = len(first)
    w = cloud.confidences
    wsum = np.bincount(back, weights=w, minlength=m)
    wsafe = np.where(wsum > 0, wsum, 1.0)
    pos = np.stack([np.bincount(back, weights=w * cloud.points[:, k], minlength=m)
                    for k in range(3)], 1) / wsafe[:, None]
    # align every member to the most confident member of its voxel
    order = np.lexsort((-w, back))
    lead = np.empty(m, dtype=np.int64)
    lead[back[order[::-1]]] = order[::-1]
    ref = cloud.directions[lead[back]]
    s = np.where(np.einsum("ij,ij->i", cloud.directions, ref) < 0, -1.0, 1.0)
    acc = np.zeros((m, 3))
    np.add.at(acc, back, (w * s)[:, None] * cloud.directions)
    norm = np.linalg.norm(acc, axis=1)
    d = np.where(norm[:, None] > 1e-12, acc / np.where(norm > 0, norm, 1)[:, None],
                 cloud.directions[lead])
    rep = OrientedPointCloud(pos, d, wsum / np.bincount(back, minlength=m),
                             cloud.view_ids[lead])
    return rep, back


# ---------------------------------------------------------------------------
# sign disambiguation

@dataclass(eq=False)
class SignGraph:
    edges: np.ndarray  # (E, 2) i < j
    weights: np.ndarray  # (E,) 1 - |dot|
    dots: np.ndarray  # (E,) raw inner products
    component: np.ndarray  # (n,)
    n_components: int


def knn_graph(cloud: OrientedPointCloud, k: int = 8) -> SignGraph:
    n = len(cloud)
    kk = min(k + 1, n)
    _, idx = cKDTree(cloud.points).query(cloud.points, k=kk)
    idx = np.atleast_2d(idx).reshape(n, kk)
    i = np.repeat(np.arange(n), kk - 1)
    j = idx[:, 1:].ravel()
    e = np.sort(np.stack([i, j], 1), axis=1)
    e = e[e[:, 0] != e[:, 1]]
    e = np.unique(e, axis=0) if len(e) else np.zeros((0, 2), dtype=np.int64)
    dots = np.einsum("ij,ij->i", cloud.directions[e[:, 0]], cloud.directions[e[:, 1]])
    adj = coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
    nc, comp = connected_components(adj, directed=False)
    return SignGraph(e, 1.0 - np.abs(dots), dots, comp, nc)


@numba.njit(cache=True)
def _propagate(order, pred, flip, signs):
    for t in range(order.shape[0]):
        v = order[t]
        p = pred[v]
        if p < 0:
            signs[v] = 1.0
        else:
            signs[v] = signs[p] * flip[v]


def graph_score(graph: SignGraph, signs: np.ndarray) -> float:
    return float(np.sum(signs[graph.edges[:, 0]] * signs[graph.edges[:, 1]] * graph.dots))


def disambiguate_mst(cloud: OrientedPointCloud, k_graph: int = 8, restarts: int = 100,
                     perturbation: float = 0.1, rng_seed: int = 0):
    """Resolve per-point signs by perturbed-restart MST propagation.

    Returns (signs, best score). Each connected component keeps the signs of
    its best-scoring restart; scores count every graph edge.
    """
    n = len(cloud)
    if n == 0:
        raise ValueError("cannot disambiguate an empty cloud")
    if restarts < 1 or k_graph < 1:
        raise ValueError("restarts and k_graph must be >= 1")
    g = knn_graph(cloud, k_graph)
    e = g.edges
    roots = np.array([np.flatnonzero(g.component == c)[0] for c in range(g.n_components)])
    best_signs = np.ones(n)
    best_comp = np.full(g.n_components, -np.inf)
    edge_comp = g.component[e[:, 0]] if len(e) else np.zeros(0, dtype=np.int64)
    for r in range(restarts):
        rng = np.random.default_rng([rng_seed, r])
        w = g.weights + rng.uniform(-perturbation, perturbation, size=len(e))
        # shift keeps every weight positive; MST topology is unchanged
        w = w + 2.0 * perturbation + 1.0
        mst = minimum_spanning_tree(coo_matrix((w, (e[:, 0], e[:, 1])), shape=(n, n)).tocsr())
        signs = np.ones(n)
        for root in roots:
            order, pred = breadth_first_order(mst, root, directed=False, return_predecessors=True)
            pv = pred.copy()
            pv[pv < 0] = -1
            dots = np.ones(n)
            ch = order[1:]
            dots[ch] = np.einsum("ij,ij->i", cloud.directions[ch], cloud.directions[pv[ch]])
            flip = np.where(dots < 0, -1.0, 1.0)
            _propagate(order.astype(np.int64), pv.astype(np.int64), flip, signs)
        contrib = signs[e[:, 0]] * signs[e[:, 1]] * g.dots
        comp_score = np.bincount(edge_comp, weights=contrib, minlength=g.n_components)
        better = comp_score > best_comp
        if better.any():
            take = better[g.component]
            best_signs[take] = signs[take]
            best_comp[better] = comp_score[better]
    return best_signs, float(best_comp[np.isfinite(best_comp)].sum())


def apply_signs(cloud: OrientedPointCloud, signs) -> OrientedPointCloud:
    return cloud.with_directions(cloud.directions * np.asarray(signs)[:, None])


def gravity_flip(cloud: OrientedPointCloud, down=(0.0, 0.0, -1.0)) -> OrientedPointCloud:
    """Negate the whole field when it mostly points against gravity."""
    s = float(np.sum(cloud.confidences * (cloud.directions @ np.asarray(down, dtype=np.float64))))
    return cloud.with_directions(-cloud.directions) if s < 0 else cloud


def propagate_and_filter(full: OrientedPointCloud, representatives: OrientedPointCloud,
                         back_map, angle_cutoff_deg: float = 45.0) -> OrientedPointCloud:
    """Align every original point to its representative; drop those deviating past the cutoff."""
    back_map = np.asarray(back_map)
    if len(full) == 0:
        return full
    ref = representatives.directions[back_map]
    dots = np.einsum("ij,ij->i", full.directions, ref)
    d = np.where(dots[:, None] < 0, -full.directions, full.directions)
    cosang = np.minimum(np.abs(dots), 1.0)
    keep = cosang >= np.cos(np.radians(angle_cutoff_deg)) - 1e-12
    if angle_cutoff_deg <= 0:
        keep = cosang >= 1.0 - 1e-12
    out = full.with_directions(d)
    return out.subset(np.flatnonzero(keep))
