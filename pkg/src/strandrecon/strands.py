"""Strand geometry: polylines, spline tessellation, billboards, roots and children."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.spatial import Delaunay, cKDTree
from scipy.stats import qmc

from .camera import Camera
from .mesh import TriMesh, sphere_mesh


class StrandError(ValueError):
    pass


def validate_strand(strand) -> np.ndarray:
    s = np.asarray(strand, dtype=np.float64)
    if s.ndim != 2 or s.shape[1] != 3 or len(s) < 2:
        raise StrandError("a strand needs at least 2 vertices of 3 coordinates")
    if np.any(np.linalg.norm(np.diff(s, axis=0), axis=1) <= 0):
        raise StrandError("consecutive strand vertices must be distinct")
    return s


@dataclass(frozen=True, eq=False)
class StrandSet:
    """Polylines stored strand-major, root-first, in one flat point array."""

    points: np.ndarray  # (N, 3)
    counts: np.ndarray  # (S,) vertices per strand
    role: str = "guide"

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64).reshape(-1, 3)
        counts = np.asarray(self.counts, dtype=np.int64).reshape(-1)
        if counts.sum() != len(pts):
            raise StrandError("point count does not match per-strand counts")
        if np.any(counts < 2):
            raise StrandError("every strand needs at least 2 vertices")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "counts", counts)

    @classmethod
    def from_list(cls, strands, role="guide") -> "StrandSet":
        strands = [np.asarray(s, dtype=np.float64).reshape(-1, 3) for s in strands]
        if not strands:
            return cls(np.zeros((0, 3)), np.zeros(0, dtype=np.int64), role)
        return cls(np.concatenate(strands), [len(s) for s in strands], role)

    @classmethod
    def from_array(cls, arr, role="guide") -> "StrandSet":
        arr = np.asarray(arr, dtype=np.float64)
        S, V = arr.shape[:2]
        return cls(arr.reshape(-1, 3), np.full(S, V), role)

    @property
    def n_strands(self) -> int:
        return len(self.counts)

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.counts)])[:-1].astype(np.int64)

    @property
    def root_index(self) -> np.ndarray:
        return self.offsets

    @property
    def roots(self) -> np.ndarray:
        return self.points[self.offsets]

    @property
    def uniform(self) -> bool:
        return self.n_strands == 0 or bool(np.all(self.counts == self.counts[0]))

    def strand(self, i: int) -> np.ndarray:
        o = self.offsets[i]
        return self.points[o:o + self.counts[i]]

    @property
    def strands(self) -> list[np.ndarray]:
        return np.split(self.points, np.cumsum(self.counts)[:-1]) if self.n_strands else []

    def as_array(self) -> np.ndarray:
        if not self.uniform:
            raise StrandError("strands have differing vertex counts")
        if self.n_strands == 0:
            return np.zeros((0, 0, 3))
        return self.points.reshape(self.n_strands, self.counts[0], 3)

    def with_points(self, points) -> "StrandSet":
        return StrandSet(points, self.counts, self.role)

    def segments(self) -> tuple[np.ndarray, np.ndarray]:
        """(start vertex index, strand id) for every segment."""
        strand_id = np.repeat(np.arange(self.n_strands), self.counts - 1)
        first = np.repeat(self.offsets - np.concatenate([[0], np.cumsum(self.counts - 1)])[:-1],
                          self.counts - 1)
        start = np.arange(int((self.counts - 1).sum())) + first
        return start.astype(np.int64), strand_id.astype(np.int64)

    def lengths(self) -> np.ndarray:
        start, sid = self.segments()
        seg = np.linalg.norm(self.points[start + 1] - self.points[start], axis=1)
        return np.bincount(sid, weights=seg, minlength=self.n_strands)


# ---------------------------------------------------------------------------
# Catmull-Rom tessellation

@lru_cache(maxsize=64)
def catmull_rom_matrix(n: int, factor: int) -> np.ndarray:
    """Dense ((n-1)*factor+1, n) weights of the uniform Catmull-Rom subdivision.

    End tangents use phantom points reflected through the end vertices.
    """
    if n < 2:
        raise StrandError("a strand needs at least 2 vertices")
    if factor < 1:
        raise ValueError("factor must be >= 1")
    m = (n - 1) * factor + 1
    W = np.zeros((m, n))
    for i in range(n - 1):
        # control rows for P_{i-1}, P_i, P_{i+1}, P_{i+2} in terms of real points
        ctrl = np.zeros((4, n))
        ctrl[1, i] = 1.0
        ctrl[2, i + 1] = 1.0
        if i - 1 >= 0:
            ctrl[0, i - 1] = 1.0
        else:
            ctrl[0, 0], ctrl[0, 1] = 2.0, -1.0
        if i + 2 <= n - 1:
            ctrl[3, i + 2] = 1.0
        else:
            ctrl[3, n - 1], ctrl[3, n - 2] = 2.0, -1.0
        for k in range(factor):
            t = k / factor
            b = 0.5 * np.array([
                -t + 2 * t * t - t ** 3,
                2 - 5 * t * t + 3 * t ** 3,
                t + 4 * t * t - 3 * t ** 3,
                -t * t + t ** 3,
            ])
            W[i * factor + k] = b @ ctrl
    W[-1, n - 1] = 1.0
    return W


def subdivide_catmull_rom(strand, factor: int) -> np.ndarray:
    s = validate_strand(strand)
    if factor == 1:
        return s.copy()
    return catmull_rom_matrix(len(s), int(factor)) @ s


def subdivide_set(strands: StrandSet, factor: int) -> StrandSet:
    if factor == 1 or strands.n_strands == 0:
        return strands
    if strands.uniform:
        W = catmull_rom_matrix(int(strands.counts[0]), factor)
        out = np.einsum("ij,sjd->sid", W, strands.as_array())
        return StrandSet.from_array(out, strands.role)
    return StrandSet.from_list([subdivide_catmull_rom(s, factor) for s in strands.strands],
                               strands.role)


def subdivide_set_vjp(strands: StrandSet, factor: int, g_fine: np.ndarray) -> np.ndarray:
    """Pull a gradient on the tessellated points back to the control points."""
    if factor == 1 or strands.n_strands == 0:
        return g_fine
    if strands.uniform:
        V = int(strands.counts[0])
        W = catmull_rom_matrix(V, factor)
        g = np.einsum("ij,sid->sjd", W, g_fine.reshape(strands.n_strands, W.shape[0], 3))
        return g.reshape(-1, 3)
    out, o = [], 0
    for n in strands.counts:
        W = catmull_rom_matrix(int(n), factor)
        out.append(W.T @ g_fine[o:o + W.shape[0]])
        o += W.shape[0]
    return np.concatenate(out)


def resample_polyline(strand: np.ndarray, n: int) -> np.ndarray:
    """Resample to `n` vertices uniformly spaced in arc length."""
    seg = np.linalg.norm(np.diff(strand, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    target = np.linspace(0.0, s[-1], n)
    return np.stack([np.interp(target, s, strand[:, k]) for k in range(3)], axis=1)


# ---------------------------------------------------------------------------
# Billboards

@dataclass(eq=False)
class BillboardMesh:
    """Camera-facing triangle strips; one primitive (quad or tip) per strand segment."""

    vertices: np.ndarray  # (M, 3)
    triangles: np.ndarray  # (T, 3)
    tri_prim: np.ndarray  # (T,) source segment index (shared by the two quad halves)
    edge_internal: np.ndarray  # (T, 3) bool, edge k = (v_k, v_{k+1})
    prim_first_tri: np.ndarray  # (P,) -1 when the segment was dropped
    prim_ntri: np.ndarray  # (P,)
    prim_strand: np.ndarray  # (P,)
    vertex_src: np.ndarray  # (M,) strand vertex each billboard vertex derives from
    vertex_sign: np.ndarray  # (M,) +1 / -1 rail side, 0 for the tip apex
    vertex_seg: np.ndarray  # (M,)
    width: float
    _vjp: dict = field(default_factory=dict, repr=False)

    @property
    def n_prims(self) -> int:
        return len(self.prim_strand)


def _normalize(v):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.where(n > 0, n, 1.0), n[..., 0]


def _normalize_vjp(vhat, norm, g):
    norm = np.where(norm > 0, norm, 1.0)
    return (g - vhat * np.einsum("ij,ij->i", vhat, g)[:, None]) / norm[:, None]


def _arbitrary_perpendicular(v):
    axis = np.zeros(3)
    axis[np.argmin(np.abs(v))] = 1.0
    p = np.cross(v, axis)
    return p / np.linalg.norm(p)


def build_billboards(strands: StrandSet, camera: Camera, width_mm: float = 0.2,
                     near: float = 1e-3) -> BillboardMesh:
    """Convert strands to camera-facing strips.

    A strand with n vertices yields n-2 quads and one tip triangle. Rail
    offsets at vertex j are +-width/2 along normalize(view_j x tangent_j),
    with tangent_j the bisector of the adjacent segment directions.
    A rail whose tangent is parallel to its view ray reuses the previous rail
    direction of the same strand, or else a fixed perpendicular of the view ray.
    """
    if width_mm <= 0:
        raise ValueError("width must be positive")
    P = strands.points
    seg_a, seg_strand = strands.segments()
    n_seg = len(seg_a)
    if n_seg == 0:
        z = np.zeros(0, dtype=np.int64)
        return BillboardMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64), z,
                             np.zeros((0, 3), bool), z, z, z, z, np.zeros(0), z, width_mm)

    e = P[seg_a + 1] - P[seg_a]
    d, e_norm = _normalize(e)
    first = np.ones(n_seg, dtype=bool)
    first[1:] = seg_strand[1:] != seg_strand[:-1]
    last = np.ones(n_seg, dtype=bool)
    last[:-1] = seg_strand[1:] != seg_strand[:-1]

    # rail k sits on vertex seg_a[k]
    s = d.copy()
    s[~first] += d[np.flatnonzero(~first) - 1]
    t, s_norm = _normalize(s)
    bad_s = s_norm < 1e-9
    t[bad_s] = d[bad_s]
    v = P[seg_a] - camera.center
    n = np.cross(v, t)
    nh, n_norm = _normalize(n)
    degenerate = n_norm < 1e-9 * np.linalg.norm(v, axis=1)
    for k in np.flatnonzero(degenerate):
        if not first[k]:
            nh[k] = nh[k - 1]
        else:
            nh[k] = _arbitrary_perpendicular(v[k])
    off = 0.5 * width_mm * nh
    rail_L = P[seg_a] + off
    rail_R = P[seg_a] - off

    _, zc = camera.project(P)
    alive = (zc[seg_a] > near) & (zc[seg_a + 1] > near)

    nv = np.where(last, 3, 4)
    vstart = np.concatenate([[0], np.cumsum(nv)[:-1]])
    M = int(nv.sum())
    verts = np.empty((M, 3))
    vsrc = np.empty(M, dtype=np.int64)
    vsign = np.empty(M)
    vseg = np.repeat(np.arange(n_seg), nv)

    q = np.flatnonzero(~last)
    tp = np.flatnonzero(last)
    b = vstart[q]
    verts[b], verts[b + 1] = rail_L[q], rail_R[q]
    verts[b + 2], verts[b + 3] = rail_L[q + 1], rail_R[q + 1]
    vsrc[b] = vsrc[b + 1] = seg_a[q]
    vsrc[b + 2] = vsrc[b + 3] = seg_a[q + 1]
    vsign[b] = vsign[b + 2] = 1.0
    vsign[b + 1] = vsign[b + 3] = -1.0
    b = vstart[tp]
    verts[b], verts[b + 1], verts[b + 2] = rail_L[tp], rail_R[tp], P[seg_a[tp] + 1]
    vsrc[b] = vsrc[b + 1] = seg_a[tp]
    vsrc[b + 2] = seg_a[tp] + 1
    vsign[b], vsign[b + 1], vsign[b + 2] = 1.0, -1.0, 0.0

    ntri = np.where(last, 1, 2) * alive
    tstart = np.concatenate([[0], np.cumsum(ntri)[:-1]])
    T = int(ntri.sum())
    tris = np.empty((T, 3), dtype=np.int64)
    internal = np.zeros((T, 3), dtype=bool)
    tri_prim = np.repeat(np.arange(n_seg), ntri)
    qa = q[alive[q]]
    ta = tstart[qa]
    b = vstart[qa]
    tris[ta] = np.stack([b, b + 1, b + 2], axis=1)
    tris[ta + 1] = np.stack([b + 1, b + 3, b + 2], axis=1)
    internal[ta, 1] = True  # R_k -> L_{k+1}
    internal[ta + 1, 2] = True  # L_{k+1} -> R_k
    tpa = tp[alive[tp]]
    b = vstart[tpa]
    tris[tstart[tpa]] = np.stack([b, b + 1, b + 2], axis=1)

    mesh = BillboardMesh(verts, tris, tri_prim, internal,
                         np.where(alive, tstart, -1), ntri, seg_strand,
                         vsrc, vsign, vseg, float(width_mm))
    mesh._vjp = dict(seg_a=seg_a, first=first, d=d, e_norm=e_norm, t=t, s_norm=s_norm,
                     bad_s=bad_s, v=v, nh=nh, n_norm=n_norm, degenerate=degenerate,
                     n_points=len(P))
    return mesh


def billboard_vjp(mesh: BillboardMesh, g_vertices: np.ndarray) -> np.ndarray:
    """Pull a gradient on billboard vertices back to the strand vertices."""
    c = mesh._vjp
    if not c:
        return np.zeros((0, 3))
    N = c["n_points"]
    seg_a = c["seg_a"]
    g_P = np.zeros((N, 3))
    np.add.at(g_P, mesh.vertex_src, g_vertices)

    # rail offsets: gradient on off_k for rail k
    n_seg = len(seg_a)
    rail = mesh.vertex_seg.copy()
    # rail vertices 2,3 of a quad sit on rail k+1
    within = np.arange(len(rail)) - np.searchsorted(mesh.vertex_seg, mesh.vertex_seg)
    rail = rail + (within >= 2) * (mesh.vertex_sign != 0)
    g_off = np.zeros((n_seg, 3))
    m = mesh.vertex_sign != 0
    np.add.at(g_off, rail[m], g_vertices[m] * mesh.vertex_sign[m, None])

    keep = ~c["degenerate"]
    g_nh = 0.5 * mesh.width * g_off
    g_n = _normalize_vjp(c["nh"], c["n_norm"], g_nh) * keep[:, None]
    t, v = c["t"], c["v"]
    g_v = np.cross(t, g_n)
    g_t = np.cross(g_n, v)
    np.add.at(g_P, seg_a, g_v)
    g_s = _normalize_vjp(t, c["s_norm"], g_t) * (~c["bad_s"])[:, None]
    g_d = g_s.copy()
    nf = np.flatnonzero(~c["first"])
    np.add.at(g_d, nf - 1, g_s[nf])
    g_d[c["bad_s"]] += g_t[c["bad_s"]]
    g_e = _normalize_vjp(c["d"], c["e_norm"], g_d)
    np.add.at(g_P, seg_a + 1, g_e)
    np.add.at(g_P, seg_a, -g_e)
    return g_P


# ---------------------------------------------------------------------------
# Scalp, roots and children

@dataclass(frozen=True, eq=False)
class ScalpSurface:
    mesh: TriMesh

    @property
    def vertices(self) -> np.ndarray:
        return self.mesh.vertices

    @property
    def normals(self) -> np.ndarray:
        return self.mesh.vertex_normals


def sample_child_roots(scalp: ScalpSurface, n: int, seed: int = 0):
    """Low-discrepancy points on the scalp: (positions (n,3), normals (n,3))."""
    if n == 0:
        return np.zeros((0, 3)), np.zeros((0, 3))
    mesh = scalp.mesh
    area = mesh.areas
    if area.sum() <= 0:
        raise ValueError("scalp has zero area")
    cdf = np.cumsum(area) / area.sum()
    cdf[-1] = 1.0
    sob = qmc.Sobol(d=2, scramble=True, seed=seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        u = sob.random(n)
    tri = np.minimum(np.searchsorted(cdf, u[:, 0], side="right"), len(cdf) - 1)
    lo = np.where(tri > 0, cdf[tri - 1], 0.0)
    u1 = np.clip((u[:, 0] - lo) / (cdf[tri] - lo), 1e-12, 1 - 1e-12)
    su = np.sqrt(u1)
    bary = np.stack([1.0 - su, su * (1.0 - u[:, 1]), su * u[:, 1]], axis=1)
    idx = mesh.triangles[tri]
    pos = np.einsum("nk,nkd->nd", bary, mesh.vertices[idx])
    nrm = np.einsum("nk,nkd->nd", bary, scalp.normals[idx])
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    return pos, nrm


@dataclass(frozen=True, eq=False)
class GuideChildMap:
    indices: np.ndarray  # (C, 4)
    weights: np.ndarray  # (C, 4)


def nearest_four_guides(guide_roots, child_roots) -> GuideChildMap:
    """Inverse-distance weights over the 4 nearest guide roots."""
    guide_roots = np.asarray(guide_roots, dtype=np.float64)
    child_roots = np.atleast_2d(np.asarray(child_roots, dtype=np.float64))
    if len(guide_roots) < 4:
        raise ValueError("need at least 4 guide strands")
    dist, idx = cKDTree(guide_roots).query(child_roots, k=4)
    coincide = dist <= 1e-12
    with np.errstate(divide="ignore"):
        w = 1.0 / dist
    w[coincide.any(axis=1)] = 0.0
    rows = np.flatnonzero(coincide.any(axis=1))
    w[rows, np.argmax(coincide[rows], axis=1)] = 1.0
    w /= w.sum(axis=1, keepdims=True)
    return GuideChildMap(idx.astype(np.int64), w)


def interpolate_children(guides: StrandSet, gmap: GuideChildMap, child_roots) -> StrandSet:
    if not guides.uniform:
        raise StrandError("guides must share a vertex count")
    G = guides.as_array()
    offsets = G - G[:, :1]
    child = np.einsum("ck,ckvd->cvd", gmap.weights, offsets[gmap.indices])
    child += np.asarray(child_roots, dtype=np.float64)[:, None, :]
    return StrandSet.from_array(child, role="child")


# ---------------------------------------------------------------------------
# Synthetic scenes

@dataclass(frozen=True, eq=False)
class SyntheticScene:
    scalp: ScalpSurface  # open cap; vertices are guide roots
    head: TriMesh  # closed scalp solid
    shell: TriMesh  # closed outer hair envelope
    guides: StrandSet  # ground-truth strands grown from the scalp vertices
    children: StrandSet  # dense ground truth
    head_radius: float
    shell_radius: float


def cap_mesh(n_vertices: int, radius: float, max_polar_deg: float) -> TriMesh:
    """Spherical cap (+z pole) with `n_vertices` area-uniform Fibonacci vertices."""
    c = np.cos(np.radians(max_polar_deg))
    i = np.arange(n_vertices) + 0.5
    z = 1.0 - (1.0 - c) * i / n_vertices
    rho = np.sqrt(np.clip(1 - z * z, 0, None))
    phi = np.pi * (3.0 - np.sqrt(5.0)) * np.arange(n_vertices)
    pts = np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)
    theta = np.arccos(np.clip(z, -1, 1))
    flat = np.stack([theta * np.cos(phi), theta * np.sin(phi)], axis=1)
    tri = Delaunay(flat).simplices.copy()
    v = pts[tri]
    nrm = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    flip = np.einsum("ij,ij->i", nrm, v.mean(axis=1)) < 0
    tri[flip] = tri[flip][:, [0, 2, 1]]
    return TriMesh(pts * radius, tri)


def _hair_curve(root_dir, style, height, n_vertices, rng, head_radius):
    """One analytic strand rising `height` mm off a sphere of `head_radius`.

    The strand leaves the scalp along the normal-gravity blend and sweeps
    down the meridian (increasing polar angle) as it rises.
    """
    h = np.linspace(0.0, 1.0, n_vertices)
    x, y, zc = root_dir
    theta0 = np.arccos(np.clip(zc, -1, 1))
    phi = np.arctan2(y, x) if theta0 > 1e-6 else 0.0
    sweep = 0.25 + 0.35 * np.sin(theta0) + rng.uniform(-0.03, 0.03)
    theta = theta0 + sweep * (0.6 * h + 0.4 * h ** 2)
    r = head_radius + height * np.sqrt(h)
    e_r = np.stack([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)], 1)
    e_phi = np.array([-np.sin(phi), np.cos(phi), 0.0])
    pts = r[:, None] * e_r
    ramp = np.clip(h / 0.15, 0.0, 1.0) ** 2
    if style == "wavy":
        amp, period = 2.0 + rng.uniform(-0.3, 0.3), 0.45
        pts += (amp * ramp * np.sin(2 * np.pi * h / period + rng.uniform(0, 2 * np.pi)))[:, None] * e_phi
    elif style == "curly":
        amp, period = 2.5 + rng.uniform(-0.3, 0.3), 0.2
        ph = 2 * np.pi * h / period + rng.uniform(0, 2 * np.pi)
        e_th = np.stack([np.cos(theta) * np.cos(phi), np.cos(theta) * np.sin(phi), -np.sin(theta)], 1)
        pts += (amp * ramp * np.cos(ph))[:, None] * e_phi + (0.6 * amp * ramp * np.sin(ph))[:, None] * e_th
    elif style != "straight":
        raise ValueError(f"unknown style {style!r}")
    return pts


def generate_synthetic_scene(style: str = "straight", n_guides: int = 653,
                             n_children: int = 2000, seed: int = 0, *,
                             head_radius: float = 60.0, hair_height: float = 18.0,
                             max_polar_deg: float = 75.0, n_vertices: int = 33) -> SyntheticScene:
    """Hemisphere-capped head with analytic ground-truth hair.

    Guides grow from every scalp vertex; children grow from Sobol roots.
    The shell is a sphere enclosing every strand vertex.
    """
    rng = np.random.default_rng(seed)
    cap = cap_mesh(n_guides, head_radius, max_polar_deg)
    scalp = ScalpSurface(cap)

    def grow(roots):
        return [_hair_curve(p / np.linalg.norm(p), style, hair_height, n_vertices, rng, head_radius)
                for p in roots]

    guides = StrandSet.from_list(grow(cap.vertices))
    child_roots, _ = sample_child_roots(scalp, n_children, seed=seed + 7919)
    # pin child roots exactly on the sphere so the analytic curve starts there
    child_roots = child_roots / np.linalg.norm(child_roots, axis=1, keepdims=True) * head_radius
    children = StrandSet.from_list(grow(child_roots), role="child") if n_children else \
        StrandSet(np.zeros((0, 3)), np.zeros(0, np.int64), "child")
    allpts = np.concatenate([guides.points, children.points])
    shell_r = float(np.linalg.norm(allpts, axis=1).max()) + 1.0
    head = sphere_mesh(head_radius * 0.995, n_vertices=1500)
    shell = sphere_mesh(shell_r / np.cos(np.pi / 60), n_vertices=1500)
    return SyntheticScene(scalp, head, shell, guides, children, head_radius, shell_r)


def turning_angles(strands: StrandSet) -> np.ndarray:
    start, sid = strands.segments()
    d = strands.points[start + 1] - strands.points[start]
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    same = sid[1:] == sid[:-1]
    c = np.einsum("ij,ij->i", d[1:], d[:-1])[same]
    return np.arccos(np.clip(c, -1, 1))
