"""Software rasterizer with ID-boundary anti-aliasing and its analytic backward pass.

Pixel (row y, column x) has its center at screen position (x + 0.5, y + 0.5).
Every pixel is blended with its 8 neighbours: where the neighbour belongs to
a different primitive, the blend factor comes from the boundary edge of the
nearer primitive that separates the two pixel centers: by default its
distance from the center of the pixel (clamped to [0, 1]), or, with
r_mode="crossing", where it cuts the segment between the two centers. That
edge is the only route by which geometry receives gradients from coverage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .camera import Camera
from .strands import (BillboardMesh, StrandSet, billboard_vjp, build_billboards,
                      subdivide_set, subdivide_set_vjp)

BACKGROUND = -1
NEAR = 1e-3

# N8 neighbour offsets (dy, dx)
N8 = np.array([(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)],
              dtype=np.int64)

R_MODES = ("distance", "crossing")
R_MODE = "distance"

CHANNELS = {"silhouette": 1, "depth": 1, "tangent3d": 3, "orient2d": 2, "id_color": 3}


@dataclass(eq=False)
class RasterMesh:
    """Generic triangle soup for rasterization: one primitive per triangle."""

    vertices: np.ndarray
    triangles: np.ndarray
    tri_prim: np.ndarray
    edge_internal: np.ndarray
    prim_first_tri: np.ndarray
    prim_ntri: np.ndarray

    @classmethod
    def from_trimesh(cls, mesh) -> "RasterMesh":
        T = len(mesh.triangles)
        return cls(mesh.vertices, mesh.triangles, np.arange(T), np.zeros((T, 3), bool),
                   np.arange(T), np.ones(T, dtype=np.int64))


@dataclass(eq=False)
class RenderBuffers:
    attr: np.ndarray  # (H, W, C)
    depth: np.ndarray  # (H, W), inf on background
    tri: np.ndarray  # (H, W) triangle index, -1 on background
    ids: np.ndarray  # (H, W) primitive id, -1 on background
    lam: np.ndarray  # (H, W, 3) screen-space barycentrics
    screen: np.ndarray  # (M, 2)
    z: np.ndarray  # (M,)
    attributes: np.ndarray  # (M, C) per-vertex attributes
    background: np.ndarray  # (C,)

    @property
    def resolution(self) -> tuple[int, int]:
        return self.tri.shape


@dataclass(eq=False)
class AAOutput:
    """Anti-aliased image plus one record per (pixel, N8 neighbour) pair whose IDs differ."""

    color: np.ndarray  # (H, W, C)
    buffers: RenderBuffers
    pixel: np.ndarray  # (K,) flat index py * W + px of s
    neighbour: np.ndarray  # (K,) row of N8
    edge0: np.ndarray  # (K,) crossing edge start vertex, -1 if no crossing
    edge1: np.ndarray
    r: np.ndarray  # (K,) blend factor
    u: np.ndarray  # (K,) raw crossing parameter from the owning pixel
    side: np.ndarray  # (K,) +1 owner at s, -1 owner at the neighbour
    live: np.ndarray  # (K,) crossing has a geometry gradient (unclamped)
    mesh: object
    camera: Camera
    r_mode: str = "distance"


@dataclass(eq=False)
class VertexGrads:
    positions: np.ndarray  # (M, 3) world-space gradient per raster vertex
    attributes: np.ndarray  # (M, C)
    screen: np.ndarray  # (M, 2)
    z: np.ndarray  # (M,)


# ---------------------------------------------------------------------------
# kernels

@numba.njit(cache=True)
def _owns(dx, dy):
    return dy < 0.0 or (dy == 0.0 and dx > 0.0)


@numba.njit(cache=True)
def _raster_kernel(sxy, z, tris, H, W, near, tri_plane, depth, lam, farthest=False):
    for t in range(tris.shape[0]):
        i0, i1, i2 = tris[t, 0], tris[t, 1], tris[t, 2]
        z0, z1, z2 = z[i0], z[i1], z[i2]
        if z0 <= near or z1 <= near or z2 <= near:
            continue
        x0, y0 = sxy[i0, 0], sxy[i0, 1]
        x1, y1 = sxy[i1, 0], sxy[i1, 1]
        x2, y2 = sxy[i2, 0], sxy[i2, 1]
        A = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if A == 0.0 or not np.isfinite(A):
            continue
        sg = 1.0 if A > 0.0 else -1.0
        own0 = _owns(sg * (x2 - x1), sg * (y2 - y1))
        own1 = _owns(sg * (x0 - x2), sg * (y0 - y2))
        own2 = _owns(sg * (x1 - x0), sg * (y1 - y0))
        xmin = min(x0, x1, x2)
        xmax = max(x0, x1, x2)
        ymin = min(y0, y1, y2)
        ymax = max(y0, y1, y2)
        if xmax < 0.0 or ymax < 0.0 or xmin > W or ymin > H:
            continue
        ix0 = max(0, int(np.ceil(xmin - 0.5)))
        ix1 = min(W - 1, int(np.floor(xmax - 0.5)))
        iy0 = max(0, int(np.ceil(ymin - 0.5)))
        iy1 = min(H - 1, int(np.floor(ymax - 0.5)))
        for py in range(iy0, iy1 + 1):
            cy = py + 0.5
            for px in range(ix0, ix1 + 1):
                cx = px + 0.5
                e0 = sg * ((x1 - cx) * (y2 - cy) - (x2 - cx) * (y1 - cy))
                e1 = sg * ((x2 - cx) * (y0 - cy) - (x0 - cx) * (y2 - cy))
                e2 = sg * ((x0 - cx) * (y1 - cy) - (x1 - cx) * (y0 - cy))
                if e0 < 0.0 or e1 < 0.0 or e2 < 0.0:
                    continue
                if (e0 == 0.0 and not own0) or (e1 == 0.0 and not own1) or (e2 == 0.0 and not own2):
                    continue
                l0 = e0 / (sg * A)
                l1 = e1 / (sg * A)
                l2 = e2 / (sg * A)
                q = l0 / z0 + l1 / z1 + l2 / z2
                d = 1.0 / q
                if (d > depth[py, px]) if farthest else (d < depth[py, px]):
                    depth[py, px] = d
                    tri_plane[py, px] = t
                    lam[py, px, 0] = l0
                    lam[py, px, 1] = l1
                    lam[py, px, 2] = l2


@numba.njit(cache=True)
def _shade_kernel(tri_plane, lam, z, tris, attrs, bg, out):
    H, W = tri_plane.shape
    C = attrs.shape[1]
    for py in range(H):
        for px in range(W):
            t = tri_plane[py, px]
            if t < 0:
                for c in range(C):
                    out[py, px, c] = bg[c]
                continue
            w0 = lam[py, px, 0] / z[tris[t, 0]]
            w1 = lam[py, px, 1] / z[tris[t, 1]]
            w2 = lam[py, px, 2] / z[tris[t, 2]]
            q = w0 + w1 + w2
            for c in range(C):
                out[py, px, c] = (w0 * attrs[tris[t, 0], c] + w1 * attrs[tris[t, 1], c]
                                  + w2 * attrs[tris[t, 2], c]) / q


@numba.njit(cache=True)
def _cross(ax, ay, bx, by):
    return ax * by - ay * bx


@numba.njit(cache=True)
def _first_exit(ox, oy, pxx, pyy, prim, sxy, tris, edge_internal, prim_first_tri, prim_ntri):
    """Smallest parameter along O->P at which the segment leaves primitive `prim`."""
    best_u = np.inf
    be0 = -1
    be1 = -1
    f = prim_first_tri[prim]
    if f < 0:
        return best_u, be0, be1
    dx = pxx - ox
    dy = pyy - oy
    for t in range(f, f + prim_ntri[prim]):
        for k in range(3):
            if edge_internal[t, k]:
                continue
            a = tris[t, k]
            b = tris[t, (k + 1) % 3]
            ex = sxy[b, 0] - sxy[a, 0]
            ey = sxy[b, 1] - sxy[a, 1]
            den = _cross(dx, dy, ex, ey)
            if den == 0.0:
                continue
            fx = sxy[a, 0] - ox
            fy = sxy[a, 1] - oy
            u = _cross(fx, fy, ex, ey) / den
            w = _cross(fx, fy, dx, dy) / den
            if w < 0.0 or w > 1.0 or u < -1e-9 or u > 1.0 + 1e-9:
                continue
            if u < best_u:
                best_u = u
                be0 = a
                be1 = b
    return best_u, be0, be1


@numba.njit(cache=True)
def _count_crossings(ids, n8):
    H, W = ids.shape
    k = 0
    for py in range(H):
        for px in range(W):
            ida = ids[py, px]
            for n in range(8):
                qy = py + n8[n, 0]
                qx = px + n8[n, 1]
                if 0 <= qy < H and 0 <= qx < W and ids[qy, qx] != ida:
                    k += 1
    return k


@numba.njit(cache=True)
def _aa_kernel(tri_plane, ids, depth, color, sxy, tris, tri_prim, edge_internal,
               prim_first_tri, prim_ntri, n8, out, cpix, cn, edge0, edge1, rr, uu, side, live,
               distance):
    # out starts as a copy of color; each ID-changing neighbour pair moves
    # (1 - r) / 9 of the pixel towards the neighbour's colour
    H, W = tri_plane.shape
    C = color.shape[2]
    k = 0
    for py in range(H):
        for px in range(W):
            ida = ids[py, px]
            for n in range(8):
                qy = py + n8[n, 0]
                qx = px + n8[n, 1]
                if qy < 0 or qy >= H or qx < 0 or qx >= W or ids[qy, qx] == ida:
                    continue
                ds = depth[py, px]
                dn = depth[qy, qx]
                ts = tri_plane[py, px]
                tn = tri_plane[qy, qx]
                owner_s = ds < dn or (ds == dn and ts < tn)
                sx = px + 0.5
                sy = py + 0.5
                nx = qx + 0.5
                ny = qy + 0.5
                r = 0.5
                cpix[k] = py * W + px
                cn[k] = n
                edge0[k] = -1
                edge1[k] = -1
                uu[k] = 0.0
                side[k] = 0
                live[k] = False
                for attempt in range(2):
                    at_s = owner_s if attempt == 0 else not owner_s
                    t_own = ts if at_s else tn
                    if t_own < 0:
                        continue
                    prim = tri_prim[t_own]
                    if at_s:
                        u, a, b = _first_exit(sx, sy, nx, ny, prim, sxy, tris, edge_internal,
                                              prim_first_tri, prim_ntri)
                    else:
                        u, a, b = _first_exit(nx, ny, sx, sy, prim, sxy, tris, edge_internal,
                                              prim_first_tri, prim_ntri)
                    if a < 0:
                        continue
                    if distance:
                        # perpendicular distance from the centre of s to the edge line
                        ex = sxy[b, 0] - sxy[a, 0]
                        ey = sxy[b, 1] - sxy[a, 1]
                        el = np.sqrt(ex * ex + ey * ey)
                        tpar = abs(_cross(ex, ey, sx - sxy[a, 0], sy - sxy[a, 1])) / el
                    else:
                        tpar = u if at_s else 1.0 - u
                    r = min(1.0, max(0.0, tpar))
                    edge0[k] = a
                    edge1[k] = b
                    uu[k] = u
                    side[k] = 1 if at_s else -1
                    live[k] = 0.0 < tpar < 1.0
                    break
                rr[k] = r
                k += 1
                for c in range(C):
                    out[py, px, c] += (1.0 - r) * (color[qy, qx, c] - color[py, px, c]) / 9.0


@numba.njit(cache=True)
def _aa_backward_kernel(g_aa, color, cpix, cn, edge0, edge1, rr, live, side, sxy, n8,
                        g_color, g_sxy, distance):
    W = color.shape[1]
    C = color.shape[2]
    for k in range(cpix.shape[0]):
        py = cpix[k] // W
        px = cpix[k] - py * W
        qy = py + n8[cn[k], 0]
        qx = px + n8[cn[k], 1]
        sx = px + 0.5
        sy = py + 0.5
        r = rr[k]
        g_r = 0.0
        for c in range(C):
            g = g_aa[py, px, c] / 9.0
            g_color[py, px, c] += (r - 1.0) * g
            g_color[qy, qx, c] += (1.0 - r) * g
            g_r += g * (color[py, px, c] - color[qy, qx, c])
        if not live[k] or g_r == 0.0:
            continue
        a = edge0[k]
        b = edge1[k]
        if distance:
            ex = sxy[b, 0] - sxy[a, 0]
            ey = sxy[b, 1] - sxy[a, 1]
            el = np.sqrt(ex * ex + ey * ey)
            cr = _cross(ex, ey, sx - sxy[a, 0], sy - sxy[a, 1])
            sg = g_r / el if cr >= 0.0 else -g_r / el
            dist = abs(cr) / el
            # d|cr|/d(a, b) and d(el)/d(a, b)
            g_sxy[a, 0] += sg * (sxy[b, 1] - sy) + g_r * dist * ex / (el * el)
            g_sxy[a, 1] += sg * (sx - sxy[b, 0]) + g_r * dist * ey / (el * el)
            g_sxy[b, 0] += sg * (sy - sxy[a, 1]) - g_r * dist * ex / (el * el)
            g_sxy[b, 1] += sg * (sxy[a, 0] - sx) - g_r * dist * ey / (el * el)
            continue
        if side[k] > 0:
            ox, oy, qxx, qyy = sx, sy, qx + 0.5, qy + 0.5
            sgn = 1.0
        else:
            ox, oy, qxx, qyy = qx + 0.5, qy + 0.5, sx, sy
            sgn = -1.0
        dx = qxx - ox
        dy = qyy - oy
        ex = sxy[b, 0] - sxy[a, 0]
        ey = sxy[b, 1] - sxy[a, 1]
        fx = sxy[a, 0] - ox
        fy = sxy[a, 1] - oy
        num = _cross(fx, fy, ex, ey)
        den = _cross(dx, dy, ex, ey)
        # u = num / den
        gx1 = sxy[b, 0] - ox
        gy1 = sxy[b, 1] - oy
        dnum_a_x, dnum_a_y = gy1, -gx1
        dnum_b_x, dnum_b_y = -fy, fx
        dden_a_x, dden_a_y = dy, -dx
        dden_b_x, dden_b_y = -dy, dx
        inv = 1.0 / (den * den)
        kk = g_r * sgn
        g_sxy[a, 0] += kk * (dnum_a_x * den - num * dden_a_x) * inv
        g_sxy[a, 1] += kk * (dnum_a_y * den - num * dden_a_y) * inv
        g_sxy[b, 0] += kk * (dnum_b_x * den - num * dden_b_x) * inv
        g_sxy[b, 1] += kk * (dnum_b_y * den - num * dden_b_y) * inv


@numba.njit(cache=True)
def _shade_backward_kernel(g_color, color, tri_plane, lam, sxy, z, tris, attrs,
                           g_attr, g_sxy, g_z):
    H, W = tri_plane.shape
    C = attrs.shape[1]
    dE = np.zeros((3, 3, 2))
    for py in range(H):
        for px in range(W):
            t = tri_plane[py, px]
            if t < 0:
                continue
            cx = px + 0.5
            cy = py + 0.5
            iv = tris[t]
            zz = np.empty(3)
            ll = np.empty(3)
            for k in range(3):
                zz[k] = z[iv[k]]
                ll[k] = lam[py, px, k]
            q = ll[0] / zz[0] + ll[1] / zz[1] + ll[2] / zz[2]
            g_lam = np.zeros(3)
            for k in range(3):
                b = (ll[k] / zz[k]) / q
                gz = 0.0
                gl = 0.0
                for c in range(C):
                    g = g_color[py, px, c]
                    if g == 0.0:
                        continue
                    diff = attrs[iv[k], c] - color[py, px, c]
                    g_attr[iv[k], c] += b * g
                    gl += g * diff
                    gz += g * diff
                g_lam[k] = gl / (zz[k] * q)
                g_z[iv[k]] += -b * gz / zz[k]
            if g_lam[0] == 0.0 and g_lam[1] == 0.0 and g_lam[2] == 0.0:
                continue
            # screen-space barycentric derivatives
            X = np.empty(3)
            Y = np.empty(3)
            for k in range(3):
                X[k] = sxy[iv[k], 0] - cx
                Y[k] = sxy[iv[k], 1] - cy
            for k in range(3):
                for j in range(3):
                    dE[k, j, 0] = 0.0
                    dE[k, j, 1] = 0.0
            A = 0.0
            for k in range(3):
                j1 = (k + 1) % 3
                j2 = (k + 2) % 3
                A += X[j1] * Y[j2] - X[j2] * Y[j1]
                dE[k, j1, 0] = Y[j2]
                dE[k, j1, 1] = -X[j2]
                dE[k, j2, 0] = -Y[j1]
                dE[k, j2, 1] = X[j1]
            for j in range(3):
                for ax in range(2):
                    dA = dE[0, j, ax] + dE[1, j, ax] + dE[2, j, ax]
                    acc = 0.0
                    for k in range(3):
                        acc += g_lam[k] * (dE[k, j, ax] - ll[k] * dA) / A
                    g_sxy[iv[j], ax] += acc


# ---------------------------------------------------------------------------
# public operations

def rasterize(mesh, camera: Camera, attributes=None, background=None) -> RenderBuffers:
    """Depth-tested, perspective-correct rasterization with a top-left fill rule."""
    H, W = camera.height, camera.width
    M = len(mesh.vertices)
    if attributes is None:
        attributes = np.ones((M, 1))
    attributes = np.ascontiguousarray(attributes, dtype=np.float64)
    attributes = attributes.reshape(M, -1 if M else attributes.shape[-1])
    C = attributes.shape[1]
    bg = np.zeros(C) if background is None else np.asarray(background, dtype=np.float64)
    if M:
        sxy, z = camera.project(mesh.vertices)
        sxy = np.ascontiguousarray(sxy)
    else:
        sxy, z = np.zeros((0, 2)), np.zeros(0)
    z = np.ascontiguousarray(z)
    tri_plane = np.full((H, W), -1, dtype=np.int64)
    depth = np.full((H, W), np.inf)
    lam = np.zeros((H, W, 3))
    tris = np.ascontiguousarray(mesh.triangles, dtype=np.int64).reshape(-1, 3)
    if len(tris):
        _raster_kernel(sxy, z, tris, H, W, NEAR, tri_plane, depth, lam)
    attr = np.empty((H, W, C))
    _shade_kernel(tri_plane, lam, z, tris, attributes, bg, attr)
    tri_prim = np.asarray(mesh.tri_prim, dtype=np.int64)
    ids = np.where(tri_plane >= 0, tri_prim[np.maximum(tri_plane, 0)] if len(tri_prim) else -1,
                   BACKGROUND)
    return RenderBuffers(attr, depth, tri_plane, ids, lam, sxy, z, attributes, bg)


def antialias(buffers: RenderBuffers, mesh, camera: Camera, r_mode: str = R_MODE) -> AAOutput:
    """Blend each pixel with its N8 neighbours across primitive-ID changes.

    `r_mode` "distance": r is the distance from the centre of s to the crossing
    edge; "crossing": r is the crossing parameter along the centre-to-centre
    segment. Both are clamped to [0, 1].
    """
    if r_mode not in R_MODES:
        raise ValueError(f"unknown r_mode {r_mode!r}")
    K = _count_crossings(buffers.ids, N8)
    out = buffers.attr.copy()
    cpix = np.empty(K, dtype=np.int64)
    cn = np.empty(K, dtype=np.int64)
    e0 = np.empty(K, dtype=np.int64)
    e1 = np.empty(K, dtype=np.int64)
    rr = np.empty(K)
    uu = np.empty(K)
    side = np.empty(K, dtype=np.int8)
    live = np.empty(K, dtype=np.bool_)
    tris = np.ascontiguousarray(mesh.triangles, dtype=np.int64).reshape(-1, 3)
    _aa_kernel(buffers.tri, buffers.ids, buffers.depth, buffers.attr, buffers.screen, tris,
               np.asarray(mesh.tri_prim, dtype=np.int64),
               np.ascontiguousarray(mesh.edge_internal, dtype=np.bool_).reshape(-1, 3),
               np.asarray(mesh.prim_first_tri, dtype=np.int64),
               np.asarray(mesh.prim_ntri, dtype=np.int64), N8, out, cpix, cn, e0, e1, rr, uu,
               side, live, r_mode == "distance")
    return AAOutput(out, buffers, cpix, cn, e0, e1, rr, uu, side, live, mesh, camera, r_mode)


def backward(aa: AAOutput, upstream: np.ndarray, mesh=None, camera=None) -> VertexGrads:
    """Reverse-mode pass from d(loss)/d(c_aa) to raster vertex positions and attributes."""
    if mesh is not None and mesh is not aa.mesh:
        raise ValueError("backward called with a mesh from a different forward pass")
    if camera is not None and camera is not aa.camera:
        raise ValueError("backward called with a camera from a different forward pass")
    buf = aa.buffers
    upstream = np.ascontiguousarray(upstream, dtype=np.float64)
    if upstream.shape != aa.color.shape:
        raise ValueError(f"upstream shape {upstream.shape} != output {aa.color.shape}")
    M = len(buf.screen)
    C = buf.attr.shape[2]
    g_color = upstream.copy()
    g_sxy = np.zeros((M, 2))
    g_z = np.zeros(M)
    g_attr = np.zeros((M, C))
    _aa_backward_kernel(upstream, buf.attr, aa.pixel, aa.neighbour, aa.edge0, aa.edge1, aa.r,
                        aa.live, aa.side, buf.screen, N8, g_color, g_sxy,
                        aa.r_mode == "distance")
    tris = np.ascontiguousarray(aa.mesh.triangles, dtype=np.int64).reshape(-1, 3)
    _shade_backward_kernel(g_color, buf.attr, buf.tri, buf.lam, buf.screen, buf.z, tris,
                           buf.attributes, g_attr, g_sxy, g_z)
    if M:
        g_pos = aa.camera.project_vjp(aa.mesh.vertices, g_sxy, g_z)
    else:
        g_pos = np.zeros((0, 3))
    return VertexGrads(g_pos, g_attr, g_sxy, g_z)


# ---------------------------------------------------------------------------
# strand channels

@dataclass(eq=False)
class ChannelRender:
    """Anti-aliased strand render with named channel slices into `aa.color`."""

    aa: AAOutput
    slices: dict
    strands: StrandSet  # control strands
    fine: StrandSet  # tessellated strands actually rasterized
    subdivision: int
    camera: Camera

    def __getitem__(self, name) -> np.ndarray:
        return self.aa.color[..., self.slices[name]]

    @property
    def coverage(self) -> np.ndarray:
        return self.aa.color[..., self.slices["silhouette"]][..., 0]

    def zeros(self) -> np.ndarray:
        return np.zeros_like(self.aa.color)


def _channel_layout(channels):
    order = ["silhouette"] + [c for c in CHANNELS if c != "silhouette" and c in channels]
    for c in channels:
        if c not in CHANNELS:
            raise ValueError(f"unknown channel {c!r}")
    slices, o = {}, 0
    for c in order:
        slices[c] = slice(o, o + CHANNELS[c])
        o += CHANNELS[c]
    return slices, o


def _orient2d_encode(du, dv):
    q = du * du + dv * dv
    q = np.where(q > 0, q, 1.0)
    return np.stack([(du * du - dv * dv) / q, 2 * du * dv / q], axis=-1)


def strand_colors(n: int, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).uniform(0.25, 1.0, size=(n, 3))


def render_channels(strands: StrandSet, camera: Camera, width_mm: float = 0.2,
                    channels=("silhouette", "depth", "tangent3d", "orient2d"),
                    subdivision: int = 1, colors=None, r_mode: str = R_MODE) -> ChannelRender:
    """Rasterize strands as billboards and anti-alias the requested attribute channels.

    Depth, tangent and orientation channels are premultiplied by coverage
    (background carries zeros); divide by the silhouette channel to read
    them, as the losses do.
    """
    slices, C = _channel_layout(channels)
    fine = subdivide_set(strands, subdivision)
    mesh = build_billboards(fine, camera, width_mm)
    M = len(mesh.vertices)
    attrs = np.zeros((M, C))
    attrs[:, slices["silhouette"]] = 1.0
    if M:
        seg_a, _ = fine.segments()
        P = fine.points
        vseg = mesh.vertex_seg
        if "depth" in slices:
            attrs[:, slices["depth"]] = camera.to_camera(mesh.vertices)[:, 2:3]
        if "tangent3d" in slices:
            d = P[seg_a + 1] - P[seg_a]
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            attrs[:, slices["tangent3d"]] = d[vseg]
        if "orient2d" in slices:
            sxy, _ = camera.project(P)
            dd = sxy[seg_a + 1] - sxy[seg_a]
            attrs[:, slices["orient2d"]] = _orient2d_encode(dd[:, 0], dd[:, 1])[vseg]
        if "id_color" in slices:
            col = strand_colors(fine.n_strands) if colors is None else np.asarray(colors)
            attrs[:, slices["id_color"]] = col[mesh.prim_strand[vseg]]
    buf = rasterize(mesh, camera, attrs)
    aa = antialias(buf, mesh, camera, r_mode)
    return ChannelRender(aa, slices, strands, fine, subdivision, camera)


def render_channels_backward(render: ChannelRender, upstream: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the control-strand vertices for d(loss)/d(channels)."""
    aa = render.aa
    mesh = aa.mesh
    fine = render.fine
    N = len(fine.points)
    if len(mesh.vertices) == 0:
        return np.zeros((len(render.strands.points), 3))
    vg = backward(aa, upstream)
    sl = render.slices
    cam = render.camera
    g_z_extra = np.zeros(len(mesh.vertices))
    if "depth" in sl:
        g_z_extra = vg.attributes[:, sl["depth"]][:, 0]
    g_bb = vg.positions
    if np.any(g_z_extra):
        g_bb = g_bb + cam.project_vjp(mesh.vertices, np.zeros((len(mesh.vertices), 2)),
                                      g_z_extra)
    g_P = billboard_vjp(mesh, g_bb) if N else np.zeros((0, 3))
    seg_a, _ = fine.segments()
    P = fine.points
    n_seg = len(seg_a)
    if "tangent3d" in sl:
        g_d = np.zeros((n_seg, 3))
        np.add.at(g_d, mesh.vertex_seg, vg.attributes[:, sl["tangent3d"]])
        e = P[seg_a + 1] - P[seg_a]
        en = np.linalg.norm(e, axis=1)
        d = e / en[:, None]
        g_e = (g_d - d * np.einsum("ij,ij->i", d, g_d)[:, None]) / en[:, None]
        np.add.at(g_P, seg_a + 1, g_e)
        np.add.at(g_P, seg_a, -g_e)
    if "orient2d" in sl:
        g_o = np.zeros((n_seg, 2))
        np.add.at(g_o, mesh.vertex_seg, vg.attributes[:, sl["orient2d"]])
        sxy, _ = cam.project(P)
        dd = sxy[seg_a + 1] - sxy[seg_a]
        du, dv = dd[:, 0], dd[:, 1]
        q = du * du + dv * dv
        q2 = np.where(q > 0, q * q, 1.0)
        g_du = (g_o[:, 0] * 4 * du * dv * dv + g_o[:, 1] * 2 * dv * (dv * dv - du * du)) / q2
        g_dv = (-g_o[:, 0] * 4 * dv * du * du + g_o[:, 1] * 2 * du * (du * du - dv * dv)) / q2
        g_dd = np.stack([g_du, g_dv], axis=1)
        g_sxy = np.zeros((N, 2))
        np.add.at(g_sxy, seg_a + 1, g_dd)
        np.add.at(g_sxy, seg_a, -g_dd)
        g_P += cam.project_vjp(P, g_sxy)
    return subdivide_set_vjp(render.strands, render.subdivision, g_P)


def render_depth(mesh, camera: Camera, farthest: bool = False) -> np.ndarray:
    """Plain depth buffer of a triangle mesh (inf where empty).

    With `farthest` the deepest surface wins instead, which for a closed
    convex solid gives its back side.
    """
    rm = RasterMesh.from_trimesh(mesh) if not hasattr(mesh, "tri_prim") else mesh
    if not farthest:
        return rasterize(rm, camera).depth
    H, W = camera.height, camera.width
    depth = np.full((H, W), -np.inf)
    if len(rm.vertices):
        sxy, z = camera.project(rm.vertices)
        _raster_kernel(np.ascontiguousarray(sxy), np.ascontiguousarray(z),
                       np.ascontiguousarray(rm.triangles, dtype=np.int64), H, W, NEAR,
                       np.full((H, W), -1, dtype=np.int64), depth, np.zeros((H, W, 3)), True)
    return np.where(np.isfinite(depth), depth, np.inf)
