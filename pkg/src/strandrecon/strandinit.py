"""Volumetric hair-flow initialization.

A unit vector field is diffused through the hair volume by solving Laplace's
equation per component with Dirichlet values on the hair surface and the
scalp, then strands are traced through it from the scalp roots.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .mesh import TriMesh
from .strands import StrandSet, resample_polyline

logger = logging.getLogger(__name__)

EXTERIOR, INTERIOR, BOUNDARY_H, BOUNDARY_S, BOUNDARY_U = 0, 1, 2, 3, 4


class DomainError(ValueError):
    pass


@dataclass(eq=False)
class OrientationVolume:
    origin: np.ndarray
    h: float
    labels: np.ndarray  # (nx, ny, nz) uint8
    values: np.ndarray  # (nx, ny, nz, 3)
    raw: np.ndarray | None = None  # pre-normalization solve
    iterations: int = 0
    info: dict = field(default_factory=dict)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.labels.shape

    @property
    def fixed(self) -> np.ndarray:
        return (self.labels == BOUNDARY_H) | (self.labels == BOUNDARY_S)

    @property
    def free(self) -> np.ndarray:
        return (self.labels == INTERIOR) | (self.labels == BOUNDARY_U)

    def centers(self, mask=None) -> np.ndarray:
        idx = np.argwhere(mask) if mask is not None else np.indices(self.dims).reshape(3, -1).T
        return self.origin + (idx + 0.5) * self.h

    def copy(self) -> "OrientationVolume":
        return OrientationVolume(self.origin.copy(), self.h, self.labels.copy(), self.values.copy(),
                                 None if self.raw is None else self.raw.copy(), self.iterations,
                                 dict(self.info))


_SIX = np.array([(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)])


def _dilate6(mask: np.ndarray) -> np.ndarray:
    return ndimage.binary_dilation(mask, structure=ndimage.generate_binary_structure(3, 1))


def voxelize_domain(head: TriMesh, shell: TriMesh, h: float = 2.0,
                    margin: int = 2) -> OrientationVolume:
    """Label a regular grid over the hair region between a closed head and shell.

    Voxel centers inside the shell and outside the head are INTERIOR. The
    layer of head voxels touching them is BOUNDARY_S, the layer beyond the
    shell touching them is BOUNDARY_H.
    """
    if h <= 0:
        raise ValueError("voxel size must be positive")
    head.check_watertight("scalp solid")
    shell.check_watertight("shell")
    gap = cKDTree(head.vertices).query(shell.vertices)[0].min()
    if h > gap:
        raise DomainError(f"empty domain: voxel size {h} exceeds the shell gap {gap:.3f}")
    lo = shell.vertices.min(axis=0) - margin * h
    hi = shell.vertices.max(axis=0) + margin * h
    dims = np.ceil((hi - lo) / h).astype(int)
    in_shell = shell.inside_grid(lo, h, dims)
    in_head = head.inside_grid(lo, h, dims)
    hair = in_shell & ~in_head
    if not hair.any():
        raise DomainError("empty domain: no voxel centre lies between scalp and shell")
    near_hair = _dilate6(hair)
    labels = np.zeros(dims, dtype=np.uint8)
    labels[hair] = INTERIOR
    labels[near_hair & in_head] = BOUNDARY_S
    labels[near_hair & ~in_shell] = BOUNDARY_H
    return OrientationVolume(lo, float(h), labels, np.zeros(tuple(dims) + (3,)))


def scalp_direction(normals, down) -> np.ndarray:
    """Scalp boundary direction normalize(n + d * min(n.d + 1, 1))."""
    n = np.atleast_2d(np.asarray(normals, dtype=np.float64))
    d = np.asarray(down, dtype=np.float64)
    s = n + d[None, :] * np.minimum(n @ d + 1.0, 1.0)[:, None]
    norm = np.linalg.norm(s, axis=1, keepdims=True)
    return s / np.where(norm > 0, norm, 1.0)


def set_boundary(volume: OrientationVolume, cloud, scalp, down=(0.0, 0.0, -1.0),
                 radius_voxels: float = 1.0) -> OrientationVolume:
    """Assign Dirichlet values: splatted cloud directions on H, the scalp heuristic on S.

    `scalp` is a ScalpSurface or TriMesh; S voxels take the normal of the
    nearest scalp vertex. H voxels without supporting evidence become
    BOUNDARY_U.
    """
    scalp_vertices = scalp.vertices
    scalp_normals = getattr(scalp, "normals", None)
    if scalp_normals is None:
        scalp_normals = scalp.vertex_normals
    vol = volume.copy()
    labels, values = vol.labels, vol.values
    h_mask = labels == BOUNDARY_H
    h_idx = np.argwhere(h_mask)
    centers = vol.origin + (h_idx + 0.5) * vol.h
    mean = np.zeros((len(h_idx), 3))
    if len(cloud.points) and len(h_idx):
        tree_c = cKDTree(cloud.points)
        tree_h = cKDTree(centers)
        pairs = tree_h.sparse_distance_matrix(tree_c, radius_voxels * vol.h, output_type="ndarray")
        if len(pairs):
            w = cloud.confidences[pairs["j"]]
            np.add.at(mean, pairs["i"], w[:, None] * cloud.directions[pairs["j"]])
    norm = np.linalg.norm(mean, axis=1)
    ok = norm > 1e-12
    idx_ok = tuple(h_idx[ok].T)
    values[idx_ok] = mean[ok] / norm[ok, None]
    labels[tuple(h_idx[~ok].T)] = BOUNDARY_U
    values[tuple(h_idx[~ok].T)] = 0.0

    s_idx = np.argwhere(labels == BOUNDARY_S)
    if len(s_idx):
        sc = vol.origin + (s_idx + 0.5) * vol.h
        _, near = cKDTree(np.asarray(scalp_vertices)).query(sc)
        values[tuple(s_idx.T)] = scalp_direction(np.asarray(scalp_normals)[near], down)
    free = vol.free
    values[free] = 0.0
    vol.info["n_unsupported_h"] = int((~ok).sum())
    return vol


@numba.njit(cache=True)
def _sor_sweep(vals, order, nbr, omega):
    maxd = 0.0
    for ii in range(order.shape[0]):
        i = order[ii]
        for c in range(3):
            acc = 0.0
            m = 0
            for k in range(6):
                j = nbr[ii, k]
                if j >= 0:
                    acc += vals[j, c]
                    m += 1
            if m == 0:
                continue
            old = vals[i, c]
            new = old + omega * (acc / m - old)
            vals[i, c] = new
            d = abs(new - old)
            if d > maxd:
                maxd = d
    return maxd


def _neighbour_table(labels, order_flat):
    dims = np.array(labels.shape)
    ijk = np.stack(np.unravel_index(order_flat, labels.shape), axis=1)
    flat_labels = labels.ravel()
    nbr = np.full((len(order_flat), 6), -1, dtype=np.int64)
    for k, off in enumerate(_SIX):
        q = ijk + off
        inside = np.all((q >= 0) & (q < dims), axis=1)
        qf = np.ravel_multi_index(tuple(np.clip(q, 0, dims - 1).T), labels.shape)
        ok = inside & (flat_labels[qf] != EXTERIOR)
        nbr[ok, k] = qf[ok]
    return nbr


def solve_laplace_sor(volume: OrientationVolume, omega: float = 1.8, tol: float = 1e-5,
                      max_iter: int = 5000, ordering: str = "redblack",
                      normalize: bool = True) -> OrientationVolume:
    """Relax the three components with SOR, then renormalize free voxels once.

    Neighbours outside the domain are skipped (homogeneous Neumann closure).
    """
    if not 0 < omega < 2:
        raise ValueError("omega must lie in (0, 2)")
    vol = volume.copy()
    if not vol.fixed.any():
        raise DomainError("unconstrained system: no fixed boundary voxels")
    free_flat = np.flatnonzero(vol.free.ravel())
    if ordering == "redblack":
        ijk = np.stack(np.unravel_index(free_flat, vol.dims), axis=1)
        parity = ijk.sum(axis=1) % 2
        order = np.concatenate([free_flat[parity == 0], free_flat[parity == 1]])
    elif ordering == "lexicographic":
        order = free_flat
    else:
        raise ValueError(f"unknown ordering {ordering!r}")
    nbr = _neighbour_table(vol.labels, order)
    vals = np.ascontiguousarray(vol.values.reshape(-1, 3))
    vals[order] = 0.0
    it = 0
    delta = np.inf
    for it in range(1, max_iter + 1):
        delta = _sor_sweep(vals, order, nbr, omega)
        if delta < tol:
            break
    vol.iterations = it
    vol.info["final_update"] = float(delta)
    vol.values = vals.reshape(vol.values.shape)
    vol.raw = vol.values.copy()
    if normalize:
        _renormalize(vol)
    return vol


def _renormalize(vol: OrientationVolume) -> None:
    v = vol.values
    free = vol.free
    norm = np.linalg.norm(v, axis=-1)
    ok = free & (norm > 1e-12)
    v[ok] /= norm[ok][:, None]
    zero = free & ~ok
    if zero.any():
        _, idx = ndimage.distance_transform_edt(~vol.fixed, return_indices=True)
        src = tuple(i[zero] for i in idx)
        v[zero] = v[src]


def sample_field(vol: OrientationVolume, p: np.ndarray) -> np.ndarray:
    g = ((p - vol.origin) / vol.h - 0.5).T
    return np.stack([ndimage.map_coordinates(vol.values[..., c], g, order=1, mode="nearest")
                     for c in range(3)], axis=1)


def label_at(vol: OrientationVolume, p: np.ndarray) -> np.ndarray:
    idx = np.floor((p - vol.origin) / vol.h).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < np.array(vol.dims)), axis=1)
    out = np.full(len(p), EXTERIOR, dtype=np.uint8)
    out[inside] = vol.labels[tuple(idx[inside].T)]
    return out


def trace_strands(vol: OrientationVolume, roots, step: float | None = None,
                  max_steps: int = 4000, n_vertices: int = 17, return_info: bool = False):
    """Advect from each root through the field until reaching the hair surface.

    Stops on entering an H (or unsupported U) voxel, leaving the domain, or
    after `max_steps`. Roots outside the domain are skipped.
    """
    roots = np.atleast_2d(np.asarray(roots, dtype=np.float64))
    step = 0.5 * vol.h if step is None else step
    lab = label_at(vol, roots)
    startable = (lab == INTERIOR) | (lab == BOUNDARY_S)
    n_skipped = int((~startable).sum())
    if n_skipped:
        logger.warning("%d root(s) outside the hair domain were skipped", n_skipped)
    paths = [[r] for r in roots]
    active = np.flatnonzero(startable)
    pos = roots[active].copy()
    # a root may cross the staircase of scalp voxels before reaching the interior
    escape = int(np.ceil(2.0 * vol.h / step))
    for it in range(max_steps):
        if len(active) == 0:
            break
        f = sample_field(vol, pos)
        fn = np.linalg.norm(f, axis=1)
        moving = fn > 1e-9
        new = pos + step * f / np.where(moving, fn, 1.0)[:, None]
        lab = label_at(vol, new)
        inside = moving & ((lab == INTERIOR) | (lab == BOUNDARY_H) | (lab == BOUNDARY_U))
        for a, p in zip(active[inside], new[inside]):
            paths[a].append(p)
        cont = inside & (lab == INTERIOR)
        if it < escape:
            cont |= moving & (lab == BOUNDARY_S) & np.array([len(paths[a]) == 1 for a in active],
                                                            dtype=bool)
        active, pos = active[cont], new[cont]
    keep = [i for i in range(len(roots)) if startable[i] and len(paths[i]) >= 2]
    strands = [resample_polyline(np.array(paths[i]), n_vertices) for i in keep]
    out = StrandSet.from_list(strands)
    if return_info:
        return out, {"kept": np.array(keep, dtype=np.int64), "n_skipped": n_skipped,
                     "n_dropped": int(startable.sum()) - len(keep)}
    return out
