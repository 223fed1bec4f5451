"""Line-segment Laplacian and the differential-coordinate reparameterization u = (I + lam L) x."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu
from scipy.spatial import cKDTree

from .strands import StrandSet


@dataclass(eq=False)
class LineLaplacian:
    L: sp.csr_matrix
    lam: float
    k: int
    connectivity: np.ndarray  # (E_f, 2) consecutive-vertex pairs
    proximity: np.ndarray  # (E_n, 2) kNN pairs, i < j
    _lu: object = None

    @property
    def n(self) -> int:
        return self.L.shape[0]

    @property
    def A(self) -> sp.csc_matrix:
        return (sp.identity(self.n, format="csc") + self.lam * self.L).tocsc()

    def _factor(self):
        if self._lu is None:
            self._lu = splu(self.A, permc_spec="COLAMD")
        return self._lu

    def _check(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[0] != self.n:
            raise ValueError(f"expected {self.n} rows, got {x.shape[0]}")
        return x


def proximity_pairs(strands: StrandSet, k: int) -> np.ndarray:
    """Vertex pairs coupling each segment to its k nearest segments on other strands.

    Segment (a, a+1) matched with segment (b, b+1) couples a<->b and a+1<->b+1.
    """
    if k <= 0 or strands.n_strands < 2:
        return np.zeros((0, 2), dtype=np.int64)
    seg_a, sid = strands.segments()
    P = strands.points
    mid = 0.5 * (P[seg_a] + P[seg_a + 1])
    tree = cKDTree(mid)
    per_strand = int((strands.counts - 1).max())
    kq = min(len(mid), k + per_strand + 1)
    pairs = []
    _, idx = tree.query(mid, k=kq)
    idx = np.atleast_2d(idx)
    other = sid[idx] != sid[:, None]
    # first k foreign segments per row
    rank = np.cumsum(other, axis=1)
    sel = other & (rank <= k)
    rows, cols = np.nonzero(sel)
    a = seg_a[rows]
    b = seg_a[idx[rows, cols]]
    pairs = np.concatenate([np.stack([a, b], 1), np.stack([a + 1, b + 1], 1)])
    pairs = np.sort(pairs, axis=1)
    return np.unique(pairs, axis=0)


def build_laplacian(strands: StrandSet, k: int = 4, lam: float = 50.0) -> LineLaplacian:
    if k < 0 or lam < 0:
        raise ValueError("k and lambda must be non-negative")
    n = len(strands.points)
    seg_a, _ = strands.segments()
    conn = np.stack([seg_a, seg_a + 1], axis=1)
    prox = proximity_pairs(strands, k)
    if len(prox) and len(conn):
        # connectivity already covers same-strand neighbours
        both = np.unique(np.concatenate([conn, prox]), axis=0)
    else:
        both = conn if len(conn) else prox
    i, j = both[:, 0], both[:, 1]
    w = np.ones(len(both))
    W = sp.coo_matrix((np.concatenate([w, w]), (np.concatenate([i, j]), np.concatenate([j, i]))),
                      shape=(n, n)).tocsr()
    W.sum_duplicates()
    W.data[:] = 1.0  # w_ij = 1 on the deduplicated pattern
    deg = np.asarray(W.sum(axis=1)).ravel()
    L = (sp.diags(deg) - W).tocsr()
    return LineLaplacian(L, float(lam), int(k), conn, prox)


def to_differential(lap: LineLaplacian, x) -> np.ndarray:
    x = lap._check(x)
    return x + lap.lam * (lap.L @ x)


def from_differential(lap: LineLaplacian, u) -> np.ndarray:
    u = lap._check(u)
    if lap.lam == 0:
        return u.copy()
    return lap._factor().solve(np.asfortranarray(u))


def pull_back_gradient(lap: LineLaplacian, g_x) -> np.ndarray:
    """d(loss)/du = A^-1 d(loss)/dx, A being symmetric."""
    return from_differential(lap, g_x)


def write_matrix_market(path, lap: LineLaplacian) -> None:
    from scipy.io import mmwrite
    mmwrite(str(path), lap.L)
