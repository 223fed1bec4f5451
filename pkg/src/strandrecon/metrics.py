"""Sample-correspondence precision / recall / F1 between strand sets."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numba
import numpy as np

from .strands import StrandSet

DEFAULT_THRESHOLDS = ((1.0, 10.0), (2.0, 20.0), (3.0, 30.0))


@dataclass(frozen=True, eq=False)
class OrientedSampleSet:
    positions: np.ndarray
    directions: np.ndarray
    strand_ids: np.ndarray
    spacing: float

    def __len__(self):
        return len(self.positions)

    def transformed(self, R, t) -> "OrientedSampleSet":
        R = np.asarray(R, dtype=np.float64)
        return OrientedSampleSet(self.positions @ R.T + t, self.directions @ R.T,
                                 self.strand_ids, self.spacing)


@dataclass(frozen=True)
class MatchScore:
    precision: float
    recall: float
    f1: float
    d_mm: float
    a_deg: float
    mode: str


def sample_strands(strands: StrandSet, spacing_mm: float = 1.0) -> OrientedSampleSet:
    """Arc-length samples at a fixed spacing, starting at each root."""
    if spacing_mm <= 0:
        raise ValueError("spacing must be positive")
    pos, dirs, ids = [], [], []
    for i, s in enumerate(strands.strands):
        seg = np.diff(s, axis=0)
        ln = np.linalg.norm(seg, axis=1)
        cum = np.concatenate([[0.0], np.cumsum(ln)])
        total = cum[-1]
        t = np.arange(0.0, total + 1e-9, spacing_mm)
        k = np.clip(np.searchsorted(cum, t, side="right") - 1, 0, len(seg) - 1)
        f = (t - cum[k]) / np.where(ln[k] > 0, ln[k], 1.0)
        pos.append(s[k] + f[:, None] * seg[k])
        dirs.append(seg[k] / np.where(ln[k] > 0, ln[k], 1.0)[:, None])
        ids.append(np.full(len(t), i, dtype=np.int64))
    if not pos:
        return OrientedSampleSet(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, np.int64),
                                 spacing_mm)
    return OrientedSampleSet(np.concatenate(pos), np.concatenate(dirs), np.concatenate(ids),
                             spacing_mm)


def _cos_threshold(a_deg: float) -> float:
    return float(np.cos(np.radians(a_deg)))


def _match_pred(dp2, dot, d2, cmin, fold):
    return (dp2 <= d2) & ((np.abs(dot) if fold else dot) >= cmin)


def matched_bruteforce(src: OrientedSampleSet, dst: OrientedSampleSet, d_mm: float,
                       a_deg: float, mode: str = "deg360") -> np.ndarray:
    """O(N*M) reference: which src samples have a matching dst sample."""
    fold = _fold(mode)
    out = np.zeros(len(src), dtype=bool)
    if len(dst) == 0:
        return out
    d2, cmin = d_mm * d_mm, _cos_threshold(a_deg)
    for i0 in range(0, len(src), 512):
        p = src.positions[i0:i0 + 512, None, :]
        q = src.directions[i0:i0 + 512, None, :]
        e = p - dst.positions[None]
        # written out term by term so the rounding matches the grid kernel
        dp2 = e[..., 0] * e[..., 0] + e[..., 1] * e[..., 1] + e[..., 2] * e[..., 2]
        dd = dst.directions[None]
        dot = q[..., 0] * dd[..., 0] + q[..., 1] * dd[..., 1] + q[..., 2] * dd[..., 2]
        out[i0:i0 + 512] = _match_pred(dp2, dot, d2, cmin, fold).any(axis=1)
    return out


@numba.njit(cache=True)
def _grid_match(sp, sd, dp, dd, cell_start, cell_count, order, origin, cell, dims, d2, cmin,
                fold, out):
    for i in range(sp.shape[0]):
        c = np.empty(3, dtype=np.int64)
        for k in range(3):
            c[k] = np.int64(np.floor((sp[i, k] - origin[k]) / cell))
        found = False
        for ox in range(-1, 2):
            if found:
                break
            x = c[0] + ox
            if x < 0 or x >= dims[0]:
                continue
            for oy in range(-1, 2):
                if found:
                    break
                y = c[1] + oy
                if y < 0 or y >= dims[1]:
                    continue
                for oz in range(-1, 2):
                    z = c[2] + oz
                    if z < 0 or z >= dims[2]:
                        continue
                    cid = (x * dims[1] + y) * dims[2] + z
                    for q in range(cell_start[cid], cell_start[cid] + cell_count[cid]):
                        j = order[q]
                        e0 = sp[i, 0] - dp[j, 0]
                        e1 = sp[i, 1] - dp[j, 1]
                        e2 = sp[i, 2] - dp[j, 2]
                        if e0 * e0 + e1 * e1 + e2 * e2 > d2:
                            continue
                        dot = sd[i, 0] * dd[j, 0] + sd[i, 1] * dd[j, 1] + sd[i, 2] * dd[j, 2]
                        if fold:
                            dot = abs(dot)
                        if dot >= cmin:
                            found = True
                            break
                    if found:
                        break
        out[i] = found


def matched_grid(src: OrientedSampleSet, dst: OrientedSampleSet, d_mm: float, a_deg: float,
                 mode: str = "deg360") -> np.ndarray:
    """Uniform-grid search (cell = d_mm); same predicate as the brute-force path."""
    fold = _fold(mode)
    out = np.zeros(len(src), dtype=bool)
    if len(dst) == 0 or len(src) == 0:
        return out
    origin = dst.positions.min(axis=0) - d_mm
    cells = np.floor((dst.positions - origin) / d_mm).astype(np.int64)
    dims = cells.max(axis=0) + 2
    cid = (cells[:, 0] * dims[1] + cells[:, 1]) * dims[2] + cells[:, 2]
    order = np.argsort(cid, kind="stable")
    n_cells = int(np.prod(dims))
    if n_cells > 50_000_000:
        return matched_bruteforce(src, dst, d_mm, a_deg, mode)
    count = np.bincount(cid, minlength=n_cells).astype(np.int64)
    start = np.concatenate([[0], np.cumsum(count)[:-1]]).astype(np.int64)
    _grid_match(np.ascontiguousarray(src.positions), np.ascontiguousarray(src.directions),
                np.ascontiguousarray(dst.positions), np.ascontiguousarray(dst.directions),
                start, count, order, origin, float(d_mm), dims, d_mm * d_mm,
                _cos_threshold(a_deg), fold, out)
    return out


def _fold(mode):
    if mode not in ("deg360", "deg180"):
        raise ValueError(f"unknown angle mode {mode!r}")
    return mode == "deg180"


def score(src: OrientedSampleSet, dst: OrientedSampleSet, d_mm: float = 3.0, a_deg: float = 30.0,
          mode: str = "deg360", oracle: bool = False) -> MatchScore:
    """Precision of the reconstruction `src` against ground truth `dst`, and recall the other way."""
    if d_mm <= 0 or a_deg <= 0:
        raise ValueError("thresholds must be positive")
    fn = matched_bruteforce if oracle else matched_grid
    p = float(fn(src, dst, d_mm, a_deg, mode).mean()) if len(src) else 0.0
    r = float(fn(dst, src, d_mm, a_deg, mode).mean()) if len(dst) else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return MatchScore(p, r, f, float(d_mm), float(a_deg), mode)


def score_table(src, dst, thresholds=DEFAULT_THRESHOLDS, mode: str = "deg360") -> list[MatchScore]:
    return [score(src, dst, d, a, mode) for d, a in thresholds]


def write_table_csv(path, rows: list[MatchScore], label: str = "") -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["label", "mode", "d_mm", "a_deg", "precision", "recall", "f1"])
        for r in rows:
            w.writerow([label, r.mode, r.d_mm, r.a_deg, f"{r.precision:.6f}", f"{r.recall:.6f}",
                        f"{r.f1:.6f}"])


def format_table(rows_by_label: dict) -> str:
    """Aligned text table: one row per label, P/R/F1 columns per threshold pair."""
    labels = list(rows_by_label)
    first = rows_by_label[labels[0]] if labels else []
    head = ["method".ljust(24)] + [f"{r.d_mm:g}mm/{r.a_deg:g}deg P    R    F1".rjust(26)
                                   for r in first]
    lines = [" ".join(head)]
    for lab in labels:
        cols = [lab.ljust(24)]
        for r in rows_by_label[lab]:
            cols.append(f"{100 * r.precision:6.1f} {100 * r.recall:6.1f} {100 * r.f1:6.1f}".rjust(26))
        lines.append(" ".join(cols))
    return "\n".join(lines)
