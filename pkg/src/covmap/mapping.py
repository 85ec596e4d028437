"""BTS-to-area weighting schemes and covariate aggregation.

A weight matrix W maps antenna-level covariates R to statistical-area
estimates R_hat = W R, one convex row per covered area.  Five schemes
build W from increasingly informative inputs:

- p2p:          each BTS contributes only to the area containing it
- voronoi:      per-area share of pixels in each site's nearest-site tile
- aug_voronoi:  like voronoi but counting settlement pixels only
- bsa:          per-settlement-pixel best (strongest live) server
- idw:          per-settlement-pixel inverse-signal weights over the
                k strongest live links

bsa/idw first produce per-pixel weights, which are then averaged over
each area's covered settlement pixels (optionally rescaled by an
auxiliary per-pixel count, see `refine_weights`).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .geo import UNASSIGNED, Assignment, Grid, Settlements, StatAreaSet, zonal_count
from .propagation import AntennaSpec, RssField

ROW_SUM_TOL = 1e-9

SCHEME_P2P = "p2p"
SCHEME_VORONOI = "voronoi"
SCHEME_AUG_VORONOI = "aug_voronoi"
SCHEME_BSA = "bsa"
SCHEME_IDW = "idw"


@dataclass
class WeightMatrix:
    """Sparse area x BTS weight rows; absent areas have no coverage."""

    scheme: str
    area_ids: list[str]
    rows: dict[str, dict[str, float]]
    dropped_bts: list[str] = field(default_factory=list)

    def __post_init__(self):
        known = set(self.area_ids)
        for aid, row in self.rows.items():
            if aid not in known:
                raise ValueError(f"weight row for unknown area {aid!r}")
            if not row:
                raise ValueError(f"area {aid!r}: empty weight row; omit the area instead")
            vals = np.array(list(row.values()))
            if np.any(~np.isfinite(vals)) or np.any(vals <= 0):
                raise ValueError(f"area {aid!r}: weights must be finite and positive")
            if abs(vals.sum() - 1.0) > ROW_SUM_TOL:
                raise ValueError(f"area {aid!r}: weights sum to {vals.sum()!r}, not 1")

    @property
    def covered_ids(self) -> list[str]:
        return [a for a in self.area_ids if a in self.rows]

    @property
    def no_coverage_ids(self) -> list[str]:
        return [a for a in self.area_ids if a not in self.rows]

    def row(self, area_id: str) -> dict[str, float] | None:
        if area_id not in set(self.area_ids):
            raise KeyError(f"unknown area {area_id!r}")
        return self.rows.get(area_id)

    def entries(self) -> list[tuple[str, str, float]]:
        """(area_id, bts_id, weight) triplets sorted by (area_id, bts_id)."""
        out = []
        for aid in sorted(self.rows):
            for bid in sorted(self.rows[aid]):
                out.append((aid, bid, self.rows[aid][bid]))
        return out


@dataclass
class PixelWeights:
    """Per-settlement-pixel BTS weights in CSR layout.

    Row i covers `col[indptr[i]:indptr[i+1]]` with matching `w` entries;
    an empty row marks an uncovered pixel.  `pixel_scale` carries
    auxiliary per-pixel multipliers applied during area aggregation
    (`None` means all ones).
    """

    scheme: str
    pixel_ids: np.ndarray
    bts_ids: list[str]
    indptr: np.ndarray
    col: np.ndarray
    w: np.ndarray
    params: dict = field(default_factory=dict)
    pixel_scale: np.ndarray | None = None

    def __post_init__(self):
        self.pixel_ids = np.asarray(self.pixel_ids, dtype=np.int64)
        self.indptr = np.asarray(self.indptr, dtype=np.int64)
        self.col = np.asarray(self.col, dtype=np.int64)
        self.w = np.asarray(self.w, dtype=np.float64)
        n = self.pixel_ids.size
        if self.indptr.shape != (n + 1,) or self.indptr[0] != 0 or self.indptr[-1] != self.col.size:
            raise ValueError("malformed CSR index")
        lens = np.diff(self.indptr)
        if np.any(lens < 0):
            raise ValueError("indptr must be non-decreasing")
        if self.col.size != self.w.size:
            raise ValueError("col and w lengths differ")
        if self.col.size and (self.col.min() < 0 or self.col.max() >= len(self.bts_ids)):
            raise ValueError("col out of range for bts_ids")
        if self.col.size:
            sums = np.bincount(np.repeat(np.arange(n), lens), weights=self.w, minlength=n)
            if np.any(np.abs(sums[lens > 0] - 1.0) > ROW_SUM_TOL):
                raise ValueError("per-pixel weights must sum to 1 on covered pixels")
        if self.pixel_scale is not None:
            self.pixel_scale = np.asarray(self.pixel_scale, dtype=np.float64)
            if self.pixel_scale.shape != (n,):
                raise ValueError("pixel_scale length does not match pixel_ids")
            if np.any(~np.isfinite(self.pixel_scale)) or np.any(self.pixel_scale < 0):
                raise ValueError("pixel_scale must be finite and non-negative")

    def row_lengths(self) -> np.ndarray:
        return np.diff(self.indptr)

    @property
    def covered(self) -> np.ndarray:
        return self.row_lengths() > 0

    def row(self, i: int) -> dict[str, float]:
        lo, hi = self.indptr[i], self.indptr[i + 1]
        return {self.bts_ids[c]: float(v) for c, v in zip(self.col[lo:hi], self.w[lo:hi])}


@dataclass
class CovariateTable:
    """Numeric covariates keyed by bts_id; NaN marks a missing value."""

    bts_ids: list[str]
    columns: dict[str, np.ndarray]

    def __post_init__(self):
        if len(set(self.bts_ids)) != len(self.bts_ids):
            raise ValueError("duplicate bts_id in covariate table")
        self.columns = {k: np.asarray(v, dtype=np.float64) for k, v in self.columns.items()}
        for name, colv in self.columns.items():
            if colv.shape != (len(self.bts_ids),):
                raise ValueError(f"column {name!r} length {colv.shape} != {len(self.bts_ids)} rows")
        self._index = {b: i for i, b in enumerate(self.bts_ids)}

    def column(self, name: str) -> np.ndarray:
        if name not in self.columns:
            raise KeyError(f"unknown covariate column {name!r}")
        return self.columns[name]

    def lookup(self, bts_id: str, name: str) -> float:
        if bts_id not in self._index:
            raise KeyError(f"bts_id {bts_id!r} not in covariate table")
        return float(self.column(name)[self._index[bts_id]])


def _area_index(areas: StatAreaSet) -> dict[str, int]:
    return {a: i for i, a in enumerate(areas.area_ids)}


def weights_p2p(bts_points, areas: StatAreaSet, grid: Grid | None = None) -> WeightMatrix:
    """Point-to-polygon: split each area's weight equally over its own BTS."""
    pts = list(bts_points)
    if not pts:
        raise ValueError("no BTS points given")
    ids = [p[0] for p in pts]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate bts_id among points")
    x = np.array([float(p[1]) for p in pts])
    y = np.array([float(p[2]) for p in pts])
    host = areas.locate_points(x, y, grid)
    dropped = [ids[i] for i in np.nonzero(host == UNASSIGNED)[0]]
    if dropped:
        warnings.warn(f"{len(dropped)} BTS outside every area dropped: {dropped[:5]}", stacklevel=2)
    rows: dict[str, dict[str, float]] = {}
    for aidx in np.unique(host[host >= 0]):
        members = sorted(ids[i] for i in np.nonzero(host == aidx)[0])
        rows[areas.area_ids[aidx]] = {b: 1.0 / len(members) for b in members}
    return WeightMatrix(SCHEME_P2P, list(areas.area_ids), rows, dropped_bts=dropped)


def weights_voronoi(assignment: Assignment, areas: StatAreaSet) -> WeightMatrix:
    """Per-area share of pixels falling in each site's nearest-site tile."""
    table = zonal_count(assignment, areas)
    area_pixels: dict[str, float] = {}
    for (aid, _), cnt in table.items():
        area_pixels[aid] = area_pixels.get(aid, 0.0) + cnt
    rows: dict[str, dict[str, float]] = {}
    for (aid, lab), cnt in table.items():
        rows.setdefault(aid, {})[assignment.bts_ids[lab]] = cnt / area_pixels[aid]
    return WeightMatrix(SCHEME_VORONOI, list(areas.area_ids), rows)


def weights_aug_voronoi(
    assignment: Assignment, settlements: Settlements, areas: StatAreaSet
) -> WeightMatrix:
    """Voronoi weights counting settlement pixels instead of all pixels.

    Areas without a settlement pixel get no coverage.
    """
    settled = np.zeros(assignment.grid.shape, dtype=np.float64)
    settled[settlements.rows, settlements.cols] = 1.0
    table = zonal_count(assignment, areas, weights=settled)
    area_pixels: dict[str, float] = {}
    for (aid, _), cnt in table.items():
        area_pixels[aid] = area_pixels.get(aid, 0.0) + cnt
    rows: dict[str, dict[str, float]] = {}
    for (aid, lab), cnt in table.items():
        if cnt > 0:
            rows.setdefault(aid, {})[assignment.bts_ids[lab]] = cnt / area_pixels[aid]
    return WeightMatrix(SCHEME_AUG_VORONOI, list(areas.area_ids), rows)


# --- signal-based schemes ----------------------------------------------------


def _sorted_columns(rss: RssField) -> tuple[list[str], np.ndarray]:
    order = sorted(range(len(rss.bts_ids)), key=lambda j: rss.bts_ids[j])
    return [rss.bts_ids[j] for j in order], np.array(order)


def bsa_select_chunk(rss_chunk: np.ndarray, live_chunk: np.ndarray) -> np.ndarray:
    """Best live server per row (columns must be in ascending bts_id order).

    Returns the column index, or -1 where every link is dead.  Exact
    ties resolve to the lowest bts_id via argmax's first-hit rule.
    """
    masked = np.where(live_chunk, rss_chunk, -np.inf)
    sel = np.argmax(masked, axis=1).astype(np.int64)
    sel[~live_chunk.any(axis=1)] = UNASSIGNED
    return sel


def idw_rows_chunk(
    rss_chunk: np.ndarray, live_chunk: np.ndarray, s: float, k: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """IDW weights per row over the k strongest live links.

    Columns must already be in ascending bts_id order.  Returns CSR-style
    (counts, col, w) with cols ascending within each row.  The signal
    "distance" is |rss| clamped below at 1 to keep 1/|rss|^s finite.
    """
    n, j = rss_chunk.shape
    kk = min(int(k), j)
    if kk < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if s < 0:
        raise ValueError(f"exponent s must be >= 0, got {s}")
    masked = np.where(live_chunk, rss_chunk, -np.inf)
    order = np.argsort(-masked, axis=1, kind="stable")[:, :kk]
    top = np.take_along_axis(masked, order, axis=1)
    sel_live = np.isfinite(top)
    with np.errstate(invalid="ignore"):
        v = np.where(sel_live, 1.0 / np.clip(np.abs(top), 1.0, None) ** s, 0.0)
    tot = v.sum(axis=1)
    counts = sel_live.sum(axis=1).astype(np.int64)
    rows = np.repeat(np.arange(n), kk)[sel_live.ravel()]
    cols = order.ravel()[sel_live.ravel()]
    w = (v / np.where(tot > 0, tot, 1.0)[:, None]).ravel()[sel_live.ravel()]
    reorder = np.lexsort((cols, rows))
    return counts, cols[reorder], w[reorder]


def _settlement_area_index(settlements: Settlements, areas: StatAreaSet) -> np.ndarray:
    labels = areas.labels(settlements.grid)
    return labels[settlements.rows, settlements.cols].astype(np.int64)


def area_weights_from_pixels(
    pw: PixelWeights, settlements: Settlements, areas: StatAreaSet
) -> WeightMatrix:
    """Average per-pixel weights over each area's covered settlement pixels.

    Pixel contributions are rescaled by `pixel_scale` when present; an
    area whose covered pixels all carry zero scale gets no coverage.
    """
    if pw.pixel_ids.size != len(settlements) or not np.array_equal(pw.pixel_ids, settlements.ids):
        raise ValueError("pixel weights and settlements are not aligned")
    area_of = _settlement_area_index(settlements, areas)
    scale = pw.pixel_scale if pw.pixel_scale is not None else np.ones(len(settlements))
    covered = pw.covered
    use = covered & (area_of >= 0)
    denom = np.bincount(area_of[use], weights=scale[use], minlength=len(areas))

    entry_area = np.repeat(area_of, pw.row_lengths())
    entry_scale = np.repeat(scale, pw.row_lengths())
    keep = entry_area >= 0
    nbts = len(pw.bts_ids)
    combo = entry_area[keep] * nbts + pw.col[keep]
    sums = np.bincount(combo, weights=entry_scale[keep] * pw.w[keep], minlength=len(areas) * nbts)

    rows: dict[str, dict[str, float]] = {}
    for flat in np.nonzero(sums)[0]:
        aidx, bidx = divmod(int(flat), nbts)
        if denom[aidx] > 0:
            rows.setdefault(areas.area_ids[aidx], {})[pw.bts_ids[bidx]] = sums[flat] / denom[aidx]
    return WeightMatrix(pw.scheme, list(areas.area_ids), rows)


def weights_bsa(
    rss: RssField, settlements: Settlements, areas: StatAreaSet
) -> tuple[PixelWeights, WeightMatrix]:
    """Best-server assignment: each covered pixel belongs wholly to its
    strongest live link; area weights average those selections."""
    if not np.array_equal(rss.pixel_ids, settlements.ids):
        raise ValueError("rss field and settlements are not aligned")
    bts_sorted, perm = _sorted_columns(rss)
    sel = bsa_select_chunk(rss.rss_dbm[:, perm], rss.live[:, perm])
    covered = sel >= 0
    indptr = np.concatenate([[0], np.cumsum(covered.astype(np.int64))])
    pw = PixelWeights(
        scheme=SCHEME_BSA,
        pixel_ids=settlements.ids,
        bts_ids=bts_sorted,
        indptr=indptr,
        col=sel[covered],
        w=np.ones(int(covered.sum())),
        params={"dead_threshold_dbm": rss.dead_threshold_dbm},
    )
    return pw, area_weights_from_pixels(pw, settlements, areas)


def weights_idw(
    rss: RssField,
    settlements: Settlements,
    areas: StatAreaSet,
    s: float = 2.0,
    k: int = 5,
) -> tuple[PixelWeights, WeightMatrix]:
    """Inverse-signal-strength weights over the k strongest live links."""
    if not np.array_equal(rss.pixel_ids, settlements.ids):
        raise ValueError("rss field and settlements are not aligned")
    bts_sorted, perm = _sorted_columns(rss)
    counts, col, w = idw_rows_chunk(rss.rss_dbm[:, perm], rss.live[:, perm], s, k)
    pw = PixelWeights(
        scheme=SCHEME_IDW,
        pixel_ids=settlements.ids,
        bts_ids=bts_sorted,
        indptr=np.concatenate([[0], np.cumsum(counts)]),
        col=col,
        w=w,
        params={"s": float(s), "k": int(k), "dead_threshold_dbm": rss.dead_threshold_dbm},
    )
    return pw, area_weights_from_pixels(pw, settlements, areas)


def refine_weights(pw: PixelWeights, aux_counts) -> PixelWeights:
    """Scale each pixel's area-aggregation contribution by an auxiliary count.

    With all-ones counts the refined weights aggregate identically to
    the original; a zero-count pixel contributes nothing.
    """
    aux = np.asarray(aux_counts, dtype=np.float64)
    if aux.shape != (pw.pixel_ids.size,):
        raise ValueError(f"aux counts shape {aux.shape} != {pw.pixel_ids.size} pixels")
    if np.any(~np.isfinite(aux)) or np.any(aux < 0):
        raise ValueError("aux counts must be finite and non-negative")
    base = pw.pixel_scale if pw.pixel_scale is not None else 1.0
    return replace(pw, scheme=pw.scheme + "_aux", pixel_scale=base * aux)


# --- aggregation -------------------------------------------------------------


def _weighted_median(values: np.ndarray, weights: np.ndarray) -> float:
    order = np.argsort(values, kind="stable")
    v, wgt = values[order], weights[order]
    cum = np.cumsum(wgt)
    return float(v[np.searchsorted(cum, 0.5 * cum[-1])])


def aggregate(
    wm: WeightMatrix,
    covariates: CovariateTable,
    column: str,
    statistic: str = "mean",
) -> dict[str, float | None]:
    """Area-level estimates R_hat = W R (or the weighted median).

    No-coverage areas map to None.  A missing covariate (absent row or
    NaN) for any weighted BTS is an error naming the offender, never a
    silent zero.
    """
    if statistic not in ("mean", "median"):
        raise ValueError(f"unknown statistic {statistic!r}; expected 'mean' or 'median'")
    colv = covariates.column(column)
    out: dict[str, float | None] = {}
    for aid in wm.area_ids:
        row = wm.rows.get(aid)
        if row is None:
            out[aid] = None
            continue
        vals = np.empty(len(row))
        wgts = np.empty(len(row))
        for i, (bid, wgt) in enumerate(sorted(row.items())):
            try:
                v = covariates.lookup(bid, column)
            except KeyError:
                raise ValueError(
                    f"covariate {column!r} missing for BTS {bid!r} (needed by area {aid!r})"
                ) from None
            if not np.isfinite(v):
                raise ValueError(
                    f"covariate {column!r} is missing (NaN) for BTS {bid!r} "
                    f"(needed by area {aid!r})"
                )
            vals[i], wgts[i] = v, wgt
        if statistic == "mean":
            out[aid] = float(vals @ wgts)
        else:
            out[aid] = _weighted_median(vals, wgts)
    return out


# --- naive technical specifications ------------------------------------------

NAIVE_HEIGHT_M = 30.0
NAIVE_POWER_DBM = 45.0
NAIVE_URBAN_FREQ_MHZ = 2100.0
NAIVE_OTHER_FREQ_MHZ = 900.0
URBAN_DENSITY_PER_KM2 = 1.0


def classify_areas_by_bts_density(
    areas: StatAreaSet,
    bts_points,
    grid: Grid | None = None,
    urban_density_per_km2: float = URBAN_DENSITY_PER_KM2,
    rural_share: float = 0.5,
) -> dict[str, str]:
    """Urbanity from site density: dense areas are urban, the sparsest
    half rural, the rest suburban.

    Density above `urban_density_per_km2` makes an area urban regardless
    of rank.  The rural group is the bottom `rural_share` fraction by
    (density, area_id) order, minus any area already urban.
    """
    pts = list(bts_points)
    x = np.array([float(p[1]) for p in pts])
    y = np.array([float(p[2]) for p in pts])
    host = areas.locate_points(x, y, grid) if pts else np.empty(0, dtype=np.int64)
    counts = np.bincount(host[host >= 0], minlength=len(areas)).astype(np.float64)
    sizes = areas.area_km2(grid)
    size_arr = np.array([sizes[a] for a in areas.area_ids])
    with np.errstate(divide="ignore", invalid="ignore"):
        density = np.where(
            size_arr > 0, counts / size_arr, np.where(counts > 0, np.inf, 0.0)
        )

    classes = {
        aid: ("urban" if density[i] > urban_density_per_km2 else "suburban")
        for i, aid in enumerate(areas.area_ids)
    }
    n_rural = int(np.floor(rural_share * len(areas)))
    by_density = sorted(range(len(areas)), key=lambda i: (density[i], areas.area_ids[i]))
    for i in by_density[:n_rural]:
        if classes[areas.area_ids[i]] != "urban":
            classes[areas.area_ids[i]] = "rural"
    return classes


def synthesize_naive_specs(
    bts_points,
    area_classes: dict[str, str],
    areas: StatAreaSet,
    grid: Grid | None = None,
    height_m: float = NAIVE_HEIGHT_M,
    power_dbm: float = NAIVE_POWER_DBM,
    urban_freq_mhz: float = NAIVE_URBAN_FREQ_MHZ,
    other_freq_mhz: float = NAIVE_OTHER_FREQ_MHZ,
) -> list[AntennaSpec]:
    """Guess technical specs from public context: fixed mast height and
    power everywhere, the high band in urban-classified areas and the
    low band elsewhere (including BTS outside every area)."""
    pts = list(bts_points)
    x = np.array([float(p[1]) for p in pts])
    y = np.array([float(p[2]) for p in pts])
    host = areas.locate_points(x, y, grid) if pts else np.empty(0, dtype=np.int64)
    outside = int(np.count_nonzero(host == UNASSIGNED))
    if outside:
        warnings.warn(f"{outside} BTS outside every area; assuming the low band", stacklevel=2)
    specs = []
    for i, p in enumerate(pts):
        if host[i] >= 0 and area_classes.get(areas.area_ids[host[i]]) == "urban":
            freq = urban_freq_mhz
        else:
            freq = other_freq_mhz
        specs.append(AntennaSpec(p[0], float(p[1]), float(p[2]), height_m, freq, power_dbm))
    return specs
