"""Two-stage measurement-based outlier removal for volume cohorts.

Stage one screens each structure's log-volumes with a robust median/MAD
rule and flags individual (scan, structure) measurements. Stage two
factorizes the surviving scan-by-structure log-volume matrix to a low
rank by alternating least squares and flags whole scans whose residuals
break the dependencies between structures that the factorization learns.
Both stages, their parameters, and the reconciled counts land in a
:class:`CurationReport` so every exclusion is auditable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .errors import ContractError, NumericalError

_MAD_TO_SD = 1.4826
_IQR_TO_SD = 1.349


@dataclass(frozen=True)
class CurationParams:
    """Thresholds and factorization controls, echoed into the report."""

    mad_threshold: float = 4.0
    consistency_threshold: float = 4.0
    rank: int = 5
    min_structures: int = 8
    ridge: float = 1e-6
    max_sweeps: int = 200
    tol: float = 1e-10

    def validate(self) -> None:
        if not self.mad_threshold > 0:
            raise ContractError("mad_threshold must be positive")
        if not self.consistency_threshold > 0:
            raise ContractError("consistency_threshold must be positive")
        if self.rank < 1:
            raise ContractError("rank must be at least 1")
        if self.min_structures < 1:
            raise ContractError("min_structures must be at least 1")


@dataclass
class CurationReport:
    """Per-record curation flags aligned with the input record order.

    A record is counted in exactly one bucket: measurement outlier
    (stage one), consistency outlier (stage two, covering every not yet
    flagged record of a flagged scan), or kept.
    """

    scan_ids: np.ndarray
    structure_ids: np.ndarray
    mad_outlier: np.ndarray
    consistency_outlier: np.ndarray
    flagged_scans: tuple
    params: CurationParams
    n_records: int
    n_mad: int
    n_consistency: int
    n_kept: int
    sweeps: int = 0
    objective_trace: tuple = field(default=())

    @property
    def kept(self) -> np.ndarray:
        return ~(self.mad_outlier | self.consistency_outlier)

    def to_rows(self):
        """One (scan_id, structure_id, status) row per input record."""
        rows = []
        for i in range(self.n_records):
            if self.mad_outlier[i]:
                status = "measurement_outlier"
            elif self.consistency_outlier[i]:
                status = "consistency_outlier"
            else:
                status = "kept"
            rows.append((self.scan_ids[i], self.structure_ids[i], status))
        return rows

    def excluded_scan_reasons(self) -> dict:
        """Scan id -> reason, for scans losing at least one record."""
        reasons = {}
        for scan, _, status in self.to_rows():
            if status == "consistency_outlier":
                reasons[scan] = "consistency_outlier"
            elif status == "measurement_outlier" and scan not in reasons:
                reasons[scan] = "measurement_outlier"
        return reasons


def robust_scale(values: np.ndarray) -> float:
    """MAD-based scale estimate with an IQR fallback for flat middles."""
    med = np.median(values)
    mad = np.median(np.abs(values - med))
    if mad > 0:
        return _MAD_TO_SD * mad
    q75, q25 = np.percentile(values, [75.0, 25.0])
    return (q75 - q25) / _IQR_TO_SD


def mad_filter(values: np.ndarray, k: float = 4.0) -> np.ndarray:
    """Flag values whose robust z-score strictly exceeds ``k``.

    The z-score divides the absolute deviation from the median by
    1.4826 times the median absolute deviation. A zero MAD falls back
    to the scaled interquartile range; when that is zero as well the
    sample has no usable spread and nothing is flagged.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim != 1:
        raise ContractError("mad_filter expects a one-dimensional array")
    if values.size == 0:
        return np.zeros(0, dtype=bool)
    if not np.all(np.isfinite(values)):
        raise ContractError("mad_filter requires finite values")
    if not k > 0:
        raise ContractError("threshold must be positive")
    scale = robust_scale(values)
    if scale <= 0:
        return np.zeros(values.shape, dtype=bool)
    return np.abs(values - np.median(values)) / scale > k


def _als_factorize(matrix, mask, rank, ridge, max_sweeps, tol):
    """Masked alternating least squares, returning (U, V, trace, sweeps)."""
    n, m = matrix.shape
    # deterministic start: observed column means fill the gaps, then a
    # truncated SVD of the filled matrix seeds both factors
    col_sums = np.where(mask, matrix, 0.0).sum(axis=0)
    col_counts = mask.sum(axis=0)
    col_means = np.divide(col_sums, np.maximum(col_counts, 1),
                          out=np.zeros_like(col_sums),
                          where=col_counts > 0)
    filled = np.where(mask, matrix, col_means[None, :])
    left, sing, right_t = np.linalg.svd(filled, full_matrices=False)
    r = min(rank, sing.size)
    root = np.sqrt(sing[:r])
    u_fac = np.zeros((n, rank))
    v_fac = np.zeros((m, rank))
    u_fac[:, :r] = left[:, :r] * root
    v_fac[:, :r] = right_t[:r].T * root

    eye = ridge * np.eye(rank)

    def objective():
        resid = np.where(mask, matrix - u_fac @ v_fac.T, 0.0)
        return float(np.sum(resid ** 2)
                     + ridge * (np.sum(u_fac ** 2) + np.sum(v_fac ** 2)))

    trace = [objective()]
    for sweep in range(1, max_sweeps + 1):
        for i in range(n):
            obs = mask[i]
            if not obs.any():
                u_fac[i] = 0.0
                continue
            v_obs = v_fac[obs]
            u_fac[i] = np.linalg.solve(v_obs.T @ v_obs + eye,
                                       v_obs.T @ matrix[i, obs])
        for j in range(m):
            obs = mask[:, j]
            if not obs.any():
                v_fac[j] = 0.0
                continue
            u_obs = u_fac[obs]
            v_fac[j] = np.linalg.solve(u_obs.T @ u_obs + eye,
                                       u_obs.T @ matrix[obs, j])
        trace.append(objective())
        prev, cur = trace[-2], trace[-1]
        if prev - cur <= tol * (1.0 + abs(prev)):
            return u_fac, v_fac, trace, sweep
    raise NumericalError(
        "low-rank factorization did not converge within %d sweeps; "
        "objective trace tail: %s"
        % (max_sweeps, [round(v, 6) for v in trace[-5:]]),
        state=(u_fac, v_fac, trace))


def lowrank_flags(matrix: np.ndarray, mask: np.ndarray, *,
                  rank: int = 5, threshold: float = 4.0,
                  min_structures: int = 8, ridge: float = 1e-6,
                  max_sweeps: int = 200, tol: float = 1e-10):
    """Flag scans whose observed entries defy a low-rank reconstruction.

    The masked matrix (scans by structures, missing entries arbitrary
    where ``mask`` is False) is factorized to ``rank`` by alternating
    least squares with a small ridge. Residuals are standardized per
    structure by that column's robust scale; a scan is flagged when the
    root mean square of its standardized observed residuals strictly
    exceeds ``threshold``. Scans observing fewer than ``min_structures``
    structures are never flagged.

    Returns (flags, rms, trace, sweeps).
    """
    matrix = np.asarray(matrix, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if matrix.shape != mask.shape or matrix.ndim != 2:
        raise ContractError("matrix and mask must share a 2-d shape")
    if rank < 1:
        raise ContractError("rank must be at least 1")
    if not np.all(np.isfinite(matrix[mask])):
        raise ContractError("observed entries must be finite")

    u_fac, v_fac, trace, sweeps = _als_factorize(
        matrix, mask, rank, ridge, max_sweeps, tol)
    resid = matrix - u_fac @ v_fac.T

    n, m = matrix.shape
    std_resid = np.zeros((n, m))
    for j in range(m):
        obs = mask[:, j]
        if not obs.any():
            continue
        scale = robust_scale(resid[obs, j])
        ref = robust_scale(matrix[obs, j])
        # a residual spread that is negligible next to the column's own
        # spread (rounding noise, or the ridge's shrinkage bias on an
        # exactly low-rank column) means the column is fully explained;
        # standardizing it would manufacture z-scores out of nothing
        if ref <= 0 or scale <= 1e-6 * ref:
            continue
        std_resid[obs, j] = resid[obs, j] / scale

    counts = mask.sum(axis=1)
    sq_sums = np.where(mask, std_resid ** 2, 0.0).sum(axis=1)
    rms = np.sqrt(np.divide(sq_sums, np.maximum(counts, 1),
                            out=np.zeros_like(sq_sums), where=counts > 0))
    flags = (rms > threshold) & (counts >= min_structures)
    return flags, rms, tuple(trace), sweeps


def curate_dataset(data: Dataset,
                   params: CurationParams | None = None) -> CurationReport:
    """Run both curation stages over a volume dataset.

    Stage one applies :func:`mad_filter` to each structure's log-volumes
    across scans. Stage two assembles the scan-by-structure log-volume
    matrix with stage-one casualties masked out and applies
    :func:`lowrank_flags`; a flagged scan marks all of its remaining
    records as consistency outliers.
    """
    params = params or CurationParams()
    params.validate()
    if len(data) == 0:
        raise ContractError("cannot curate an empty dataset")

    scan_ids = data.column("scan_id")
    structure_ids = data.column("structure_id")
    logvol = np.log(data.column("volume_ml"))

    mad_flag = np.zeros(len(data), dtype=bool)
    for structure in np.unique(structure_ids):
        sel = structure_ids == structure
        mad_flag[sel] = mad_filter(logvol[sel], params.mad_threshold)

    scans = np.unique(scan_ids)
    structures = np.unique(structure_ids)
    scan_pos = {s: i for i, s in enumerate(scans)}
    struct_pos = {s: j for j, s in enumerate(structures)}
    matrix = np.zeros((scans.size, structures.size))
    mask = np.zeros((scans.size, structures.size), dtype=bool)
    for i in range(len(data)):
        if mad_flag[i]:
            continue
        row, col = scan_pos[scan_ids[i]], struct_pos[structure_ids[i]]
        matrix[row, col] = logvol[i]
        mask[row, col] = True

    rank = min(params.rank, structures.size)
    scan_flags, _, trace, sweeps = lowrank_flags(
        matrix, mask, rank=rank,
        threshold=params.consistency_threshold,
        min_structures=params.min_structures, ridge=params.ridge,
        max_sweeps=params.max_sweeps, tol=params.tol)
    flagged_scans = tuple(scans[scan_flags])
    flagged_set = set(flagged_scans)
    consistency = np.array([s in flagged_set for s in scan_ids]) & ~mad_flag

    n_mad = int(mad_flag.sum())
    n_consistency = int(consistency.sum())
    return CurationReport(
        scan_ids=scan_ids, structure_ids=structure_ids,
        mad_outlier=mad_flag, consistency_outlier=consistency,
        flagged_scans=flagged_scans, params=params,
        n_records=len(data), n_mad=n_mad, n_consistency=n_consistency,
        n_kept=len(data) - n_mad - n_consistency,
        sweeps=sweeps, objective_trace=trace)
