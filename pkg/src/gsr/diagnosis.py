"""Fault diagnosis from graph structural residuals.

After training, the observation adjacency is averaged over a set of
windows taken from the post-fault span of a diagnosis run, rescaled to
the reference adjacency's range, and subtracted from it.  Entries of
the absolute difference below the threshold tau are zeroed; what
remains marks suspect edges, ranked for reporting.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import models as md
from .diffcore import ParameterStore, Tensor


@dataclass
class WindowSet:
    starts: list[int]
    length: int
    source: np.ndarray        # (N, T) signal the windows index into

    def __len__(self):
        return len(self.starts)

    def window(self, i: int) -> np.ndarray:
        s = self.starts[i]
        return np.ascontiguousarray(self.source[:, s:s + self.length])


@dataclass
class WindowPolicy:
    """Where to slice diagnosis windows; None fields fall back to the
    post-fault span [2W, 5W) with stride W//4."""
    region: tuple | None = None
    stride: int | None = None

    def resolve(self, W: int, total: int) -> tuple[tuple, int]:
        region = self.region if self.region is not None else (2 * W, 5 * W)
        stride = self.stride if self.stride is not None else max(1, W // 4)
        if region[1] > total:
            raise ValueError(f"window region {region} exceeds signal length {total}")
        return (int(region[0]), int(region[1])), int(stride)


@dataclass
class ResidualMatrix:
    values: np.ndarray
    tau: float


@dataclass
class FaultReport:
    ranked_edges: list            # (i, j, residual), descending
    node_scores: np.ndarray       # per-node sum of incident residuals

    def top_nodes(self, count: int = 2) -> list[int]:
        order = np.lexsort((np.arange(len(self.node_scores)), -self.node_scores))
        return [int(i) for i in order[:count]]


@dataclass
class DiagnosisResult:
    a_ref: np.ndarray
    a_obs_avg: np.ndarray
    residual: ResidualMatrix
    report: FaultReport
    windows: WindowSet


def collect_windows(S: np.ndarray, region: tuple, stride: int, W: int) -> WindowSet:
    """All windows of length W starting at region[0], region[0]+stride, ...
    that fit inside [region[0], region[1])."""
    S = np.asarray(S, dtype=np.float64)
    start, end = int(region[0]), int(region[1])
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if W < 1:
        raise ValueError(f"window length must be >= 1, got {W}")
    if not 0 <= start <= end <= S.shape[1]:
        raise ValueError(f"region {region} does not fit signal of length {S.shape[1]}")
    if end - start < W:
        raise ValueError(f"region {region} is shorter than one window (W={W})")
    starts = list(range(start, end - W + 1, stride))
    return WindowSet(starts=starts, length=W, source=S)


def average_observation(ws: WindowSet, store: ParameterStore,
                        tcn_config: md.TCNConfig, prefix: str = "gobs") -> np.ndarray:
    """Mean observation adjacency over the window set (inference mode,
    fixed accumulation order)."""
    acc = None
    with dc.no_grad():
        for i in range(len(ws)):
            A = md.gen_observation(Tensor(ws.window(i)), store, prefix, tcn_config).data
            acc = A.copy() if acc is None else acc + A
    return acc / len(ws)


def rescale_offdiag(M: np.ndarray) -> np.ndarray:
    """Min-max rescale the off-diagonal entries to [0, 1]; constant
    matrices map to all zeros.  The diagonal is zeroed."""
    M = np.asarray(M, dtype=np.float64)
    out = np.zeros_like(M)
    off = ~np.eye(M.shape[0], dtype=bool)
    vals = M[off]
    lo, hi = vals.min(), vals.max()
    if hi > lo:
        out[off] = (vals - lo) / (hi - lo)
    return out


def residual(A_ref: np.ndarray, A_obs_avg: np.ndarray, tau: float) -> ResidualMatrix:
    """Thresholded absolute deviation between the rescaled adjacencies.

    Both inputs are min-max rescaled off-diagonal first: the reference
    and observation pipelines put their edge weights on different
    scales, and the residual should encode structure, not scale.
    """
    A_ref, A_obs_avg = np.asarray(A_ref), np.asarray(A_obs_avg)
    if A_ref.shape != A_obs_avg.shape:
        raise ValueError(f"adjacency shapes differ: {A_ref.shape} vs {A_obs_avg.shape}")
    if tau < 0:
        raise ValueError(f"tau must be >= 0, got {tau}")
    R = np.abs(rescale_offdiag(A_ref) - rescale_offdiag(A_obs_avg))
    R[R < tau] = 0.0
    return ResidualMatrix(values=R, tau=float(tau))


def rank_faults(R: ResidualMatrix) -> FaultReport:
    """Upper-triangle edges sorted by residual descending, ties broken
    lexicographically by (i, j); node scores sum incident residuals."""
    vals = R.values
    n = vals.shape[0]
    edges = [(i, j, float(vals[i, j])) for i in range(n) for j in range(i + 1, n)]
    edges.sort(key=lambda e: (-e[2], e[0], e[1]))
    return FaultReport(ranked_edges=edges, node_scores=vals.sum(axis=1))


def flagged_edges(report: FaultReport) -> list:
    """Edges whose residual survived the threshold."""
    return [e for e in report.ranked_edges if e[2] > 0.0]


def diagnose(S: np.ndarray, ref_store: ParameterStore, obs_store: ParameterStore,
             tau: float, W: int, policy: WindowPolicy | None = None,
             tcn_config: md.TCNConfig | None = None) -> DiagnosisResult:
    """Full pipeline: windows -> averaged observation adjacency ->
    residual against the reference -> ranked fault report."""
    policy = policy or WindowPolicy()
    tcn_config = tcn_config or md.TCNConfig()
    region, stride = policy.resolve(W, np.asarray(S).shape[1])
    ws = collect_windows(S, region, stride, W)
    with dc.no_grad():
        a_ref = md.gen_reference(ref_store).data
    a_obs = average_observation(ws, obs_store, tcn_config)
    res = residual(a_ref, a_obs, tau)
    return DiagnosisResult(a_ref=a_ref, a_obs_avg=a_obs, residual=res,
                           report=rank_faults(res), windows=ws)


def calibrate_tau(healthy_residual_pools: list, percentile: float = 99.0,
                  margin: float = 1.1) -> float:
    """Threshold from healthy-run residual entries: the given percentile
    of the pooled off-diagonal values times a safety margin, so healthy
    runs stay below tau with room to spare."""
    pool = np.concatenate([np.asarray(p).ravel() for p in healthy_residual_pools])
    if pool.size == 0:
        raise ValueError("no healthy residual entries to calibrate from")
    return float(np.percentile(pool, percentile) * margin)


def healthy_residual_entries(S: np.ndarray, ref_store: ParameterStore,
                             obs_store: ParameterStore, W: int,
                             policy: WindowPolicy | None = None,
                             tcn_config: md.TCNConfig | None = None) -> np.ndarray:
    """Unthresholded residual off-diagonal entries of a healthy run,
    used to calibrate tau."""
    result = diagnose(S, ref_store, obs_store, 0.0, W, policy, tcn_config)
    off = ~np.eye(result.residual.values.shape[0], dtype=bool)
    return result.residual.values[off]
