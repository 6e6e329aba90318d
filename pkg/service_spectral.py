import logging
from dataclasses import dataclass

import numpy as np

from exceptions import (
    DimensionMismatchError, InvalidStateError, NegativeSusceptibleError, NoConvergenceError,
    WeightOutOfRangeError, ZeroMatrixError
)
from service_graph import Graph, GraphKind, degree_stats
from service_seir_dynamics import CouplingMode, EpidemicParams, SeirState, Trace, coupling_matrix

logger = logging.getLogger(__name__)

EIGEN_TOL = 1e-10
EIGEN_MAX_ITER = 10000


@dataclass(frozen=True, eq=False)
class EigenPair:
    lambda_: float
    v: np.ndarray
    iterations: int
    residual: float


@dataclass(frozen=True)
class ThresholdReport:
    lambda_m: float
    margin: float
    beta: float
    gamma: float
    envelope: bool


def build_B(s, A):
    s = np.asarray(s, dtype=float)
    A = np.asarray(A, dtype=float)
    if A.shape != (len(s), len(s)):
        raise DimensionMismatchError(f"s の長さ {len(s)} と行列の形 {A.shape} が一致しません")
    return s[:, None] * A


def build_B_sym(s, A):
    s = np.asarray(s, dtype=float)
    if np.any(s < 0):
        raise NegativeSusceptibleError("感受性人口が負のため B_sym を計算できません")
    A = np.asarray(A, dtype=float)
    if A.shape != (len(s), len(s)):
        raise DimensionMismatchError(f"s の長さ {len(s)} と行列の形 {A.shape} が一致しません")
    root = np.sqrt(s)
    return root[:, None] * A * root[None, :]


def dominant_left_eigenpair(M, tol=EIGEN_TOL, max_iter=EIGEN_MAX_ITER):
    """非負行列の支配的な左固有対をべき乗法で求める

    M^T に対して全成分1の初期ベクトルから反復する。二部グラフのように ±λ が並ぶ場合でも
    収束するよう M + σI (σ は最大行和の半分) で反復し、残差は元の M で評価する。
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionMismatchError(f"正方行列である必要があります: {M.shape}")
    if not np.all(np.isfinite(M)) or np.any(M < 0):
        raise WeightOutOfRangeError("べき乗法には有限な非負行列が必要です")
    if not np.any(M):
        raise ZeroMatrixError("零行列には支配的固有値がありません")

    n = M.shape[0]
    shift = 0.5 * float(M.sum(axis=1).max())
    transposed = M.T
    v = np.full(n, 1.0 / n)
    residual = np.inf

    for iteration in range(1, max_iter + 1):
        w = transposed @ v + shift * v
        w /= w.sum()
        product = transposed @ w
        # sum(w) = 1 なので 1^T M^T w が固有値の推定になる
        lam = float(product.sum())
        residual = float(np.max(np.abs(product - lam * w)))
        v = w
        if residual <= tol:
            return EigenPair(lam, v, iteration, residual)

    raise NoConvergenceError(
        f"べき乗法が {max_iter} 回で収束しませんでした (残差 {residual:.3e})。λ1 ≈ |λ2| の可能性があります"
    )


def top_eigenvalue(M, tol=EIGEN_TOL, max_iter=EIGEN_MAX_ITER):
    try:
        return dominant_left_eigenpair(M, tol, max_iter).lambda_
    except ZeroMatrixError:
        return 0.0


def right_to_sym_eigenvector(v, s):
    # B の右固有ベクトル v から B_sym の固有ベクトル Diag(s)^{-1/2} v を作る
    s = np.asarray(s, dtype=float)
    if np.any(s <= 0):
        raise NegativeSusceptibleError("s は正である必要があります")
    return np.asarray(v, dtype=float) / np.sqrt(s)


def spectral_bounds(g: Graph, s):
    if g.kind != GraphKind.SIMPLE01:
        raise WeightOutOfRangeError("固有値の評価式は単純グラフ (A = Ã + I) のみ対応しています")
    s = np.asarray(s, dtype=float)
    if s.shape != (g.n,):
        raise DimensionMismatchError(f"s の長さ {s.shape} がノード数 {g.n} と一致しません")
    _, d_max, d_avg = degree_stats(g)
    lower = (d_avg + 1.0) * float(s.min())
    upper = (d_max + 1.0) * float(s.max())
    return lower, upper


def threshold_report(t, x: SeirState, g: Graph, p: EpidemicParams, mode=CouplingMode.MOBILITY,
                     tol=EIGEN_TOL, max_iter=EIGEN_MAX_ITER):
    B = build_B(x.s, coupling_matrix(g, mode))
    lambda_m = top_eigenvalue(B, tol, max_iter)

    beta, _, gamma = p.values(t, g.n)
    envelope = bool(np.ptp(beta) > 0 or np.ptp(gamma) > 0)
    if envelope:
        logger.debug("パラメータがノードごとに異なるため max β, min γ による包絡値を使用します")
    beta_value = float(beta.max())
    gamma_value = float(gamma.min())
    return ThresholdReport(lambda_m, beta_value * lambda_m - gamma_value, beta_value, gamma_value, envelope)


def threshold_margin(t, x: SeirState, g: Graph, p: EpidemicParams, mode=CouplingMode.MOBILITY,
                     tol=EIGEN_TOL, max_iter=EIGEN_MAX_ITER):
    return threshold_report(t, x, g, p, mode, tol, max_iter).margin


def make_threshold_monitor(g: Graph, p: EpidemicParams, mode=CouplingMode.MOBILITY,
                           tol=EIGEN_TOL, max_iter=EIGEN_MAX_ITER):
    def monitor(t, state):
        report = threshold_report(t, state, g, p, mode, tol, max_iter)
        return report.lambda_m, report.margin
    return monitor


def q_tau_series(tr: Trace, g: Graph, p: EpidemicParams, tau, mode=CouplingMode.MOBILITY,
                 tol=EIGEN_TOL, max_iter=EIGEN_MAX_ITER):
    """t >= tau の記録時刻での q_tau(t) を返す。

    tau が記録時刻の間にあるときは、tau 以降で最初に記録された状態を s(tau) として使う。
    系列もその時刻から始まる。
    """
    if tau < tr.times[0] or tau > tr.times[-1]:
        raise InvalidStateError(f"tau={tau} が記録範囲 [{tr.times[0]}, {tr.times[-1]}] の外です")
    start = int(np.searchsorted(tr.times, tau - 1e-12, side='left'))
    s_tau = tr.states[start].s
    if np.any(s_tau <= 0):
        raise InvalidStateError("q_tau には s(tau) > 0 が必要です")

    pair = dominant_left_eigenpair(build_B(s_tau, coupling_matrix(g, mode)), tol, max_iter)
    return np.array([float(pair.v @ (state.e + state.i)) for state in tr.states[start:]])
