import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, List, Optional, Union

import numpy as np
import polars as pl

from exceptions import (
    DimensionMismatchError, IncompatiblePartitionsError, InvalidStateError, NonFiniteInputError,
    ReferenceTooCoarseError, WeightOutOfRangeError
)
from service_graphon import (
    GraphonFn, StepGraphon, cell_index, kernel_matrix, midpoints, operator_top_eigenvalue,
    overlap_matrix, project_graphon, sample_graph_deterministic, sample_graph_random
)
from service_seir_dynamics import (
    BLOWUP_LIMIT, STABILITY_FACTOR, IntegrationMethod, SeirState, Trace, describe_param, fixed_step_integrate,
    seir_vector_field
)

logger = logging.getLogger(__name__)

SUBQUADRATURE = 16
PROJECTION_POINTS = 4
REFINEMENT_CAP = 1_000_000
ENVELOPE_GRID = 800
ENVELOPE_TIME_SAMPLES = 9


class DistanceNorm(Enum):
    SUP_POINTWISE = "sup"
    L2 = "l2"


class ConvergenceMode(Enum):
    PROJECT_CONTINUUM = "project"
    SAMPLE_DETERMINISTIC = "deterministic"
    SAMPLE_RANDOM = "random"


class Discretization(Enum):
    # 中点での値か、セル平均 (射影) か
    MIDPOINT = "midpoint"
    CELL_AVERAGE = "cell_average"


@dataclass(frozen=True, eq=False)
class FieldState(SeirState):
    """中点 x_k = (2k-1)/(2n) 上の s, e, i, r"""

    @property
    def positions(self):
        return midpoints(self.n)

    def embed(self):
        return embed_piecewise(self.as_array())


@dataclass(frozen=True, eq=False)
class StepProfile:
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float).reshape(-1)
        if len(values) < 1 or not np.all(np.isfinite(values)):
            raise NonFiniteInputError("StepProfile には1つ以上の有限な値が必要です")
        values.flags.writeable = False
        object.__setattr__(self, 'values', values)

    @property
    def n_cells(self):
        return len(self.values)

    def __call__(self, x):
        return self.values[cell_index(x, self.n_cells)]

    def average(self, n):
        if n == self.n_cells:
            return np.array(self.values)
        return overlap_matrix(n, self.n_cells) @ self.values


FieldEntry = Union[float, StepProfile, Callable]


def _subcell_points(n, points):
    offsets = (np.arange(points) + 0.5) / points
    return ((np.arange(n)[:, None] + offsets[None, :]) / n).ravel()


def _entry_average(entry, n, t=None, points=SUBQUADRATURE):
    if isinstance(entry, StepProfile):
        return entry.average(n)
    if callable(entry):
        x = _subcell_points(n, points)
        values = entry(t, x) if t is not None else entry(x)
        return np.asarray(values, dtype=float).reshape(n, points).mean(axis=1)
    return np.full(n, float(entry))


def _entry_values(entry, x, t=None):
    x = np.asarray(x, dtype=float)
    if isinstance(entry, StepProfile):
        return entry(x)
    if callable(entry):
        values = entry(t, x) if t is not None else entry(x)
        return np.broadcast_to(np.asarray(values, dtype=float), x.shape).copy()
    return np.full(x.shape, float(entry))


def _describe(entry):
    if isinstance(entry, StepProfile):
        return f"step({len(entry.values)})"
    return describe_param(entry)


@dataclass(frozen=True, eq=False)
class CoefficientField:
    beta: FieldEntry = 0.74
    mu: FieldEntry = 0.5
    gamma: FieldEntry = 0.14

    def __post_init__(self):
        c0, _ = self.bounds([0.0])
        if c0 <= 0:
            raise WeightOutOfRangeError(f"係数の下限 c0 は正である必要があります: c0={c0:.3g}")

    @classmethod
    def constant(cls, beta=0.74, mu=0.5, gamma=0.14):
        return cls(float(beta), float(mu), float(gamma))

    @property
    def is_time_dependent(self):
        return any(callable(entry) and not isinstance(entry, StepProfile)
                   for entry in (self.beta, self.mu, self.gamma))

    @property
    def is_constant(self):
        return all(isinstance(entry, (int, float)) for entry in (self.beta, self.mu, self.gamma))

    def entries(self):
        return (self.beta, self.mu, self.gamma)

    def point_values(self, t, x):
        return tuple(_entry_values(entry, x, t) for entry in self.entries())

    def bounds(self, times, grid=256):
        x = midpoints(grid)
        samples = np.concatenate([np.concatenate(self.point_values(t, x)) for t in times])
        if not np.all(np.isfinite(samples)):
            raise NonFiniteInputError("係数に有限でない値が含まれています")
        return float(samples.min()), float(samples.max())

    def describe(self):
        return {name: _describe(entry) for name, entry in zip(('beta', 'mu', 'gamma'), self.entries())}


def average_coefficients(c: CoefficientField, n, t=0.0, points=SUBQUADRATURE):
    """β^n_j(t) = I^n_j 上の β(t,·) の平均 (μ, γ も同様)"""
    if n < 1:
        raise DimensionMismatchError(f"n は1以上である必要があります: {n}")
    return tuple(_entry_average(entry, n, t, points) for entry in c.entries())


def midpoint_coefficients(c: CoefficientField, n, t=0.0):
    return c.point_values(t, midpoints(n))


@dataclass(frozen=True, eq=False)
class InitialProfile:
    s0: FieldEntry = 1.0
    e0: FieldEntry = 0.0
    i0: FieldEntry = 0.0
    r0: FieldEntry = 0.0
    name: str = "custom"

    def __post_init__(self):
        x = midpoints(257)
        values = np.vstack([_entry_values(entry, x) for entry in self.entries()])
        if not np.all(np.isfinite(values)):
            raise NonFiniteInputError(f"{self.name}: 初期値に有限でない値が含まれています")
        if values.min() < -1e-12 or values.max() > 1.0 + 1e-12:
            raise InvalidStateError(f"{self.name}: 初期値は[0,1]の範囲である必要があります")
        if np.max(np.abs(values.sum(axis=0) - 1.0)) > 1e-9:
            raise InvalidStateError(f"{self.name}: s0+e0+i0+r0 = 1 を満たしていません")

    @classmethod
    def uniform(cls, s=1.0, e=0.0, i=0.0):
        return cls(float(s), float(e), float(i), 1.0 - s - e - i, f"uniform({s},{e},{i})")

    @classmethod
    def seed_cell(cls, j, i0, n):
        if not 0 <= j < n:
            raise DimensionMismatchError(f"セル番号 j={j} が範囲 [0,{n}) の外です")
        infected = np.zeros(n)
        infected[j] = i0
        return cls(StepProfile(1.0 - infected), 0.0, StepProfile(infected), 0.0, f"seed-cell({j},{i0})")

    @classmethod
    def gaussian_bump(cls, x0, width, i0):
        if width <= 0 or not 0.0 <= i0 <= 1.0:
            raise InvalidStateError("gaussian-bump は width > 0, 0 <= i0 <= 1 である必要があります")

        def infected(x):
            return i0 * np.exp(-(x - x0) ** 2 / (2.0 * width ** 2))

        def susceptible(x):
            return 1.0 - infected(x)

        return cls(susceptible, 0.0, infected, 0.0, f"gaussian-bump({x0},{width},{i0})")

    def entries(self):
        return (self.s0, self.e0, self.i0, self.r0)

    def cell_average(self, n, points=SUBQUADRATURE):
        # s_{0,j}^n = <s_0>_{I_j^n}
        arrays = [_entry_average(entry, n, None, points) for entry in self.entries()]
        return FieldState(*arrays)

    def point_values(self, x):
        return np.vstack([_entry_values(entry, x) for entry in self.entries()])


def _check_field(x: SeirState, n=None):
    y = x.as_array()
    if n is not None and x.n != n:
        raise DimensionMismatchError(f"状態の長さ {x.n} が求積点数 {n} と一致しません")
    if not np.all(np.isfinite(y)):
        raise NonFiniteInputError("状態に有限でない値が含まれています")
    return y


def gseir_rhs(t, x: SeirState, w: GraphonFn, c: CoefficientField):
    y = _check_field(x)
    n = x.n
    beta, mu, gamma = midpoint_coefficients(c, n, t)
    # -μe 項を含む中点則による離散化
    return FieldState.from_array(seir_vector_field(y, kernel_matrix(w, n) / n, beta, mu, gamma))


def discrete_kernel(w: GraphonFn, n, discretization=Discretization.MIDPOINT, points=PROJECTION_POINTS):
    if Discretization(discretization) == Discretization.MIDPOINT:
        return kernel_matrix(w, n)
    return project_graphon(w, n, points)


def make_field_vector_field(coupling, c: CoefficientField, n, discretization=Discretization.MIDPOINT,
                            points=SUBQUADRATURE):
    if Discretization(discretization) == Discretization.MIDPOINT:
        def coefficients(t):
            return midpoint_coefficients(c, n, t)
    else:
        def coefficients(t):
            return average_coefficients(c, n, t, points)

    if c.is_time_dependent:
        def vector_field(t, y):
            return seir_vector_field(y, coupling, *coefficients(t))
    else:
        beta, mu, gamma = coefficients(0.0)

        def vector_field(t, y):
            return seir_vector_field(y, coupling, beta, mu, gamma)
    return vector_field


def _as_field_trace(tr: Trace):
    return Trace(tr.times, [FieldState.from_array(state.as_array()) for state in tr.states], tr.diagnostics)


def _initial_field(x0, n, points):
    if isinstance(x0, InitialProfile):
        return x0.cell_average(n, points)
    _check_field(x0, n)
    return FieldState.from_array(x0.as_array())


def _warn_step_size(c: CoefficientField, t0, t_end, dt):
    times = np.linspace(t0, t_end, ENVELOPE_TIME_SAMPLES) if c.is_time_dependent else [t0]
    _, k0 = c.bounds(times)
    if k0 > 0 and dt > STABILITY_FACTOR / k0:
        logger.warning("dt=%.3g が目安 0.1/K0=%.3g を超えています", dt, STABILITY_FACTOR / k0)


def integrate_coupled(x0: FieldState, coupling, c: CoefficientField, t0=0.0, t_end=100.0, dt=0.01,
                      method=IntegrationMethod.EULER, record_every=1, discretization=Discretization.MIDPOINT,
                      points=SUBQUADRATURE, blowup_limit=BLOWUP_LIMIT):
    n = x0.n
    coupling = np.asarray(coupling, dtype=float)
    if coupling.shape != (n, n):
        raise DimensionMismatchError(f"結合行列の形 {coupling.shape} が求積点数 {n} と一致しません")
    x0.validate()
    vector_field = make_field_vector_field(coupling, c, n, discretization, points)
    tr = fixed_step_integrate(vector_field, x0.as_array(), t0, t_end, dt, method,
                              record_every, None, blowup_limit)
    return _as_field_trace(tr)


def integrate_field(x0, w: GraphonFn, c: CoefficientField, n, t0=0.0, t_end=100.0, dt=0.01,
                    method=IntegrationMethod.EULER, record_every=1, discretization=Discretization.MIDPOINT,
                    subquadrature=SUBQUADRATURE, projection_points=PROJECTION_POINTS, blowup_limit=BLOWUP_LIMIT):
    """グラフォン上の半離散 G-SEIR を n 点の中点格子で積分する"""
    field_x0 = _initial_field(x0, n, subquadrature)
    _warn_step_size(c, t0, t_end, dt)
    coupling = discrete_kernel(w, n, discretization, projection_points) / n
    logger.info("半離散 G-SEIR を積分します: n=%d, method=%s, dt=%g, T=%g",
                n, IntegrationMethod(method).value, dt, t_end)
    logger.info("係数: %s", c.describe())
    return integrate_coupled(field_x0, coupling, c, t0, t_end, dt, method, record_every,
                             discretization, subquadrature, blowup_limit)


@dataclass(frozen=True, eq=False)
class PiecewiseField:
    """区間 I_j^n 上で一定値をとる [0,1] 上の関数"""
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim == 1:
            values = values[None, :]
        if values.ndim != 2 or values.shape[1] < 1:
            raise DimensionMismatchError(f"区分定数関数の値の形が正しくありません: {values.shape}")
        values.flags.writeable = False
        object.__setattr__(self, 'values', values)

    @property
    def n(self):
        return self.values.shape[1]

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if np.any((x < 0) | (x > 1)):
            raise InvalidStateError("x は [0,1] の範囲である必要があります")
        result = self.values[:, cell_index(x, self.n)]
        return result[0] if self.values.shape[0] == 1 else result


def embed_piecewise(v):
    return PiecewiseField(v)


def _cell_values(a):
    if isinstance(a, PiecewiseField):
        return a.values
    if isinstance(a, SeirState):
        return a.as_array()
    return PiecewiseField(a).values


def field_distance(a, b, norm=DistanceNorm.SUP_POINTWISE, refinement_cap=REFINEMENT_CAP):
    va = _cell_values(a)
    vb = _cell_values(b)
    if va.shape[0] != vb.shape[0]:
        raise DimensionMismatchError(f"成分数が一致しません: {va.shape[0]} と {vb.shape[0]}")
    na, nb = va.shape[1], vb.shape[1]
    size = math.lcm(na, nb)
    if size > refinement_cap:
        raise IncompatiblePartitionsError(f"共通細分のセル数 {size} が上限 {refinement_cap} を超えます")

    diff = np.repeat(va, size // na, axis=1) - np.repeat(vb, size // nb, axis=1)
    if DistanceNorm(norm) == DistanceNorm.SUP_POINTWISE:
        return float(np.max(np.abs(diff)))
    # 成分ごとの L2 ノルムの最大値
    return float(np.max(np.sqrt(np.mean(diff ** 2, axis=1))))


def trace_distance(a: Trace, b: Trace, norm=DistanceNorm.SUP_POINTWISE, refinement_cap=REFINEMENT_CAP):
    if len(a) != len(b) or np.max(np.abs(a.times - b.times)) > 1e-9:
        raise DimensionMismatchError("記録時刻が一致しないため距離を比較できません")
    return max(field_distance(sa, sb, norm, refinement_cap) for sa, sb in zip(a.states, b.states))


@dataclass(frozen=True)
class ConvergenceRow:
    n: int
    D_n: float
    gronwall_bound: float
    initial_error: float
    kernel_error: float
    runtime_seconds: Optional[float] = None
    seed: Optional[int] = None


@dataclass(frozen=True, eq=False)
class ConvergenceReport:
    rows: List[ConvergenceRow]
    reference_n: int
    mode: ConvergenceMode
    norm: DistanceNorm
    c_hat: float
    T: float
    metadata: dict = field(default_factory=dict)

    @property
    def n_list(self):
        return [row.n for row in self.rows]

    @property
    def D_n(self):
        return np.array([row.D_n for row in self.rows])

    @property
    def gronwall_bounds(self):
        return np.array([row.gronwall_bound for row in self.rows])

    def rows_for_seed(self, seed):
        return [row for row in self.rows if row.seed == seed]

    def within_envelope(self, slack=1e-12):
        return bool(np.all(self.D_n <= self.gronwall_bounds + slack))

    def is_decreasing(self, strict=True, slack=1e-12, seed=None):
        rows = self.rows if seed is None else self.rows_for_seed(seed)
        values = np.array([row.D_n for row in rows])
        steps = np.diff(values)
        return bool(np.all(steps < 0)) if strict else bool(np.all(steps <= slack))

    def to_frame(self):
        return pl.DataFrame({
            'n': [row.n for row in self.rows],
            'D_n': [row.D_n for row in self.rows],
            'gronwall_bound': [row.gronwall_bound for row in self.rows],
            'runtime_seconds': [row.runtime_seconds for row in self.rows],
            'mode': [self.mode.value] * len(self.rows),
            'seed': [row.seed for row in self.rows],
        }, schema={
            'n': pl.Int64,
            'D_n': pl.Float64,
            'gronwall_bound': pl.Float64,
            'runtime_seconds': pl.Float64,
            'mode': pl.Utf8,
            'seed': pl.Int64,
        })


def graphon_bound(w: GraphonFn):
    if isinstance(w, StepGraphon):
        return float(np.max(np.abs(w.values)))
    return float(w.bound)


def envelope_constant(w: GraphonFn, c: CoefficientField, t0, t_end):
    times = np.linspace(t0, t_end, ENVELOPE_TIME_SAMPLES) if c.is_time_dependent else [t0]
    _, k0 = c.bounds(times)
    # 状態の上界 C̄ は1 (各成分は[0,1])
    return max(k0 * graphon_bound(w) * 1.0, k0)


def _fine_size(n, minimum=ENVELOPE_GRID):
    return n * max(1, math.ceil(minimum / n))


def initial_data_error(x0: InitialProfile, n, points=SUBQUADRATURE):
    """sup_x |u(0,x) - u_n(0,x)| (4成分の最大)"""
    size = _fine_size(n)
    exact = x0.point_values(midpoints(size))
    lifted = np.repeat(x0.cell_average(n, points).as_array(), size // n, axis=1)
    return float(np.max(np.abs(exact - lifted)))


def kernel_error(w: GraphonFn, c: CoefficientField, coupling_values, n, t0, t_end, points=SUBQUADRATURE):
    """||βW - β_n W_n||_{L1} を細かい格子で評価する"""
    size = _fine_size(n)
    fine_w = kernel_matrix(w, size)
    x = midpoints(size)
    times = np.linspace(t0, t_end, ENVELOPE_TIME_SAMPLES) if c.is_time_dependent else [t0]
    error = 0.0
    for t in times:
        beta_fine, _, _ = c.point_values(t, x)
        beta_n, _, _ = average_coefficients(c, n, t, points)
        discrete = np.repeat(np.repeat(coupling_values * beta_n[None, :], size // n, axis=0), size // n, axis=1)
        error = max(error, float(np.mean(np.abs(fine_w * beta_fine[None, :] - discrete))))
    return error


def gronwall_envelope(initial_error, kernel_err, c_hat, T):
    exponent = c_hat * T
    growth = math.expm1(exponent) if exponent < 700 else math.inf
    return (initial_error + T * kernel_err) * growth


def _discrete_coupling(w, n, mode, seed, projection_points):
    if mode == ConvergenceMode.PROJECT_CONTINUUM:
        return project_graphon(w, n, projection_points)
    if mode == ConvergenceMode.SAMPLE_DETERMINISTIC:
        return np.asarray(sample_graph_deterministic(w, n).weights)
    weights = np.array(sample_graph_random(w, n, seed).weights)
    # 対角 a_jj は I_j × I_j 上の W の平均とする
    np.fill_diagonal(weights, np.diag(project_graphon(w, n, projection_points)))
    return weights


def convergence_study(w: GraphonFn, c: CoefficientField, x0: InitialProfile, n_list, T, dt,
                      mode=ConvergenceMode.PROJECT_CONTINUUM, seed=0, reference_n=None,
                      method=IntegrationMethod.EULER, record_every=10, norm=None, workers=1,
                      random_seeds=None, t0=0.0, record_runtime=False, subquadrature=SUBQUADRATURE,
                      projection_points=PROJECTION_POINTS, refinement_cap=REFINEMENT_CAP):
    mode = ConvergenceMode(mode)
    n_list = [int(n) for n in n_list]
    if not n_list or any(n < 1 for n in n_list):
        raise DimensionMismatchError("n_list には1以上の整数が必要です")
    if any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise DimensionMismatchError("n_list は狭義単調増加である必要があります")

    if reference_n is None:
        if len(n_list) < 2:
            raise ReferenceTooCoarseError("参照解を決めるには n_list に2つ以上の値が必要です")
        swept, reference_n = n_list[:-1], n_list[-1]
    else:
        swept, reference_n = n_list, int(reference_n)
    if reference_n < 2 * swept[-1]:
        raise ReferenceTooCoarseError(
            f"参照解 n={reference_n} は最大の n={swept[-1]} の2倍以上である必要があります"
        )

    if norm is None:
        norm = DistanceNorm.L2 if mode == ConvergenceMode.SAMPLE_RANDOM else DistanceNorm.SUP_POINTWISE
    norm = DistanceNorm(norm)
    seeds = list(random_seeds) if random_seeds else [seed]
    if mode != ConvergenceMode.SAMPLE_RANDOM:
        seeds = [None]

    c_hat = envelope_constant(w, c, t0, T)

    def run(n, run_seed):
        started = time.perf_counter()
        weights = _discrete_coupling(w, n, mode, run_seed, projection_points)
        tr = integrate_coupled(x0.cell_average(n, subquadrature), weights / n, c, t0, T, dt, method,
                               record_every, Discretization.CELL_AVERAGE, subquadrature)
        return tr, weights, time.perf_counter() - started

    def run_reference():
        weights = project_graphon(w, reference_n, projection_points)
        tr = integrate_coupled(x0.cell_average(reference_n, subquadrature), weights / reference_n, c, t0, T, dt,
                               method, record_every, Discretization.CELL_AVERAGE, subquadrature)
        return tr, weights

    jobs = [(n, run_seed) for run_seed in seeds for n in swept]
    logger.info("収束検証を開始します: mode=%s, n_list=%s, 参照 n=%d, workers=%d",
                mode.value, swept, reference_n, workers)
    # 各 n の計算は独立なのでスレッドに分配し、すべて終わってから集計する
    with ThreadPoolExecutor(max_workers=max(1, int(workers))) as executor:
        reference_future = executor.submit(run_reference)
        futures = [executor.submit(run, n, run_seed) for n, run_seed in jobs]
        reference_trace, reference_weights = reference_future.result()
        results = [future.result() for future in futures]

    reference_initial = initial_data_error(x0, reference_n, subquadrature)
    reference_kernel = kernel_error(w, c, reference_weights, reference_n, t0, T, subquadrature)

    rows = []
    for (n, run_seed), (tr, weights, runtime) in zip(jobs, results):
        d_n = trace_distance(tr, reference_trace, norm, refinement_cap)
        init_err = initial_data_error(x0, n, subquadrature)
        kern_err = kernel_error(w, c, weights, n, t0, T, subquadrature)
        # 参照解との距離なので両者の誤差評価を足し合わせる
        bound = gronwall_envelope(init_err + reference_initial, kern_err + reference_kernel, c_hat, T)
        rows.append(ConvergenceRow(n, d_n, bound, init_err, kern_err,
                                   runtime if record_runtime else None, run_seed))
        logger.info("n=%d seed=%s: D_n=%.3e, 誤差評価=%.3e", n, run_seed, d_n, bound)

    return ConvergenceReport(rows, reference_n, mode, norm, c_hat, T, {
        'method': IntegrationMethod(method).value,
        'dt': dt,
        'record_every': record_every,
    })


def threshold_regime(w: GraphonFn, c: CoefficientField, n=400, t=0.0):
    """β·λ1(T_W) - γ (係数が一様でなければ max β, min γ で評価)"""
    lambda_w = operator_top_eigenvalue(w, n)
    beta, _, gamma = midpoint_coefficients(c, n, t)
    if not c.is_constant:
        logger.debug("係数が一様でないため max β, min γ で閾値を評価します")
    return float(beta.max()) * lambda_w - float(gamma.min())

