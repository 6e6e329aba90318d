import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, List, Optional, Union

import numpy as np
import polars as pl

from exceptions import (
    BlowUpError, DimensionMismatchError, InvalidStateError, NegativeSusceptibleError,
    NonFiniteInputError, NonFiniteStateError, WeightOutOfRangeError
)
from service_graph import Graph, GraphKind, degree_stats, unit_diagonal

logger = logging.getLogger(__name__)

COMPARTMENTS = ('s', 'e', 'i', 'r')
STATE_TOL = 1e-10
BLOWUP_LIMIT = 10.0
DEFAULT_EQUILIBRIUM_TOL = 1e-4
# 正値性を保つための時間刻みの目安 dt <= 0.1/K0
STABILITY_FACTOR = 0.1

ParamValue = Union[float, np.ndarray, Callable]


class CouplingMode(Enum):
    MOBILITY = "mobility"
    MEAN_FIELD = "mean_field"
    MEAN_FIELD_RAW = "mean_field_raw"


class IntegrationMethod(Enum):
    EULER = "euler"
    RK4 = "rk4"


@dataclass(frozen=True, eq=False)
class SeirState:
    s: np.ndarray
    e: np.ndarray
    i: np.ndarray
    r: np.ndarray

    def __post_init__(self):
        arrays = [np.array(getattr(self, name), dtype=float).reshape(-1) for name in COMPARTMENTS]
        if len({a.shape for a in arrays}) != 1:
            raise DimensionMismatchError(f"s, e, i, r の長さが一致しません: {[a.shape for a in arrays]}")
        for name, array in zip(COMPARTMENTS, arrays):
            array.flags.writeable = False
            object.__setattr__(self, name, array)

    @classmethod
    def from_array(cls, y):
        return cls(y[0], y[1], y[2], y[3])

    @classmethod
    def uniform(cls, n, s=1.0, e=0.0, i=0.0):
        r = 1.0 - s - e - i
        return cls(np.full(n, s), np.full(n, e), np.full(n, i), np.full(n, r))

    @classmethod
    def seed_node(cls, n, j, i0):
        s = np.ones(n)
        i = np.zeros(n)
        s[j] = 1.0 - i0
        i[j] = i0
        return cls(s, np.zeros(n), i, np.zeros(n))

    @property
    def n(self):
        return self.s.shape[0]

    def as_array(self):
        return np.vstack([self.s, self.e, self.i, self.r])

    def totals(self):
        return self.s + self.e + self.i + self.r

    def conservation_residual(self):
        return float(np.max(np.abs(self.totals() - 1.0)))

    def min_component(self):
        return float(self.as_array().min())

    def validate(self, tol=STATE_TOL):
        y = self.as_array()
        if not np.all(np.isfinite(y)):
            raise NonFiniteInputError("状態に有限でない値が含まれています")
        if y.min() < -tol or y.max() > 1.0 + tol:
            raise InvalidStateError("状態の各成分は[0,1]の範囲である必要があります")
        if self.conservation_residual() > tol:
            raise InvalidStateError(
                f"各ノードで s+e+i+r=1 である必要があります (残差 {self.conservation_residual():.3e})"
            )
        return self


def switch_profile(before, after, t_switch):
    # 介入: t_switch 以降に値を切り替える
    def profile(t, nodes):
        return np.full(len(nodes), before if t < t_switch else after)
    profile.description = f"switch({before}, {after}, {t_switch})"
    return profile


def seasonal_profile(base, amplitude, period):
    if amplitude < 0 or base - amplitude <= 0 or period <= 0:
        raise WeightOutOfRangeError("seasonal は base > amplitude >= 0, period > 0 である必要があります")

    def profile(t, nodes):
        return np.full(len(nodes), base + amplitude * math.sin(2.0 * math.pi * t / period))
    profile.description = f"seasonal({base}, {amplitude}, {period})"
    return profile


def describe_param(value):
    if callable(value):
        return getattr(value, 'description', getattr(value, '__name__', 'callable'))
    array = np.asarray(value, dtype=float)
    if array.ndim == 0:
        return f"{float(array):g}"
    return f"node({len(array)})"


@dataclass(frozen=True, eq=False)
class EpidemicParams:
    beta: ParamValue = 0.74
    mu: ParamValue = 0.5
    gamma: ParamValue = 0.14

    @property
    def is_time_dependent(self):
        return any(callable(value) for value in (self.beta, self.mu, self.gamma))

    def _resolve(self, name, value, t, n):
        if callable(value):
            resolved = np.asarray(value(t, np.arange(n)), dtype=float)
        else:
            resolved = np.asarray(value, dtype=float)
        if resolved.ndim == 0:
            return np.full(n, float(resolved))
        if resolved.shape != (n,):
            raise DimensionMismatchError(f"{name} の長さ {resolved.shape} がノード数 {n} と一致しません")
        return resolved

    def values(self, t, n):
        beta = self._resolve('beta', self.beta, t, n)
        mu = self._resolve('mu', self.mu, t, n)
        gamma = self._resolve('gamma', self.gamma, t, n)
        for name, array in (('beta', beta), ('mu', mu), ('gamma', gamma)):
            if not np.all(np.isfinite(array)):
                raise NonFiniteInputError(f"{name} に有限でない値が含まれています")
            if np.any(array < 0):
                raise WeightOutOfRangeError(f"{name} は非負である必要があります")
        return beta, mu, gamma

    def bounds(self, n, times):
        samples = [np.concatenate(self.values(t, n)) for t in times]
        stacked = np.concatenate(samples)
        return float(stacked.min()), float(stacked.max())

    def describe(self):
        named = (('beta', self.beta), ('mu', self.mu), ('gamma', self.gamma))
        return {name: describe_param(value) for name, value in named}


@dataclass(frozen=True)
class StepDiagnostics:
    conservation_residual: float
    min_component: float
    lambda_m: Optional[float] = None
    margin: Optional[float] = None


@dataclass(frozen=True, eq=False)
class Trace:
    times: np.ndarray
    states: List[SeirState]
    diagnostics: List[StepDiagnostics] = field(default_factory=list)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        if len(times) != len(self.states):
            raise DimensionMismatchError("時刻の数と状態の数が一致しません")
        if len(times) > 1 and np.any(np.diff(times) <= 0):
            raise DimensionMismatchError("時刻は狭義単調増加である必要があります")
        object.__setattr__(self, 'times', times)

    def __len__(self):
        return len(self.times)

    @property
    def final_state(self):
        return self.states[-1]

    def array(self, name):
        return np.vstack([getattr(state, name) for state in self.states])

    def to_frame(self, position_label='node', positions=None):
        n = self.states[0].n
        n_records = len(self.states)
        if positions is None:
            positions = np.arange(1, n + 1)
        columns = {
            't': np.repeat(self.times, n),
            position_label: np.tile(np.asarray(positions), n_records),
        }
        for name in COMPARTMENTS:
            columns[name] = self.array(name).ravel()
        totals = np.vstack([state.totals() for state in self.states])
        columns['conservation_residual'] = np.abs(totals - 1.0).ravel()

        frame = pl.DataFrame(columns)
        if self.diagnostics and self.diagnostics[0].lambda_m is not None:
            frame = frame.with_columns([
                pl.Series('lambda_M', np.repeat([d.lambda_m for d in self.diagnostics], n)),
                pl.Series('margin', np.repeat([d.margin for d in self.diagnostics], n)),
            ])
        return frame

    def diagnostics_frame(self):
        return pl.DataFrame({
            't': self.times,
            'conservation_residual': [d.conservation_residual for d in self.diagnostics],
            'min_component': [d.min_component for d in self.diagnostics],
            'lambda_M': [d.lambda_m for d in self.diagnostics],
            'margin': [d.margin for d in self.diagnostics],
        }, schema={
            't': pl.Float64,
            'conservation_residual': pl.Float64,
            'min_component': pl.Float64,
            'lambda_M': pl.Float64,
            'margin': pl.Float64,
        })


def coupling_matrix(g: Graph, mode: CouplingMode):
    if mode == CouplingMode.MOBILITY:
        return np.asarray(g.weights)
    if mode == CouplingMode.MEAN_FIELD:
        # a_jj = 1 としてから 1/n 倍する
        return unit_diagonal(g) / g.n
    if mode == CouplingMode.MEAN_FIELD_RAW:
        return np.asarray(g.weights) / g.n
    raise ValueError(f"未対応の結合モードです: {mode}")


def seir_vector_field(y, coupling, beta, mu, gamma):
    s, e, i = y[0], y[1], y[2]
    pressure = s * (coupling @ (beta * i))
    incubation = mu * e
    recovery = gamma * i
    return np.vstack([-pressure, pressure - incubation, incubation - recovery, recovery])


def scalar_seir_rhs(t, y, beta, mu, gamma):
    s, e, i, _ = y
    infection = beta * s * i
    return np.array([-infection, infection - mu * e, mu * e - gamma * i, gamma * i])


def _check_inputs(x: SeirState, g: Graph):
    if x.n != g.n:
        raise DimensionMismatchError(f"状態の長さ {x.n} がノード数 {g.n} と一致しません")
    if not np.all(np.isfinite(x.as_array())):
        raise NonFiniteInputError("状態に有限でない値が含まれています")


def rhs(t, x: SeirState, g: Graph, p: EpidemicParams, mode: CouplingMode = CouplingMode.MOBILITY):
    _check_inputs(x, g)
    beta, mu, gamma = p.values(t, g.n)
    return SeirState.from_array(seir_vector_field(x.as_array(), coupling_matrix(g, mode), beta, mu, gamma))


def rhs_symmetric(t, x: SeirState, g: Graph, p: EpidemicParams):
    _check_inputs(x, g)
    if np.any(x.s < 0):
        raise NegativeSusceptibleError("感受性人口が負のため平方根を計算できません")
    beta, mu, gamma = p.values(t, g.n)
    root = np.sqrt(x.s)
    b_sym = root[:, None] * np.asarray(g.weights) * root[None, :]

    pressure = b_sym @ (beta * x.i)
    ds = -pressure
    de = pressure - mu * x.e
    di = mu * x.e - gamma * x.i
    # r は 1-s-e-i から復元する縮約系
    dr = -(ds + de + di)
    return SeirState(ds, de, di, dr)


def rhs_laplacian(t, x: SeirState, g: Graph, p: EpidemicParams):
    if g.kind != GraphKind.SIMPLE01:
        raise WeightOutOfRangeError("ラプラシアン形式は単純グラフ (0/1, 対角0) のみ対応しています")
    _check_inputs(x, g)
    beta, mu, gamma = p.values(t, g.n)
    degrees, _, _ = degree_stats(g)
    laplacian = np.diag(degrees) - np.asarray(g.weights)

    weighted_i = beta * x.i
    # [Diag((d+1)s) - Diag(s)L] (beta i)
    pressure = (degrees + 1.0) * x.s * weighted_i - x.s * (laplacian @ weighted_i)
    incubation = mu * x.e
    recovery = gamma * x.i
    return SeirState(-pressure, pressure - incubation, incubation - recovery, recovery)


def _euler_step(vector_field, t, y, dt):
    return y + dt * vector_field(t, y)


def _rk4_step(vector_field, t, y, dt):
    k1 = vector_field(t, y)
    k2 = vector_field(t + 0.5 * dt, y + 0.5 * dt * k1)
    k3 = vector_field(t + 0.5 * dt, y + 0.5 * dt * k2)
    k4 = vector_field(t + dt, y + dt * k3)
    return y + dt * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0


STEPPERS = {
    IntegrationMethod.EULER: _euler_step,
    IntegrationMethod.RK4: _rk4_step,
}


def _diagnose(t, y, monitor):
    state = SeirState.from_array(y)
    lambda_m = margin = None
    if monitor is not None:
        lambda_m, margin = monitor(t, state)
    return state, StepDiagnostics(state.conservation_residual(), state.min_component(), lambda_m, margin)


def fixed_step_integrate(vector_field, y0, t0, t_end, dt, method=IntegrationMethod.EULER,
                         record_every=1, monitor=None, blowup_limit=BLOWUP_LIMIT):
    if dt <= 0:
        raise InvalidStateError(f"時間刻みは正である必要があります: dt={dt}")
    if t_end <= t0:
        raise InvalidStateError(f"終了時刻は開始時刻より後である必要があります: t0={t0}, T={t_end}")
    if record_every < 1:
        raise InvalidStateError(f"record_every は1以上である必要があります: {record_every}")

    step = STEPPERS[IntegrationMethod(method)]
    n_steps = max(1, int(math.ceil((t_end - t0) / dt - 1e-9)))

    y = np.array(y0, dtype=float)
    state, diag = _diagnose(t0, y, monitor)
    times, states, diagnostics = [t0], [state], [diag]

    for k in range(1, n_steps + 1):
        t_prev = t0 + (k - 1) * dt
        # 最後のステップは t_end にちょうど合わせる
        t_next = t_end if k == n_steps else t0 + k * dt
        y = step(vector_field, t_prev, y, t_next - t_prev)

        if not np.all(np.isfinite(y)):
            raise NonFiniteStateError(f"t={t_next:.6g} で有限でない値が発生しました")
        if np.max(np.abs(y)) > blowup_limit:
            raise BlowUpError(f"t={t_next:.6g} で値が {blowup_limit} を超えました (dt が大きすぎる可能性があります)")

        if k % record_every == 0 or k == n_steps:
            state, diag = _diagnose(t_next, y, monitor)
            times.append(t_next)
            states.append(state)
            diagnostics.append(diag)

    return Trace(np.array(times), states, diagnostics)


def make_vector_field(coupling, p: EpidemicParams, n):
    if p.is_time_dependent:
        def vector_field(t, y):
            return seir_vector_field(y, coupling, *p.values(t, n))
    else:
        beta, mu, gamma = p.values(0.0, n)

        def vector_field(t, y):
            return seir_vector_field(y, coupling, beta, mu, gamma)
    return vector_field


def check_step_size(p: EpidemicParams, n, t0, t_end, dt):
    times = np.linspace(t0, t_end, 65) if p.is_time_dependent else [t0]
    c0, k0 = p.bounds(n, times)
    if c0 <= 0:
        logger.warning("パラメータの下限 c0=%.3g が正ではありません", c0)
    if k0 > 0 and dt > STABILITY_FACTOR / k0:
        logger.warning("dt=%.3g が目安 0.1/K0=%.3g を超えています。正値性が保たれない可能性があります",
                       dt, STABILITY_FACTOR / k0)
    return c0, k0


def integrate(x0: SeirState, g: Graph, p: EpidemicParams, mode: CouplingMode = CouplingMode.MOBILITY,
              t0=0.0, t_end=100.0, dt=0.01, method=IntegrationMethod.EULER, record_every=1,
              monitor=None, blowup_limit=BLOWUP_LIMIT):
    _check_inputs(x0, g)
    x0.validate()
    check_step_size(p, g.n, t0, t_end, dt)

    vector_field = make_vector_field(coupling_matrix(g, mode), p, g.n)
    logger.info("積分を開始します: n=%d, method=%s, dt=%g, T=%g", g.n, IntegrationMethod(method).value, dt, t_end)
    logger.info("パラメータ: %s", p.describe())
    return fixed_step_integrate(vector_field, x0.as_array(), t0, t_end, dt, method,
                                record_every, monitor, blowup_limit)


def detect_equilibrium(tr: Trace, tol=DEFAULT_EQUILIBRIUM_TOL):
    active = np.array([np.max(state.e + state.i) for state in tr.states])
    above = np.flatnonzero(active > tol)
    if len(above) == 0:
        return float(tr.times[0])
    last_above = above[-1]
    if last_above == len(active) - 1:
        return None
    return float(tr.times[last_above + 1])
