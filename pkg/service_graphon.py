import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np
import polars as pl
from scipy import stats

from exceptions import (
    AsymmetricRequestError, DimensionMismatchError, IncompatiblePartitionsError, OutOfDomainError,
    TooManyBlocksError, WeightOutOfRangeError
)
from service_graph import Graph, GraphKind
from service_spectral import top_eigenvalue

logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-12
VALIDATION_GRID = 33
CUT_NORM_MAX_BLOCKS = 16
REFINEMENT_CAP = 4096
# ガンマ分位関数は x=1 で発散するため 1 の手前で打ち切る
GAMMA_QUANTILE_CLAMP = 1.0 - 1e-6
RANDOM_ALGORITHM = "Philox4x64-10"


@dataclass(frozen=True, eq=False)
class StepGraphon:
    values: np.ndarray
    signed: bool = False

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 2 or values.shape[0] != values.shape[1] or values.shape[0] < 1:
            raise DimensionMismatchError(f"ステップグラフォンの値は正方行列である必要があります: {values.shape}")
        if not np.all(np.isfinite(values)):
            raise WeightOutOfRangeError("ステップグラフォンに有限でない値が含まれています")
        if np.max(np.abs(values - values.T)) > SYMMETRY_TOL:
            raise WeightOutOfRangeError("ステップグラフォンの値が対称ではありません")
        low = -1.0 if self.signed else 0.0
        if values.min() < low or values.max() > 1.0:
            raise WeightOutOfRangeError(f"ステップグラフォンの値は[{low:g},1]の範囲である必要があります")
        values.flags.writeable = False
        object.__setattr__(self, 'values', values)

    @property
    def n_blocks(self):
        return self.values.shape[0]


@dataclass(frozen=True, eq=False)
class KernelGraphon:
    func: Callable
    bound: float = 1.0
    name: str = "kernel"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 < self.bound <= 1.0:
            raise WeightOutOfRangeError(f"上界 K_w は (0,1] の範囲である必要があります: {self.bound}")
        grid = np.linspace(0.0, 1.0, VALIDATION_GRID)
        x, y = np.meshgrid(grid, grid, indexing='ij')
        values = np.asarray(self.func(x, y), dtype=float)
        if not np.all(np.isfinite(values)):
            raise WeightOutOfRangeError(f"{self.name}: 有限でない値が含まれています")
        if np.max(np.abs(values - values.T)) > SYMMETRY_TOL:
            raise WeightOutOfRangeError(f"{self.name}: W(x,y) = W(y,x) を満たしていません")
        if values.min() < 0.0 or values.max() > self.bound + SYMMETRY_TOL:
            raise WeightOutOfRangeError(f"{self.name}: 値が [0, K_w] の範囲外です")


GraphonFn = Union[StepGraphon, KernelGraphon]


def midpoints(n):
    # x_k = (2k-1)/(2n), k = 1..n
    return (np.arange(n) + 0.5) / n


def cell_index(x, n):
    return np.minimum(np.floor(np.asarray(x) * n).astype(int), n - 1)


def overlap_matrix(n, m):
    """P[j, k] = I^n_j のうち I^m_k に含まれる割合 (行和は1)"""
    j = np.arange(n)[:, None]
    k = np.arange(m)[None, :]
    # 1/(n*m) 単位の整数で重なりを数える
    counts = np.minimum((j + 1) * m, (k + 1) * n) - np.maximum(j * m, k * n)
    return np.maximum(counts, 0) / m


def eval_graphon(w: GraphonFn, x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any((x < 0) | (x > 1)) or np.any((y < 0) | (y > 1)):
        raise OutOfDomainError("x, y は [0,1] の範囲である必要があります")
    if isinstance(w, StepGraphon):
        n = w.n_blocks
        return w.values[cell_index(x, n), cell_index(y, n)]
    return np.asarray(w.func(x, y), dtype=float)


def graphon_from_graph(g: Graph):
    weights = np.asarray(g.weights)
    if weights.min() < 0.0 or weights.max() > 1.0:
        raise WeightOutOfRangeError("グラフォンに変換するには重みが [0,1] の範囲である必要があります")
    return StepGraphon(weights)


def constant_graphon(c):
    return StepGraphon([[c]])


def block_graphon(values, block_sizes=None):
    values = np.asarray(values, dtype=float)
    if block_sizes is None:
        return StepGraphon(values)
    sizes = [int(size) for size in block_sizes]
    if len(sizes) != values.shape[0] or any(size < 1 for size in sizes):
        raise DimensionMismatchError("ブロックサイズの数がブロック値行列と一致しません")
    # 一様分割上に展開する
    labels = np.repeat(np.arange(len(sizes)), sizes)
    return StepGraphon(values[np.ix_(labels, labels)])


def gaussian_graphon(c_w=1.0, x0=0.5, sigma=0.5, y0=None, sigma_y=None):
    if y0 is not None and y0 != x0:
        raise AsymmetricRequestError("ピークは対角線上 (y0 = x0) にある必要があります")
    if sigma_y is not None and sigma_y != sigma:
        raise AsymmetricRequestError("σx = σy である必要があります")
    if not 0.0 < c_w <= 1.0:
        raise WeightOutOfRangeError(f"C_W は (0,1] の範囲である必要があります: {c_w}")
    if not 0.0 <= x0 <= 1.0:
        raise OutOfDomainError(f"x0 は [0,1] の範囲である必要があります: {x0}")
    if sigma <= 0:
        raise WeightOutOfRangeError(f"sigma は正である必要があります: {sigma}")

    def func(x, y):
        return c_w * np.exp(-((x - x0) ** 2 + (y - x0) ** 2) / (2.0 * sigma ** 2))

    return KernelGraphon(func, c_w, "gaussian", {'c_w': c_w, 'x0': x0, 'sigma': sigma})


def gamma_contact_graphon(shape, rate, cap=1.0):
    if shape <= 0 or rate <= 0:
        raise WeightOutOfRangeError("shape と rate は正である必要があります")
    if not 0.0 < cap <= 1.0:
        raise WeightOutOfRangeError(f"cap は (0,1] の範囲である必要があります: {cap}")

    profile, g_max = gamma_quantile_profile(shape, rate)

    def func(x, y):
        return cap * profile(x) * profile(y) / g_max ** 2

    return KernelGraphon(func, cap, "gamma", {'shape': shape, 'rate': rate, 'cap': cap})


def gamma_quantile_profile(shape, rate):
    distribution = stats.gamma(a=shape, scale=1.0 / rate)
    g_max = float(distribution.ppf(GAMMA_QUANTILE_CLAMP))

    def profile(x):
        return distribution.ppf(np.minimum(x, GAMMA_QUANTILE_CLAMP))
    return profile, g_max


def kernel_matrix(w: GraphonFn, n):
    x = midpoints(n)
    if isinstance(w, StepGraphon):
        cells = cell_index(x, w.n_blocks)
        return w.values[np.ix_(cells, cells)]
    xx, yy = np.meshgrid(x, x, indexing='ij')
    return np.asarray(w.func(xx, yy), dtype=float)


def project_graphon(w: GraphonFn, n, points=4):
    """各セル I_j × I_k 上の平均値 (ステップは厳密、カーネルは points^2 点の中点則)"""
    if isinstance(w, StepGraphon):
        if n == w.n_blocks:
            return np.array(w.values)
        overlap = overlap_matrix(n, w.n_blocks)
        return overlap @ w.values @ overlap.T
    fine = kernel_matrix(w, n * points)
    return fine.reshape(n, points, n, points).mean(axis=(1, 3))


def apply_operator(w: GraphonFn, f, n):
    f = np.asarray(f, dtype=float)
    if f.shape != (n,):
        raise DimensionMismatchError(f"f の長さ {f.shape} が求積点数 {n} と一致しません")
    return kernel_matrix(w, n) @ f / n


def operator_spectrum_step(w: StepGraphon, tol=1e-12):
    eigenvalues = np.linalg.eigvalsh(w.values / w.n_blocks)[::-1]
    scale = max(1.0, float(np.max(np.abs(eigenvalues))))
    return [float(value) for value in eigenvalues if abs(value) > tol * scale]


def operator_top_eigenvalue(w: GraphonFn, n=400):
    if isinstance(w, StepGraphon):
        return top_eigenvalue(w.values / w.n_blocks)
    return top_eigenvalue(kernel_matrix(w, n) / n)


def _refined_pair(w1: StepGraphon, w2: StepGraphon):
    size = math.lcm(w1.n_blocks, w2.n_blocks)
    if size > REFINEMENT_CAP:
        return None
    cells1 = cell_index(midpoints(size), w1.n_blocks)
    cells2 = cell_index(midpoints(size), w2.n_blocks)
    return w1.values[np.ix_(cells1, cells1)], w2.values[np.ix_(cells2, cells2)]


def l1_distance(w1: GraphonFn, w2: GraphonFn, grid=256):
    if isinstance(w1, StepGraphon) and isinstance(w2, StepGraphon):
        pair = _refined_pair(w1, w2)
        if pair is not None:
            return float(np.mean(np.abs(pair[0] - pair[1])))
        logger.debug("共通細分が大きすぎるため格子近似で L1 距離を計算します")
    return float(np.mean(np.abs(kernel_matrix(w1, grid) - kernel_matrix(w2, grid))))


def l2_norm(w: GraphonFn, grid=256):
    if isinstance(w, StepGraphon):
        return float(np.sqrt(np.mean(w.values ** 2)))
    return float(np.sqrt(np.mean(kernel_matrix(w, grid) ** 2)))


def difference(w1: StepGraphon, w2: StepGraphon):
    pair = _refined_pair(w1, w2)
    if pair is None:
        raise IncompatiblePartitionsError("共通細分が大きすぎます")
    return StepGraphon(pair[0] - pair[1], signed=True)


def cut_norm_exact(w: StepGraphon):
    n = w.n_blocks
    if n > CUT_NORM_MAX_BLOCKS:
        raise TooManyBlocksError(f"厳密なカットノルムは {CUT_NORM_MAX_BLOCKS} ブロックまでです: {n}")
    # S を全列挙し、T については正の列和と負の列和のどちらかを取るのが最適
    subsets = np.array(list(itertools.product((0.0, 1.0), repeat=n)))
    column_sums = subsets @ w.values
    positive = np.clip(column_sums, 0.0, None).sum(axis=1)
    negative = np.clip(-column_sums, 0.0, None).sum(axis=1)
    return float(max(positive.max(), negative.max()) / n ** 2)


def cut_norm_bounds(w: GraphonFn, grid=64):
    values = w.values if isinstance(w, StepGraphon) else project_graphon(w, grid)
    n = values.shape[0]
    lower = max(float(np.max(np.abs(values))), abs(float(values.sum()))) / n ** 2
    upper = float(np.mean(np.abs(values)))
    return lower, upper


def _row_generator(seed, row):
    return np.random.Generator(np.random.Philox(key=seed).jumped(row))


def sample_graph_random(w: GraphonFn, N, seed=0):
    if N < 1:
        raise DimensionMismatchError(f"N は1以上である必要があります: {N}")
    # 潜在変数 u_i = i/N は決定的に固定する
    latent = np.arange(1, N + 1) / N
    weights = np.zeros((N, N))
    for row in range(1, N):
        probabilities = eval_graphon(w, np.full(row, latent[row]), latent[:row])
        draws = _row_generator(seed, row).random(row)
        weights[row, :row] = (draws < probabilities).astype(float)
    weights = weights + weights.T
    return Graph(weights, GraphKind.SIMPLE01,
                 provenance=f"random sampling N={N} seed={seed} rng={RANDOM_ALGORITHM}")


def sample_graph_deterministic(w: GraphonFn, N):
    if N < 1:
        raise DimensionMismatchError(f"N は1以上である必要があります: {N}")
    if isinstance(w, StepGraphon):
        weights = project_graphon(w, N)
    else:
        weights = kernel_matrix(w, N)
    return Graph(np.clip(weights, 0.0, 1.0), GraphKind.WEIGHTED, provenance=f"deterministic sampling N={N}")


def operator_norm_gap(w: GraphonFn, N_list, seed=0, sampling='random', quadrature_n=400):
    N_list = [int(N) for N in N_list]
    if any(b <= a for a, b in zip(N_list, N_list[1:])):
        raise DimensionMismatchError("N_list は狭義単調増加である必要があります")

    lambda_w = operator_top_eigenvalue(w, quadrature_n)
    rows = []
    for N in N_list:
        if sampling == 'random':
            graph = sample_graph_random(w, N, seed)
        else:
            graph = sample_graph_deterministic(w, N)
        lambda_g = operator_top_eigenvalue(graphon_from_graph(graph))
        gap = abs(lambda_w - lambda_g)
        rate = math.sqrt(math.log(N) / N) if N > 1 else None
        rows.append({
            'N': N,
            'lambda_W': lambda_w,
            'lambda_G': lambda_g,
            'gap': gap,
            'ratio': gap / rate if rate else None,
            'seed': seed,
        })
        logger.info("N=%d: |λ1(T_W) - λ1(T_WG)| = %.3e", N, gap)

    return pl.DataFrame(rows, schema={
        'N': pl.Int64, 'lambda_W': pl.Float64, 'lambda_G': pl.Float64,
        'gap': pl.Float64, 'ratio': pl.Float64, 'seed': pl.Int64,
    })


def heatmap_grid(w: GraphonFn, grid=200):
    return kernel_matrix(w, grid)
