import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence, Union

import networkx as nx
import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import breadth_first_order

from exceptions import (
    BadPartitionError, DimensionMismatchError, WeightOutOfRangeError, ZeroArrivalsError
)

logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-12


class GraphKind(Enum):
    SIMPLE01 = "simple01"
    WEIGHTED = "weighted"
    MOBILITY = "mobility"


@dataclass(frozen=True, eq=False)
class MobilityData:
    populations: np.ndarray
    flows: np.ndarray

    def __post_init__(self):
        populations = np.asarray(self.populations, dtype=float)
        flows = np.asarray(self.flows, dtype=float)
        if flows.ndim != 2 or flows.shape[0] != flows.shape[1]:
            raise DimensionMismatchError(f"移動行列が正方行列ではありません: {flows.shape}")
        if populations.shape != (flows.shape[0],):
            raise DimensionMismatchError(
                f"人口ベクトルの長さ {populations.shape} が移動行列の次元 {flows.shape[0]} と一致しません"
            )
        if np.any(populations <= 0):
            raise WeightOutOfRangeError("人口は正の値である必要があります")
        if np.any(flows < 0):
            raise WeightOutOfRangeError("移動量は非負である必要があります")
        if not np.allclose(flows.sum(axis=1), populations, rtol=1e-9, atol=1e-12):
            raise WeightOutOfRangeError("移動行列の行和が人口と一致しません")
        populations.flags.writeable = False
        flows.flags.writeable = False
        object.__setattr__(self, 'populations', populations)
        object.__setattr__(self, 'flows', flows)

    @property
    def n(self):
        return self.flows.shape[0]

    @property
    def arrivals(self):
        return self.flows.sum(axis=0)


@dataclass(frozen=True, eq=False)
class Graph:
    weights: np.ndarray
    kind: GraphKind = GraphKind.WEIGHTED
    provenance: Optional[str] = field(default=None, compare=False)

    def __post_init__(self):
        weights = np.array(self.weights, dtype=float)
        if weights.ndim != 2 or weights.shape[0] != weights.shape[1] or weights.shape[0] < 1:
            raise DimensionMismatchError(f"隣接行列が正方行列ではありません: {weights.shape}")
        if not np.all(np.isfinite(weights)):
            raise WeightOutOfRangeError("隣接行列に有限でない値が含まれています")
        if np.any(weights < 0):
            raise WeightOutOfRangeError("隣接行列の要素は非負である必要があります")
        if self.kind != GraphKind.MOBILITY:
            if np.max(np.abs(weights - weights.T)) > SYMMETRY_TOL:
                raise WeightOutOfRangeError("隣接行列が対称ではありません")
        if self.kind == GraphKind.SIMPLE01:
            if not np.all((weights == 0.0) | (weights == 1.0)):
                raise WeightOutOfRangeError("単純グラフの要素は0または1である必要があります")
            if np.any(np.diag(weights) != 0.0):
                raise WeightOutOfRangeError("単純グラフの対角成分は0である必要があります")
        weights.flags.writeable = False
        object.__setattr__(self, 'weights', weights)

    @property
    def n(self):
        return self.weights.shape[0]


# グラフの族
@dataclass(frozen=True)
class Complete:
    pass


@dataclass(frozen=True)
class Path:
    pass


@dataclass(frozen=True)
class Star:
    pass


@dataclass(frozen=True)
class Block:
    block_sizes: Sequence[int]
    block_weights: Sequence[Sequence[float]]


@dataclass(frozen=True)
class ErdosRenyi:
    p: float
    seed: int = 0


GraphFamily = Union[Complete, Path, Star, Block, ErdosRenyi]


def build_coupling(mob: MobilityData):
    n = mob.n
    arrivals = mob.arrivals
    if np.any(arrivals <= 0):
        empty = [int(j) + 1 for j in np.flatnonzero(arrivals <= 0)]
        raise ZeroArrivalsError(f"到着人口が0のノードがあります: {empty}")

    # P_out = Diag(N)^-1 Â, P_in = Â Diag(M)^-1
    p_out = mob.flows / mob.populations[:, None]
    p_in = mob.flows / arrivals[None, :]
    coupling = p_out @ p_in.T
    logger.debug("結合行列を作成しました: n=%d", n)
    return p_out, p_in, coupling


def graph_from_mobility(mob: MobilityData):
    _, _, coupling = build_coupling(mob)
    return Graph(coupling, GraphKind.MOBILITY, provenance="mobility")


def degree_stats(g: Graph):
    degrees = g.weights.sum(axis=1)
    return degrees, float(degrees.max()), float(degrees.mean())


def is_irreducible(g: Graph):
    if g.n == 1:
        return True
    adjacency = csr_matrix((g.weights > 0).astype(np.int8))
    reached = breadth_first_order(adjacency, 0, directed=True, return_predecessors=False)
    if len(reached) != g.n:
        return False
    if g.kind == GraphKind.MOBILITY:
        # 有向の場合は逆向きにも到達できること（強連結）
        reached_back = breadth_first_order(adjacency.T.tocsr(), 0, directed=True,
                                           return_predecessors=False)
        return len(reached_back) == g.n
    return True


def unit_diagonal(g: Graph):
    weights = np.array(g.weights)
    np.fill_diagonal(weights, 1.0)
    return weights


def make_graph(family: GraphFamily, n: int):
    if n < 1:
        raise BadPartitionError(f"ノード数は1以上である必要があります: {n}")

    if isinstance(family, Complete):
        weights = nx.to_numpy_array(nx.complete_graph(n), nodelist=range(n))
        return Graph(weights, GraphKind.SIMPLE01, provenance="complete")

    if isinstance(family, Path):
        weights = nx.to_numpy_array(nx.path_graph(n), nodelist=range(n))
        return Graph(weights, GraphKind.SIMPLE01, provenance="path")

    if isinstance(family, Star):
        # star_graph(k) は中心ノード0と葉k個
        weights = nx.to_numpy_array(nx.star_graph(n - 1), nodelist=range(n))
        return Graph(weights, GraphKind.SIMPLE01, provenance="star")

    if isinstance(family, ErdosRenyi):
        if not 0.0 <= family.p <= 1.0:
            raise BadPartitionError(f"辺の確率は[0,1]の範囲である必要があります: {family.p}")
        graph = nx.gnp_random_graph(n, family.p, seed=family.seed)
        weights = nx.to_numpy_array(graph, nodelist=range(n))
        return Graph(weights, GraphKind.SIMPLE01, provenance=f"erdos_renyi(p={family.p}, seed={family.seed})")

    if isinstance(family, Block):
        return _make_block_graph(family, n)

    raise BadPartitionError(f"未対応のグラフ族です: {family!r}")


def _make_block_graph(family: Block, n: int):
    sizes = [int(size) for size in family.block_sizes]
    block_weights = np.asarray(family.block_weights, dtype=float)
    if any(size < 1 for size in sizes) or sum(sizes) != n:
        raise BadPartitionError(f"ブロックサイズの合計 {sum(sizes)} がノード数 {n} と一致しません")
    if block_weights.shape != (len(sizes), len(sizes)):
        raise BadPartitionError(
            f"ブロック重み行列の形 {block_weights.shape} がブロック数 {len(sizes)} と一致しません"
        )
    if np.any(block_weights < 0) or np.max(np.abs(block_weights - block_weights.T)) > SYMMETRY_TOL:
        raise BadPartitionError("ブロック重み行列は非負かつ対称である必要があります")

    labels = np.repeat(np.arange(len(sizes)), sizes)
    weights = block_weights[np.ix_(labels, labels)]
    np.fill_diagonal(weights, 0.0)

    is_simple = np.all((block_weights == 0.0) | (block_weights == 1.0))
    kind = GraphKind.SIMPLE01 if is_simple else GraphKind.WEIGHTED
    return Graph(weights, kind, provenance=f"block({sizes})")
