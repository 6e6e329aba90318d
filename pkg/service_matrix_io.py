from pathlib import Path

import numpy as np
import polars as pl

from exceptions import ConfigParseError, DimensionMismatchError, OutputIoError
from service_graph import Graph, GraphKind, MobilityData
from utils import format_float

STEP_GRAPHON_HEADER = "stepgraphon"


def _read_lines(file_path):
    try:
        with open(file_path, 'r', encoding='utf-8') as f:
            lines = [line.strip() for line in f]
    except OSError as e:
        raise OutputIoError(f"ファイルを読み込めませんでした: {file_path} ({e})") from e
    # 空行とコメント行は無視する
    return [(lineno, line) for lineno, line in enumerate(lines, 1) if line and not line.startswith('#')]


def _parse_row(lineno, line, expected):
    try:
        values = [float(token) for token in line.split()]
    except ValueError as e:
        raise ConfigParseError(f"数値に変換できない値があります: {line}", lineno) from e
    if expected is not None and len(values) != expected:
        raise DimensionMismatchError(f"{lineno}行目: 要素数 {len(values)} が {expected} と一致しません")
    return values


def _parse_size(lineno, token):
    try:
        n = int(token)
    except ValueError as e:
        raise ConfigParseError(f"サイズ行が整数ではありません: {token}", lineno) from e
    if n < 1:
        raise ConfigParseError(f"サイズは1以上である必要があります: {n}", lineno)
    return n


def parse_matrix_text(lines, header=None):
    if not lines:
        raise ConfigParseError("行列ファイルが空です", 1)
    lineno, first = lines[0]
    tokens = first.split()
    if header is not None:
        if len(tokens) != 2 or tokens[0] != header:
            raise ConfigParseError(f"先頭行は '{header} n' である必要があります", lineno)
        n = _parse_size(lineno, tokens[1])
    else:
        if len(tokens) != 1:
            raise ConfigParseError("先頭行はノード数 n のみである必要があります", lineno)
        n = _parse_size(lineno, tokens[0])

    rows = lines[1:]
    if len(rows) != n:
        raise DimensionMismatchError(f"行数 {len(rows)} が n={n} と一致しません")
    return np.array([_parse_row(no, line, n) for no, line in rows], dtype=float)


def read_graph_file(file_path, kind=GraphKind.WEIGHTED):
    weights = parse_matrix_text(_read_lines(file_path))
    return Graph(weights, kind, provenance=str(file_path))


def read_mobility_file(file_path):
    lines = _read_lines(file_path)
    if len(lines) < 2:
        raise ConfigParseError("移動データファイルの行が不足しています", 1)
    lineno, first = lines[0]
    n = _parse_size(lineno, first)
    populations = np.array(_parse_row(*lines[1], n))
    flows = parse_matrix_text([lines[0]] + lines[2:])
    return MobilityData(populations, flows)


def read_step_graphon_values(file_path):
    return parse_matrix_text(_read_lines(file_path), header=STEP_GRAPHON_HEADER)


def read_vector_file(file_path):
    lines = _read_lines(file_path)
    if not lines:
        raise ConfigParseError("ベクトルファイルが空です", 1)
    lineno, first = lines[0]
    n = _parse_size(lineno, first)
    values = [value for no, line in lines[1:] for value in _parse_row(no, line, None)]
    if len(values) != n:
        raise DimensionMismatchError(f"要素数 {len(values)} が n={n} と一致しません")
    return np.array(values, dtype=float)


def read_state_file(file_path):
    lines = _read_lines(file_path)
    if not lines:
        raise ConfigParseError("初期状態ファイルが空です", 1)
    lineno, first = lines[0]
    n = _parse_size(lineno, first)
    rows = lines[1:]
    if len(rows) != n:
        raise DimensionMismatchError(f"行数 {len(rows)} が n={n} と一致しません")
    # 各行: s e i r
    return np.array([_parse_row(no, line, 4) for no, line in rows], dtype=float).T


def matrix_to_text(matrix, header=None):
    n = matrix.shape[0]
    first = f"{header} {n}" if header else f"{n}"
    rows = [" ".join(format_float(value) for value in row) for row in matrix]
    return "\n".join([first] + rows) + "\n"


def write_matrix_file(matrix, file_path, header=None):
    try:
        Path(file_path).parent.mkdir(parents=True, exist_ok=True)
        with open(file_path, 'w', encoding='utf-8', newline='\n') as f:
            f.write(matrix_to_text(np.asarray(matrix, dtype=float), header))
    except OSError as e:
        raise OutputIoError(f"ファイルを書き込めませんでした: {file_path} ({e})") from e
    return str(file_path)


def write_graph_file(g: Graph, file_path):
    return write_matrix_file(g.weights, file_path)


def write_step_graphon_file(values, file_path):
    return write_matrix_file(values, file_path, header=STEP_GRAPHON_HEADER)


def matrix_to_frame(matrix):
    matrix = np.asarray(matrix, dtype=float)
    n_rows, n_cols = matrix.shape
    # 添字は1始まり
    j, k = np.meshgrid(np.arange(1, n_rows + 1), np.arange(1, n_cols + 1), indexing='ij')
    return pl.DataFrame({
        'j': j.ravel(),
        'k': k.ravel(),
        'value': matrix.ravel(),
    })
