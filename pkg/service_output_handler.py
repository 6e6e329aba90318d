import json
import logging
from pathlib import Path

import numpy as np
import openpyxl
import polars as pl
from openpyxl.styles import Alignment, Font

from exceptions import OutputIoError, SeirGraphonError

logger = logging.getLogger(__name__)

PPM_MAX_VALUE = 255
# Excel のシート名は31文字まで
SHEET_NAME_LIMIT = 31


def ensure_output_dir(directory):
    try:
        directory_path = Path(directory)
        if not directory_path.exists():
            directory_path.mkdir(parents=True, exist_ok=True)
        return directory_path
    except OSError as e:
        raise OutputIoError(f"出力ディレクトリを作成できません: {directory} ({e})") from e


def write_text(text, file_path):
    try:
        with open(file_path, 'w', encoding='utf-8', newline='\n') as f:
            f.write(text)
    except OSError as e:
        raise OutputIoError(f"ファイルを書き込めませんでした: {file_path} ({e})") from e
    return str(file_path)


def write_frame_csv(df: pl.DataFrame, file_path):
    """浮動小数点数は polars の既定の表記 (読み戻すと同じ値になる最短の10進表記) で書き出す"""
    try:
        df.write_csv(file_path, line_terminator='\n', null_value='')
    except OSError as e:
        raise OutputIoError(f"CSVファイルを書き込めませんでした: {file_path} ({e})") from e
    logger.debug("CSVを書き出しました: %s (%d行)", file_path, df.height)
    return str(file_path)


def to_gray_levels(values, vmin=None, vmax=None):
    """値を 0..255 の整数階調にする。

    vmin, vmax を省略すると画像ごとの最小値が 0、最大値が 255 になる (線形、四捨五入)。
    全画素が同じ値のときは 0 になる。範囲外の値は端に丸める。
    """
    values = np.asarray(values, dtype=float)
    vmin = float(values.min()) if vmin is None else vmin
    vmax = float(values.max()) if vmax is None else vmax
    if vmax <= vmin:
        return np.zeros(values.shape, dtype=int)
    scaled = (np.clip(values, vmin, vmax) - vmin) / (vmax - vmin)
    return np.rint(scaled * PPM_MAX_VALUE).astype(int)


def ppm_text(values, vmin=None, vmax=None):
    """2次元配列を ASCII PPM (P3) のグレースケール画像にする。行が画像の上から下に対応する"""
    levels = to_gray_levels(values, vmin, vmax)
    height, width = levels.shape
    lines = ["P3", f"{width} {height}", str(PPM_MAX_VALUE)]
    for row in levels:
        lines.append(" ".join(f"{level} {level} {level}" for level in row))
    return "\n".join(lines) + "\n"


def write_ppm(values, file_path, vmin=None, vmax=None):
    values = np.asarray(values, dtype=float)
    if values.ndim != 2 or values.size == 0:
        raise OutputIoError(f"PPMには空でない2次元配列が必要です: {values.shape}")
    return write_text(ppm_text(values, vmin, vmax), file_path)


def heatmap_frame(times, positions, values):
    values = np.asarray(values, dtype=float)
    return pl.DataFrame({
        't': np.repeat(np.asarray(times, dtype=float), values.shape[1]),
        'x_k': np.tile(np.asarray(positions, dtype=float), values.shape[0]),
        'i': values.ravel(),
    })


def grid_frame(positions, values):
    """正方行列 values[a, b] を (x, y, w) の縦長の表にする。x が行、y が列の位置"""
    values = np.asarray(values, dtype=float)
    positions = np.asarray(positions, dtype=float)
    if values.shape != (len(positions), len(positions)):
        raise OutputIoError(f"格子の形 {values.shape} が位置の数 {len(positions)} と一致しません")
    return pl.DataFrame({
        'x': np.repeat(positions, len(positions)),
        'y': np.tile(positions, len(positions)),
        'w': values.ravel(),
    })


def apply_cell_formats(worksheet, n_columns):
    for col in range(1, n_columns + 1):
        header = worksheet.cell(row=1, column=col)
        header.font = Font(bold=True)
        header.alignment = Alignment(horizontal='center', vertical='center')

    for row in worksheet.iter_rows(min_row=2, max_col=n_columns):
        for cell in row:
            if isinstance(cell.value, float):
                cell.alignment = Alignment(horizontal='right', vertical='center')
                cell.number_format = '0.000000E+00'
            else:
                cell.alignment = Alignment(horizontal='center', vertical='center')


def write_dataframe_to_sheet(sheet, df: pl.DataFrame):
    for col_idx, header in enumerate(df.columns, 1):
        sheet.cell(row=1, column=col_idx, value=header)
    for row_idx, row_data in enumerate(df.rows(), 2):
        for col_idx, value in enumerate(row_data, 1):
            sheet.cell(row=row_idx, column=col_idx).value = value
    apply_cell_formats(sheet, len(df.columns))


def write_summary_xlsx(sheets, file_path):
    """{シート名: DataFrame} をひとつのブックに書き出す"""
    try:
        workbook = openpyxl.Workbook()
        workbook.remove(workbook.active)
        for name, df in sheets.items():
            sheet = workbook.create_sheet(title=str(name)[:SHEET_NAME_LIMIT])
            write_dataframe_to_sheet(sheet, df)
        workbook.save(file_path)
    except OSError as e:
        raise OutputIoError(f"Excelファイルを書き込めませんでした: {file_path} ({e})") from e
    logger.info("集計ブックを書き出しました: %s", file_path)
    return str(file_path)


def summary_frame(summary: dict):
    return pl.DataFrame({
        'key': list(summary.keys()),
        'value': ["" if value is None else str(value) for value in summary.values()],
    })


def error_record(error: Exception):
    if isinstance(error, SeirGraphonError):
        return error.to_record()
    return {'kind': type(error).__name__, 'exit_code': 1, 'message': str(error)}


def write_error_record(error: Exception, directory):
    record = error_record(error)
    try:
        directory_path = ensure_output_dir(directory)
        return write_text(json.dumps(record, ensure_ascii=False, indent=2) + "\n",
                          directory_path / 'error.json')
    except OutputIoError:
        logger.error("エラー記録を書き出せませんでした: %s", directory)
        return None
