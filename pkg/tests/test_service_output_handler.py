import json
from unittest.mock import patch

import numpy as np
import openpyxl
import polars as pl
import pytest

from exceptions import BlowUpError, OutputIoError
from service_output_handler import (
    ensure_output_dir, error_record, grid_frame, heatmap_frame, ppm_text, summary_frame, to_gray_levels,
    write_error_record, write_frame_csv, write_ppm, write_summary_xlsx, write_text
)


@pytest.fixture
def sample_frame():
    return pl.DataFrame({
        't': [0.0, 0.5],
        'j': [1, 2],
        'i': [0.01, 0.0125],
    })


class TestGrayLevels:
    def test_scales_to_full_range(self):
        levels = to_gray_levels([[0.0, 0.5], [1.0, 0.25]])
        np.testing.assert_array_equal(levels, [[0, 128], [255, 64]])

    def test_range_is_per_image(self):
        levels = to_gray_levels([[2.0, 4.0], [3.0, 2.5]])
        np.testing.assert_array_equal(levels, [[0, 255], [128, 64]])

    def test_constant_image_is_black(self):
        assert not np.any(to_gray_levels(np.full((2, 3), 0.3)))

    def test_explicit_range_clips(self):
        np.testing.assert_array_equal(to_gray_levels([[-1.0, 2.0]], vmin=0.0, vmax=1.0), [[0, 255]])


class TestPpm:
    def test_header_and_pixels(self):
        text = ppm_text(np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 1.0]]))
        lines = text.splitlines()
        assert lines[:3] == ["P3", "3 2", "255"]
        assert lines[3] == "0 0 0 255 255 255 0 0 0"
        assert lines[4] == "255 255 255 0 0 0 255 255 255"
        assert text.endswith("\n")

    def test_write_ppm(self, tmp_path):
        path = write_ppm(np.eye(2), tmp_path / 'heatmap.ppm')
        assert open(path, encoding='utf-8').read().startswith("P3\n2 2\n255\n")

    @pytest.mark.parametrize("values", [np.zeros((0, 3)), np.zeros(4)])
    def test_rejects_empty_or_flat(self, tmp_path, values):
        with pytest.raises(OutputIoError):
            write_ppm(values, tmp_path / 'heatmap.ppm')


class TestCsvAndText:
    def test_write_frame_csv(self, tmp_path, sample_frame):
        path = write_frame_csv(sample_frame, tmp_path / 'trace.csv')
        lines = open(path, encoding='utf-8').read().splitlines()
        assert lines[0] == "t,j,i"
        assert lines[1] == "0.0,1,0.01"

    def test_nulls_are_empty(self, tmp_path):
        df = pl.DataFrame({'t': [0.0], 'q_tau': [None]}, schema={'t': pl.Float64, 'q_tau': pl.Float64})
        path = write_frame_csv(df, tmp_path / 'spectral.csv')
        assert open(path, encoding='utf-8').read().splitlines()[1] == "0.0,"

    def test_floats_round_trip_exactly(self, tmp_path):
        values = [0.1 + 0.2, 1.0 / 3.0, 123456.789012345]
        path = write_frame_csv(pl.DataFrame({'x': values}), tmp_path / 'values.csv')

        assert open(path, encoding='utf-8').read().splitlines()[1] == "0.30000000000000004"
        assert pl.read_csv(path)['x'].to_list() == values

    def test_write_text_error(self, tmp_path):
        with pytest.raises(OutputIoError):
            write_text("x", tmp_path / 'missing' / 'file.txt')

    @patch('service_output_handler.Path.mkdir')
    def test_ensure_output_dir_error(self, mock_mkdir, tmp_path):
        # モックの設定
        mock_mkdir.side_effect = PermissionError("アクセスが拒否されました")

        # テスト実行と検証
        with pytest.raises(OutputIoError):
            ensure_output_dir(tmp_path / 'new')

    def test_heatmap_frame(self):
        df = heatmap_frame([0.0, 1.0], [0.25, 0.75], [[0.1, 0.2], [0.3, 0.4]])
        assert df.columns == ['t', 'x_k', 'i']
        assert df['t'].to_list() == [0.0, 0.0, 1.0, 1.0]
        assert df['x_k'].to_list() == [0.25, 0.75, 0.25, 0.75]
        assert df['i'].to_list() == [0.1, 0.2, 0.3, 0.4]

    def test_grid_frame(self):
        df = grid_frame([0.25, 0.75], [[1.0, 0.5], [0.5, 0.2]])
        assert df.columns == ['x', 'y', 'w']
        assert df['x'].to_list() == [0.25, 0.25, 0.75, 0.75]
        assert df['y'].to_list() == [0.25, 0.75, 0.25, 0.75]
        assert df['w'].to_list() == [1.0, 0.5, 0.5, 0.2]

    def test_grid_frame_shape_checked(self):
        with pytest.raises(OutputIoError):
            grid_frame([0.5], np.eye(2))


class TestSummaryWorkbook:
    def test_sheets_and_formats(self, tmp_path, sample_frame):
        sheets = {
            'summary': summary_frame({'kind': 'graph_seir', 'equilibrium_time': None, 'n': 100}),
            'a_very_long_sheet_name_exceeding_the_limit': sample_frame,
        }
        path = write_summary_xlsx(sheets, tmp_path / 'summary.xlsx')

        workbook = openpyxl.load_workbook(path)
        assert workbook.sheetnames[0] == 'summary'
        assert len(workbook.sheetnames[1]) == 31

        summary = workbook['summary']
        assert summary.cell(row=1, column=1).value == 'key'
        assert summary.cell(row=1, column=1).font.bold
        assert summary.cell(row=3, column=2).value in ('', None)
        assert summary.cell(row=4, column=2).value == '100'

        data = workbook[workbook.sheetnames[1]]
        assert data.cell(row=2, column=3).value == 0.01
        assert data.cell(row=2, column=3).number_format == '0.000000E+00'
        assert data.cell(row=2, column=2).alignment.horizontal == 'center'

    @patch('service_output_handler.openpyxl.Workbook')
    def test_save_error(self, mock_workbook, tmp_path, sample_frame):
        # モックの設定
        mock_workbook.return_value.save.side_effect = OSError("ディスクがいっぱいです")

        # テスト実行と検証
        with pytest.raises(OutputIoError):
            write_summary_xlsx({'trace': sample_frame}, tmp_path / 'summary.xlsx')


class TestErrorRecord:
    def test_domain_error(self):
        assert error_record(BlowUpError("発散しました")) == {
            'kind': 'BlowUp', 'exit_code': 22, 'message': '発散しました'
        }

    def test_unexpected_error(self):
        assert error_record(RuntimeError("boom")) == {'kind': 'RuntimeError', 'exit_code': 1, 'message': 'boom'}

    def test_write_error_record(self, tmp_path):
        path = write_error_record(BlowUpError("発散しました"), tmp_path / 'out')
        with open(path, encoding='utf-8') as f:
            record = json.load(f)
        assert record['exit_code'] == 22
        assert record['message'] == '発散しました'

    @patch('service_output_handler.ensure_output_dir')
    def test_write_error_record_failure_is_logged(self, mock_ensure, tmp_path, caplog):
        mock_ensure.side_effect = OutputIoError("作成できません")
        assert write_error_record(BlowUpError("発散しました"), tmp_path) is None
        assert "エラー記録を書き出せませんでした" in caplog.text
