import numpy as np
import pytest

from exceptions import ConfigParseError, DimensionMismatchError, OutputIoError, WeightOutOfRangeError
from service_graph import Graph, GraphKind
from service_matrix_io import (
    matrix_to_frame, matrix_to_text, read_graph_file, read_mobility_file, read_state_file,
    read_step_graphon_values, read_vector_file, write_graph_file, write_step_graphon_file
)


def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text, encoding='utf-8')
    return path


class TestReadGraphFile:
    def test_weighted_graph(self, tmp_path):
        path = write(tmp_path, 'graph.txt', "# 重み付き三角形\n3\n0 0.5 1\n0.5 0 0.25\n\n1 0.25 0\n")
        g = read_graph_file(path)
        assert g.n == 3
        assert g.kind == GraphKind.WEIGHTED
        assert g.weights[1, 2] == 0.25
        assert g.provenance == str(path)

    def test_simple_graph_kind(self, tmp_path):
        path = write(tmp_path, 'graph.txt', "2\n0 1\n1 0\n")
        assert read_graph_file(path, GraphKind.SIMPLE01).kind == GraphKind.SIMPLE01

    def test_asymmetric_rejected(self, tmp_path):
        path = write(tmp_path, 'graph.txt', "2\n0 1\n0.5 0\n")
        with pytest.raises(WeightOutOfRangeError):
            read_graph_file(path)

    def test_row_count_mismatch(self, tmp_path):
        path = write(tmp_path, 'graph.txt', "3\n0 1 0\n1 0 1\n")
        with pytest.raises(DimensionMismatchError):
            read_graph_file(path)

    def test_row_length_mismatch(self, tmp_path):
        path = write(tmp_path, 'graph.txt', "2\n0 1\n1 0 0\n")
        with pytest.raises(DimensionMismatchError):
            read_graph_file(path)

    def test_non_numeric_entry_reports_line(self, tmp_path):
        path = write(tmp_path, 'graph.txt', "2\n0 1\n1 x\n")
        with pytest.raises(ConfigParseError) as excinfo:
            read_graph_file(path)
        assert excinfo.value.lineno == 3

    def test_bad_size_line(self, tmp_path):
        path = write(tmp_path, 'graph.txt', "two\n0 1\n1 0\n")
        with pytest.raises(ConfigParseError) as excinfo:
            read_graph_file(path)
        assert excinfo.value.lineno == 1

    def test_empty_file(self, tmp_path):
        with pytest.raises(ConfigParseError):
            read_graph_file(write(tmp_path, 'graph.txt', "# コメントのみ\n"))

    def test_missing_file(self, tmp_path):
        with pytest.raises(OutputIoError):
            read_graph_file(tmp_path / 'missing.txt')


class TestReadMobilityFile:
    def test_mobility(self, tmp_path):
        path = write(tmp_path, 'mobility.txt', "2\n2 1\n1.5 0.5\n0.25 0.75\n")
        mob = read_mobility_file(path)
        np.testing.assert_array_equal(mob.populations, [2.0, 1.0])
        np.testing.assert_array_equal(mob.flows, [[1.5, 0.5], [0.25, 0.75]])

    def test_population_mismatch(self, tmp_path):
        path = write(tmp_path, 'mobility.txt', "2\n2 1 3\n1.5 0.5\n0.25 0.75\n")
        with pytest.raises(DimensionMismatchError):
            read_mobility_file(path)

    def test_too_short(self, tmp_path):
        with pytest.raises(ConfigParseError):
            read_mobility_file(write(tmp_path, 'mobility.txt', "2\n"))


class TestReadStepGraphon:
    def test_values(self, tmp_path):
        path = write(tmp_path, 'w.txt', "stepgraphon 2\n0.9 0.1\n0.1 0.9\n")
        np.testing.assert_array_equal(read_step_graphon_values(path), [[0.9, 0.1], [0.1, 0.9]])

    def test_header_required(self, tmp_path):
        path = write(tmp_path, 'w.txt', "2\n0.9 0.1\n0.1 0.9\n")
        with pytest.raises(ConfigParseError) as excinfo:
            read_step_graphon_values(path)
        assert excinfo.value.lineno == 1


class TestReadVectorAndState:
    def test_vector_may_span_lines(self, tmp_path):
        path = write(tmp_path, 'beta.txt', "4\n0.1 0.2\n0.3\n0.4\n")
        np.testing.assert_array_equal(read_vector_file(path), [0.1, 0.2, 0.3, 0.4])

    def test_vector_length_mismatch(self, tmp_path):
        with pytest.raises(DimensionMismatchError):
            read_vector_file(write(tmp_path, 'beta.txt', "3\n0.1 0.2\n"))

    def test_state_rows_are_transposed(self, tmp_path):
        path = write(tmp_path, 'x0.txt', "2\n0.99 0 0.01 0\n1 0 0 0\n")
        state = read_state_file(path)
        assert state.shape == (4, 2)
        np.testing.assert_array_equal(state[0], [0.99, 1.0])
        np.testing.assert_array_equal(state[2], [0.01, 0.0])

    def test_state_needs_four_columns(self, tmp_path):
        with pytest.raises(DimensionMismatchError):
            read_state_file(write(tmp_path, 'x0.txt', "1\n0.99 0.01 0\n"))


class TestWriters:
    def test_graph_file_round_trip_is_exact(self, tmp_path):
        weights = np.array([[0.0, 0.1, 1.0 / 3.0], [0.1, 0.0, 0.7], [1.0 / 3.0, 0.7, 0.0]])
        path = write_graph_file(Graph(weights), tmp_path / 'sub' / 'graph.txt')
        np.testing.assert_array_equal(read_graph_file(path).weights, weights)

    def test_step_graphon_file(self, tmp_path):
        values = np.array([[0.5, 0.25], [0.25, 1.0]])
        path = write_step_graphon_file(values, tmp_path / 'w.txt')
        assert open(path, encoding='utf-8').readline() == "stepgraphon 2\n"
        np.testing.assert_array_equal(read_step_graphon_values(path), values)

    def test_matrix_to_text(self):
        assert matrix_to_text(np.array([[0.0, 1.0], [1.0, 0.0]])) == "2\n0 1\n1 0\n"

    def test_matrix_to_frame_is_one_based(self):
        df = matrix_to_frame([[1.0, 2.0], [3.0, 4.0]])
        assert df.columns == ['j', 'k', 'value']
        assert df['j'].to_list() == [1, 1, 2, 2]
        assert df['k'].to_list() == [1, 2, 1, 2]
        assert df['value'].to_list() == [1.0, 2.0, 3.0, 4.0]
