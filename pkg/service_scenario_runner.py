import logging
from pathlib import Path

import numpy as np
import polars as pl

from config_manager import (
    ScenarioConfig, ScenarioKind, default_config, get_solver_settings, resolved_config_text
)
from exceptions import ConfigValidationError, SeirGraphonError
from service_graph import (
    Block, Complete, ErdosRenyi, GraphKind, Path as PathFamily, Star, graph_from_mobility, is_irreducible,
    make_graph, unit_diagonal
)
from service_graphon import (
    StepGraphon, block_graphon, constant_graphon, gamma_contact_graphon, gaussian_graphon, heatmap_grid, midpoints,
    operator_norm_gap, sample_graph_deterministic, sample_graph_random
)
from service_gseir_solver import (
    CoefficientField, ConvergenceMode, Discretization, FieldState, InitialProfile, StepProfile,
    convergence_study, integrate_field, threshold_regime
)
from service_matrix_io import (
    matrix_to_frame, read_graph_file, read_mobility_file, read_state_file, read_step_graphon_values,
    read_vector_file, write_graph_file
)
from service_output_handler import (
    ensure_output_dir, grid_frame, heatmap_frame, summary_frame, write_error_record, write_frame_csv, write_ppm,
    write_summary_xlsx, write_text
)
from service_seir_dynamics import (
    CouplingMode, EpidemicParams, IntegrationMethod, SeirState, coupling_matrix, detect_equilibrium, integrate,
    seasonal_profile, switch_profile
)
from service_spectral import (
    build_B, build_B_sym, dominant_left_eigenpair, make_threshold_monitor, q_tau_series, spectral_bounds,
    threshold_report, top_eigenvalue
)
from utils import extract_call, parse_float_list

logger = logging.getLogger(__name__)

INIT_SUM_TOL = 1e-9


def _parse_call(text):
    name, args = extract_call(text)
    return name, parse_float_list(','.join(args))


def build_param_value(value):
    """数値、file:PATH (ノードごと)、switch(...)、seasonal(...) を解釈する"""
    if isinstance(value, float):
        return value
    if value.startswith('file:'):
        return read_vector_file(value[len('file:'):])
    name, args = _parse_call(value)
    if name == 'switch':
        return switch_profile(*args)
    return seasonal_profile(*args)


def build_params(cfg: ScenarioConfig):
    spec = cfg.params
    return EpidemicParams(build_param_value(spec.beta), build_param_value(spec.mu), build_param_value(spec.gamma))


def build_coefficients(cfg: ScenarioConfig):
    entries = []
    for value in (cfg.params.beta, cfg.params.mu, cfg.params.gamma):
        built = build_param_value(value)
        entries.append(StepProfile(built) if isinstance(built, np.ndarray) else built)
    return CoefficientField(*entries)


def build_initial_profile(cfg: ScenarioConfig, n):
    profile = cfg.init.profile
    if profile.startswith('file:'):
        state = SeirState.from_array(read_state_file(profile[len('file:'):]))
        if state.n != n:
            raise ConfigValidationError(f"初期状態ファイルのノード数 {state.n} が n={n} と一致しません")
        if state.conservation_residual() > INIT_SUM_TOL:
            raise ConfigValidationError("初期状態ファイルの各行で s+e+i+r = 1 になっていません")
        return FieldState.from_array(state.as_array())

    name, args = _parse_call(profile)
    if name == 'uniform':
        return InitialProfile.uniform(*args[:3])
    if name == 'seed-cell':
        return InitialProfile.seed_cell(int(args[0]), args[1], n)
    return InitialProfile.gaussian_bump(*args)


def build_initial_state(cfg: ScenarioConfig, n):
    initial = build_initial_profile(cfg, n)
    if isinstance(initial, InitialProfile):
        return initial.cell_average(n)
    return initial


def build_graph(cfg: ScenarioConfig):
    spec = cfg.graph
    seed = cfg.seed or 0
    if spec.family == 'file':
        g = read_graph_file(spec.path)
        weights = np.asarray(g.weights)
        if np.all((weights == 0.0) | (weights == 1.0)) and not np.any(np.diag(weights)):
            g = read_graph_file(spec.path, GraphKind.SIMPLE01)
        return g
    if spec.family == 'mobility':
        return graph_from_mobility(read_mobility_file(spec.path))

    family = {
        'complete': lambda: Complete(),
        'path': lambda: PathFamily(),
        'star': lambda: Star(),
        'block': lambda: Block(spec.block_sizes, spec.block_weights),
        'erdos_renyi': lambda: ErdosRenyi(spec.p, seed),
    }[spec.family]()
    return make_graph(family, spec.n)


def build_graphon(cfg: ScenarioConfig):
    spec = cfg.graphon
    if spec.type == 'gaussian':
        return gaussian_graphon(spec.c_w, spec.x0, spec.sigma)
    if spec.type == 'gamma':
        return gamma_contact_graphon(spec.shape, spec.rate, spec.cap)
    if spec.type == 'block':
        return block_graphon(spec.values, spec.block_sizes)
    if spec.type == 'constant':
        return constant_graphon(spec.value)
    return StepGraphon(read_step_graphon_values(spec.path))


class ScenarioRunner:
    def __init__(self, cfg: ScenarioConfig, settings=None):
        self.cfg = cfg
        self.settings = settings or default_config()
        self.solver = get_solver_settings(self.settings)
        self.output_dir = Path(cfg.output.directory)
        self.formats = set(cfg.output.formats)
        self.artifacts = []
        self.summary = {'kind': cfg.kind.value}
        self.sheets = {}

    def run(self):
        ensure_output_dir(self.output_dir)
        self._write_text(resolved_config_text(self.cfg), 'resolved_config.ini')
        logger.info("シナリオを実行します: kind=%s, 出力先=%s", self.cfg.kind.value, self.output_dir)

        handlers = {
            ScenarioKind.GRAPH_SEIR: self._run_graph_seir,
            ScenarioKind.SPECTRAL: self._run_spectral,
            ScenarioKind.GRAPHON_SEIR: self._run_graphon_seir,
            ScenarioKind.SAMPLE: self._run_sample,
            ScenarioKind.CONVERGE: self._run_converge,
        }
        handlers[self.cfg.kind]()

        if 'xlsx' in self.formats:
            self.sheets['summary'] = summary_frame(self.summary)
            self.artifacts.append(write_summary_xlsx(self.sheets, self.output_dir / 'summary.xlsx'))
        return self.artifacts

    def run_analysis(self):
        try:
            self.run()
            return True, "シナリオの実行が完了しました。"
        except SeirGraphonError as e:
            return False, f"{e.kind}: {e.message}"
        except Exception as e:
            return False, f"シナリオの実行中にエラーが発生しました: {str(e)}"

    def _write_text(self, text, name):
        self.artifacts.append(write_text(text, self.output_dir / name))

    def _write_csv(self, df: pl.DataFrame, name):
        if 'csv' in self.formats:
            self.artifacts.append(write_frame_csv(df, self.output_dir / name))

    def _write_ppm(self, values, name):
        if 'ppm' in self.formats:
            self.artifacts.append(write_ppm(values, self.output_dir / name))

    def _integration_args(self):
        run = self.cfg.run
        return {
            't0': run.t0,
            't_end': run.T,
            'dt': run.dt,
            'method': IntegrationMethod(run.method),
            'record_every': run.record_every,
            'blowup_limit': self.solver['blowup_limit'],
        }

    def _graph_setup(self):
        g = build_graph(self.cfg)
        if not is_irreducible(g):
            logger.warning("グラフが既約ではありません。支配的固有対が一意でない可能性があります")
        mode = CouplingMode(self.cfg.graph.coupling)
        x0 = build_initial_state(self.cfg, g.n)
        return g, mode, build_params(self.cfg), SeirState.from_array(x0.as_array())

    def _record_equilibrium(self, tr):
        equilibrium = detect_equilibrium(tr, self.cfg.run.equilibrium_tol)
        self.summary['equilibrium_time'] = equilibrium
        if equilibrium is None:
            logger.info("T=%g までに平衡に達しませんでした", self.cfg.run.T)
        final = tr.final_state
        self.summary['final_mean_s'] = float(np.mean(final.s))
        self.summary['final_mean_r'] = float(np.mean(final.r))
        self.summary['max_conservation_residual'] = max(d.conservation_residual for d in tr.diagnostics)
        self.summary['min_component'] = min(d.min_component for d in tr.diagnostics)

    def _run_graph_seir(self):
        g, mode, p, x0 = self._graph_setup()
        report = threshold_report(self.cfg.run.t0, x0, g, p, mode,
                                  self.solver['eigen_tol'], self.solver['eigen_max_iter'])
        self.summary.update({'n': g.n, 'lambda_M0': report.lambda_m, 'margin0': report.margin})

        tr = integrate(x0, g, p, mode, **self._integration_args())
        self._write_csv(tr.to_frame(), 'trace.csv')
        self._write_ppm(tr.array('i'), 'heatmap_i.ppm')
        diagnostics = tr.diagnostics_frame()
        self._write_csv(diagnostics, 'diagnostics.csv')
        self.sheets['diagnostics'] = diagnostics
        self._record_equilibrium(tr)

    def _run_spectral(self):
        g, mode, p, x0 = self._graph_setup()
        tol, max_iter = self.solver['eigen_tol'], self.solver['eigen_max_iter']
        monitor = make_threshold_monitor(g, p, mode, tol, max_iter)
        tr = integrate(x0, g, p, mode, monitor=monitor, **self._integration_args())

        tau = self.cfg.run.tau if self.cfg.run.tau is not None else self.cfg.run.t0
        q_values = q_tau_series(tr, g, p, tau, mode, tol, max_iter)
        start = len(tr) - len(q_values)
        spectral = pl.DataFrame({
            't': tr.times,
            'lambda_M': [d.lambda_m for d in tr.diagnostics],
            'margin': [d.margin for d in tr.diagnostics],
            'q_tau': [None] * start + [float(q) for q in q_values],
        }, schema={'t': pl.Float64, 'lambda_M': pl.Float64, 'margin': pl.Float64, 'q_tau': pl.Float64})
        self._write_csv(spectral, 'spectral.csv')
        self._write_csv(tr.to_frame(), 'trace.csv')
        self._write_csv(tr.diagnostics_frame(), 'diagnostics.csv')
        self.sheets['spectral'] = spectral

        coupling = coupling_matrix(g, mode)
        pair = dominant_left_eigenpair(build_B(x0.s, coupling), tol, max_iter)
        self._write_csv(pl.DataFrame({'node': np.arange(1, g.n + 1), 'v': pair.v}), 'eigenvector.csv')
        self.summary.update({
            'n': g.n,
            'tau': tau,
            'lambda_B': pair.lambda_,
            'lambda_B_sym': top_eigenvalue(build_B_sym(x0.s, coupling), tol, max_iter),
            'iterations': pair.iterations,
            'margin0': spectral['margin'][0],
        })
        if g.kind == GraphKind.SIMPLE01:
            lower, upper = spectral_bounds(g, x0.s)
            self.summary.update({
                'lambda_unit_diagonal': top_eigenvalue(build_B(x0.s, unit_diagonal(g)), tol, max_iter),
                'lower_bound': lower,
                'upper_bound': upper,
            })
        self._record_equilibrium(tr)

    def _run_graphon_seir(self):
        w = build_graphon(self.cfg)
        c = build_coefficients(self.cfg)
        n = self.cfg.run.n
        x0 = build_initial_profile(self.cfg, n)
        tr = integrate_field(x0, w, c, n, discretization=Discretization.MIDPOINT,
                             subquadrature=self.solver['subquadrature'],
                             projection_points=self.solver['projection_points'],
                             **self._integration_args())

        positions = midpoints(n)
        self._write_csv(tr.to_frame('x_k', positions), 'trace.csv')
        diagnostics = tr.diagnostics_frame()
        self._write_csv(diagnostics, 'diagnostics.csv')
        infected = tr.array('i')
        self._write_ppm(infected, 'heatmap_i.ppm')
        self._write_csv(heatmap_frame(tr.times, positions, infected), 'heatmap_i.csv')
        grid = heatmap_grid(w)
        self._write_ppm(grid, 'graphon_w.ppm')
        self._write_csv(grid_frame(midpoints(len(grid)), grid), 'graphon_w.csv')
        self.sheets['diagnostics'] = diagnostics

        mean_i = infected.mean(axis=1)
        self.summary.update({
            'n': n,
            'threshold_margin': threshold_regime(w, c, max(n, 400), self.cfg.run.t0),
            'initial_mean_i': float(mean_i[0]),
            'max_mean_i': float(mean_i.max()),
            'final_mean_i_plus_r': float(np.mean(tr.final_state.i + tr.final_state.r)),
        })
        self._record_equilibrium(tr)

    def _run_sample(self):
        w = build_graphon(self.cfg)
        seed = self.cfg.seed or 0
        sampling = 'deterministic' if self.cfg.run.mode == 'deterministic' else 'random'
        n = self.cfg.run.n
        if sampling == 'random':
            g = sample_graph_random(w, n, seed)
        else:
            g = sample_graph_deterministic(w, n)
        self.artifacts.append(write_graph_file(g, self.output_dir / 'sampled_graph.txt'))
        self._write_csv(matrix_to_frame(g.weights), 'sampled_graph.csv')

        N_list = self.cfg.run.N_list or (n,)
        seeds = self.cfg.run.seeds or (seed,)
        if sampling == 'deterministic':
            seeds = seeds[:1]
        gap = pl.concat([operator_norm_gap(w, N_list, s, sampling) for s in seeds])
        self._write_csv(gap, 'operator_gap.csv')
        self.sheets['operator_gap'] = gap
        self.summary.update({'n': n, 'sampling': sampling, 'seed': seed, 'edges': int(np.count_nonzero(g.weights) // 2)})

    def _run_converge(self):
        run = self.cfg.run
        if self.cfg.init.profile.startswith('file:'):
            raise ConfigValidationError("収束検証の初期条件は [0,1] 上の関数 (uniform, seed-cell, gaussian-bump) で指定してください")
        w = build_graphon(self.cfg)
        c = build_coefficients(self.cfg)
        x0 = build_initial_profile(self.cfg, run.n_list[0])
        report = convergence_study(
            w, c, x0, run.n_list, run.T, run.dt,
            mode=ConvergenceMode(run.mode),
            seed=self.cfg.seed or 0,
            reference_n=run.reference_n,
            method=IntegrationMethod(run.method),
            record_every=run.record_every,
            workers=run.workers,
            random_seeds=run.seeds or None,
            t0=run.t0,
            record_runtime=self.cfg.output.record_runtime,
            subquadrature=self.solver['subquadrature'],
            projection_points=self.solver['projection_points'],
            refinement_cap=self.solver['refinement_cap'],
        )
        frame = report.to_frame()
        self._write_csv(frame, 'convergence.csv')
        self.sheets['convergence'] = frame
        self.summary.update({
            'reference_n': report.reference_n,
            'norm': report.norm.value,
            'c_hat': report.c_hat,
            'within_envelope': report.within_envelope(),
        })


def run_scenario(cfg: ScenarioConfig, settings=None):
    """シナリオを実行して終了コードを返す (失敗時は error.json を書き出す)"""
    try:
        ScenarioRunner(cfg, settings).run()
        return 0
    except SeirGraphonError as e:
        logger.error("%s: %s", e.kind, e.message)
        write_error_record(e, cfg.output.directory)
        return e.exit_code
    except Exception as e:
        logger.exception("予期しないエラーが発生しました: %s", e)
        write_error_record(e, cfg.output.directory)
        return 1
