import configparser
import io
import logging
import os
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Tuple, Union

from exceptions import ConfigParseError, ConfigValidationError, OutputIoError
from utils import extract_call, format_float, parse_float_list, parse_int_list, parse_matrix_literal, safe_float_conversion

logger = logging.getLogger(__name__)


def get_config_path():
    return os.path.join(os.path.dirname(os.path.abspath(__file__)), 'config.ini')


CONFIG_PATH = get_config_path()

DEFAULT_SETTINGS = {
    'Logging': {
        'level': 'INFO',
        'format': '%(asctime)s %(levelname)s %(name)s: %(message)s',
    },
    'Defaults': {
        'beta': '0.74',
        'mu': '0.5',
        'gamma': '0.14',
        'n': '100',
        'method': 'euler',
        'dt': '0.01',
        'T': '100',
        'record_every': '10',
        'equilibrium_tol': '1e-4',
    },
    'Solver': {
        'eigen_tol': '1e-10',
        'eigen_max_iter': '10000',
        'blowup_limit': '10',
        'subquadrature': '16',
        'projection_points': '4',
        'refinement_cap': '1000000',
        'workers': '1',
    },
    'Output': {
        'directory': 'output',
        'formats': 'csv,ppm',
    },
}


def _new_parser():
    config = configparser.ConfigParser(interpolation=None)
    # T と t を区別する
    config.optionxform = str
    return config


def load_config(path=None) -> configparser.ConfigParser:
    path = path or CONFIG_PATH
    config = _new_parser()
    try:
        with open(path, 'r', encoding='utf-8') as f:
            config.read_file(f)

        missing = False
        for section, values in DEFAULT_SETTINGS.items():
            if section not in config:
                config[section] = {}
            for key, value in values.items():
                if key not in config[section]:
                    config[section][key] = value
                    missing = True
        if missing:
            save_config(config, path)
    except FileNotFoundError:
        print(f"設定ファイルが見つかりません: {path}")
        raise
    except PermissionError:
        print(f"設定ファイルを読み取る権限がありません: {path}")
        raise
    except configparser.Error as e:
        print(f"設定ファイルの解析中にエラーが発生しました: {e}")
        raise
    return config


def default_config() -> configparser.ConfigParser:
    config = _new_parser()
    config.read_dict(DEFAULT_SETTINGS)
    return config


def save_config(config: configparser.ConfigParser, path=None):
    path = path or CONFIG_PATH
    try:
        with open(path, 'w', encoding='utf-8') as configfile:
            config.write(configfile)
    except PermissionError:
        print(f"設定ファイルを書き込む権限がありません: {path}")
        raise
    except IOError as e:
        print(f"設定ファイルの保存中にエラーが発生しました: {e}")
        raise


def setup_logging(config: configparser.ConfigParser):
    level_name = config['Logging'].get('level', 'INFO').upper()
    level = getattr(logging, level_name, logging.INFO)
    logging.basicConfig(level=level, format=config['Logging'].get('format', DEFAULT_SETTINGS['Logging']['format']),
                        force=True)


def get_solver_settings(config: configparser.ConfigParser):
    solver = config['Solver']
    return {
        'eigen_tol': solver.getfloat('eigen_tol'),
        'eigen_max_iter': solver.getint('eigen_max_iter'),
        'blowup_limit': solver.getfloat('blowup_limit'),
        'subquadrature': solver.getint('subquadrature'),
        'projection_points': solver.getint('projection_points'),
        'refinement_cap': solver.getint('refinement_cap'),
        'workers': solver.getint('workers'),
    }


class ScenarioKind(Enum):
    GRAPH_SEIR = "graph_seir"
    GRAPHON_SEIR = "graphon_seir"
    SPECTRAL = "spectral"
    SAMPLE = "sample"
    CONVERGE = "converge"


GRAPH_KINDS = {ScenarioKind.GRAPH_SEIR, ScenarioKind.SPECTRAL}
GRAPH_FAMILIES = ('complete', 'path', 'star', 'block', 'erdos_renyi', 'file', 'mobility')
GRAPHON_TYPES = ('gaussian', 'gamma', 'block', 'constant', 'file')
COUPLINGS = ('mobility', 'mean_field', 'mean_field_raw')
METHODS = ('euler', 'rk4')
SAMPLING_MODES = ('project', 'deterministic', 'random')
OUTPUT_FORMATS = ('csv', 'ppm', 'xlsx')
PARAM_PROFILES = {'switch': 3, 'seasonal': 3}
INIT_PROFILES = {'uniform': (3, 4), 'seed-cell': (2,), 'gaussian-bump': (3,)}
INIT_SUM_TOL = 1e-9


@dataclass(frozen=True)
class GraphSpec:
    family: str = 'complete'
    n: int = 100
    block_sizes: Optional[Tuple[int, ...]] = None
    block_weights: Optional[Tuple[Tuple[float, ...], ...]] = None
    p: Optional[float] = None
    path: Optional[str] = None
    coupling: str = 'mobility'


@dataclass(frozen=True)
class GraphonSpec:
    type: str = 'gaussian'
    c_w: float = 1.0
    x0: float = 0.5
    sigma: float = 0.5
    shape: Optional[float] = None
    rate: Optional[float] = None
    cap: float = 1.0
    values: Optional[Tuple[Tuple[float, ...], ...]] = None
    block_sizes: Optional[Tuple[int, ...]] = None
    value: Optional[float] = None
    path: Optional[str] = None


@dataclass(frozen=True)
class ParamsSpec:
    beta: Union[float, str] = 0.74
    mu: Union[float, str] = 0.5
    gamma: Union[float, str] = 0.14


@dataclass(frozen=True)
class InitSpec:
    profile: str = 'uniform(0.99,0,0.01)'


@dataclass(frozen=True)
class RunSpec:
    method: str = 'euler'
    dt: float = 0.01
    T: float = 100.0
    t0: float = 0.0
    record_every: int = 10
    n: int = 100
    equilibrium_tol: float = 1e-4
    n_list: Tuple[int, ...] = (25, 50, 100, 200)
    reference_n: Optional[int] = None
    mode: str = 'project'
    seeds: Tuple[int, ...] = ()
    N_list: Tuple[int, ...] = ()
    workers: int = 1
    tau: Optional[float] = None


@dataclass(frozen=True)
class OutputSpec:
    directory: str = 'output'
    formats: Tuple[str, ...] = ('csv', 'ppm')
    record_runtime: bool = False


@dataclass(frozen=True)
class ScenarioConfig:
    kind: ScenarioKind
    seed: Optional[int] = None
    graph: Optional[GraphSpec] = None
    graphon: Optional[GraphonSpec] = None
    params: ParamsSpec = field(default_factory=ParamsSpec)
    init: InitSpec = field(default_factory=InitSpec)
    run: RunSpec = field(default_factory=RunSpec)
    output: OutputSpec = field(default_factory=OutputSpec)


def _to_float(text):
    value = safe_float_conversion(text)
    if value is None:
        raise ValueError(f"数値ではありません: {text}")
    return value


def _to_int(text):
    value = _to_float(text)
    if value != int(value):
        raise ValueError(f"整数ではありません: {text}")
    return int(value)


def _to_bool(text):
    lowered = text.strip().lower()
    if lowered in ('true', 'yes', 'on', '1'):
        return True
    if lowered in ('false', 'no', 'off', '0'):
        return False
    raise ValueError(f"真偽値ではありません: {text}")


def _to_str(text):
    return text.strip()


def _to_choice(choices):
    def convert(text):
        value = text.strip().lower()
        if value not in choices:
            raise ValueError(f"{value} は {', '.join(choices)} のいずれかである必要があります")
        return value
    return convert


def _to_int_tuple(text):
    return tuple(parse_int_list(text))


def _to_matrix(text):
    return tuple(tuple(row) for row in parse_matrix_literal(text))


def _to_formats(text):
    formats = tuple(token.strip().lower() for token in text.split(',') if token.strip())
    unknown = [fmt for fmt in formats if fmt not in OUTPUT_FORMATS]
    if unknown:
        raise ValueError(f"未対応の出力形式です: {', '.join(unknown)}")
    return formats


def _to_param(text):
    text = text.strip()
    value = safe_float_conversion(text)
    if value is not None:
        if value < 0:
            raise ValueError(f"パラメータは非負である必要があります: {text}")
        return value
    if text.startswith('file:'):
        return text
    name, args = extract_call(text)
    if name not in PARAM_PROFILES or len(args) != PARAM_PROFILES[name]:
        raise ValueError(f"パラメータは数値、file:PATH、switch(a,b,t)、seasonal(base,amp,period) のいずれかです: {text}")
    parse_float_list(','.join(args))
    return f"{name}({','.join(args)})"


def _to_profile(text):
    text = text.strip()
    if text.startswith('file:'):
        return text
    name, args = extract_call(text)
    if name not in INIT_PROFILES or len(args) not in INIT_PROFILES[name]:
        raise ValueError(
            f"初期条件は uniform(s,e,i)、seed-cell(j,i0)、gaussian-bump(x0,width,i0)、file:PATH のいずれかです: {text}"
        )
    parse_float_list(','.join(args))
    return f"{name}({','.join(args)})"


SECTION_SCHEMA = {
    'model': {
        'kind': _to_choice(tuple(kind.value for kind in ScenarioKind)),
        'seed': _to_int,
    },
    'graph': {
        'family': _to_choice(GRAPH_FAMILIES),
        'n': _to_int,
        'block_sizes': _to_int_tuple,
        'block_weights': _to_matrix,
        'p': _to_float,
        'path': _to_str,
        'coupling': _to_choice(COUPLINGS),
    },
    'graphon': {
        'type': _to_choice(GRAPHON_TYPES),
        'c_w': _to_float,
        'x0': _to_float,
        'sigma': _to_float,
        'shape': _to_float,
        'rate': _to_float,
        'cap': _to_float,
        'values': _to_matrix,
        'block_sizes': _to_int_tuple,
        'value': _to_float,
        'path': _to_str,
    },
    'params': {
        'beta': _to_param,
        'mu': _to_param,
        'gamma': _to_param,
    },
    'init': {
        'profile': _to_profile,
    },
    'run': {
        'method': _to_choice(METHODS),
        'dt': _to_float,
        'T': _to_float,
        't0': _to_float,
        'record_every': _to_int,
        'n': _to_int,
        'equilibrium_tol': _to_float,
        'n_list': _to_int_tuple,
        'reference_n': _to_int,
        'mode': _to_choice(SAMPLING_MODES),
        'seeds': _to_int_tuple,
        'N_list': _to_int_tuple,
        'workers': _to_int,
        'tau': _to_float,
    },
    'output': {
        'directory': _to_str,
        'formats': _to_formats,
        'record_runtime': _to_bool,
    },
}

OVERRIDE_TARGETS = {
    'beta': ('params', 'beta'),
    'mu': ('params', 'mu'),
    'gamma': ('params', 'gamma'),
    'dt': ('run', 'dt'),
    'T': ('run', 'T'),
    'seed': ('model', 'seed'),
    'out': ('output', 'directory'),
    'kind': ('model', 'kind'),
}

_SECTION_RE = re.compile(r'^\s*\[([^\]]+)\]')
_KEY_RE = re.compile(r'^\s*([^=:#;\s\[][^=:]*?)\s*[=:]')


def _line_index(text):
    # (section, key) -> 行番号
    index = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), 1):
        header = _SECTION_RE.match(line)
        if header:
            section = header.group(1).strip()
            index[(section, None)] = lineno
            continue
        key = _KEY_RE.match(line)
        if key and section is not None:
            index[(section, key.group(1).strip())] = lineno
    return index


def _read_scenario_text(text):
    parser = _new_parser()
    try:
        parser.read_string(text)
    except configparser.MissingSectionHeaderError as e:
        raise ConfigParseError("セクション見出しがありません", e.lineno) from e
    except (configparser.DuplicateSectionError, configparser.DuplicateOptionError) as e:
        raise ConfigParseError(f"重複した定義があります: {e.message}", e.lineno) from e
    except configparser.ParsingError as e:
        lineno, line = e.errors[0]
        raise ConfigParseError(f"解析できない行です: {line.strip()}", lineno) from e
    return parser


def _settings_defaults(settings):
    settings = settings or default_config()
    defaults = settings['Defaults']
    output = settings['Output']
    return {
        'params': ParamsSpec(_to_param(defaults['beta']), _to_param(defaults['mu']), _to_param(defaults['gamma'])),
        'n': _to_int(defaults['n']),
        'run': RunSpec(
            method=_to_choice(METHODS)(defaults['method']),
            dt=_to_float(defaults['dt']),
            T=_to_float(defaults['T']),
            record_every=_to_int(defaults['record_every']),
            n=_to_int(defaults['n']),
            equilibrium_tol=_to_float(defaults['equilibrium_tol']),
            workers=_to_int(settings['Solver'].get('workers', '1')),
        ),
        'output': OutputSpec(directory=output['directory'], formats=_to_formats(output['formats'])),
    }


def _apply_overrides(parser, overrides):
    for name, value in (overrides or {}).items():
        if value is None:
            continue
        if name == 'n':
            # グラフの場合は [graph] n、それ以外は [run] n
            section = 'graph' if parser.has_section('graph') else 'run'
            target = (section, 'n')
        elif name in OVERRIDE_TARGETS:
            target = OVERRIDE_TARGETS[name]
        else:
            raise ConfigValidationError(f"未対応の上書き項目です: {name}")
        if not parser.has_section(target[0]):
            parser.add_section(target[0])
        parser[target[0]][target[1]] = format_float(value) if isinstance(value, float) else str(value)


def _convert_sections(parser, index):
    converted = {}
    for section in parser.sections():
        if section not in SECTION_SCHEMA:
            raise ConfigParseError(f"未知のセクションです: [{section}]", index.get((section, None)))
        values = {}
        for key, raw in parser[section].items():
            lineno = index.get((section, key))
            if key not in SECTION_SCHEMA[section]:
                raise ConfigParseError(f"[{section}] に未知のキーがあります: {key}", lineno)
            try:
                values[key] = SECTION_SCHEMA[section][key](raw)
            except ValueError as e:
                raise ConfigParseError(f"[{section}] {key}: {e}", lineno) from e
        converted[section] = values
    return converted


def _resolve_path(path, base_dir):
    if path is None or base_dir is None or os.path.isabs(path):
        return path
    return os.path.join(base_dir, path)


def _resolve_file_value(value, base_dir):
    if isinstance(value, str) and value.startswith('file:'):
        return 'file:' + _resolve_path(value[len('file:'):].strip(), base_dir)
    return value


def parse_config(text, settings=None, overrides=None, base_dir=None) -> ScenarioConfig:
    parser = _read_scenario_text(text)
    index = _line_index(text)
    _apply_overrides(parser, overrides)
    sections = _convert_sections(parser, index)
    defaults = _settings_defaults(settings)

    model = sections.get('model', {})
    if 'kind' not in model:
        raise ConfigValidationError("[model] kind が指定されていません")
    kind = ScenarioKind(model['kind'])

    graph = None
    if 'graph' in sections:
        values = dict(sections['graph'])
        values.setdefault('n', defaults['n'])
        values['path'] = _resolve_path(values.get('path'), base_dir)
        graph = GraphSpec(**values)
    graphon = None
    if 'graphon' in sections:
        values = dict(sections['graphon'])
        values['path'] = _resolve_path(values.get('path'), base_dir)
        graphon = GraphonSpec(**values)

    params = replace(defaults['params'], **{
        key: _resolve_file_value(value, base_dir) for key, value in sections.get('params', {}).items()
    })
    init = InitSpec(**{key: _resolve_file_value(value, base_dir) for key, value in sections.get('init', {}).items()})
    run = replace(defaults['run'], **sections.get('run', {}))
    output = replace(defaults['output'], **sections.get('output', {}))

    cfg = ScenarioConfig(kind, model.get('seed'), graph, graphon, params, init, run, output)
    validate_config(cfg)
    return cfg


def validate_config(cfg: ScenarioConfig):
    if cfg.graph is not None and cfg.graphon is not None:
        raise ConfigValidationError("[graph] と [graphon] は同時に指定できません")
    if cfg.kind in GRAPH_KINDS and cfg.graph is None:
        raise ConfigValidationError(f"kind={cfg.kind.value} には [graph] が必要です")
    if cfg.kind not in GRAPH_KINDS and cfg.graphon is None:
        raise ConfigValidationError(f"kind={cfg.kind.value} には [graphon] が必要です")

    run = cfg.run
    if not run.dt > 0:
        raise ConfigValidationError(f"dt は正である必要があります: dt={run.dt}")
    if not run.T > 0:
        raise ConfigValidationError(f"T は正である必要があります: T={run.T}")
    if run.T <= run.t0:
        raise ConfigValidationError(f"T は t0 より大きい必要があります: t0={run.t0}, T={run.T}")
    if run.record_every < 1 or run.n < 1 or run.workers < 1:
        raise ConfigValidationError("record_every, n, workers は1以上である必要があります")
    if run.equilibrium_tol <= 0:
        raise ConfigValidationError("equilibrium_tol は正である必要があります")
    if run.tau is not None and not run.t0 <= run.tau <= run.T:
        raise ConfigValidationError(f"tau は [t0, T] の範囲である必要があります: tau={run.tau}")
    if cfg.kind == ScenarioKind.CONVERGE:
        if not run.n_list or any(b <= a for a, b in zip(run.n_list, run.n_list[1:])) or min(run.n_list) < 1:
            raise ConfigValidationError("n_list は1以上の狭義単調増加列である必要があります")
    if any(N < 1 for N in run.N_list) or any(b <= a for a, b in zip(run.N_list, run.N_list[1:])):
        raise ConfigValidationError("N_list は1以上の狭義単調増加列である必要があります")
    if cfg.seed is not None and cfg.seed < 0:
        raise ConfigValidationError("seed は非負である必要があります")

    if cfg.graph is not None:
        _validate_graph(cfg.graph)
    if cfg.graphon is not None:
        _validate_graphon(cfg.graphon)
    _validate_init(cfg.init)


def _validate_graph(spec: GraphSpec):
    if spec.n < 1:
        raise ConfigValidationError("[graph] n は1以上である必要があります")
    required = {
        'block': ('block_sizes', 'block_weights'),
        'erdos_renyi': ('p',),
        'file': ('path',),
        'mobility': ('path',),
    }.get(spec.family, ())
    missing = [key for key in required if getattr(spec, key) is None]
    if missing:
        raise ConfigValidationError(f"family={spec.family} には {', '.join(missing)} が必要です")
    if spec.family == 'mobility' and spec.coupling != 'mobility':
        logger.info("移動データから作ったグラフを %s 結合で使用します", spec.coupling)


def _validate_graphon(spec: GraphonSpec):
    required = {
        'gamma': ('shape', 'rate'),
        'block': ('values',),
        'constant': ('value',),
        'file': ('path',),
    }.get(spec.type, ())
    missing = [key for key in required if getattr(spec, key) is None]
    if missing:
        raise ConfigValidationError(f"type={spec.type} には {', '.join(missing)} が必要です")


def _validate_init(spec: InitSpec):
    if spec.profile.startswith('file:'):
        return
    name, args = extract_call(spec.profile)
    values = parse_float_list(','.join(args))
    if name == 'uniform':
        if len(values) == 3:
            values.append(1.0 - sum(values))
        if min(values) < -INIT_SUM_TOL or abs(sum(values) - 1.0) > INIT_SUM_TOL:
            raise ConfigValidationError(f"初期値の和 s+e+i+r が1になりません: {spec.profile}")
    elif name == 'seed-cell':
        if values[0] < 0 or values[0] != int(values[0]) or not 0.0 <= values[1] <= 1.0:
            raise ConfigValidationError(f"seed-cell は j >= 0 (整数), 0 <= i0 <= 1 である必要があります: {spec.profile}")
    elif name == 'gaussian-bump':
        if values[1] <= 0 or not 0.0 <= values[2] <= 1.0:
            raise ConfigValidationError(f"gaussian-bump は width > 0, 0 <= i0 <= 1 である必要があります: {spec.profile}")


def _format_value(value):
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return format_float(value)
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return '; '.join(','.join(_format_value(v) for v in row) for row in value)
        return ','.join(_format_value(v) for v in value)
    return str(value)


def _section_items(spec):
    return {key: _format_value(value) for key, value in vars(spec).items() if value is not None}


def resolved_config_text(cfg: ScenarioConfig):
    """すべての既定値を埋めた設定文字列 (再解析すると同じ ScenarioConfig になる)"""
    parser = _new_parser()
    model = {'kind': cfg.kind.value}
    if cfg.seed is not None:
        model['seed'] = str(cfg.seed)
    parser['model'] = model
    if cfg.graph is not None:
        parser['graph'] = _section_items(cfg.graph)
    if cfg.graphon is not None:
        parser['graphon'] = _section_items(cfg.graphon)
    parser['params'] = _section_items(cfg.params)
    parser['init'] = _section_items(cfg.init)
    run_items = _section_items(cfg.run)
    if not cfg.run.seeds:
        run_items.pop('seeds')
    if not cfg.run.N_list:
        run_items.pop('N_list')
    parser['run'] = run_items
    parser['output'] = _section_items(cfg.output)

    buffer = io.StringIO()
    parser.write(buffer)
    return buffer.getvalue()


def read_scenario_file(path, settings=None, overrides=None):
    try:
        with open(path, 'r', encoding='utf-8') as f:
            text = f.read()
    except OSError as e:
        raise OutputIoError(f"設定ファイルを読み込めません: {path} ({e})") from e
    return parse_config(text, settings, overrides, base_dir=os.path.dirname(os.path.abspath(path)))
