import argparse
import configparser
import logging
import sys

from config_manager import DEFAULT_SETTINGS, load_config, read_scenario_file, setup_logging
from exceptions import CommandUsageError, ConfigParseError, OutputIoError, SeirGraphonError, exit_code_table
from service_output_handler import write_error_record
from service_scenario_runner import run_scenario
from version import LAST_UPDATED, VERSION

logger = logging.getLogger(__name__)

SUBCOMMANDS = {
    'simulate-graph': ('graph_seir', "重み付きグラフ上の SEIR モデルを積分する"),
    'simulate-graphon': ('graphon_seir', "グラフォン上の半離散 G-SEIR モデルを積分する"),
    'spectral': ('spectral', "λ_M(t) と閾値マージン、q_τ(t) を計算する"),
    'sample': ('sample', "グラフォンからグラフを標本化し作用素ノルムの差を調べる"),
    'converge': ('converge', "n を増やしたときの連続極限への収束を検証する"),
}


class CommandParser(argparse.ArgumentParser):
    """引数の誤りを終了コード表の UsageError として送出する"""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise CommandUsageError(message)


def exit_code_epilog():
    lines = ["終了コード:"]
    lines += [f"  {code:>3}  {kind}" for code, kind in exit_code_table()]
    return "\n".join(lines)


def build_parser():
    parser = CommandParser(
        prog='seir-graphon',
        description="グラフとグラフォン上の SEIR モデルのシミュレーションと解析",
        epilog=exit_code_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument('--version', action='version', version=f"%(prog)s {VERSION} ({LAST_UPDATED})")
    subparsers = parser.add_subparsers(dest='command', required=True)

    for command, (_, help_text) in SUBCOMMANDS.items():
        sub = subparsers.add_parser(command, help=help_text, description=help_text, epilog=exit_code_epilog(),
                                    formatter_class=argparse.RawDescriptionHelpFormatter)
        sub.add_argument('--config', required=True, help="シナリオ設定ファイル (INI形式)")
        sub.add_argument('--beta', type=float, help="感染率 β")
        sub.add_argument('--gamma', type=float, help="回復率 γ")
        sub.add_argument('--mu', type=float, help="発症率 μ")
        sub.add_argument('--dt', type=float, help="時間刻み")
        sub.add_argument('--T', dest='T', type=float, help="終了時刻")
        sub.add_argument('--n', type=int, help="ノード数または求積点数")
        sub.add_argument('--seed', type=int, help="乱数シード")
        sub.add_argument('--out', help="出力ディレクトリ")
    return parser


def load_settings():
    try:
        return load_config()
    except OSError as e:
        raise OutputIoError(f"アプリケーション設定を読み込めませんでした: {e}") from e
    except configparser.Error as e:
        raise ConfigParseError(f"アプリケーション設定を解析できませんでした: {e}") from e


def _fail(error, out_dir):
    logger.error("%s: %s", error.kind, error.message)
    write_error_record(error, out_dir)
    return error.exit_code


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except CommandUsageError as e:
        print(f"{e.kind}: {e.message}", file=sys.stderr)
        return e.exit_code

    try:
        settings = load_settings()
    except SeirGraphonError as e:
        return _fail(e, args.out or DEFAULT_SETTINGS['Output']['directory'])
    setup_logging(settings)

    overrides = {
        'kind': SUBCOMMANDS[args.command][0],
        'beta': args.beta,
        'gamma': args.gamma,
        'mu': args.mu,
        'dt': args.dt,
        'T': args.T,
        'n': args.n,
        'seed': args.seed,
        'out': args.out,
    }
    try:
        cfg = read_scenario_file(args.config, settings, overrides)
    except SeirGraphonError as e:
        return _fail(e, args.out or settings['Output']['directory'])

    status = run_scenario(cfg, settings)
    if status == 0:
        logger.info("完了しました: %s", cfg.output.directory)
    return status


if __name__ == "__main__":
    sys.exit(main())
