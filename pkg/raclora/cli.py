"""Command line interface: ``raclora <command> [flags]``.

Every command that runs an experiment prints the fully resolved
configuration before executing. Exit codes: 0 success, 2 configuration
error, 3 divergence (only with ``--fail-on-divergence``), 4 I/O error.
"""
import argparse
import logging
import sys
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv

from .config import Config, experiment_config
from .config.experiment_config import parse_set_args
from .errors import RacLoraError
from .services.experiment import ExperimentService

logger = logging.getLogger(__name__)

# argparse dest -> ExperimentConfig key
FLAG_KEYS = {
    'seed': 'seed',
    'seeds': 'num_seeds',
    'gamma': 'gamma',
    'rank': 'rank',
    'alpha': 'alpha',
    'method': 'methods',
    'chain_length': 'chain_length',
    'inner': 'inner',
    'side': 'side',
    'distribution': 'distribution',
    'out': 'output_dir',
    'workers': 'workers',
    'fail_on_divergence': 'fail_on_divergence',
    'ranks': 'ranks',
    'rows': 'rows',
    'cols': 'cols',
    'samples': 'mc_samples',
    'kind': 'objective',
    'data': 'data',
}

DEFAULT_PRESETS = {'counterexample': 'counterexample', 'fed': 'fed_quadratic'}


def _experiment_parent() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument('--preset', help='Named preset to start from')
    parent.add_argument('--config', help='Flat key-value YAML/JSON file')
    parent.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                        help='Override any configuration key (repeatable)')
    parent.add_argument('--seed', type=int, help='First seed (falls back to RACLORA_SEED)')
    parent.add_argument('--seeds', type=int, help='Number of consecutive seeds')
    parent.add_argument('--gamma', type=float, help='Step size; default is the theoretical one')
    parent.add_argument('--rank', type=int)
    parent.add_argument('--alpha', type=float)
    parent.add_argument('--method', action='append', help='Method to run (repeatable)')
    parent.add_argument('--chain-length', type=int)
    parent.add_argument('--inner', choices=['gd', 'rr', 'sgd'])
    parent.add_argument('--side', choices=['left', 'right'])
    parent.add_argument('--distribution', choices=['gaussian', 'rademacher', 'coordinate'])
    parent.add_argument('--data', help='Dataset directory written by gen-data')
    parent.add_argument('--out', help='Output directory (falls back to RACLORA_OUTPUT_DIR)')
    parent.add_argument('--workers', type=int)
    parent.add_argument('--fail-on-divergence', action='store_const', const=True, default=None)
    return parent


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='raclora', description='Randomized asymmetric chain of LoRA experiments'
    )
    parser.add_argument('-v', '--verbose', action='store_true', help='Debug logging')
    sub = parser.add_subparsers(dest='command', required=True)
    parent = _experiment_parent()

    sub.add_parser(
        'counterexample',
        parents=[parent],
        help='LoRA baselines against RAC-LoRA on the counterexample',
    )
    sub.add_parser('run', parents=[parent], help='Run the configured methods and seeds')
    sweep = sub.add_parser('sweep', parents=[parent], help='Rank sweep')
    sweep.add_argument('--ranks', help='Comma separated ranks')
    sub.add_parser('fed', parents=[parent], help='Federated chain on simulated clients')
    lam = sub.add_parser('estimate-lambda', parents=[parent], help='Monte Carlo lambda_min of E[H]')
    lam.add_argument('--rows', type=int)
    lam.add_argument('--cols', type=int)
    lam.add_argument('--samples', type=int)
    gen = sub.add_parser('gen-data', parents=[parent], help='Write a synthetic dataset')
    gen.add_argument('--kind', choices=['linreg', 'logreg'], default='linreg')
    gen.add_argument('--rows', type=int)
    gen.add_argument('--cols', type=int)

    summ = sub.add_parser('summarize', help='Summarize trace files or directories')
    summ.add_argument('paths', nargs='+')
    summ.add_argument('--threshold', type=float, default=Config.GAP_THRESHOLD)
    summ.add_argument('--summary-out', help='Also write the table as CSV')
    return parser


def _flags(args: argparse.Namespace) -> Dict[str, Any]:
    flags = {}
    for dest, key in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            flags[key] = value
    if args.command == 'gen-data' and 'seed' in flags:
        flags['data_seed'] = flags.pop('seed')
    return flags


def configure_logging(verbose: bool) -> None:
    level = logging.DEBUG if verbose else getattr(logging, Config.log_level(), logging.INFO)
    logging.basicConfig(level=level, format=Config.LOG_FORMAT)


def _report(success: bool, message: str, output: Optional[Dict[str, Any]]) -> int:
    output = output or {}
    stream = sys.stdout if success else sys.stderr
    print(message, file=stream)
    if output.get('table'):
        print(output['table'])
    return int(output.get('exit_code', 0 if success else 1))


def main(argv: Optional[List[str]] = None) -> int:
    # Load environment variables before any default is resolved
    load_dotenv()
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    service = ExperimentService()

    if args.command == 'summarize':
        return _report(*service.summarize_traces(args.paths, args.threshold, args.summary_out))

    try:
        cfg = experiment_config.build(
            preset=args.preset or DEFAULT_PRESETS.get(args.command),
            config_file=args.config,
            flags=_flags(args),
            overrides=parse_set_args(args.overrides),
        )
    except RacLoraError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code

    print('# resolved configuration')
    print(cfg.to_yaml(), end='')
    logger.debug(f"Dispatching {args.command}")

    handlers = {
        'counterexample': service.run_counterexample,
        'run': service.run_experiment,
        'sweep': service.run_sweep,
        'fed': service.run_federated,
        'estimate-lambda': service.estimate_lambda,
        'gen-data': service.generate_data,
    }
    return _report(*handlers[args.command](cfg))


if __name__ == '__main__':
    sys.exit(main())
