#!/usr/bin/env python3
"""
Two-mode spin-motion toolkit runner
Closed-form curves, synthetic data, fits and oracle checks from one command line
"""

import sys
import json
import logging
import argparse

from dotenv import load_dotenv

from config.sim_config import RunConfig, RuntimeSettings
from src.commands import COMMANDS
from src.errors import ToolkitError

logger = logging.getLogger(__name__)

# flags named like the RunConfig fields they override
FLAG_FIELDS = (
    'seed', 'out', 'input', 'preset', 'format', 'ratio', 'splitting_khz', 'omega_khz',
    'eta_x', 'eta_y', 'tsdf_us', 'nmax', 'shots', 'herald_method',
)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config (file values override the preset)")
    common.add_argument("--preset", help="Named configuration from config/presets.yaml")
    common.add_argument("--out", help="Output directory (default: $ECS_OUTPUT_DIR or output/)")
    common.add_argument("--input", help="Input trace, trace directory or parity table")
    common.add_argument("--seed", type=int, help="Seed for synthetic data (default: $ECS_DEFAULT_SEED)")
    common.add_argument("--ratio", help="Detuning ratio R = delta_X / delta_Y, fractions allowed (e.g. -2/3)")
    common.add_argument("--splitting-khz", type=float, help="Y minus X mode frequency in kHz")
    common.add_argument("--omega-khz", type=float, help="SDF Rabi frequency in kHz")
    common.add_argument("--eta-x", type=float, help="X-mode Lamb-Dicke factor")
    common.add_argument("--eta-y", type=float, help="Y-mode Lamb-Dicke factor")
    common.add_argument("--tsdf-us", type=float, help="SDF duration in microseconds")
    common.add_argument("--nmax", type=int, help="Highest Fock level kept in distributions")
    common.add_argument("--shots", type=int, help="Shots per point for synthetic traces")
    common.add_argument("--herald-method", choices=['displacement', 'propagate'],
                        help="How oracle-check builds heralded states (default: displacement)")
    common.add_argument("--format", choices=['csv', 'structured'], help="Output format (default: csv)")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("--verbose", action="store_true", help="Debug logging")
    verbosity.add_argument("--quiet", action="store_true", help="Warnings and errors only")

    parser = argparse.ArgumentParser(
        description="Two-mode spin-motion toolkit: trapped-ion ECS and Molmer-Sorensen simulations and fits",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python run.py spin --preset spin_r_minus_2_3            # P_up(t) for R=-2/3
  python run.py ecs --preset ecs_r_minus_2_3 --tsdf-us 30 # heralded ECS distribution and parity curve
  python run.py ms --preset ms_two_axis                   # two-ion gate populations
  python run.py synth --preset ecs_r_minus_2_3 --seed 7   # one BSB trace per scheduled t_SDF
  python run.py fit-bsb --config data/fixtures/bsb_even_cat.yaml
  python run.py oracle-check --preset ecs_r_minus_2_3     # closed forms vs truncated Fock space

Exit codes: 0 success, 2 invalid input, 3 numerical failure.
        """
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    helps = {
        'trajectory': "Phase-space displacements of both modes",
        'spin': "Spin-up probability under the two-mode force",
        'ecs': "Heralded ECS phonon distribution plus parity and mean-phonon curves",
        'cat': "Single-mode cat-state distribution",
        'ms': "Two-ion gate populations and geometric phase",
        'parity-scan': "Oracle parity scan after the gate, with Bell-state fidelity",
        'synth': "Synthetic blue-sideband traces with projection noise",
        'fit-bsb': "Fit blue-sideband traces for phonon distributions",
        'fit-parity': "Fit a parity curve for Rabi frequency and thermal populations",
        'oracle-check': "Closed forms against the truncated Fock-space oracle",
    }
    for name in COMMANDS:
        subparsers.add_parser(name, parents=[common], help=helps[name], description=helps[name])
    return parser


def configure_logging(args, settings: RuntimeSettings):
    if args.verbose:
        level = logging.DEBUG
    elif args.quiet:
        level = logging.WARNING
    else:
        level = getattr(logging, settings.log_level.upper(), logging.INFO)
    logging.basicConfig(level=level, format='%(asctime)s - %(levelname)s - %(message)s', force=True)


def main(argv=None) -> int:
    load_dotenv()
    settings = RuntimeSettings()
    args = build_parser().parse_args(argv)
    configure_logging(args, settings)

    overrides = {name: getattr(args, name) for name in FLAG_FIELDS}

    try:
        config = RunConfig.from_sources(args.config, overrides)
        if config.out is None:
            config.out = settings.output_dir
        if config.seed is None:
            config.seed = settings.default_seed
        logger.info(f"Running {args.command}" + (f" with preset {config.preset}" if config.preset else ""))
        return COMMANDS[args.command](config)
    except ToolkitError as e:
        logger.error(f"❌ {type(e).__name__}: {e.message}")
        print(json.dumps(e.to_record(), sort_keys=True, default=str), file=sys.stderr)
        return e.exit_code
    except KeyboardInterrupt:
        logger.info("⏹️  Interrupted by user")
        return 130


if __name__ == "__main__":
    sys.exit(main())
