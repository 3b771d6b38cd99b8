"""
Subcomando `peepll-sim`

    peepll-sim run --config sim.toml [--out informe.csv]
    peepll-sim fig4 --trials 50 --out fig4.csv [--plot fig4.png] [--prefilled]
    peepll-sim attack --mode {C,D} [--universe 1000]
"""

import argparse
import logging
import os

import pandas as pd

from commands import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME
from config import SimConfig
from harness import SimulationError, dictionary_attack, reproduce_fig4, run_sim, write_fig4_csv
from logger_config import log_error, setup_logging
from visualization import plot_fig4, write_gnuplot

logger = logging.getLogger(__name__)


def add_parser(subparsers) -> argparse.ArgumentParser:
    parser = subparsers.add_parser("peepll-sim", help="Simulador y banco de medidas")
    actions = parser.add_subparsers(dest="action", required=True)

    run_parser = actions.add_parser("run", help="Simulación con varios Depositors en proceso")
    run_parser.add_argument("--config", help="Fichero TOML o JSON con SimConfig")
    run_parser.add_argument("--mode", choices=["A", "B", "C", "D"])
    run_parser.add_argument("--seed", type=int)
    run_parser.add_argument("--out", help="CSV con el informe")
    run_parser.set_defaults(handler=run_simulation)

    fig4_parser = actions.add_parser("fig4", help="Coincidencias medias frente a fp'")
    fig4_parser.add_argument("--config", help="Fichero TOML o JSON con SimConfig (fp_list, prefill_count)")
    fig4_parser.add_argument("--trials", type=int, help="Búsquedas por punto (defecto 50)")
    fig4_parser.add_argument("--out", default="fig4.csv", help="CSV fp_prime,mean_matches,stddev,trials")
    fig4_parser.add_argument("--plot", help="PNG de la curva")
    fig4_parser.add_argument("--prefilled", action="store_true", help="Busca QIDs precargados")
    fig4_parser.add_argument("--seed", type=int)
    fig4_parser.set_defaults(handler=run_fig4)

    attack_parser = actions.add_parser("attack", help="Ataque de diccionario de un Depositor interno")
    attack_parser.add_argument("--mode", choices=["A", "B", "C", "D"], default="C")
    attack_parser.add_argument("--universe", type=int, default=1000, help="Tamaño del universo de QIDs")
    attack_parser.add_argument("--deposits", type=int, default=100, help="Depósitos de la víctima")
    attack_parser.add_argument("--probes", type=int, default=20, help="Búsquedas del atacante")
    attack_parser.add_argument("--seed", type=int, default=0)
    attack_parser.set_defaults(handler=run_attack)
    return parser


def _load(args: argparse.Namespace, **overrides) -> SimConfig:
    config = SimConfig.load(getattr(args, "config", None), overrides)
    setup_logging(args.log_dir or "Data/Logs", args.log_level)
    return config


def run_simulation(args: argparse.Namespace) -> int:
    try:
        cfg = _load(args, mode=args.mode, seed=args.seed)
    except ValueError as e:
        print(f"Configuración inválida: {e}")
        return EXIT_CONFIG
    try:
        report = run_sim(cfg)
    except SimulationError as e:
        log_error(e, "run_sim")
        print(f"Invariante violado: {e}")
        return EXIT_RUNTIME

    # el CSV solo lleva valores deterministas; el rendimiento va a consola
    frame = report.to_frame()
    print(frame.to_string(index=False))
    print(f"Rendimiento: {report.throughput:.1f} búsquedas/s")
    if args.out:
        frame.to_csv(args.out, index=False)
    return EXIT_OK


def run_fig4(args: argparse.Namespace) -> int:
    try:
        cfg = _load(args, trials=args.trials, seed=args.seed, prefilled=True if args.prefilled else None)
    except ValueError as e:
        print(f"Configuración inválida: {e}")
        return EXIT_CONFIG

    stats = reproduce_fig4(cfg.fp_list, cfg.prefill_count, cfg.trials, cfg.seed,
                           prefilled=cfg.prefilled, blind_bits=cfg.blind_bits)
    frame = write_fig4_csv(stats, args.out)
    write_gnuplot(frame, os.path.splitext(args.out)[0] + ".dat")
    if args.plot:
        plot_fig4(frame, args.plot)
    with pd.option_context("display.float_format", "{:.4f}".format):
        print(frame.to_string(index=False))
    return EXIT_OK


def run_attack(args: argparse.Namespace) -> int:
    setup_logging(args.log_dir or "Data/Logs", args.log_level)
    try:
        report = dictionary_attack(args.mode, args.universe, deposits=args.deposits,
                                   probes=args.probes, seed=args.seed)
    except ValueError as e:
        print(f"Parámetros inválidos: {e}")
        return EXIT_CONFIG
    print(f"Modo {report.mode}: {report.recovered}/{report.sightings} depósitos ajenos recuperados "
          f"({report.recovery_rate:.1%}) sobre un universo de {report.universe_size} QIDs")
    return EXIT_OK
