"""Subcomando `pvault`: arranca el daemon del PVault"""

import argparse
import asyncio
import logging

from commands import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME
from config import VaultConfig
from logger_config import log_error, setup_logging
from pvault import PseudonymVault, VaultError, serve_tcp

logger = logging.getLogger(__name__)


def add_parser(subparsers) -> argparse.ArgumentParser:
    parser = subparsers.add_parser("pvault", help="Arranca el PVault (servidor de mapeo de pseudónimos)")
    parser.add_argument("--config", help="Fichero JSON o TOML con VaultConfig")
    parser.add_argument("--listen", help="host:port de escucha (defecto 127.0.0.1:7474)")
    parser.add_argument("--mode", choices=["A", "B", "C", "D"], help="Modo de operación")
    parser.add_argument("--fp", type=float, help="Tasa objetivo de falsos positivos")
    parser.add_argument("--blind-bits", type=int, help="Bits de cegado b (defecto: automático)")
    parser.add_argument("--capacity", type=int, help="Número máximo de entradas del mapping")
    parser.add_argument("--epoch-seconds", type=int, help="Duración de la epoch; 0 la desactiva")
    parser.add_argument("--budget", type=int, help="Presupuesto de coincidencias por entrada; 0 lo desactiva")
    parser.add_argument("--snapshot-path", help="Fichero del snapshot del mapping")
    parser.add_argument("--group", choices=["production", "test"], help="Grupo del OT (modo D)")
    parser.set_defaults(handler=run)
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    return {
        "listen": args.listen,
        "mode": args.mode,
        "fp": args.fp,
        "blind_bits": args.blind_bits,
        "capacity": args.capacity,
        "epoch_seconds": args.epoch_seconds,
        "budget": args.budget,
        "snapshot_path": args.snapshot_path,
        "group": args.group,
        "log_dir": args.log_dir,
    }


def run(args: argparse.Namespace) -> int:
    try:
        config = VaultConfig.load(args.config, _overrides(args))
    except ValueError as e:
        print(f"Configuración inválida: {e}")
        return EXIT_CONFIG

    setup_logging(config.log_dir, args.log_level)
    try:
        vault = PseudonymVault(config)
        vault.restore()
    except VaultError as e:
        log_error(e, "pvault_start")
        print(f"No se pudo cargar el snapshot: {e}")
        return EXIT_CONFIG

    params = vault.params
    print(f"PVault modo {config.mode.value} en {config.listen} "
          f"(k*={params.k_star}, m={params.m}, b={params.b}, entradas={len(vault)})")
    try:
        asyncio.run(serve_tcp(vault))
    except KeyboardInterrupt:
        logger.info("PVault detenido por el usuario")
    except OSError as e:
        log_error(e, "pvault_serve")
        print(f"Error del servidor: {e}")
        return EXIT_RUNTIME
    return EXIT_OK
