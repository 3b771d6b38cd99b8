"""
Subcomando `depositor`: pseudonimiza un flujo JSON-lines

    python main.py depositor --config Data/depositor.json --in eventos.jsonl --out -

Con --generate-key escribe un secreto maestro nuevo en la ruta de
master_key y termina.
"""

import argparse
import asyncio
import logging
import os
import sys
from contextlib import ExitStack

from commands import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME
from config import DepositorConfig
from crypto import CryptoError, MasterSecret
from depositor import Depositor, DepositorError, VaultUnavailable, iterate_lines, tcp_transport_factory
from logger_config import log_error, setup_logging

logger = logging.getLogger(__name__)


def add_parser(subparsers) -> argparse.ArgumentParser:
    parser = subparsers.add_parser("depositor", help="Pseudonimiza registros JSON-lines contra un PVault")
    parser.add_argument("--config", help="Fichero JSON o TOML con DepositorConfig")
    parser.add_argument("--in", dest="input", default="-", help="Fichero de entrada JSON-lines o - (stdin)")
    parser.add_argument("--out", dest="output", default="-", help="Fichero de salida JSON-lines o - (stdout)")
    parser.add_argument("--pvault", help="host:port del PVault")
    parser.add_argument("--master-key", help="Ruta del secreto maestro")
    parser.add_argument("--generate-key", action="store_true",
                        help="Genera un secreto maestro en la ruta master_key y termina")
    parser.set_defaults(handler=run)
    return parser


async def _pseudonymise_stream(depositor: Depositor, source, sink) -> int:
    def write(line: str) -> None:
        sink.write(line + "\n")
        sink.flush()

    await depositor.open()
    try:
        return await depositor.run_pipeline(iterate_lines(source), write)
    finally:
        await depositor.close()


def run(args: argparse.Namespace) -> int:
    try:
        config = DepositorConfig.load(args.config, {"pvault": args.pvault, "master_key": args.master_key,
                                                    "log_dir": args.log_dir})
    except ValueError as e:
        print(f"Configuración inválida: {e}", file=sys.stderr)
        return EXIT_CONFIG

    setup_logging(config.log_dir, args.log_level)

    if args.generate_key:
        if os.path.exists(config.master_key):
            print(f"Ya existe un secreto maestro en {config.master_key}", file=sys.stderr)
            return EXIT_CONFIG
        MasterSecret.generate().save(config.master_key)
        print(f"Secreto maestro escrito en {config.master_key}", file=sys.stderr)
        return EXIT_OK

    try:
        master = MasterSecret.from_file(config.master_key)
    except (OSError, CryptoError) as e:
        log_error(e, "master_key")
        print(f"No se pudo leer el secreto maestro: {e}", file=sys.stderr)
        return EXIT_CONFIG

    depositor = Depositor(config, master, tcp_transport_factory(config.pvault))
    with ExitStack() as stack:
        try:
            source = sys.stdin if args.input == "-" else stack.enter_context(open(args.input, "r"))
            sink = sys.stdout if args.output == "-" else stack.enter_context(open(args.output, "w"))
        except OSError as e:
            print(f"No se pudo abrir el fichero: {e}", file=sys.stderr)
            return EXIT_CONFIG
        try:
            written = asyncio.run(_pseudonymise_stream(depositor, source, sink))
        except VaultUnavailable as e:
            log_error(e, "depositor")
            print(f"PVault no disponible: {e}", file=sys.stderr)
            return EXIT_RUNTIME
        except DepositorError as e:
            log_error(e, "depositor")
            print(f"Error [{e.code}]: {e}", file=sys.stderr)
            return EXIT_CONFIG if e.code == "mismatch" else EXIT_RUNTIME

    logger.info("%d registros pseudonimizados, %d fallidos", written, depositor.stats["failed"])
    return EXIT_RUNTIME if depositor.stats["failed"] else EXIT_OK
