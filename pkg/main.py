"""
Punto de entrada

    python main.py pvault --mode C --listen 127.0.0.1:7474
    python main.py depositor --config Data/depositor.json --in eventos.jsonl --out -
    python main.py peepll-sim fig4 --trials 50 --out fig4.csv --plot fig4.png
"""

import argparse
import logging
import sys
from typing import List, Optional

from commands import depositor, sim, vault


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="peepll",
        description="Pseudonimización de eventos con un PVault y Depositors",
    )
    parser.add_argument("--log-dir", help="Directorio de logs (defecto Data/Logs)")
    parser.add_argument("-v", "--verbose", action="store_true", help="Registra también mensajes DEBUG")
    subparsers = parser.add_subparsers(dest="command", required=True)
    vault.add_parser(subparsers)
    depositor.add_parser(subparsers)
    sim.add_parser(subparsers)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    args.log_level = logging.DEBUG if args.verbose else logging.INFO
    return args.handler(args)


if __name__ == "__main__":
    sys.exit(main())
