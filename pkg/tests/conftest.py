import asyncio
import os
import sys
import time

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from config import DepositorConfig, VaultConfig  # noqa: E402
from crypto import MasterSecret  # noqa: E402
from depositor import Depositor  # noqa: E402
from protocol import Mode  # noqa: E402
from pvault import PseudonymVault  # noqa: E402

GOLDEN_DIR = os.path.join(os.path.dirname(__file__), "golden")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def master():
    return MasterSecret(bytes(range(32)))


def vault_config(mode, **overrides) -> VaultConfig:
    values = dict(mode=Mode.parse(mode), fp=0.1, capacity=256, group="test", snapshot_path=None)
    values.update(overrides)
    return VaultConfig(**values)


def depositor_config(mode, **overrides) -> DepositorConfig:
    values = dict(mode=Mode.parse(mode), fp=0.1, capacity=256, group="test", qid_paths=["src.ip"],
                  retry_attempts=1, retry_delay=0.0)
    values.update(overrides)
    return DepositorConfig(**values)


def in_process(vault: PseudonymVault, capture=None):
    async def factory():
        return vault.connect_in_process(capture)

    return factory


async def connected(vault: PseudonymVault, master: MasterSecret, rng=None, capture=None, clock=time.time,
                    **overrides) -> Depositor:
    """Depositor con los mismos parámetros que el PVault, ya conectado"""
    cfg = vault.config
    depositor = Depositor(
        depositor_config(cfg.mode, fp=cfg.fp, capacity=cfg.capacity, blind_bits=cfg.blind_bits,
                         group=cfg.group, epoch_seconds=cfg.epoch_seconds, **overrides),
        master, in_process(vault, capture), rng=rng, clock=clock)
    await depositor.connect()
    return depositor


def run(coro):
    return asyncio.run(coro)
