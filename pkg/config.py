"""
Configuración
=============

Tres dataclasses, una por proceso:

- VaultConfig: daemon del PVault
- DepositorConfig: cliente Depositor
- SimConfig: simulador y banco de medidas

Precedencia: flag de CLI > entorno (.env) > fichero JSON/TOML > defecto.

Variables de entorno reconocidas:
    PEEPLL_MASTER_KEY, PEEPLL_PVAULT, PEEPLL_LISTEN, PEEPLL_MODE, PEEPLL_FP,
    PEEPLL_BLIND_BITS, PEEPLL_CAPACITY, PEEPLL_EPOCH_SECONDS, PEEPLL_BUDGET,
    PEEPLL_BUDGET_COST, PEEPLL_SNAPSHOT, PEEPLL_GROUP, PEEPLL_LOG_DIR

Los parámetros Bloom se derivan igual en ambos lados a partir de
(fp, capacity, blind_bits).
"""

from __future__ import annotations

import json
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv

from crypto import GroupParams, group_for
from protocol import Mode, parse_address
from secure_index import BloomParams
from utility import PeepllError

ENV_PREFIX = "PEEPLL_"

# campo -> variable de entorno (sin prefijo)
_VAULT_ENV = {
    "listen": "LISTEN",
    "mode": "MODE",
    "fp": "FP",
    "blind_bits": "BLIND_BITS",
    "capacity": "CAPACITY",
    "epoch_seconds": "EPOCH_SECONDS",
    "budget": "BUDGET",
    "budget_cost": "BUDGET_COST",
    "snapshot_path": "SNAPSHOT",
    "group": "GROUP",
    "log_dir": "LOG_DIR",
}

_DEPOSITOR_ENV = {
    "master_key": "MASTER_KEY",
    "pvault": "PVAULT",
    "mode": "MODE",
    "fp": "FP",
    "blind_bits": "BLIND_BITS",
    "capacity": "CAPACITY",
    "epoch_seconds": "EPOCH_SECONDS",
    "group": "GROUP",
    "log_dir": "LOG_DIR",
}


class ConfigError(PeepllError, ValueError):
    """Configuración inválida; el CLI la traduce al código de salida 2"""

    code = "config"


def read_config_file(path: Optional[str]) -> Dict[str, Any]:
    """Lee un fichero JSON o TOML; sin ruta devuelve {}"""
    if not path:
        return {}
    file = Path(path)
    if not file.exists():
        raise ConfigError(f"No existe el fichero de configuración: {path}")
    if file.suffix.lower() == ".toml":
        with open(file, "rb") as f:
            return tomllib.load(f)
    with open(file, "r") as f:
        data = json.load(f)
    if not isinstance(data, dict):
        raise ConfigError(f"La configuración debe ser un objeto: {path}")
    return data


def read_env(mapping: Dict[str, str]) -> Dict[str, str]:
    load_dotenv()
    values = {}
    for name, suffix in mapping.items():
        value = os.getenv(ENV_PREFIX + suffix)
        if value not in (None, ""):
            values[name] = value
    return values


def _integer(value: Any) -> int:
    """Entero exacto: 1.5 o "1.5" se rechazan en vez de truncarse"""
    if isinstance(value, bool):
        raise TypeError("booleano en un campo entero")
    if isinstance(value, float):
        if not value.is_integer():
            raise ValueError("valor no entero")
        return int(value)
    if isinstance(value, str):
        return int(value.strip())
    return int(value)


def _coerce(cls, data: Dict[str, Any]) -> Dict[str, Any]:
    """Convierte cadenas (entorno, CLI) al tipo del campo"""
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"Campos de configuración desconocidos: {sorted(unknown)}")
    result = {}
    for name, value in data.items():
        if value is None:
            result[name] = None
            continue
        kind = str(known[name].type)
        try:
            if name == "mode":
                value = Mode.parse(value)
            elif kind.startswith("Optional[int]") or kind == "int":
                value = _integer(value)
            elif kind == "float":
                value = float(value)
            elif kind == "bool" and isinstance(value, str):
                value = value.strip().lower() in ("1", "true", "yes", "on")
            elif kind.startswith("List[float]") and isinstance(value, str):
                value = [float(v) for v in value.split(",") if v.strip()]
            elif kind.startswith("List[str]") and isinstance(value, str):
                value = [v.strip() for v in value.split(",") if v.strip()]
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Valor inválido para {name}: {value!r}") from e
        result[name] = value
    return result


def _layered(cls, path: Optional[str], env: Dict[str, str], overrides: Optional[Dict[str, Any]]):
    data = _coerce(cls, read_config_file(path))
    data.update(_coerce(cls, read_env(env)))
    if overrides:
        data.update(_coerce(cls, {k: v for k, v in overrides.items() if v is not None}))
    config = cls(**data)
    config.validate()
    return config


def _check_fp(fp: float) -> None:
    if not 0.0 < fp < 1.0:
        raise ValueError(f"fp debe estar en (0, 1): {fp}")


def _check_group(group: str) -> None:
    if group not in ("production", "test"):
        raise ValueError(f"group debe ser production o test: {group}")


@dataclass
class VaultConfig:
    listen: str = "127.0.0.1:7474"
    mode: Mode = Mode.SECURE_INDEX
    fp: float = 0.01
    blind_bits: Optional[int] = None
    capacity: int = 4096
    epoch_seconds: int = 0
    budget: int = 0
    budget_cost: float = 1.0
    snapshot_path: Optional[str] = "Data/vault_snapshot.json"
    group: str = "production"
    log_dir: str = "Data/Logs"

    def validate(self) -> None:
        _check_fp(self.fp)
        _check_group(self.group)
        parse_address(self.listen)
        if self.capacity <= 0:
            raise ValueError("capacity debe ser positiva")
        if self.epoch_seconds < 0:
            raise ValueError("epoch_seconds no puede ser negativo")
        if self.budget < 0:
            raise ValueError("budget no puede ser negativo")
        if self.budget_cost < 0:
            raise ValueError("budget_cost no puede ser negativo")
        if self.blind_bits is not None and self.blind_bits < 0:
            raise ValueError("blind_bits no puede ser negativo")
        self.bloom_params()

    def bloom_params(self) -> BloomParams:
        return BloomParams.for_capacity(self.fp, self.capacity, self.blind_bits)

    def group_params(self) -> GroupParams:
        return group_for(self.group)

    @classmethod
    def load(cls, path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> "VaultConfig":
        return _layered(cls, path, _VAULT_ENV, overrides)


@dataclass
class DepositorConfig:
    """
    Esquema del fichero (JSON o TOML):
        master_key: ruta del secreto maestro (32 bytes o 64 hex)
        pvault: "host:port" del PVault
        mode: A | B | C | D
        qid_paths: rutas con puntos de los campos QID ("src.ip")
        fp, capacity, blind_bits, group, epoch_seconds: espejo del PVault
        dummy_seed: semilla opcional para los dummies (solo tests)
    """

    master_key: str = "Data/master.key"
    pvault: str = "127.0.0.1:7474"
    mode: Mode = Mode.SECURE_INDEX
    qid_paths: List[str] = field(default_factory=list)
    fp: float = 0.01
    capacity: int = 4096
    blind_bits: Optional[int] = None
    group: str = "production"
    epoch_seconds: int = 0
    dummy_seed: Optional[int] = None
    buffer_size: int = 10000
    retry_attempts: int = 5
    retry_delay: float = 0.2
    log_dir: str = "Data/Logs"

    def validate(self) -> None:
        _check_fp(self.fp)
        _check_group(self.group)
        parse_address(self.pvault)
        if self.capacity <= 0:
            raise ValueError("capacity debe ser positiva")
        if self.epoch_seconds < 0:
            raise ValueError("epoch_seconds no puede ser negativo")
        if self.buffer_size <= 0:
            raise ValueError("buffer_size debe ser positivo")
        if self.retry_attempts < 0 or self.retry_delay < 0:
            raise ValueError("retry_attempts y retry_delay no pueden ser negativos")
        if not all(isinstance(p, str) and p for p in self.qid_paths):
            raise ValueError("qid_paths debe ser una lista de rutas no vacías")
        self.bloom_params()

    def bloom_params(self) -> BloomParams:
        return BloomParams.for_capacity(self.fp, self.capacity, self.blind_bits)

    def group_params(self) -> GroupParams:
        return group_for(self.group)

    @classmethod
    def load(cls, path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> "DepositorConfig":
        return _layered(cls, path, _DEPOSITOR_ENV, overrides)


@dataclass
class SimConfig:
    """
    Configuración del simulador

    seed gobierna la aleatoriedad criptográfica (claves, pseudónimos,
    trapdoors, cegado); workload_seed gobierna la carga (QIDs, eventos).
    """

    num_depositors: int = 3
    num_events: int = 1000
    qid_universe_size: int = 1000
    qid_distribution: str = "uniform"
    zipf_s: float = 1.2
    qids_per_event: int = 1
    mode: Mode = Mode.HMAC
    fp: float = 0.01
    fp_list: List[float] = field(default_factory=lambda: [
        0.0316, 0.0447, 0.0548, 0.0632, 0.0707, 0.1, 0.1414, 0.1732, 0.2, 0.2236,
        0.2449, 0.2739, 0.3162, 0.3873, 0.4472])
    blind_bits: Optional[int] = None
    capacity: int = 0
    budget: int = 0
    epochs: int = 1
    prefill_count: int = 100
    trials: int = 50
    prefilled: bool = False
    group: Optional[str] = None
    seed: int = 0
    workload_seed: Optional[int] = None

    def validate(self) -> None:
        _check_fp(self.fp)
        for fp in self.fp_list:
            _check_fp(fp)
        if self.group is not None:
            _check_group(self.group)
        if self.num_depositors <= 0:
            raise ValueError("num_depositors debe ser positivo")
        if self.num_events < 0:
            raise ValueError("num_events no puede ser negativo")
        if self.qid_universe_size <= 0:
            raise ValueError("qid_universe_size debe ser positivo")
        if self.qid_distribution not in ("uniform", "zipf"):
            raise ValueError("qid_distribution debe ser uniform o zipf")
        if self.qid_distribution == "zipf" and self.zipf_s <= 1.0:
            raise ValueError("zipf_s debe ser > 1")
        if self.qids_per_event <= 0:
            raise ValueError("qids_per_event debe ser positivo")
        if self.capacity < 0 or self.budget < 0:
            raise ValueError("capacity y budget no pueden ser negativos")
        if self.epochs <= 0:
            raise ValueError("epochs debe ser positivo")
        if self.prefill_count < 0 or self.trials <= 0:
            raise ValueError("prefill_count >= 0 y trials > 0")

    @property
    def effective_workload_seed(self) -> int:
        return self.seed if self.workload_seed is None else self.workload_seed

    @property
    def effective_group(self) -> str:
        """Sin grupo explícito: producción en modo D (colisiones de índice OT despreciables), prueba en el resto"""
        if self.group is not None:
            return self.group
        return "production" if self.mode is Mode.SECURE_INDEX_OT else "test"

    @property
    def effective_capacity(self) -> int:
        """Sin capacidad explícita cabe cada evento con todos sus QIDs y dummies"""
        if self.capacity:
            return self.capacity
        return max(16, 2 * self.num_events * self.qids_per_event + self.prefill_count)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["mode"] = self.mode.value
        return data

    @classmethod
    def load(cls, path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> "SimConfig":
        return _layered(cls, path, {}, overrides)
