import math
from typing import Iterable, Tuple

import numpy as np


class PeepllError(Exception):
    """Raíz de los errores del framework. `code` viaja en los mensajes Error."""

    code = "internal"

    def __init__(self, message: str = "", code: str = None):
        super().__init__(message)
        if code:
            self.code = code


def calculate_capacity(r_events: float, p_retention: float, c: float) -> int:
    """
    Número esperado de identificadores únicos a indexar
    n = r * p * c

    - r: tasa de eventos observada (eventos / tiempo)
    - p: periodo de retención (tiempo)
    - c: identificadores por evento
    """
    if r_events <= 0 or p_retention <= 0 or c <= 0:
        raise ValueError("r_events, p_retention y c deben ser positivos")
    return max(1, math.ceil(r_events * p_retention * c))


def calculate_plain_hash_count(fp: float) -> int:
    """k = -log2(fp), sin compensar el trapdoor parcial"""
    _check_rate(fp)
    return max(1, math.ceil(-math.log2(fp) - 1e-9))


def calculate_hash_count(fp: float) -> int:
    """
    Número de claves de índice compensado
    k* = -2 * log2(fp), redondeado al siguiente par

    Con trapdoors parciales de k*/2 posiciones la tasa efectiva vuelve a ser
    fp' = 2^(-k*/2). El par garantiza subconjuntos exactos de k*/2 claves.
    """
    _check_rate(fp)
    k_star = max(2, math.ceil(-2 * math.log2(fp) - 1e-9))
    if k_star % 2:
        k_star += 1
    return k_star


def calculate_filter_size(n: int, k_star: int) -> int:
    """m = n * k* / ln 2, nunca menor de 8 bits"""
    if n <= 0 or k_star <= 0:
        raise ValueError("n y k* deben ser positivos")
    return max(8, math.ceil(n * k_star / math.log(2)))


def calculate_blinding_bits(m: int, k_star: int, rate: float) -> int:
    """
    Bits de cegado para que un filtro almacenado (un solo identificador)
    coincida con un trapdoor parcial ajeno con probabilidad `rate`.

    Densidad objetivo: rho = rate^(2/k*), porque el trapdoor parcial
    comprueba k*/2 posiciones. Tras d sorteos uniformes con reemplazo la
    densidad es 1 - (1 - 1/m)^d; los k* bits del propio identificador
    cuentan como sorteos.
    """
    _check_rate(rate)
    if m < 8 or k_star <= 0:
        raise ValueError("m >= 8 y k* > 0")
    density = rate ** (2.0 / k_star)
    draws = math.log1p(-density) / math.log1p(-1.0 / m)
    return int(min(m - 1, max(0, math.ceil(draws) - k_star)))


def effective_rate(k_star: int) -> float:
    """fp' = 2^(-k*/2)"""
    return 2.0 ** (-k_star / 2)


def summarize(values: Iterable[float]) -> Tuple[float, float]:
    """Media y desviación típica muestral (0 con menos de dos valores)"""
    data = np.asarray(list(values), dtype=float)
    if data.size == 0:
        return 0.0, 0.0
    stddev = float(np.std(data, ddof=1)) if data.size > 1 else 0.0
    return float(np.mean(data)), stddev


def _check_rate(rate: float) -> None:
    if not 0.0 < rate < 1.0:
        raise ValueError(f"La tasa de falsos positivos debe estar en (0, 1): {rate}")
