"""
Índice Seguro sobre Filtros de Bloom
====================================

Este módulo implementa el índice seguro de estilo Goh que usa el PVault
para buscar en el pseudonym mapping sin ver QIDs:

- Cada entrada guarda un filtro con el trapdoor completo (k* claves) de su
  token de epoch más b bits de cegado aleatorios.
- Una búsqueda envía un trapdoor parcial: k*/2 claves elegidas al azar.
- Una entrada coincide si todas las posiciones del trapdoor están a 1.

El cegado fuerza coincidencias espurias; su número se controla con b
(ver utility.calculate_blinding_bits). Nunca hay falsos negativos: el
trapdoor parcial es subconjunto del completo por construcción.

Formato de cable de un filtro:
    4 bytes big-endian con m, después ceil(m/8) bytes;
    bit i = (byte[i // 8] >> (7 - i % 8)) & 1

Clases:
-------
- BloomFilter: array de bits inmutable de longitud m
- BloomParams: parametrización (fp, n, k*, m, b)
- Trapdoor: posiciones derivadas de un QID bajo las claves de índice
- FilterMatrix: filas empaquetadas para búsquedas vectorizadas en el PM
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable, Optional, Tuple

import numpy as np

from crypto import IndexKeySet, prf_position, random_positions, random_subset
from utility import (
    PeepllError,
    calculate_blinding_bits,
    calculate_capacity,
    calculate_filter_size,
    calculate_hash_count,
    effective_rate,
)

MIN_FILTER_BITS = 8


class SecureIndexError(PeepllError):
    code = "malformed"


class BloomFilter:
    """Filtro de Bloom inmutable de m bits"""

    __slots__ = ("m", "bits")

    def __init__(self, m: int, bits: Optional[np.ndarray] = None):
        if m < MIN_FILTER_BITS:
            raise SecureIndexError(f"m debe ser >= {MIN_FILTER_BITS}")
        if bits is None:
            bits = np.zeros(m, dtype=bool)
        else:
            bits = np.array(bits, dtype=bool)
            if bits.shape != (m,):
                raise SecureIndexError("El array de bits no tiene longitud m")
        bits.setflags(write=False)
        self.m = m
        self.bits = bits

    @classmethod
    def empty(cls, m: int) -> "BloomFilter":
        return cls(m)

    @classmethod
    def from_positions(cls, m: int, positions: Iterable[int]) -> "BloomFilter":
        """Filtro con las posiciones dadas a 1 (admite la unión de varios trapdoors)"""
        bits = np.zeros(m, dtype=bool)
        idx = np.fromiter((int(p) for p in positions), dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= m):
            raise SecureIndexError("Posición fuera de [0, m)")
        bits[idx] = True
        return cls(m, bits)

    def with_positions(self, positions: Iterable[int]) -> "BloomFilter":
        bits = self.bits.copy()
        idx = np.fromiter((int(p) for p in positions), dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.m):
            raise SecureIndexError("Posición fuera de [0, m)")
        bits[idx] = True
        return BloomFilter(self.m, bits)

    @property
    def popcount(self) -> int:
        return int(np.count_nonzero(self.bits))

    def positions(self) -> np.ndarray:
        return np.flatnonzero(self.bits)

    def has_positions(self, positions: Iterable[int]) -> bool:
        idx = np.fromiter((int(p) for p in positions), dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.m):
            raise SecureIndexError("Posición fuera de [0, m)")
        return bool(np.all(self.bits[idx]))

    def issubset(self, other: "BloomFilter") -> bool:
        if other.m != self.m:
            raise SecureIndexError("Filtros de distinto tamaño")
        return not bool(np.any(self.bits & ~other.bits))

    def packed(self) -> bytes:
        return np.packbits(self.bits, bitorder="big").tobytes()

    def to_bytes(self) -> bytes:
        return struct.pack(">I", self.m) + self.packed()

    @classmethod
    def from_bytes(cls, data: bytes) -> "BloomFilter":
        if len(data) < 4:
            raise SecureIndexError("Filtro truncado")
        (m,) = struct.unpack(">I", data[:4])
        if m < MIN_FILTER_BITS:
            raise SecureIndexError("m inválido")
        body = data[4:]
        if len(body) != (m + 7) // 8:
            raise SecureIndexError("Longitud de filtro inconsistente con m")
        bits = np.unpackbits(np.frombuffer(body, dtype=np.uint8), bitorder="big")
        if np.any(bits[m:]):
            raise SecureIndexError("Bits de relleno distintos de cero")
        return cls(m, bits[:m])

    def __eq__(self, other) -> bool:
        return isinstance(other, BloomFilter) and self.m == other.m and bool(np.array_equal(self.bits, other.bits))

    def __repr__(self) -> str:
        return f"BloomFilter(m={self.m}, popcount={self.popcount})"


@dataclass(frozen=True)
class BloomParams:
    """
    Parametrización del índice seguro

    Atributos:
        fp: tasa de falsos positivos deseada (0, 1)
        n: identificadores únicos esperados, n = r * p * c
        r_events, p_retention, c: origen de n
        k_star: claves de índice, par, -2*log2(fp) redondeado
        m: bits por filtro, ceil(n * k* / ln 2)
        b: bits de cegado por filtro almacenado
    """

    fp: float
    n: int
    r_events: float
    p_retention: float
    c: float
    k_star: int
    m: int
    b: int

    def __post_init__(self):
        if self.k_star % 2:
            raise ValueError("k* debe ser par")
        if not 0 <= self.b < self.m:
            raise ValueError("b debe estar en [0, m)")
        if self.m < MIN_FILTER_BITS:
            raise ValueError("m debe ser >= 8")

    @property
    def fp_prime(self) -> float:
        """Tasa efectiva de un trapdoor parcial contra un filtro medio lleno"""
        return effective_rate(self.k_star)

    @property
    def handshake(self) -> dict:
        return {"k_star": self.k_star, "m": self.m, "b": self.b}

    @classmethod
    def for_capacity(cls, fp: float, n: int, blind_bits: Optional[int] = None) -> "BloomParams":
        return derive_params(fp, float(n), 1.0, 1.0, blind_bits=blind_bits)


def derive_params(
    fp: float,
    r_events: float,
    p_retention: float,
    c: float,
    blind_bits: Optional[int] = None,
) -> BloomParams:
    """
    Deriva los parámetros del índice

    Sin blind_bits explícito se elige b para que un trapdoor parcial ajeno
    coincida con cada entrada con probabilidad fp.
    """
    if not 0.0 < fp < 1.0:
        raise ValueError(f"fp fuera de (0, 1): {fp}")
    n = calculate_capacity(r_events, p_retention, c)
    k_star = calculate_hash_count(fp)
    m = calculate_filter_size(n, k_star)
    b = calculate_blinding_bits(m, k_star, fp) if blind_bits is None else int(blind_bits)
    return BloomParams(fp=fp, n=n, r_events=r_events, p_retention=p_retention, c=c,
                       k_star=k_star, m=m, b=b)


@dataclass(frozen=True)
class Trapdoor:
    positions: Tuple[int, ...]
    keys_used: Tuple[int, ...]

    def __post_init__(self):
        if len(self.positions) != len(self.keys_used):
            raise ValueError("|positions| debe ser igual a |keys_used|")

    def to_filter(self, m: int) -> BloomFilter:
        return BloomFilter.from_positions(m, self.positions)


def full_trapdoor(keys: IndexKeySet, qid_token: bytes, m: int) -> Trapdoor:
    """Trapdoor con todas las claves: posición i = f(k_i, token)"""
    used = tuple(range(len(keys)))
    return Trapdoor(tuple(prf_position(keys[i], qid_token, m) for i in used), used)


def partial_trapdoor(keys: IndexKeySet, qid_token: bytes, m: int,
                     rng: Optional[np.random.Generator] = None) -> Trapdoor:
    """Trapdoor con un subconjunto uniforme de k*/2 claves"""
    if len(keys) % 2:
        raise ValueError("k* debe ser par")
    used = tuple(random_subset(len(keys), len(keys) // 2, rng))
    return Trapdoor(tuple(prf_position(keys[i], qid_token, m) for i in used), used)


def blind(bloom: BloomFilter, b: int, rng: Optional[np.random.Generator] = None) -> BloomFilter:
    """Pone a 1 b posiciones uniformes (con reemplazo)"""
    if not 0 <= b < bloom.m:
        raise ValueError("b debe estar en [0, m)")
    if b == 0:
        return bloom
    return bloom.with_positions(random_positions(bloom.m, b, rng))


def build_stored_filter(keys: IndexKeySet, qid_token: bytes, m: int, b: int,
                        rng: Optional[np.random.Generator] = None) -> BloomFilter:
    """Filtro almacenado: trapdoor completo más b bits de cegado"""
    if not 0 <= b < m:
        raise ValueError("b debe estar en [0, m)")
    return blind(full_trapdoor(keys, qid_token, m).to_filter(m), b, rng)


def contains(bloom: BloomFilter, trapdoor: Trapdoor) -> bool:
    """True si todas las posiciones del trapdoor están a 1; sin falsos negativos"""
    return bloom.has_positions(trapdoor.positions)


def is_subset(inner: BloomFilter, outer: BloomFilter) -> bool:
    return inner.issubset(outer)


class FilterMatrix:
    """
    Filas de filtros empaquetados (uint8) para búsquedas vectorizadas.

    Las filas liberadas se reutilizan; la matriz crece duplicándose.
    """

    def __init__(self, m: int, initial_rows: int = 64):
        self.m = m
        self._width = (m + 7) // 8
        self._rows = np.zeros((max(1, initial_rows), self._width), dtype=np.uint8)
        self._active = np.zeros(self._rows.shape[0], dtype=bool)
        self._free = []
        self._used = 0

    def __len__(self) -> int:
        return int(np.count_nonzero(self._active))

    def insert(self, bloom: BloomFilter) -> int:
        if bloom.m != self.m:
            raise SecureIndexError("Filtro de tamaño distinto al configurado")
        if self._free:
            row = self._free.pop()
        else:
            if self._used == self._rows.shape[0]:
                self._grow()
            row = self._used
            self._used += 1
        self._rows[row] = np.frombuffer(bloom.packed(), dtype=np.uint8)
        self._active[row] = True
        return row

    def remove(self, row: int) -> None:
        if self._active[row]:
            self._active[row] = False
            self._rows[row] = 0
            self._free.append(row)

    def clear(self) -> None:
        self._rows[:] = 0
        self._active[:] = False
        self._free = []
        self._used = 0

    def rows_containing(self, positions: np.ndarray) -> np.ndarray:
        """Filas cuyo filtro tiene a 1 todas las posiciones (búsqueda C/D)"""
        rows = self._rows[:self._used]
        active = self._active[:self._used]
        positions = np.asarray(positions, dtype=np.int64)
        if positions.size == 0:
            return np.flatnonzero(active)
        masks = (0x80 >> (positions & 7)).astype(np.uint8)
        hits = (rows[:, positions >> 3] & masks) != 0
        return np.flatnonzero(hits.all(axis=1) & active)

    def rows_within(self, lookup: BloomFilter) -> np.ndarray:
        """Filas cuyo filtro es subconjunto del filtro de búsqueda (modo B)"""
        if lookup.m != self.m:
            raise SecureIndexError("Filtro de tamaño distinto al configurado")
        outside = np.invert(np.frombuffer(lookup.packed(), dtype=np.uint8))
        rows = self._rows[:self._used]
        inside = ~np.any(rows & outside, axis=1)
        return np.flatnonzero(inside & self._active[:self._used])

    def _grow(self) -> None:
        size = self._rows.shape[0]
        self._rows = np.concatenate([self._rows, np.zeros((size, self._width), dtype=np.uint8)])
        self._active = np.concatenate([self._active, np.zeros(size, dtype=bool)])
