"""
Primitivas Criptográficas
=========================

Todo lo determinista y con clave que comparten Depositors y PVault:

- tag: Mac(k, m) instanciado como HMAC-SHA256
- kdf: derivación de etiquetas de epoch t_i y claves de índice k_1..k_r
- prf_position: PRF -> posición en un filtro de m bits
- fresh_pseudonym: 16 bytes verdaderamente aleatorios
- GroupParams: grupo cíclico de orden primo para el protocolo OT

El secreto maestro se reparte una sola vez entre Depositors y nunca
viaja al PVault.

Ejemplo de uso:
-------------
```python
master = MasterSecret.generate()
t_3 = EpochTag.derive(master, 3)
token = tag(t_3.tag_bytes, b"10.0.0.1")
```
"""

from __future__ import annotations

import hashlib
import hmac
import os
import secrets
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

from utility import PeepllError

KEY_BYTES = 32
PSEUDONYM_BYTES = 16
PSEUDONYM_PREFIX = "pn:"

EPOCH_LABEL = "epoch"
INDEX_KEY_LABEL = "index-key"


class CryptoError(PeepllError):
    code = "crypto"


def tag(key: bytes, message: bytes) -> bytes:
    """Mac(k, m) = HMAC-SHA256; fijo por compatibilidad de cable"""
    if len(key) != KEY_BYTES:
        raise ValueError(f"La clave debe tener {KEY_BYTES} bytes")
    return hmac.new(key, message, hashlib.sha256).digest()


@dataclass(frozen=True)
class MasterSecret:
    """Secreto k compartido por todos los Depositors (32 bytes)"""

    key_bytes: bytes

    def __post_init__(self):
        if len(self.key_bytes) != KEY_BYTES:
            raise CryptoError(f"El secreto maestro debe tener {KEY_BYTES} bytes")

    def __repr__(self) -> str:
        return "MasterSecret(<oculto>)"

    @classmethod
    def generate(cls) -> "MasterSecret":
        return cls(secrets.token_bytes(KEY_BYTES))

    @classmethod
    def from_file(cls, path: str) -> "MasterSecret":
        """Acepta 32 bytes crudos o 64 caracteres hex"""
        raw = Path(path).read_bytes()
        if len(raw) == KEY_BYTES:
            return cls(raw)
        text = raw.strip()
        if len(text) == 2 * KEY_BYTES:
            try:
                return cls(bytes.fromhex(text.decode("ascii")))
            except (UnicodeDecodeError, ValueError) as e:
                raise CryptoError(f"Fichero de clave hex inválido: {path}") from e
        raise CryptoError(f"Fichero de clave con longitud inválida: {path}")

    def save(self, path: str) -> None:
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        with open(path, "w") as f:
            f.write(self.key_bytes.hex() + "\n")
        os.chmod(path, 0o600)


def kdf(master: MasterSecret, label: str, index: int) -> bytes:
    """tag(master, label || 0x00 || index en 8 bytes big-endian)"""
    if not label:
        raise ValueError("label no puede estar vacío")
    if index < 0:
        raise ValueError("index debe ser no negativo")
    message = label.encode("utf-8") + b"\x00" + index.to_bytes(8, "big")
    return tag(master.key_bytes, message)


@dataclass(frozen=True)
class EpochTag:
    epoch_index: int
    tag_bytes: bytes

    @classmethod
    def derive(cls, master: MasterSecret, epoch_index: int) -> "EpochTag":
        return cls(epoch_index, kdf(master, EPOCH_LABEL, epoch_index))


@dataclass(frozen=True)
class IndexKeySet:
    """Claves k_1..k_r del índice seguro; r par para subconjuntos r/2 exactos"""

    keys: Tuple[bytes, ...]

    def __post_init__(self):
        if not self.keys or len(self.keys) % 2:
            raise ValueError("El número de claves de índice debe ser par y positivo")

    @property
    def r(self) -> int:
        return len(self.keys)

    def __len__(self) -> int:
        return len(self.keys)

    def __getitem__(self, i: int) -> bytes:
        return self.keys[i]

    @classmethod
    def derive(cls, master: MasterSecret, r: int) -> "IndexKeySet":
        return cls(tuple(kdf(master, INDEX_KEY_LABEL, i) for i in range(r)))


def prf_position(key: bytes, data: bytes, m: int) -> int:
    """Posición en [0, m): entero big-endian de tag(key, data) mod m"""
    if m < 2:
        raise ValueError("m debe ser >= 2")
    return int.from_bytes(tag(key, data), "big") % m


# Aleatoriedad. Sin rng se usa el CSPRNG del sistema; con un
# numpy.random.Generator sembrado los runs del harness son reproducibles.

def random_bytes(n: int, rng: Optional[np.random.Generator] = None) -> bytes:
    if rng is None:
        return secrets.token_bytes(n)
    return rng.bytes(n)


def random_below(n: int, rng: Optional[np.random.Generator] = None) -> int:
    if n <= 0:
        raise ValueError("n debe ser positivo")
    if rng is None:
        return secrets.randbelow(n)
    width = (n.bit_length() + 7) // 8 + 8
    return int.from_bytes(rng.bytes(width), "big") % n


def random_positions(m: int, count: int, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """count posiciones uniformes en [0, m), con reemplazo"""
    if count <= 0:
        return np.zeros(0, dtype=np.int64)
    if rng is None:
        # sesgo de la reducción módulo m < 2^32 despreciable con 64 bits
        raw = np.frombuffer(secrets.token_bytes(8 * count), dtype=np.uint64)
        return (raw % np.uint64(m)).astype(np.int64)
    return rng.integers(0, m, size=count, dtype=np.int64)


def random_subset(n: int, k: int, rng: Optional[np.random.Generator] = None) -> Sequence[int]:
    """Subconjunto uniforme de tamaño k de {0..n-1}, ordenado"""
    if rng is None:
        return sorted(secrets.SystemRandom().sample(range(n), k))
    return sorted(int(i) for i in rng.choice(n, size=k, replace=False))


def fresh_pseudonym(rng: Optional[np.random.Generator] = None) -> bytes:
    """
    16 bytes aleatorios, sin relación con ningún QID.

    El rng sembrado solo lo usa el harness; en producción siempre CSPRNG.
    """
    try:
        return random_bytes(PSEUDONYM_BYTES, rng)
    except Exception as e:
        raise CryptoError("Fallo del generador aleatorio") from e


def format_pseudonym(pseudonym: bytes) -> str:
    return PSEUDONYM_PREFIX + pseudonym.hex()


def parse_pseudonym(text: str) -> bytes:
    if not text.startswith(PSEUDONYM_PREFIX):
        raise ValueError("No es un pseudónimo")
    value = bytes.fromhex(text[len(PSEUDONYM_PREFIX):])
    if len(value) != PSEUDONYM_BYTES:
        raise ValueError("Longitud de pseudónimo inválida")
    return value


# ---------------------------------------------------------------------------
# Grupo de orden primo
# ---------------------------------------------------------------------------

class GroupProfile(Enum):
    PRODUCTION = "production"
    TEST = "test"


@dataclass(frozen=True)
class GroupParams:
    """
    Subgrupo de orden primo q de Z_p* con p = 2q + 1 (primo seguro).

    Los elementos se serializan como enteros big-endian de longitud fija.
    """

    name: str
    p: int
    q: int
    g: int

    identity = 1

    @property
    def element_bytes(self) -> int:
        return (self.p.bit_length() + 7) // 8

    def exp(self, base: int, exponent: int) -> int:
        return pow(base, exponent % self.q, self.p)

    def mul(self, a: int, b: int) -> int:
        return (a * b) % self.p

    def inverse(self, a: int) -> int:
        return pow(a, -1, self.p)

    def div(self, a: int, b: int) -> int:
        return (a * self.inverse(b)) % self.p

    def is_element(self, x: int) -> bool:
        return 1 <= x < self.p and pow(x, self.q, self.p) == 1

    def encode(self, x: int) -> bytes:
        return x.to_bytes(self.element_bytes, "big")

    def decode(self, data: bytes) -> int:
        if len(data) != self.element_bytes:
            raise CryptoError("Codificación de elemento con longitud inválida")
        x = int.from_bytes(data, "big")
        if not self.is_element(x):
            raise CryptoError("El valor no pertenece al grupo")
        return x

    def random_scalar(self, rng: Optional[np.random.Generator] = None) -> int:
        """Escalar uniforme en [1, q)"""
        return random_below(self.q - 1, rng) + 1


# RFC 3526 - 3072-bit MODP Group (≈128 bits de seguridad)
_MODP_3072 = int("""
    FFFFFFFF FFFFFFFF C90FDAA2 2168C234 C4C6628B 80DC1CD1
    29024E08 8A67CC74 020BBEA6 3B139B22 514A0879 8E3404DD
    EF9519B3 CD3A431B 302B0A6D F25F1437 4FE1356D 6D51C245
    E485B576 625E7EC6 F44C42E9 A637ED6B 0BFF5CB6 F406B7ED
    EE386BFB 5A899FA5 AE9F2411 7C4B1FE6 49286651 ECE45B3D
    C2007CB8 A163BF05 98DA4836 1C55D39A 69163FA8 FD24CF5F
    83655D23 DCA3AD96 1C62F356 208552BB 9ED52907 7096966D
    670C354E 4ABC9804 F1746C08 CA18217C 32905E46 2E36CE3B
    E39E772C 180E8603 9B2783A2 EC07A28F B5C55DF0 6F4C52C9
    DE2BCBF6 95581718 3995497C EA956AE5 15D22618 98FA0510
    15728E5A 8AAAC42D AD33170D 04507A33 A85521AB DF1CBA64
    ECFB8504 58DBEF0A 8AEA7157 5D060C7D B3970F85 A6E1E4C7
    ABF5AE8C DB0933D7 1E8C94E0 4A25619D CEE3D226 1AD2EE6B
    F12FFA06 D98A0864 D8760273 3EC86A64 521F2B18 177B200C
    BBE11757 7A615D6C 770988C0 BAD946E2 08E24FA0 74E5AB31
    43DB5BFC E0FD108E 4B82D120 A93AD2CA FFFFFFFF FFFFFFFF
""".replace(" ", "").replace("\n", ""), 16)

# g = 4 = 2^2 es un residuo cuadrático distinto de 1: genera el subgrupo de orden q
PRODUCTION_GROUP = GroupParams("production", _MODP_3072, (_MODP_3072 - 1) // 2, 4)

# p = 2039 = 2 * 1019 + 1; orden 1019 permite logaritmos discretos por fuerza bruta
TEST_GROUP = GroupParams("test", 2039, 1019, 4)


def group_for(profile) -> GroupParams:
    profile = GroupProfile(profile.value if isinstance(profile, GroupProfile) else profile)
    return PRODUCTION_GROUP if profile is GroupProfile.PRODUCTION else TEST_GROUP


def group_exp(group: GroupParams, base: int, exponent: int) -> int:
    return group.exp(base, exponent)


def group_mul(group: GroupParams, a: int, b: int) -> int:
    return group.mul(a, b)


def group_div(group: GroupParams, a: int, b: int) -> int:
    return group.div(a, b)
