"""
Transferencia Inconsciente 1-de-N
=================================

Emisor = PVault, receptor = Depositor. Protocolo de clave Diffie-Hellman
simple sobre un grupo de orden primo:

    Inicialización (una vez): y aleatorio, s = g^y, t = s^y
    Receptor (índice i):      x aleatorio, r = s^i * g^x, k_i = H(s || r || s^x)
    Emisor (j = 0..N-1):      k_j = H(s || r || r^y / t^j)
    Transferencia:            C_j = Enc(k_j, M_j)

Solo k_i coincide en ambos lados. H es SHA-256 sobre las codificaciones
de longitud fija de s, r y el elemento DH, cada una precedida de su
longitud en 4 bytes big-endian.

Para que el receptor localice su entrada sin ver las etiquetas ajenas,
cada ciphertext lleva un OT-INDEX = tag(k_j, discriminador_j). En el PVault
el discriminador es el HMAC de la entrada.

Índices en el pseudonym mapping:
--------------------------------
El receptor no conoce la posición de su entrada entre las coincidencias.
Por eso el índice de cada entrada es index_for(hmac) = int(hmac) mod q:
el receptor elige i a partir de su propio HMAC y el emisor deriva la clave
de cada entrada en su propio índice. El receptor obtiene una única clave.

Enc es AES-GCM con nonce cero (las claves son de un solo uso) y el
OT-INDEX como datos asociados.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from crypto import KEY_BYTES, CryptoError, GroupParams, tag
from utility import PeepllError

logger = logging.getLogger(__name__)

ZERO_NONCE = bytes(12)


class OtError(PeepllError):
    code = "protocol"


class OtProtocolError(OtError):
    """La entrada localizada por OT-INDEX no se autentica con la clave del receptor"""


@dataclass(frozen=True)
class OtSenderState:
    group: GroupParams
    y: int = field(repr=False)
    s: int
    t: int

    @property
    def public_message(self) -> Dict[str, object]:
        """Cuerpo de OtPublicKey: s codificado y nombre del grupo"""
        return {"s": self.group.encode(self.s), "group": self.group.name}


@dataclass(frozen=True)
class OtReceiverState:
    group: GroupParams
    s: int
    i: int
    x: int = field(repr=False)
    r: int
    key: bytes = field(repr=False)


@dataclass(frozen=True)
class OtEntry:
    ot_index: bytes
    ciphertext: bytes


@dataclass(frozen=True)
class OtCiphertextSet:
    entries: Tuple[OtEntry, ...] = ()

    def __len__(self) -> int:
        return len(self.entries)

    def find(self, ot_index: bytes) -> List[OtEntry]:
        return [entry for entry in self.entries if entry.ot_index == ot_index]


def derive_key(group: GroupParams, s: int, r: int, element: int) -> bytes:
    """H(s || r || elemento), con prefijo de longitud por campo"""
    digest = hashlib.sha256()
    for value in (s, r, element):
        encoded = group.encode(value)
        digest.update(struct.pack(">I", len(encoded)))
        digest.update(encoded)
    return digest.digest()


def sender_init(group: GroupParams, rng: Optional[np.random.Generator] = None) -> OtSenderState:
    """Estado del emisor, reutilizable para todas las transferencias"""
    y = group.random_scalar(rng)
    s = group.exp(group.g, y)
    return OtSenderState(group=group, y=y, s=s, t=group.exp(s, y))


def receiver_derive(group: GroupParams, s: int, i: int, n: int,
                    rng: Optional[np.random.Generator] = None) -> OtReceiverState:
    """r = s^i * g^x y k_i = H(s || r || s^x); x nuevo en cada transferencia"""
    if not 0 <= i < n:
        raise ValueError(f"Índice fuera de rango: 0 <= i < {n}")
    if not group.is_element(s):
        raise OtError("Clave pública del emisor fuera del grupo")
    x = group.random_scalar(rng)
    r = group.mul(group.exp(s, i), group.exp(group.g, x))
    return OtReceiverState(group=group, s=s, i=i, x=x, r=r,
                           key=derive_key(group, s, r, group.exp(s, x)))


def _check_point(state: OtSenderState, r: int) -> None:
    if not state.group.is_element(r):
        raise OtError("Punto del receptor fuera del grupo")


def sender_derive_keys(state: OtSenderState, r: int, n: int) -> List[bytes]:
    """k_j = H(s || r || r^y / t^j) para j = 0..n-1"""
    _check_point(state, r)
    group = state.group
    t_inv = group.inverse(state.t)
    element = group.exp(r, state.y)
    keys = []
    for _ in range(n):
        keys.append(derive_key(group, state.s, r, element))
        element = group.mul(element, t_inv)
    return keys


def sender_derive_keys_at(state: OtSenderState, r: int, indices: Iterable[int]) -> List[bytes]:
    """Claves en índices arbitrarios del espacio [0, q)"""
    _check_point(state, r)
    group = state.group
    r_y = group.exp(r, state.y)
    t_inv = group.inverse(state.t)
    return [derive_key(group, state.s, r, group.mul(r_y, group.exp(t_inv, j))) for j in indices]


def index_for(group: GroupParams, discriminator: bytes) -> int:
    """Índice de una entrada en el espacio de la transferencia"""
    return int.from_bytes(discriminator, "big") % group.q


def seal(key: bytes, plaintext: bytes, ot_index: bytes) -> bytes:
    if len(key) != KEY_BYTES:
        raise ValueError(f"La clave debe tener {KEY_BYTES} bytes")
    return AESGCM(key).encrypt(ZERO_NONCE, plaintext, ot_index)


def unseal(key: bytes, ciphertext: bytes, ot_index: bytes) -> Optional[bytes]:
    """None si la autenticación falla"""
    try:
        return AESGCM(key).decrypt(ZERO_NONCE, ciphertext, ot_index)
    except InvalidTag:
        return None


def seal_entries(keys: Sequence[bytes], payloads: Sequence[Tuple[bytes, bytes]]) -> OtCiphertextSet:
    """Entrada j = (tag(k_j, discriminador_j), Enc(k_j, M_j))"""
    if len(keys) != len(payloads):
        raise ValueError("|keys| debe ser igual a |payloads|")
    entries = []
    for key, (discriminator, plaintext) in zip(keys, payloads):
        ot_index = tag(key, discriminator)
        entries.append(OtEntry(ot_index, seal(key, plaintext, ot_index)))
    return OtCiphertextSet(tuple(entries))


def receiver_open(ciphertexts: OtCiphertextSet, state: OtReceiverState,
                  own_discriminator: bytes) -> Optional[bytes]:
    """
    Localiza y descifra la entrada propia.

    Returns:
        El texto plano, o None si la entrada no está (QID nuevo)

    Raises:
        OtProtocolError: la entrada localizada no se autentica
    """
    ot_index = tag(state.key, own_discriminator)
    located = ciphertexts.find(ot_index)
    if not located:
        return None
    if len(located) > 1:
        raise OtProtocolError("OT-INDEX repetido en la respuesta")
    plaintext = unseal(state.key, located[0].ciphertext, ot_index)
    if plaintext is None:
        logger.warning("Fallo de autenticación en una entrada OT localizada")
        raise OtProtocolError("Fallo de autenticación en la entrada localizada")
    return plaintext


def decode_point(group: GroupParams, data: bytes) -> int:
    try:
        return group.decode(data)
    except CryptoError as e:
        raise OtError(str(e)) from e
