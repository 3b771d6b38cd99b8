"""
Protocolo Depositor <-> PVault
==============================

Cada mensaje es un sobre {type, mode, epoch, body} serializado como JSON
canónico (claves ordenadas, sin espacios) terminado en '\\n', UTF-8,
máximo 1 MiB. Los campos binarios viajan en base64 y los pseudónimos en
hex. El cuerpo debe coincidir exactamente con el esquema del par
(type, mode): campos desconocidos o ausentes se rechazan.

Intercambios por modo:
----------------------
- A: LookupRequest{token} -> LookupResponse{token, pseudonym}. La creación
  se resuelve dentro del lookup, así hit y creación tienen la misma forma.
- B: LookupRequest{filter} -> LookupResponse{matches[item, pseudonym]},
  después CreateRequest{item, filter} -> CreateResponse{pseudonym}
- C: LookupRequest{filter} -> LookupResponse{matches[hmac, pseudonym]},
  después CreateRequest{hmac, filter} -> CreateResponse{pseudonym}
- D: OtTransferRequest{filter, r} -> OtTransferResponse{entries[idx, ct]},
  después CreateRequest como en C

Apertura de sesión: Hello{k_star, m, blind_bits, group, epoch_seconds}
-> EpochNotice (acuse con la epoch actual) en A/B/C, o OtPublicKey{s, group}
seguido de EpochNotice en D. Si los parámetros no coinciden el PVault
responde Error{code: "mismatch"}.

Transportes:
------------
- QueueTransport: par de colas asyncio en proceso (harness y tests)
- StreamTransport: TCP con líneas JSON (puerto por defecto 7474)
"""

from __future__ import annotations

import asyncio
import base64
import binascii
import json
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

from secure_index import BloomFilter, SecureIndexError
from utility import PeepllError

logger = logging.getLogger(__name__)

MAX_MESSAGE_BYTES = 1024 * 1024
DEFAULT_PORT = 7474
TAG_BYTES = 32
PSEUDONYM_BYTES = 16

ERROR_CODES = ("malformed", "capacity", "protocol", "mode", "mismatch")
GROUP_NAMES = ("production", "test")


class ProtocolError(PeepllError):
    code = "protocol"


class MalformedMessage(ProtocolError):
    code = "malformed"


class ConnectionClosed(ProtocolError):
    pass


class MessageType(Enum):
    HELLO = "Hello"
    LOOKUP_REQUEST = "LookupRequest"
    LOOKUP_RESPONSE = "LookupResponse"
    CREATE_REQUEST = "CreateRequest"
    CREATE_RESPONSE = "CreateResponse"
    OT_PUBLIC_KEY = "OtPublicKey"
    OT_TRANSFER_REQUEST = "OtTransferRequest"
    OT_TRANSFER_RESPONSE = "OtTransferResponse"
    EPOCH_NOTICE = "EpochNotice"
    ERROR = "Error"


class Mode(Enum):
    HMAC = "A"
    UNOBSERVABLE = "B"
    SECURE_INDEX = "C"
    SECURE_INDEX_OT = "D"

    @property
    def uses_filters(self) -> bool:
        return self is not Mode.HMAC

    @classmethod
    def parse(cls, value) -> "Mode":
        if isinstance(value, Mode):
            return value
        text = str(value).strip()
        for mode in cls:
            if text.upper() == mode.value or text.upper() == mode.name:
                return mode
        raise ValueError(f"Modo desconocido: {value}")


# Tipos de campo
TAG = "tag"              # 32 bytes, base64
BYTES = "bytes"          # bytes arbitrarios, base64
FILTER = "filter"        # BloomFilter serializado, base64
PSEUDONYM = "pseudonym"  # 16 bytes, hex
TEXT = "text"            # cadena UTF-8
COUNT = "count"          # entero >= 0
CODE = "code"            # uno de ERROR_CODES
GROUP = "group"          # uno de GROUP_NAMES

_HMAC_MATCH = {"hmac": TAG, "pseudonym": PSEUDONYM}
_ITEM_MATCH = {"item": TEXT, "pseudonym": PSEUDONYM}
_OT_ENTRY = {"idx": TAG, "ct": BYTES}

_HELLO = {"k_star": COUNT, "m": COUNT, "blind_bits": COUNT, "group": GROUP, "epoch_seconds": COUNT}
_ERROR = {"code": CODE, "detail": TEXT}

ALL_MODES = tuple(Mode)

SCHEMAS: Dict[Tuple[MessageType, Mode], Dict[str, Any]] = {}
for _mode in ALL_MODES:
    SCHEMAS[(MessageType.HELLO, _mode)] = _HELLO
    SCHEMAS[(MessageType.EPOCH_NOTICE, _mode)] = {}
    SCHEMAS[(MessageType.ERROR, _mode)] = _ERROR
SCHEMAS.update({
    (MessageType.LOOKUP_REQUEST, Mode.HMAC): {"token": TAG},
    (MessageType.LOOKUP_RESPONSE, Mode.HMAC): {"token": TAG, "pseudonym": PSEUDONYM},
    (MessageType.LOOKUP_REQUEST, Mode.UNOBSERVABLE): {"filter": FILTER},
    (MessageType.LOOKUP_RESPONSE, Mode.UNOBSERVABLE): {"matches": [_ITEM_MATCH]},
    (MessageType.CREATE_REQUEST, Mode.UNOBSERVABLE): {"item": TEXT, "filter": FILTER},
    (MessageType.CREATE_RESPONSE, Mode.UNOBSERVABLE): {"pseudonym": PSEUDONYM},
    (MessageType.LOOKUP_REQUEST, Mode.SECURE_INDEX): {"filter": FILTER},
    (MessageType.LOOKUP_RESPONSE, Mode.SECURE_INDEX): {"matches": [_HMAC_MATCH]},
    (MessageType.CREATE_REQUEST, Mode.SECURE_INDEX): {"hmac": TAG, "filter": FILTER},
    (MessageType.CREATE_RESPONSE, Mode.SECURE_INDEX): {"pseudonym": PSEUDONYM},
    (MessageType.OT_PUBLIC_KEY, Mode.SECURE_INDEX_OT): {"s": BYTES, "group": GROUP},
    (MessageType.OT_TRANSFER_REQUEST, Mode.SECURE_INDEX_OT): {"filter": FILTER, "r": BYTES},
    (MessageType.OT_TRANSFER_RESPONSE, Mode.SECURE_INDEX_OT): {"entries": [_OT_ENTRY]},
    (MessageType.CREATE_REQUEST, Mode.SECURE_INDEX_OT): {"hmac": TAG, "filter": FILTER},
    (MessageType.CREATE_RESPONSE, Mode.SECURE_INDEX_OT): {"pseudonym": PSEUDONYM},
})


@dataclass(frozen=True)
class Message:
    """
    Sobre de protocolo

    El cuerpo guarda valores ya decodificados: bytes para campos binarios,
    BloomFilter para filtros, listas de dicts para coincidencias.
    """

    type: MessageType
    mode: Mode
    epoch: int
    body: Dict[str, Any] = field(default_factory=dict)


def make(msg_type: MessageType, mode: Mode, epoch: int, **body) -> Message:
    return Message(msg_type, mode, epoch, body)


def error_message(mode: Mode, epoch: int, code: str, detail: str = "") -> Message:
    if code not in ERROR_CODES:
        code = "protocol"
    return Message(MessageType.ERROR, mode, epoch, {"code": code, "detail": detail})


# ---------------------------------------------------------------------------
# Codec
# ---------------------------------------------------------------------------

def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def _unb64(text: str) -> bytes:
    if not isinstance(text, str):
        raise MalformedMessage("Se esperaba base64")
    return base64.b64decode(text.encode("ascii"), validate=True)


def _is_count(value) -> bool:
    return isinstance(value, int) and not isinstance(value, bool) and value >= 0


def _encode_value(kind, value):
    if isinstance(kind, list):
        if not isinstance(value, (list, tuple)):
            raise ProtocolError("Se esperaba una lista")
        return [_encode_body(kind[0], item) for item in value]
    if kind == TAG:
        if not isinstance(value, (bytes, bytearray)) or len(value) != TAG_BYTES:
            raise ProtocolError("Tag de longitud inválida")
        return _b64(bytes(value))
    if kind == BYTES:
        if not isinstance(value, (bytes, bytearray)):
            raise ProtocolError("Se esperaban bytes")
        return _b64(bytes(value))
    if kind == FILTER:
        if not isinstance(value, BloomFilter):
            raise ProtocolError("Se esperaba un BloomFilter")
        return _b64(value.to_bytes())
    if kind == PSEUDONYM:
        if not isinstance(value, (bytes, bytearray)) or len(value) != PSEUDONYM_BYTES:
            raise ProtocolError("Pseudónimo de longitud inválida")
        return bytes(value).hex()
    if kind == COUNT:
        if not _is_count(value):
            raise ProtocolError("Se esperaba un entero no negativo")
        return value
    if kind in (TEXT, CODE, GROUP):
        if not isinstance(value, str):
            raise ProtocolError("Se esperaba texto")
        if kind == CODE and value not in ERROR_CODES:
            raise ProtocolError(f"Código de error desconocido: {value}")
        if kind == GROUP and value not in GROUP_NAMES:
            raise ProtocolError(f"Grupo desconocido: {value}")
        return value
    raise ProtocolError(f"Tipo de campo desconocido: {kind}")


def _encode_body(schema: Dict[str, Any], body: Dict[str, Any]) -> Dict[str, Any]:
    if not isinstance(body, dict) or set(body) != set(schema):
        raise ProtocolError(f"Campos {sorted(body) if isinstance(body, dict) else body} "
                            f"no coinciden con {sorted(schema)}")
    return {name: _encode_value(kind, body[name]) for name, kind in schema.items()}


def encode(msg: Message) -> bytes:
    """JSON canónico + '\\n'"""
    schema = SCHEMAS.get((msg.type, msg.mode))
    if schema is None:
        raise ProtocolError(f"{msg.type.value} no existe en el modo {msg.mode.value}")
    if not _is_count(msg.epoch):
        raise ProtocolError("epoch debe ser un entero no negativo")
    wire = {
        "type": msg.type.value,
        "mode": msg.mode.value,
        "epoch": msg.epoch,
        "body": _encode_body(schema, msg.body),
    }
    data = (json.dumps(wire, sort_keys=True, separators=(",", ":")) + "\n").encode("utf-8")
    if len(data) > MAX_MESSAGE_BYTES:
        raise ProtocolError("Mensaje mayor de 1 MiB")
    return data


def _decode_value(kind, value):
    if isinstance(kind, list):
        if not isinstance(value, list):
            raise MalformedMessage("Se esperaba una lista")
        return [_decode_body(kind[0], item) for item in value]
    if kind == TAG:
        raw = _unb64(value)
        if len(raw) != TAG_BYTES:
            raise MalformedMessage("Tag de longitud inválida")
        return raw
    if kind == BYTES:
        return _unb64(value)
    if kind == FILTER:
        return BloomFilter.from_bytes(_unb64(value))
    if kind == PSEUDONYM:
        if not isinstance(value, str) or len(value) != 2 * PSEUDONYM_BYTES or value != value.lower():
            raise MalformedMessage("Pseudónimo inválido")
        raw = bytes.fromhex(value)
        if len(raw) != PSEUDONYM_BYTES:
            raise MalformedMessage("Pseudónimo inválido")
        return raw
    if kind == COUNT:
        if not _is_count(value):
            raise MalformedMessage("Se esperaba un entero no negativo")
        return value
    if not isinstance(value, str):
        raise MalformedMessage("Se esperaba texto")
    if kind == CODE and value not in ERROR_CODES:
        raise MalformedMessage("Código de error desconocido")
    if kind == GROUP and value not in GROUP_NAMES:
        raise MalformedMessage("Grupo desconocido")
    return value


def _decode_body(schema: Dict[str, Any], body) -> Dict[str, Any]:
    if not isinstance(body, dict) or set(body) != set(schema):
        raise MalformedMessage("Los campos del cuerpo no coinciden con el esquema")
    return {name: _decode_value(kind, body[name]) for name, kind in schema.items()}


def decode(data: bytes) -> Message:
    """
    Inverso de encode. Cualquier entrada inválida produce MalformedMessage,
    nunca otra excepción.
    """
    try:
        if not isinstance(data, (bytes, bytearray)):
            raise MalformedMessage("Se esperaban bytes")
        if len(data) > MAX_MESSAGE_BYTES:
            raise MalformedMessage("Mensaje mayor de 1 MiB")
        if data.endswith(b"\n"):
            data = data[:-1]
        if b"\n" in data:
            raise MalformedMessage("Más de un mensaje en la trama")
        wire = json.loads(bytes(data).decode("utf-8"))
        if not isinstance(wire, dict) or set(wire) != {"type", "mode", "epoch", "body"}:
            raise MalformedMessage("Sobre inválido")
        if not isinstance(wire["type"], str) or not isinstance(wire["mode"], str):
            raise MalformedMessage("type y mode deben ser texto")
        msg_type = MessageType(wire["type"])
        mode = Mode(wire["mode"])
        if not _is_count(wire["epoch"]):
            raise MalformedMessage("epoch inválida")
        schema = SCHEMAS.get((msg_type, mode))
        if schema is None:
            raise MalformedMessage(f"{msg_type.value} no existe en el modo {mode.value}")
        return Message(msg_type, mode, wire["epoch"], _decode_body(schema, wire["body"]))
    except MalformedMessage:
        raise
    except (ValueError, TypeError, UnicodeError, RecursionError, binascii.Error,
            SecureIndexError, OverflowError) as e:
        raise MalformedMessage(f"Mensaje malformado: {type(e).__name__}") from e


def shape_uniform(resp_hit: Message, resp_create: Message) -> bool:
    """
    Predicado de indistinguibilidad en modo A: un hit y una creación deben
    ser el mismo tipo de mensaje, con los mismos campos y la misma longitud.
    """
    for msg in (resp_hit, resp_create):
        if msg.mode is not Mode.HMAC or msg.type is not MessageType.LOOKUP_RESPONSE:
            return False
    return (set(resp_hit.body) == set(resp_create.body)
            and len(encode(resp_hit)) == len(encode(resp_create)))


# ---------------------------------------------------------------------------
# Transportes
# ---------------------------------------------------------------------------

class Transport(ABC):
    """Canal bidireccional, ordenado y fiable; una conexión por sesión"""

    @abstractmethod
    async def send(self, msg: Message) -> None:
        ...

    @abstractmethod
    async def receive(self) -> Message:
        ...

    @abstractmethod
    async def close(self) -> None:
        ...


class QueueTransport(Transport):
    """
    Extremo de un par de colas en proceso. Transporta los bytes codificados,
    no los objetos, para que la ruta de codec sea la misma que en TCP.

    capture: si se pasa una lista, se añade cada trama enviada (tests de
    captura de tráfico).
    """

    def __init__(self, inbox: asyncio.Queue, outbox: asyncio.Queue,
                 capture: Optional[List[bytes]] = None):
        self._inbox = inbox
        self._outbox = outbox
        self._capture = capture
        self._closed = False

    @classmethod
    def pair(cls, capture: Optional[List[bytes]] = None) -> Tuple["QueueTransport", "QueueTransport"]:
        """(extremo del Depositor, extremo del PVault)"""
        to_vault: asyncio.Queue = asyncio.Queue()
        to_depositor: asyncio.Queue = asyncio.Queue()
        return cls(to_depositor, to_vault, capture), cls(to_vault, to_depositor, capture)

    async def send(self, msg: Message) -> None:
        if self._closed:
            raise ConnectionClosed("Transporte cerrado")
        await self.send_raw(encode(msg))

    async def send_raw(self, data: bytes) -> None:
        if self._capture is not None:
            self._capture.append(data)
        await self._outbox.put(data)

    async def receive(self) -> Message:
        data = await self._inbox.get()
        if data is None:
            raise ConnectionClosed("El otro extremo cerró la conexión")
        return decode(data)

    async def close(self) -> None:
        if not self._closed:
            self._closed = True
            await self._outbox.put(None)


class StreamTransport(Transport):
    def __init__(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        self._reader = reader
        self._writer = writer

    @classmethod
    async def connect(cls, host: str, port: int) -> "StreamTransport":
        reader, writer = await asyncio.open_connection(host, port, limit=MAX_MESSAGE_BYTES + 1)
        return cls(reader, writer)

    @property
    def peer(self) -> str:
        info = self._writer.get_extra_info("peername")
        return f"{info[0]}:{info[1]}" if info else "?"

    async def send(self, msg: Message) -> None:
        if self._writer.is_closing():
            raise ConnectionClosed("Transporte cerrado")
        self._writer.write(encode(msg))
        await self._writer.drain()

    async def receive(self) -> Message:
        try:
            line = await self._reader.readline()
        except (asyncio.LimitOverrunError, ValueError) as e:
            raise MalformedMessage("Trama mayor de 1 MiB") from e
        except (ConnectionError, asyncio.IncompleteReadError) as e:
            raise ConnectionClosed(str(e)) from e
        if not line:
            raise ConnectionClosed("El otro extremo cerró la conexión")
        return decode(line)

    async def close(self) -> None:
        if not self._writer.is_closing():
            self._writer.close()
        try:
            await self._writer.wait_closed()
        except ConnectionError:
            pass


def parse_address(address: str) -> Tuple[str, int]:
    """'host:port' -> (host, port); sin puerto se usa 7474"""
    host, sep, port = address.rpartition(":")
    if not sep:
        return address or "127.0.0.1", DEFAULT_PORT
    try:
        return host or "127.0.0.1", int(port)
    except ValueError as e:
        raise ValueError(f"Dirección inválida: {address}") from e
