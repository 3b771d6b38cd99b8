"""
Sistema Depositor
=================

El Depositor está junto a la fuente de datos: extrae los QIDs de cada
evento, obtiene su pseudónimo del PVault y los sustituye.

Características principales:
-------------------------
1. Tokens con epoch: T = Mac(t_i, QID), t_i = kdf(k, "epoch", i)
2. Un flujo de búsqueda por modo (A, B, C, D)
3. Creación dummy en el camino de hit de B/C/D, para que cada búsqueda
   vaya seguida de exactamente una creación
4. Pipeline JSON-lines con buffer acotado (10^4 registros) y reconexión
   con back-off exponencial

Los QIDs se designan por rutas con puntos ("src.ip", "user.email").
Los demás campos no se tocan.

Ejemplo de uso:
-------------
```python
depositor = Depositor(config, MasterSecret.from_file("Data/master.key"),
                      tcp_transport_factory(config.pvault))
await depositor.connect()
record = await depositor.pseudonymise({"src": {"ip": "10.0.0.1"}})
```
"""

from __future__ import annotations

import asyncio
import copy
import json
import logging
import time
from typing import Any, AsyncIterator, Awaitable, Callable, Dict, Iterable, Optional, Tuple

import numpy as np

from config import DepositorConfig
from crypto import (
    EpochTag,
    IndexKeySet,
    MasterSecret,
    format_pseudonym,
    random_bytes,
    tag,
)
from logger_config import log_error, log_system_event
from ot import (
    OtCiphertextSet,
    OtEntry,
    OtProtocolError,
    OtReceiverState,
    decode_point,
    index_for,
    receiver_derive,
    receiver_open,
)
from protocol import (
    ConnectionClosed,
    Message,
    MessageType,
    Mode,
    ProtocolError,
    StreamTransport,
    Transport,
    make,
    parse_address,
)
from secure_index import BloomFilter, blind, build_stored_filter, full_trapdoor, partial_trapdoor
from utility import PeepllError

logger = logging.getLogger(__name__)

DUMMY_NONCE = b"dummy-nonce"

TransportFactory = Callable[[], Awaitable[Transport]]


class DepositorError(PeepllError):
    code = "protocol"


class VaultUnavailable(DepositorError):
    code = "unavailable"


def tcp_transport_factory(address: str) -> TransportFactory:
    host, port = parse_address(address)

    async def factory() -> Transport:
        return await StreamTransport.connect(host, port)

    return factory


def epoch_token(master: MasterSecret, qid: bytes, epoch: int) -> bytes:
    """Mac(t_epoch, QID); con epochs desactivadas epoch = 0"""
    return tag(EpochTag.derive(master, epoch).tag_bytes, qid)


def qid_bytes(value: Any) -> bytes:
    if isinstance(value, bytes):
        return value
    if isinstance(value, str):
        try:
            return value.encode("utf-8")
        except UnicodeEncodeError as e:
            raise DepositorError("QID no codificable en UTF-8", code="qid") from e
    return json.dumps(value, sort_keys=True, separators=(",", ":")).encode("utf-8")


def serialise_record(record: Dict[str, Any]) -> str:
    """JSON en UTF-8; un surrogate suelto fuera de los QIDs viaja escapado"""
    text = json.dumps(record, ensure_ascii=False)
    try:
        text.encode("utf-8")
    except UnicodeEncodeError:
        return json.dumps(record)
    return text


def get_path(record: Dict[str, Any], path: str) -> Tuple[bool, Any]:
    """(encontrado, valor) para una ruta con puntos"""
    node: Any = record
    for part in path.split("."):
        if not isinstance(node, dict) or part not in node:
            return False, None
        node = node[part]
    return True, node


def set_path(record: Dict[str, Any], path: str, value: Any) -> None:
    parts = path.split(".")
    node = record
    for part in parts[:-1]:
        node = node[part]
    node[parts[-1]] = value


class Depositor:
    """
    Cliente del PVault para una sesión.

    Los registros de una sesión se procesan en orden; varios Depositors
    pueden trabajar a la vez contra el mismo PVault.
    """

    def __init__(self, config: DepositorConfig, master: MasterSecret,
                 transport_factory: TransportFactory,
                 rng: Optional[np.random.Generator] = None,
                 clock: Callable[[], float] = time.time):
        config.validate()
        self.config = config
        self.mode = config.mode
        self.params = config.bloom_params()
        self.group = config.group_params()
        self._master = master
        self._factory = transport_factory
        self._rng = rng
        self._dummy_rng = np.random.default_rng(config.dummy_seed) if config.dummy_seed is not None else rng
        self._clock = clock
        self._keys = IndexKeySet.derive(master, self.params.k_star) if self.mode.uses_filters else None
        self._epoch_tags: Dict[int, bytes] = {}
        self._transport: Optional[Transport] = None
        self.ot_public_key: Optional[int] = None
        self.vault_epoch: Optional[int] = None
        self.stats = {"lookups": 0, "hits": 0, "creations": 0, "dummies": 0,
                      "messages": 0, "reconnects": 0, "failed": 0}

    # ------------------------------------------------------------------
    # Tokens
    # ------------------------------------------------------------------

    def current_epoch(self) -> int:
        if self.config.epoch_seconds <= 0:
            return 0
        return int(self._clock() // self.config.epoch_seconds)

    def epoch_token(self, qid: bytes, epoch: int) -> bytes:
        key = self._epoch_tags.get(epoch)
        if key is None:
            key = EpochTag.derive(self._master, epoch).tag_bytes
            self._epoch_tags = {epoch: key}
        return tag(key, qid)

    def make_dummy(self, epoch: int) -> Tuple[bytes, BloomFilter]:
        """Token dummy y su filtro almacenado, por el mismo camino que uno real"""
        token = self.epoch_token(random_bytes(16, self._dummy_rng) + DUMMY_NONCE, epoch)
        return token, self._stored_filter(token)

    def _stored_filter(self, token: bytes) -> BloomFilter:
        if self.mode is Mode.UNOBSERVABLE:
            # en B el cegado va en la búsqueda, no en la entrada
            return full_trapdoor(self._keys, token, self.params.m).to_filter(self.params.m)
        return build_stored_filter(self._keys, token, self.params.m, self.params.b, self._rng)

    # ------------------------------------------------------------------
    # Sesión
    # ------------------------------------------------------------------

    async def connect(self) -> None:
        """Abre la conexión y hace el handshake de parámetros"""
        self._transport = await self._factory()
        hello = make(MessageType.HELLO, self.mode, self.current_epoch(),
                     k_star=self.params.k_star, m=self.params.m, blind_bits=self.params.b,
                     group=self.group.name, epoch_seconds=self.config.epoch_seconds)
        await self._send(hello)
        if self.mode is Mode.SECURE_INDEX_OT:
            reply = await self._receive(MessageType.OT_PUBLIC_KEY)
            if reply.body["group"] != self.group.name:
                raise DepositorError("Grupo OT distinto al configurado", code="mismatch")
            try:
                self.ot_public_key = decode_point(self.group, reply.body["s"])
            except PeepllError as e:
                raise DepositorError("Clave pública OT inválida") from e
        notice = await self._receive(MessageType.EPOCH_NOTICE)
        self.vault_epoch = notice.epoch
        log_system_event("depositor_connected", {"mode": self.mode.value, "epoch": notice.epoch})

    async def open(self) -> None:
        """connect con los mismos reintentos que una búsqueda"""
        try:
            await self.connect()
        except (ConnectionClosed, OSError) as e:
            logger.warning("Primera conexión fallida: %s", e)
            await self._reconnect()

    async def close(self) -> None:
        if self._transport is not None:
            await self._transport.close()
            self._transport = None

    async def _send(self, msg: Message) -> None:
        if self._transport is None:
            raise ConnectionClosed("Sin conexión")
        self.stats["messages"] += 1
        await self._transport.send(msg)

    async def _receive(self, expected: MessageType) -> Message:
        """Siguiente respuesta; los EpochNotice intermedios solo actualizan la epoch"""
        while True:
            msg = await self._transport.receive()
            if msg.type is MessageType.EPOCH_NOTICE and expected is not MessageType.EPOCH_NOTICE:
                self.vault_epoch = msg.epoch
                continue
            if msg.type is MessageType.ERROR:
                raise DepositorError(msg.body["detail"] or "Error del PVault", code=msg.body["code"])
            if msg.type is not expected:
                raise DepositorError(f"Se esperaba {expected.value} y llegó {msg.type.value}")
            return msg

    async def _request(self, msg: Message, expected: MessageType) -> Message:
        await self._send(msg)
        return await self._receive(expected)

    async def _reconnect(self) -> None:
        delay = self.config.retry_delay
        for attempt in range(1, self.config.retry_attempts + 1):
            try:
                await self.close()
            except Exception:
                self._transport = None
            try:
                await self.connect()
                self.stats["reconnects"] += 1
                return
            except (ConnectionClosed, OSError) as e:
                logger.warning("Reconexión %d/%d fallida: %s", attempt, self.config.retry_attempts, e)
                await asyncio.sleep(delay)
                delay *= 2
        raise VaultUnavailable("PVault inalcanzable")

    # ------------------------------------------------------------------
    # Búsquedas
    # ------------------------------------------------------------------

    async def pseudonym_for(self, qid: bytes, epoch: Optional[int] = None) -> bytes:
        """Pseudónimo de un QID; reintenta la búsqueda completa si cae la conexión"""
        lookups = {
            Mode.HMAC: self.run_lookup_A,
            Mode.UNOBSERVABLE: self.run_lookup_B,
            Mode.SECURE_INDEX: self.run_lookup_C,
            Mode.SECURE_INDEX_OT: self.run_lookup_D,
        }
        while True:
            try:
                if self._transport is None:
                    raise ConnectionClosed("Sin conexión")
                return await lookups[self.mode](qid, self.current_epoch() if epoch is None else epoch)
            except (ConnectionClosed, OSError) as e:
                logger.warning("Conexión perdida con el PVault: %s", e)
                await self._reconnect()

    async def run_lookup_A(self, qid: bytes, epoch: int) -> bytes:
        token = self.epoch_token(qid, epoch)
        self.stats["lookups"] += 1
        reply = await self._request(make(MessageType.LOOKUP_REQUEST, self.mode, epoch, token=token),
                                    MessageType.LOOKUP_RESPONSE)
        if reply.body["token"] != token:
            raise DepositorError("La respuesta no corresponde al token enviado")
        return reply.body["pseudonym"]

    async def run_lookup_B(self, qid: bytes, epoch: int) -> bytes:
        """Filtro completo cegado en la búsqueda; el item viaja en claro"""
        item = qid.decode("utf-8", errors="replace")
        token = self.epoch_token(qid, epoch)
        lookup = blind(full_trapdoor(self._keys, token, self.params.m).to_filter(self.params.m),
                       self.params.b, self._rng)
        self.stats["lookups"] += 1
        reply = await self._request(make(MessageType.LOOKUP_REQUEST, self.mode, epoch, filter=lookup),
                                    MessageType.LOOKUP_RESPONSE)
        own = [m["pseudonym"] for m in reply.body["matches"] if m["item"] == item]
        if len(own) > 1:
            raise DepositorError("Item repetido en la respuesta")
        if own:
            self.stats["hits"] += 1
            dummy_token, dummy_filter = self.make_dummy(epoch)
            await self._create(epoch, filter=dummy_filter, item=dummy_token.hex())
            self.stats["dummies"] += 1
            return own[0]
        return await self._create(epoch, filter=self._stored_filter(token), item=item)

    async def run_lookup_C(self, qid: bytes, epoch: int) -> bytes:
        token = self.epoch_token(qid, epoch)
        lookup = partial_trapdoor(self._keys, token, self.params.m, self._rng).to_filter(self.params.m)
        self.stats["lookups"] += 1
        reply = await self._request(make(MessageType.LOOKUP_REQUEST, self.mode, epoch, filter=lookup),
                                    MessageType.LOOKUP_RESPONSE)
        own = [m["pseudonym"] for m in reply.body["matches"] if m["hmac"] == token]
        if len(own) > 1:
            raise DepositorError("HMAC repetido en la respuesta")
        return await self._finish(epoch, token, own[0] if own else None)

    async def run_lookup_D(self, qid: bytes, epoch: int) -> bytes:
        """Como C, pero las coincidencias llegan cifradas por OT"""
        if self.ot_public_key is None:
            raise DepositorError("Falta la clave pública OT del handshake")
        token = self.epoch_token(qid, epoch)
        lookup = partial_trapdoor(self._keys, token, self.params.m, self._rng).to_filter(self.params.m)
        state = receiver_derive(self.group, self.ot_public_key, index_for(self.group, token),
                                self.group.q, self._rng)
        self.stats["lookups"] += 1
        reply = await self._request(make(MessageType.OT_TRANSFER_REQUEST, self.mode, epoch,
                                         filter=lookup, r=self.group.encode(state.r)),
                                    MessageType.OT_TRANSFER_RESPONSE)
        sealed = OtCiphertextSet(tuple(OtEntry(e["idx"], e["ct"]) for e in reply.body["entries"]))
        try:
            plaintext = receiver_open(sealed, state, token)
        except OtProtocolError as e:
            raise DepositorError(str(e)) from e
        pseudonym = None
        if plaintext is not None:
            if len(plaintext) != 48 or plaintext[:32] != token:
                raise DepositorError("Entrada OT con contenido inesperado")
            pseudonym = plaintext[32:]
        return await self._finish(epoch, token, pseudonym)

    async def probe(self, qid: bytes, epoch: int) -> Tuple[Message, Optional[OtReceiverState]]:
        """
        Solo la fase SearchMapping, sin creación posterior. La usan las
        herramientas de medida; en modo A equivale a un lookup normal.
        """
        token = self.epoch_token(qid, epoch)
        if self.mode is Mode.HMAC:
            msg = make(MessageType.LOOKUP_REQUEST, self.mode, epoch, token=token)
            return await self._request(msg, MessageType.LOOKUP_RESPONSE), None
        if self.mode is Mode.UNOBSERVABLE:
            lookup = blind(full_trapdoor(self._keys, token, self.params.m).to_filter(self.params.m),
                           self.params.b, self._rng)
        else:
            lookup = partial_trapdoor(self._keys, token, self.params.m, self._rng).to_filter(self.params.m)
        if self.mode is not Mode.SECURE_INDEX_OT:
            msg = make(MessageType.LOOKUP_REQUEST, self.mode, epoch, filter=lookup)
            return await self._request(msg, MessageType.LOOKUP_RESPONSE), None
        state = receiver_derive(self.group, self.ot_public_key, index_for(self.group, token),
                                self.group.q, self._rng)
        msg = make(MessageType.OT_TRANSFER_REQUEST, self.mode, epoch,
                   filter=lookup, r=self.group.encode(state.r))
        return await self._request(msg, MessageType.OT_TRANSFER_RESPONSE), state

    async def _finish(self, epoch: int, token: bytes, pseudonym: Optional[bytes]) -> bytes:
        """Hit: creación dummy. Miss: creación real."""
        if pseudonym is not None:
            self.stats["hits"] += 1
            dummy_token, dummy_filter = self.make_dummy(epoch)
            await self._create(epoch, filter=dummy_filter, hmac=dummy_token)
            self.stats["dummies"] += 1
            return pseudonym
        return await self._create(epoch, filter=self._stored_filter(token), hmac=token)

    async def _create(self, epoch: int, **body) -> bytes:
        self.stats["creations"] += 1
        reply = await self._request(make(MessageType.CREATE_REQUEST, self.mode, epoch, **body),
                                    MessageType.CREATE_RESPONSE)
        return reply.body["pseudonym"]

    # ------------------------------------------------------------------
    # Registros
    # ------------------------------------------------------------------

    async def pseudonymise(self, record: Dict[str, Any], epoch: Optional[int] = None) -> Dict[str, Any]:
        """Copia del registro con cada QID sustituido por "pn:<hex>", en orden de rutas"""
        result = copy.deepcopy(record)
        for path in self.config.qid_paths:
            found, value = get_path(result, path)
            if not found or value is None:
                continue
            pseudonym = await self.pseudonym_for(qid_bytes(value), epoch)
            set_path(result, path, format_pseudonym(pseudonym))
        return result

    async def run_pipeline(self, lines: AsyncIterator[str], write: Callable[[str], None]) -> int:
        """
        Lee JSON-lines, pseudonimiza en orden y escribe JSON-lines.

        El lector se bloquea cuando el buffer (buffer_size registros) está
        lleno. Los errores de capacidad o protocolo se registran por
        registro y el registro se descarta; VaultUnavailable detiene el
        pipeline.

        Returns:
            Número de registros escritos
        """
        queue: asyncio.Queue = asyncio.Queue(maxsize=self.config.buffer_size)

        async def reader() -> None:
            async for line in lines:
                line = line.strip()
                if line:
                    await queue.put(line)
            await queue.put(None)

        reader_task = asyncio.create_task(reader())
        written = 0
        try:
            while True:
                line = await queue.get()
                if line is None:
                    break
                try:
                    record = json.loads(line)
                    if not isinstance(record, dict):
                        raise ValueError("El registro no es un objeto JSON")
                    output = await self.pseudonymise(record)
                    # sin QIDs la línea sale tal cual
                    text = line if output == record else serialise_record(output)
                except VaultUnavailable:
                    raise
                except (ValueError, PeepllError, ProtocolError) as e:
                    self.stats["failed"] += 1
                    log_error(e, "pseudonymise: registro rechazado")
                    continue
                write(text)
                written += 1
        finally:
            reader_task.cancel()
            await asyncio.gather(reader_task, return_exceptions=True)
        log_system_event("pipeline_done", {"written": written, "failed": self.stats["failed"]})
        return written


async def iterate_lines(source: Iterable[str]) -> AsyncIterator[str]:
    """Adapta un iterable síncrono (fichero, stdin) al pipeline sin bloquear el bucle"""
    iterator = iter(source)
    while True:
        line = await asyncio.to_thread(next, iterator, None)
        if line is None:
            return
        yield line
