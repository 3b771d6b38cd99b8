"""
Sistema Pseudonym Vault (PVault)
================================

El PVault es el dueño del pseudonym mapping (PM): la tabla global que
asocia material de búsqueda con pseudónimos verdaderamente aleatorios.

Características principales:
-------------------------
1. Cuatro modos de búsqueda
   - A: tokens HMAC; la creación se resuelve dentro del lookup
   - B: filtros Bloom cegados en la búsqueda; entradas con items en claro
   - C: índice seguro + HMAC (SearchMapping, después UpdateMapping)
   - D: como C, pero las coincidencias se devuelven por OT
2. Epochs: al cambiar de epoch se borra el PM completo
3. Presupuestos: cada coincidencia (también las espurias) consume
   presupuesto; las entradas que llegan al límite B se expulsan después
   de responder. B = 0 desactiva los presupuestos
4. Persistencia: snapshot JSON atómico (fichero temporal + os.replace)
5. Sesiones concurrentes sobre cualquier Transport

Propiedades importantes:
- Los pseudónimos nunca se derivan de tokens: salen del CSPRNG
- El orden de los resultados es canónico (por hmac, o por item en B)
- update_mapping es idempotente: gana el primero que escribe
- Todas las operaciones sobre el PM se serializan con un asyncio.Lock

Ejemplo de uso:
-------------
```python
vault = PseudonymVault(VaultConfig(mode=Mode.SECURE_INDEX, group="test"))
transport = vault.connect_in_process()
```
"""

from __future__ import annotations

import asyncio
import base64
import json
import logging
import os
import tempfile
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Set, Union

import numpy as np

from config import VaultConfig
from crypto import CryptoError, fresh_pseudonym
from logger_config import log_error, log_system_event, log_vault_event
from ot import (
    OtCiphertextSet,
    OtError,
    decode_point,
    index_for,
    seal_entries,
    sender_derive_keys_at,
    sender_init,
)
from protocol import (
    ConnectionClosed,
    MalformedMessage,
    Message,
    MessageType,
    Mode,
    QueueTransport,
    StreamTransport,
    Transport,
    error_message,
    make,
    parse_address,
    MAX_MESSAGE_BYTES,
)
from secure_index import BloomFilter, FilterMatrix, SecureIndexError, Trapdoor
from utility import PeepllError

logger = logging.getLogger(__name__)

SNAPSHOT_INTERVAL = 60.0


class VaultError(PeepllError):
    """Códigos: capacity, protocol, mode, mismatch, snapshot"""

    code = "protocol"


@dataclass
class MappingEntry:
    """
    Una fila del PM

    Atributos:
        pseudonym: 16 bytes aleatorios
        hmac_token: tag de 32 bytes (modos A, C, D)
        item: dato en claro (solo modo B)
        bloom: filtro almacenado (modos B, C, D)
        budget_used: presupuesto consumido
        created_epoch: epoch de creación
    """

    pseudonym: bytes
    hmac_token: Optional[bytes] = None
    item: Optional[str] = None
    bloom: Optional[BloomFilter] = None
    budget_used: float = 0.0
    created_epoch: int = 0
    row: int = -1

    @property
    def key(self) -> bytes:
        return self.hmac_token if self.hmac_token is not None else self.item.encode("utf-8")


class PseudonymVault:
    """
    Servicio PVault.

    Las operaciones síncronas (lookup_or_create_A, search_mapping,
    update_mapping, charge_budget, epoch_rollover, persist, restore)
    asumen acceso exclusivo; las sesiones las invocan bajo self._lock.
    """

    def __init__(self, config: VaultConfig,
                 rng: Optional[np.random.Generator] = None,
                 clock: Callable[[], float] = time.time,
                 cost_fn: Optional[Callable[[MappingEntry], float]] = None):
        config.validate()
        self.config = config
        self.mode = config.mode
        self.params = config.bloom_params()
        self.group = config.group_params()
        self.capacity = config.capacity
        self.budget_limit = config.budget
        self.snapshot_path = config.snapshot_path
        self._rng = rng
        self._clock = clock
        self._cost_fn = cost_fn

        self._entries: Dict[bytes, MappingEntry] = {}
        self._rows: Dict[int, bytes] = {}
        self._matrix = FilterMatrix(self.params.m) if self.mode.uses_filters else None
        self.ot_sender = sender_init(self.group, rng) if self.mode is Mode.SECURE_INDEX_OT else None

        self.current_epoch = self.epoch_at(clock())
        self.stats = {"lookups": 0, "creations": 0, "hits": 0, "evictions": 0,
                      "rollovers": 0, "errors": 0}
        self.evicted_budgets: List[float] = []

        self._lock = asyncio.Lock()
        self._sessions: Set[Transport] = set()
        self._tasks: Set[asyncio.Task] = set()

    # ------------------------------------------------------------------
    # Estado
    # ------------------------------------------------------------------

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def entries(self) -> List[MappingEntry]:
        return [self._entries[k] for k in sorted(self._entries)]

    def epoch_at(self, now: float) -> int:
        if self.config.epoch_seconds <= 0:
            return 0
        return int(now // self.config.epoch_seconds)

    def _cost(self, entry: MappingEntry) -> float:
        if self._cost_fn is not None:
            return float(self._cost_fn(entry))
        return self.config.budget_cost

    def _check_capacity(self) -> None:
        if len(self._entries) >= self.capacity:
            log_vault_event("capacity_rejected", self.mode.value, {"size": len(self._entries)})
            raise VaultError("PM lleno", code="capacity")

    def _insert(self, entry: MappingEntry) -> MappingEntry:
        if self.budget_limit > 0:
            entry.budget_used = self._cost(entry)
        if self._matrix is not None and entry.bloom is not None:
            entry.row = self._matrix.insert(entry.bloom)
            self._rows[entry.row] = entry.key
        self._entries[entry.key] = entry
        self.stats["creations"] += 1
        return entry

    def _remove(self, entry: MappingEntry) -> None:
        self._entries.pop(entry.key, None)
        if self._matrix is not None and entry.row >= 0:
            self._matrix.remove(entry.row)
            self._rows.pop(entry.row, None)
            entry.row = -1

    # ------------------------------------------------------------------
    # Operaciones del PM
    # ------------------------------------------------------------------

    def lookup_or_create_A(self, token: bytes) -> bytes:
        """
        Devuelve el pseudónimo del token, creándolo si no existe.
        Las expulsiones por presupuesto ocurren después de fijar la respuesta.
        """
        self._require_mode(Mode.HMAC)
        if len(token) != 32:
            raise VaultError("Token de longitud inválida", code="malformed")
        self.stats["lookups"] += 1
        entry = self._entries.get(token)
        if entry is not None:
            self.stats["hits"] += 1
            self.charge_budget([entry])
            return entry.pseudonym
        self._check_capacity()
        entry = self._insert(MappingEntry(pseudonym=fresh_pseudonym(self._rng), hmac_token=token,
                                          created_epoch=self.current_epoch))
        self._evict_spent([entry])
        return entry.pseudonym

    def search_mapping(self, lookup: Union[BloomFilter, Trapdoor]) -> List[MappingEntry]:
        """
        Entradas que casan con la búsqueda, en orden canónico.

        C/D: el trapdoor (o su filtro) debe estar contenido en el filtro almacenado.
        B: el filtro almacenado debe estar contenido en el filtro cegado de búsqueda.
        """
        if self._matrix is None:
            raise VaultError("SearchMapping no existe en modo A", code="mode")
        if isinstance(lookup, Trapdoor):
            lookup = lookup.to_filter(self.params.m)
        if lookup.m != self.params.m:
            raise VaultError("Filtro de tamaño distinto al configurado", code="mismatch")
        self.stats["lookups"] += 1
        if self.mode is Mode.UNOBSERVABLE:
            rows = self._matrix.rows_within(lookup)
        else:
            rows = self._matrix.rows_containing(lookup.positions())
        matched = sorted((self._entries[self._rows[int(row)]] for row in rows), key=lambda e: e.key)
        if matched:
            self.stats["hits"] += 1
        return matched

    def update_mapping(self, hmac_token: Optional[bytes], bloom: BloomFilter,
                       item: Optional[str] = None) -> bytes:
        """Crea la entrada (hmac, filtro) o (item, filtro) en B; idempotente"""
        if self._matrix is None:
            raise VaultError("UpdateMapping no existe en modo A", code="mode")
        if bloom.m != self.params.m:
            raise VaultError("Filtro de tamaño distinto al configurado", code="mismatch")
        if self.mode is Mode.UNOBSERVABLE:
            if item is None:
                raise VaultError("El modo B necesita item", code="malformed")
            key = item.encode("utf-8")
        else:
            if hmac_token is None or len(hmac_token) != 32:
                raise VaultError("HMAC de longitud inválida", code="malformed")
            key = hmac_token
        existing = self._entries.get(key)
        if existing is not None:
            return existing.pseudonym
        self._check_capacity()
        entry = self._insert(MappingEntry(pseudonym=fresh_pseudonym(self._rng),
                                          hmac_token=None if self.mode is Mode.UNOBSERVABLE else hmac_token,
                                          item=item if self.mode is Mode.UNOBSERVABLE else None,
                                          bloom=bloom, created_epoch=self.current_epoch))
        self._evict_spent([entry])
        return entry.pseudonym

    def charge_budget(self, matched: List[MappingEntry], cost: Optional[float] = None) -> List[MappingEntry]:
        """
        Suma el coste a todas las coincidencias y expulsa las que alcanzan B.

        Returns:
            Las entradas expulsadas
        """
        if self.budget_limit <= 0:
            return []
        if cost is not None and cost < 0:
            raise ValueError("cost no puede ser negativo")
        for entry in matched:
            entry.budget_used += self._cost(entry) if cost is None else cost
        return self._evict_spent(matched)

    def _evict_spent(self, candidates: List[MappingEntry]) -> List[MappingEntry]:
        if self.budget_limit <= 0:
            return []
        evicted = [e for e in candidates if e.budget_used >= self.budget_limit and e.key in self._entries]
        for entry in evicted:
            self._remove(entry)
            self.evicted_budgets.append(entry.budget_used)
        if evicted:
            self.stats["evictions"] += len(evicted)
            log_vault_event("budget_eviction", self.mode.value, {"evicted": len(evicted), "size": len(self)})
        return evicted

    def ot_respond(self, matched: List[MappingEntry], r: int) -> OtCiphertextSet:
        """Sella (hmac || pseudónimo) de cada coincidencia con la clave de su índice"""
        if self.ot_sender is None:
            raise VaultError("OT solo existe en modo D", code="mode")
        keys = sender_derive_keys_at(self.ot_sender, r,
                                     [index_for(self.group, e.hmac_token) for e in matched])
        payloads = [(e.hmac_token, e.hmac_token + e.pseudonym) for e in matched]
        return seal_entries(keys, payloads)

    def epoch_rollover(self, new_epoch: int) -> None:
        """Borra el PM completo y el snapshot de la epoch anterior"""
        if new_epoch <= self.current_epoch:
            raise ValueError("La nueva epoch debe ser posterior a la actual")
        dropped = len(self._entries)
        self._entries.clear()
        self._rows.clear()
        if self._matrix is not None:
            self._matrix.clear()
        self.current_epoch = new_epoch
        self.stats["rollovers"] += 1
        self._discard_snapshot()
        if self.snapshot_path:
            self.persist()
        log_vault_event("epoch_rollover", self.mode.value, {"epoch": new_epoch, "dropped": dropped})

    def dump_mapping(self) -> Dict[bytes, bytes]:
        """Solo para tests: clave de entrada -> pseudónimo"""
        return {key: entry.pseudonym for key, entry in sorted(self._entries.items())}

    # ------------------------------------------------------------------
    # Persistencia
    # ------------------------------------------------------------------

    def snapshot(self) -> dict:
        entries = []
        for entry in self.entries:
            record = {"pseudonym": entry.pseudonym.hex(), "budget": entry.budget_used}
            if entry.hmac_token is not None:
                record["hmac"] = base64.b64encode(entry.hmac_token).decode("ascii")
            if entry.item is not None:
                record["item"] = entry.item
            if entry.bloom is not None:
                record["bloom"] = base64.b64encode(entry.bloom.to_bytes()).decode("ascii")
            entries.append(record)
        return {"epoch": self.current_epoch, "mode": self.mode.value, "entries": entries}

    def persist(self, path: Optional[str] = None) -> None:
        """Escritura atómica: fichero temporal en el mismo directorio y os.replace"""
        path = path or self.snapshot_path
        if not path:
            return
        directory = os.path.dirname(path) or "."
        os.makedirs(directory, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=directory, prefix=".snapshot-", suffix=".tmp")
        try:
            with os.fdopen(fd, "w") as f:
                json.dump(self.snapshot(), f, indent=4)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.remove(tmp)
            raise
        log_vault_event("snapshot_written", self.mode.value, {"entries": len(self), "epoch": self.current_epoch})

    def restore(self, path: Optional[str] = None) -> None:
        """
        Carga un snapshot. Sin fichero el PM queda vacío; un snapshot de una
        epoch pasada se descarta.

        Raises:
            VaultError("snapshot"): fichero corrupto o incompatible
        """
        path = path or self.snapshot_path
        if not path or not os.path.exists(path):
            return
        try:
            with open(path, "r") as f:
                data = json.load(f)
            epoch = data["epoch"]
            if not isinstance(epoch, int) or data.get("mode", self.mode.value) != self.mode.value:
                raise ValueError("epoch o modo inválidos")
            restored = [self._entry_from_record(record, epoch) for record in data["entries"]]
        except (OSError, ValueError, KeyError, TypeError, SecureIndexError, CryptoError) as e:
            log_error(e, "restore")
            raise VaultError(f"Snapshot corrupto: {path}", code="snapshot") from e

        if epoch < self.current_epoch:
            log_vault_event("snapshot_discarded", self.mode.value, {"epoch": epoch})
            self._discard_snapshot()
            return
        if epoch > self.current_epoch:
            raise VaultError("Snapshot de una epoch futura", code="snapshot")
        if len(restored) > self.capacity:
            raise VaultError("Snapshot mayor que la capacidad", code="snapshot")

        self._entries.clear()
        self._rows.clear()
        if self._matrix is not None:
            self._matrix.clear()
        for entry in restored:
            if self._matrix is not None:
                entry.row = self._matrix.insert(entry.bloom)
                self._rows[entry.row] = entry.key
            self._entries[entry.key] = entry
        log_vault_event("snapshot_restored", self.mode.value, {"entries": len(self), "epoch": epoch})

    def _entry_from_record(self, record: dict, epoch: int) -> MappingEntry:
        pseudonym = bytes.fromhex(record["pseudonym"])
        if len(pseudonym) != 16:
            raise ValueError("pseudónimo inválido")
        budget = float(record["budget"])
        entry = MappingEntry(pseudonym=pseudonym, budget_used=budget, created_epoch=epoch)
        if self.mode is Mode.UNOBSERVABLE:
            entry.item = str(record["item"])
        else:
            entry.hmac_token = base64.b64decode(record["hmac"], validate=True)
            if len(entry.hmac_token) != 32:
                raise ValueError("hmac inválido")
        if self._matrix is not None:
            entry.bloom = BloomFilter.from_bytes(base64.b64decode(record["bloom"], validate=True))
            if entry.bloom.m != self.params.m:
                raise ValueError("filtro de tamaño distinto al configurado")
        return entry

    def _discard_snapshot(self) -> None:
        if self.snapshot_path and os.path.exists(self.snapshot_path):
            os.remove(self.snapshot_path)

    # ------------------------------------------------------------------
    # Sesiones
    # ------------------------------------------------------------------

    def _require_mode(self, mode: Mode) -> None:
        if self.mode is not mode:
            raise VaultError(f"Operación exclusiva del modo {mode.value}", code="mode")

    def hello_matches(self, body: dict) -> bool:
        return (body["k_star"] == self.params.k_star and body["m"] == self.params.m
                and body["blind_bits"] == self.params.b and body["group"] == self.group.name
                and body["epoch_seconds"] == self.config.epoch_seconds)

    async def tick(self) -> bool:
        """Aplica el cambio de epoch si el reloj lo indica; True si hubo cambio"""
        async with self._lock:
            changed = self._tick_locked()
        if changed:
            await self.broadcast_epoch()
        return changed

    def _tick_locked(self) -> bool:
        epoch = self.epoch_at(self._clock())
        if epoch > self.current_epoch:
            self.epoch_rollover(epoch)
            return True
        return False

    async def broadcast_epoch(self) -> None:
        notice = make(MessageType.EPOCH_NOTICE, self.mode, self.current_epoch)
        for session in list(self._sessions):
            try:
                await session.send(notice)
            except (ConnectionClosed, ConnectionError):
                self._sessions.discard(session)

    async def handle(self, msg: Message) -> List[Message]:
        """Procesa un mensaje y devuelve las respuestas en orden"""
        rolled = False
        async with self._lock:
            rolled = self._tick_locked()
            try:
                replies = self._dispatch(msg)
            except PeepllError as e:
                self.stats["errors"] += 1
                log_error(e, f"handle {msg.type.value}")
                replies = [error_message(self.mode, self.current_epoch, e.code, str(e))]
        if rolled:
            await self.broadcast_epoch()
        return replies

    def _dispatch(self, msg: Message) -> List[Message]:
        epoch = self.current_epoch
        if msg.mode is not self.mode:
            raise VaultError(f"El PVault opera en modo {self.mode.value}", code="mode")
        body = msg.body

        if msg.type is MessageType.HELLO:
            if not self.hello_matches(body):
                log_system_event("handshake_mismatch", {"mode": self.mode.value})
                raise VaultError("Parámetros distintos a los del PVault", code="mismatch")
            replies = []
            if self.ot_sender is not None:
                replies.append(make(MessageType.OT_PUBLIC_KEY, self.mode, epoch,
                                    **self.ot_sender.public_message))
            replies.append(make(MessageType.EPOCH_NOTICE, self.mode, epoch))
            return replies

        if msg.type is MessageType.LOOKUP_REQUEST and self.mode is Mode.HMAC:
            pseudonym = self.lookup_or_create_A(body["token"])
            return [make(MessageType.LOOKUP_RESPONSE, self.mode, epoch,
                         token=body["token"], pseudonym=pseudonym)]

        if msg.type is MessageType.LOOKUP_REQUEST:
            matched = self.search_mapping(body["filter"])
            if self.mode is Mode.UNOBSERVABLE:
                matches = [{"item": e.item, "pseudonym": e.pseudonym} for e in matched]
            else:
                matches = [{"hmac": e.hmac_token, "pseudonym": e.pseudonym} for e in matched]
            reply = make(MessageType.LOOKUP_RESPONSE, self.mode, epoch, matches=matches)
            self.charge_budget(matched)
            return [reply]

        if msg.type is MessageType.OT_TRANSFER_REQUEST:
            try:
                r = decode_point(self.group, body["r"])
            except OtError as e:
                raise VaultError("Punto OT inválido", code="protocol") from e
            matched = self.search_mapping(body["filter"])
            sealed = self.ot_respond(matched, r)
            reply = make(MessageType.OT_TRANSFER_RESPONSE, self.mode, epoch,
                         entries=[{"idx": e.ot_index, "ct": e.ciphertext} for e in sealed.entries])
            self.charge_budget(matched)
            return [reply]

        if msg.type is MessageType.CREATE_REQUEST:
            pseudonym = self.update_mapping(body.get("hmac"), body["filter"], item=body.get("item"))
            return [make(MessageType.CREATE_RESPONSE, self.mode, epoch, pseudonym=pseudonym)]

        raise VaultError(f"{msg.type.value} no es una petición", code="protocol")

    async def serve_session(self, transport: Transport) -> None:
        """
        Atiende una conexión hasta que se cierra. Ninguna excepción sale de
        aquí: los fallos se convierten en mensajes Error.
        """
        self._sessions.add(transport)
        greeted = False
        try:
            while True:
                try:
                    msg = await transport.receive()
                except MalformedMessage as e:
                    self.stats["errors"] += 1
                    log_error(e, "decode")
                    await transport.send(error_message(self.mode, self.current_epoch, "malformed", str(e)))
                    continue
                if not greeted and msg.type is not MessageType.HELLO:
                    await transport.send(error_message(self.mode, self.current_epoch, "protocol",
                                                       "La sesión debe empezar con Hello"))
                    continue
                replies = await self.handle(msg)
                if msg.type is MessageType.HELLO and replies[-1].type is MessageType.EPOCH_NOTICE:
                    greeted = True
                for reply in replies:
                    await transport.send(reply)
        except ConnectionClosed:
            pass
        except Exception as e:
            log_error(e, "session")
        finally:
            self._sessions.discard(transport)
            try:
                await transport.close()
            except Exception:
                pass

    def connect_in_process(self, capture: Optional[List[bytes]] = None) -> QueueTransport:
        """Abre una sesión en proceso y devuelve el extremo del Depositor"""
        client, server = QueueTransport.pair(capture)
        task = asyncio.get_running_loop().create_task(self.serve_session(server))
        self._tasks.add(task)
        task.add_done_callback(self._tasks.discard)
        return client

    async def shutdown(self) -> None:
        for task in list(self._tasks):
            task.cancel()
        if self._tasks:
            await asyncio.gather(*self._tasks, return_exceptions=True)
        if self.snapshot_path:
            async with self._lock:
                self.persist()


async def _epoch_timer(vault: PseudonymVault) -> None:
    seconds = vault.config.epoch_seconds
    while True:
        now = time.time()
        await asyncio.sleep(max(1.0, seconds - (now % seconds)))
        await vault.tick()


async def _snapshot_timer(vault: PseudonymVault) -> None:
    while True:
        await asyncio.sleep(SNAPSHOT_INTERVAL)
        async with vault._lock:
            vault.persist()


async def serve_tcp(vault: PseudonymVault, ready: Optional[asyncio.Event] = None) -> None:
    """Daemon TCP: una sesión por conexión, temporizadores de epoch y snapshot"""
    host, port = parse_address(vault.config.listen)

    async def on_connect(reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        transport = StreamTransport(reader, writer)
        logger.info("Conexión desde %s", transport.peer)
        await vault.serve_session(transport)

    server = await asyncio.start_server(on_connect, host, port, limit=MAX_MESSAGE_BYTES + 1)
    timers = []
    if vault.config.epoch_seconds > 0:
        timers.append(asyncio.create_task(_epoch_timer(vault)))
    if vault.snapshot_path:
        timers.append(asyncio.create_task(_snapshot_timer(vault)))
    log_system_event("pvault_listening", {"listen": f"{host}:{port}", "mode": vault.mode.value,
                                          "m": vault.params.m, "k_star": vault.params.k_star})
    if ready is not None:
        ready.set()
    try:
        async with server:
            await server.serve_forever()
    finally:
        for timer in timers:
            timer.cancel()
        await vault.shutdown()
