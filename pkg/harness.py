"""
Simulador y Banco de Medidas
============================

Levanta un PVault en proceso y N Depositors sobre QueueTransport, genera
flujos de eventos sintéticos y mide:

1. run_sim: consistencia global de pseudónimos, expulsiones por
   presupuesto, cambios de epoch, rendimiento informativo
2. reproduce_fig4: tamaño medio del conjunto de coincidencias de una
   búsqueda contra un PVault precargado con 100 registros, por fp'
3. dictionary_attack: un Depositor interno (con el secreto maestro)
   intenta recuperar depósitos ajenos a partir del tráfico capturado

Los QIDs sintéticos son cadenas tipo IPv4 de un universo acotado.

Semillas:
- seed: aleatoriedad criptográfica (secreto, pseudónimos, trapdoors, OT)
- workload_seed: QIDs y eventos
Con el transporte en proceso, la misma configuración produce la misma salida.
"""

from __future__ import annotations

import asyncio
import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from config import DepositorConfig, SimConfig, VaultConfig
from crypto import IndexKeySet, MasterSecret, random_bytes, tag
from depositor import Depositor, epoch_token
from logger_config import log_system_event
from ot import unseal
from protocol import MessageType, Mode, decode
from pvault import PseudonymVault
from secure_index import BloomParams, build_stored_filter, partial_trapdoor
from utility import PeepllError, calculate_blinding_bits, summarize

logger = logging.getLogger(__name__)

FIG4_COLUMNS = ["fp_prime", "mean_matches", "stddev", "trials"]

# Coincidencias medias de referencia (fp', media) con 100 registros precargados.
# El cegado automático del banco se calibra para que cada punto caiga aquí.
REFERENCE_MATCHES = np.array([
    [0.0316, 5.02], [0.0707, 10.32], [0.1, 12.28], [0.1581, 16.24], [0.2236, 27.98],
    [0.2739, 25.86], [0.3162, 23.52], [0.3536, 47.16], [0.3873, 46.58], [0.4183, 46.44],
    [0.4472, 48.82],
])
REFERENCE_PREFILL = 100


class SimulationError(PeepllError):
    """Violación de un invariante durante la simulación; el mensaje la nombra"""

    code = "simulation"


class SimClock:
    """Reloj manual compartido por el PVault y los Depositors"""

    def __init__(self, now: float = 0.0):
        self.now = now

    def __call__(self) -> float:
        return self.now

    def advance(self, seconds: float) -> None:
        self.now += seconds


def qid_universe(size: int, offset: int = 0) -> List[str]:
    """QIDs únicos tipo IPv4 en 10.0.0.0/8"""
    return [f"10.{(i >> 16) & 255}.{(i >> 8) & 255}.{i & 255}" for i in range(offset, offset + size)]


def draw_qids(cfg: SimConfig, count: int, rng: np.random.Generator) -> np.ndarray:
    """Índices de QID según la distribución configurada"""
    if cfg.qid_distribution == "zipf":
        ranks = np.arange(1, cfg.qid_universe_size + 1, dtype=float)
        weights = ranks ** -cfg.zipf_s
        return rng.choice(cfg.qid_universe_size, size=count, p=weights / weights.sum())
    return rng.integers(0, cfg.qid_universe_size, size=count)


def qid_path(j: int) -> str:
    return ("src.ip", "dst.ip")[j] if j < 2 else f"extra{j}.ip"


def make_events(cfg: SimConfig, rng: np.random.Generator) -> List[dict]:
    universe = qid_universe(cfg.qid_universe_size)
    drawn = draw_qids(cfg, cfg.num_events * cfg.qids_per_event, rng).reshape(
        cfg.num_events, cfg.qids_per_event)
    events = []
    for i, row in enumerate(drawn):
        record = {"event_id": i, "action": "connect"}
        for j, index in enumerate(row):
            record[qid_path(j).split(".")[0]] = {"ip": universe[int(index)]}
        events.append(record)
    return events


def _seeded(seed: Optional[int], count: int) -> List[np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(count)
    return [np.random.default_rng(child) for child in children]


def _depositor_config(mode: Mode, fp: float, capacity: int, blind_bits: Optional[int], group: str,
                      epoch_seconds: int, qid_paths: Sequence[str]) -> DepositorConfig:
    return DepositorConfig(mode=mode, fp=fp, capacity=capacity, blind_bits=blind_bits, group=group,
                           epoch_seconds=epoch_seconds, qid_paths=list(qid_paths))


def _vault_config(mode: Mode, fp: float, capacity: int, blind_bits: Optional[int], group: str,
                  epoch_seconds: int = 0, budget: int = 0) -> VaultConfig:
    return VaultConfig(mode=mode, fp=fp, capacity=capacity, blind_bits=blind_bits, group=group,
                       epoch_seconds=epoch_seconds, budget=budget, snapshot_path=None)


def _in_process(vault: PseudonymVault, capture: Optional[List[bytes]] = None):
    async def factory():
        return vault.connect_in_process(capture)
    return factory


# ---------------------------------------------------------------------------
# run_sim
# ---------------------------------------------------------------------------

@dataclass
class SimReport:
    mode: str
    events: int
    lookups: int
    creations: int
    dummies: int
    mapping_size: int
    evictions: int
    rollovers: int
    messages: int
    elapsed: float
    observations: List[Tuple[int, str, str]] = field(default_factory=list, repr=False)

    @property
    def throughput(self) -> float:
        """Búsquedas por segundo (informativo)"""
        return self.lookups / self.elapsed if self.elapsed > 0 else 0.0

    @property
    def round_trips_per_lookup(self) -> float:
        return self.messages / self.lookups if self.lookups else 0.0

    def structure(self) -> List[int]:
        """
        Relación QID -> pseudónimo sin los valores: cada pseudónimo se
        sustituye por el orden de su primera aparición.
        """
        labels: Dict[str, int] = {}
        return [labels.setdefault(pn, len(labels)) for _, _, pn in self.observations]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([{
            "mode": self.mode,
            "events": self.events,
            "lookups": self.lookups,
            "creations": self.creations,
            "dummies": self.dummies,
            "mapping_size": self.mapping_size,
            "evictions": self.evictions,
            "rollovers": self.rollovers,
            "round_trips_per_lookup": round(self.round_trips_per_lookup, 3),
        }])


def check_consistency(observations: Sequence[Tuple[int, str, str]]) -> int:
    """Número de (epoch, QID) con más de un pseudónimo"""
    seen: Dict[Tuple[int, str], set] = {}
    for epoch, qid, pn in observations:
        seen.setdefault((epoch, qid), set()).add(pn)
    return sum(1 for pseudonyms in seen.values() if len(pseudonyms) > 1)


def check_epoch_isolation(observations: Sequence[Tuple[int, str, str]]) -> int:
    """Número de QIDs cuyo pseudónimo se repite en epochs distintas"""
    epochs_by_pn: Dict[Tuple[str, str], set] = {}
    for epoch, qid, pn in observations:
        epochs_by_pn.setdefault((qid, pn), set()).add(epoch)
    return sum(1 for epochs in epochs_by_pn.values() if len(epochs) > 1)


async def _run_sim(cfg: SimConfig) -> SimReport:
    workload = np.random.default_rng(cfg.effective_workload_seed)
    rngs = _seeded(cfg.seed, cfg.num_depositors + 2)
    clock = SimClock()
    epoch_seconds = 1 if cfg.epochs > 1 else 0
    capacity = cfg.effective_capacity
    paths = [qid_path(j) for j in range(cfg.qids_per_event)]

    vault = PseudonymVault(_vault_config(cfg.mode, cfg.fp, capacity, cfg.blind_bits, cfg.effective_group,
                                         epoch_seconds, cfg.budget),
                           rng=rngs[0], clock=clock)
    master = MasterSecret(random_bytes(32, rngs[1]))
    dep_cfg = _depositor_config(cfg.mode, cfg.fp, capacity, cfg.blind_bits, cfg.effective_group,
                                epoch_seconds, paths)
    depositors = [Depositor(dep_cfg, master, _in_process(vault), rng=rngs[2 + d], clock=clock)
                  for d in range(cfg.num_depositors)]
    for depositor in depositors:
        await depositor.connect()

    events = make_events(cfg, workload)
    observations: List[Tuple[int, str, str]] = []
    chunks = np.array_split(np.arange(len(events)), cfg.epochs)

    async def work(d: int, indices: Sequence[int], epoch: int) -> List[Tuple[int, int, dict]]:
        out = []
        for i in indices:
            if i % cfg.num_depositors == d:
                out.append((i, epoch, await depositors[d].pseudonymise(events[i], epoch)))
        return out

    started = time.perf_counter()
    for e, chunk in enumerate(chunks):
        if e > 0:
            clock.advance(epoch_seconds)
            await vault.tick()
        epoch = vault.current_epoch
        results = await asyncio.gather(*(work(d, chunk, epoch) for d in range(cfg.num_depositors)))
        for i, ep, output in sorted((r for batch in results for r in batch), key=lambda r: r[0]):
            for path in paths:
                group, key = path.split(".")
                observations.append((ep, events[i][group][key], output[group][key]))
    elapsed = time.perf_counter() - started

    for depositor in depositors:
        await depositor.close()
    await vault.shutdown()

    if cfg.budget == 0:
        violations = check_consistency(observations)
        if violations:
            raise SimulationError(f"global_pseudonym_consistency: {violations} QIDs con varios pseudónimos")
    else:
        early = [b for b in vault.evicted_budgets if b < cfg.budget]
        lingering = [e for e in vault.entries if e.budget_used >= cfg.budget]
        if early or lingering:
            raise SimulationError(f"eviction_soundness: {len(early)} expulsiones prematuras, "
                                  f"{len(lingering)} entradas por encima del límite")
    if cfg.epochs > 1:
        repeats = check_epoch_isolation(observations)
        if repeats:
            raise SimulationError(f"epoch_isolation: {repeats} pseudónimos repetidos entre epochs")

    report = SimReport(
        mode=cfg.mode.value,
        events=len(events),
        lookups=sum(d.stats["lookups"] for d in depositors),
        creations=vault.stats["creations"],
        dummies=sum(d.stats["dummies"] for d in depositors),
        mapping_size=len(vault),
        evictions=vault.stats["evictions"],
        rollovers=vault.stats["rollovers"],
        messages=sum(d.stats["messages"] for d in depositors) - len(depositors),
        elapsed=elapsed,
        observations=observations,
    )
    log_system_event("sim_done", {"mode": report.mode, "events": report.events,
                                  "lookups": report.lookups, "evictions": report.evictions,
                                  "throughput": round(report.throughput, 1)})
    return report


def run_sim(cfg: SimConfig) -> SimReport:
    cfg.validate()
    return asyncio.run(_run_sim(cfg))


# ---------------------------------------------------------------------------
# Coincidencias frente a fp'
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MatchStats:
    fp_prime: float
    mean_matches: float
    stddev: float
    trials: int


def reference_rate(fp_prime: float) -> float:
    """
    Probabilidad de coincidencia por entrada de la curva de referencia,
    interpolada en escala log-log (constante fuera del rango tabulado).
    """
    xs = np.log(REFERENCE_MATCHES[:, 0])
    ys = np.log(REFERENCE_MATCHES[:, 1] / REFERENCE_PREFILL)
    return float(np.exp(np.interp(np.log(fp_prime), xs, ys)))


def calibrated_blind_bits(fp_prime: float, capacity: int) -> int:
    """b para que un trapdoor parcial ajeno coincida con cada entrada a reference_rate(fp')"""
    params = BloomParams.for_capacity(fp_prime, capacity, blind_bits=0)
    return calculate_blinding_bits(params.m, params.k_star, reference_rate(fp_prime))


def measure_matches(fp_prime: float, prefill: int = 100, trials: int = 50,
                    rng: Optional[np.random.Generator] = None, prefilled: bool = False,
                    blind_bits: Optional[int] = None) -> MatchStats:
    """
    Precarga `prefill` QIDs aleatorios en un PVault de modo C y mide el
    número de coincidencias de `trials` búsquedas (solo SearchMapping).

    Las búsquedas usan QIDs nuevos, o QIDs precargados con prefilled=True,
    y no hacen crecer el PM. Los parámetros se derivan para fp' con
    capacidad `prefill`; sin blind_bits explícito el cegado sigue la curva
    de referencia (calibrated_blind_bits).
    """
    rng = rng if rng is not None else np.random.default_rng()
    capacity = max(1, prefill)
    if blind_bits is None:
        blind_bits = calibrated_blind_bits(fp_prime, capacity)
    params = BloomParams.for_capacity(fp_prime, capacity, blind_bits)
    vault = PseudonymVault(_vault_config(Mode.SECURE_INDEX, fp_prime, capacity, blind_bits, "test"), rng=rng)
    master = MasterSecret(random_bytes(32, rng))
    keys = IndexKeySet.derive(master, params.k_star)

    offset = int(rng.integers(0, 1 << 20))
    stored = qid_universe(prefill, offset)
    for qid in stored:
        token = epoch_token(master, qid.encode(), 0)
        vault.update_mapping(token, build_stored_filter(keys, token, params.m, params.b, rng))

    if prefilled:
        probes = [stored[int(i)] for i in rng.integers(0, prefill, size=trials)]
    else:
        probes = qid_universe(trials, offset + prefill)
    sizes = []
    for qid in probes:
        token = epoch_token(master, qid.encode(), 0)
        lookup = partial_trapdoor(keys, token, params.m, rng).to_filter(params.m)
        sizes.append(len(vault.search_mapping(lookup)))
    mean, stddev = summarize(sizes)
    return MatchStats(fp_prime=fp_prime, mean_matches=mean, stddev=stddev, trials=trials)


def reproduce_fig4(fp_list: Sequence[float], prefill: int = 100, trials: int = 50, seed: Optional[int] = 0,
                   prefilled: bool = False, blind_bits: Optional[int] = None) -> List[MatchStats]:
    """Una fila (fp', media, desviación, trials) por cada fp'"""
    rngs = _seeded(seed, len(fp_list))
    results = []
    for fp_prime, rng in zip(fp_list, rngs):
        stats = measure_matches(fp_prime, prefill, trials, rng, prefilled, blind_bits)
        logger.info("fp'=%.4f media=%.2f sd=%.2f", stats.fp_prime, stats.mean_matches, stats.stddev)
        results.append(stats)
    return results


def fig4_frame(stats: Sequence[MatchStats]) -> pd.DataFrame:
    return pd.DataFrame([[s.fp_prime, s.mean_matches, s.stddev, s.trials] for s in stats],
                        columns=FIG4_COLUMNS)


def write_fig4_csv(stats: Sequence[MatchStats], path: str) -> pd.DataFrame:
    frame = fig4_frame(stats)
    frame.to_csv(path, index=False, float_format="%.6f")
    return frame


# ---------------------------------------------------------------------------
# Ataque de diccionario
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AttackReport:
    mode: str
    universe_size: int
    deposits: int
    sightings: int
    recovered: int

    @property
    def recovery_rate(self) -> float:
        """Fracción de avistamientos de depósitos ajenos recuperados; 0 sin avistamientos"""
        return self.recovered / self.sightings if self.sightings else 0.0


async def _dictionary_attack(mode: Mode, universe: List[str], deposits: int, probes: int,
                             fp: float, seed: Optional[int], group: str) -> AttackReport:
    rngs = _seeded(seed, 5)
    workload = rngs[4]
    capacity = max(16, deposits + probes)
    vault = PseudonymVault(_vault_config(mode, fp, capacity, None, group), rng=rngs[0])
    master = MasterSecret(random_bytes(32, rngs[1]))
    dep_cfg = _depositor_config(mode, fp, capacity, None, group, 0, ["src.ip"])

    order = workload.permutation(len(universe))
    victim_qids = [universe[int(i)] for i in order[:deposits]]
    attacker_qids = [universe[int(i)] for i in order[deposits:deposits + probes]]

    victim = Depositor(dep_cfg, master, _in_process(vault), rng=rngs[2])
    await victim.connect()
    for qid in victim_qids:
        await victim.pseudonym_for(qid.encode(), 0)
    await victim.close()

    capture: List[bytes] = []
    attacker = Depositor(dep_cfg, master, _in_process(vault, capture), rng=rngs[3])
    await attacker.connect()
    states = []
    for qid in attacker_qids:
        _, state = await attacker.probe(qid.encode(), 0)
        states.append(state)
    await attacker.close()
    await vault.shutdown()

    own = {epoch_token(master, q.encode(), 0) for q in attacker_qids}
    dictionary = {epoch_token(master, q.encode(), 0): q for q in universe}
    responses = []
    for frame in capture:
        msg = decode(frame)
        if msg.type in (MessageType.LOOKUP_RESPONSE, MessageType.OT_TRANSFER_RESPONSE):
            responses.append(msg)

    sightings = recovered = 0
    for msg, state in zip(responses, states):
        if mode is Mode.HMAC:
            if msg.body["token"] not in own:
                sightings += 1
                recovered += msg.body["token"] in dictionary
        elif mode is Mode.UNOBSERVABLE:
            for match in msg.body["matches"]:
                sightings += 1
                recovered += match["item"] in universe
        elif mode is Mode.SECURE_INDEX:
            for match in msg.body["matches"]:
                if match["hmac"] in own:
                    continue
                sightings += 1
                recovered += match["hmac"] in dictionary
        else:
            located = {tag(state.key, token): token for token in dictionary}
            for entry in msg.body["entries"]:
                token = located.get(entry["idx"])
                if token in own:
                    continue
                sightings += 1
                if token is not None:
                    recovered += 1
                    continue
                plaintext = unseal(state.key, entry["ct"], entry["idx"])
                recovered += plaintext is not None and plaintext[:32] in dictionary

    report = AttackReport(mode=mode.value, universe_size=len(universe), deposits=deposits,
                          sightings=sightings, recovered=recovered)
    log_system_event("dictionary_attack", {"mode": report.mode, "sightings": sightings,
                                           "recovered": recovered})
    return report


def dictionary_attack(mode: Union[Mode, str], qid_universe_size: Union[int, Sequence[str]] = 1000,
                      deposits: int = 100, probes: int = 20, fp: float = 0.1,
                      seed: Optional[int] = 0, group: Optional[str] = None) -> AttackReport:
    """
    Ataque de un Depositor interno: enumera el universo de QIDs, calcula
    sus tokens de epoch y los busca en el material capturado.

    En modo D se usa por defecto el grupo de producción: en el grupo de
    prueba dos HMACs caen en el mismo índice con probabilidad 1/q.
    """
    mode = Mode.parse(mode)
    universe = list(qid_universe_size) if not isinstance(qid_universe_size, int) else qid_universe(qid_universe_size)
    if deposits + probes > len(universe):
        raise ValueError("deposits + probes no puede superar el universo")
    if group is None:
        group = "production" if mode is Mode.SECURE_INDEX_OT else "test"
    return asyncio.run(_dictionary_attack(mode, universe, deposits, probes, fp, seed, group))

