import json
import os

import numpy as np
import pytest

from conftest import run, vault_config
from crypto import IndexKeySet, TEST_GROUP
from depositor import epoch_token
from harness import SimClock
from ot import OtCiphertextSet, OtEntry, index_for, receiver_derive, receiver_open
from protocol import MessageType, Mode, make
from pvault import PseudonymVault, VaultError
from secure_index import BloomFilter, build_stored_filter, full_trapdoor, partial_trapdoor


def token(i: int) -> bytes:
    return i.to_bytes(32, "big")


def hello_for(vault: PseudonymVault, **changes):
    body = dict(k_star=vault.params.k_star, m=vault.params.m, blind_bits=vault.params.b,
                group=vault.group.name, epoch_seconds=vault.config.epoch_seconds)
    body.update(changes)
    return make(MessageType.HELLO, vault.mode, vault.current_epoch, **body)


class IndexedQids:
    """Tokens y filtros de QIDs sintéticos con las claves de un secreto"""

    def __init__(self, vault: PseudonymVault, master, rng):
        self.vault = vault
        self.master = master
        self.rng = rng
        self.keys = IndexKeySet.derive(master, vault.params.k_star)

    def token(self, i: int) -> bytes:
        return epoch_token(self.master, f"10.1.0.{i}".encode(), 0)

    def stored(self, i: int) -> BloomFilter:
        params = self.vault.params
        return build_stored_filter(self.keys, self.token(i), params.m, params.b, self.rng)

    def lookup(self, i: int) -> BloomFilter:
        return partial_trapdoor(self.keys, self.token(i), self.vault.params.m, self.rng).to_filter(
            self.vault.params.m)


# ---------------------------------------------------------------------------
# Modo A
# ---------------------------------------------------------------------------

class TestHmacMapping:
    def test_same_token_same_pseudonym(self, rng):
        vault = PseudonymVault(vault_config("A"), rng=rng)
        first = vault.lookup_or_create_A(token(1))
        assert vault.lookup_or_create_A(token(1)) == first
        assert vault.lookup_or_create_A(token(2)) != first
        assert len(vault) == 2
        assert vault.stats["creations"] == 2 and vault.stats["hits"] == 1

    def test_capacity_is_enforced(self, rng):
        vault = PseudonymVault(vault_config("A", capacity=2), rng=rng)
        vault.lookup_or_create_A(token(1))
        vault.lookup_or_create_A(token(2))
        with pytest.raises(VaultError) as excinfo:
            vault.lookup_or_create_A(token(3))
        assert excinfo.value.code == "capacity"
        # los existentes se siguen resolviendo
        vault.lookup_or_create_A(token(1))

    def test_operations_are_tied_to_the_mode(self, rng):
        vault = PseudonymVault(vault_config("A"), rng=rng)
        with pytest.raises(VaultError) as excinfo:
            vault.search_mapping(BloomFilter.empty(vault.params.m))
        assert excinfo.value.code == "mode"
        with pytest.raises(VaultError):
            vault.update_mapping(token(1), BloomFilter.empty(vault.params.m))
        with pytest.raises(VaultError):
            PseudonymVault(vault_config("C"), rng=rng).lookup_or_create_A(token(1))


# ---------------------------------------------------------------------------
# Modos B, C y D
# ---------------------------------------------------------------------------

class TestSecureIndexMapping:
    def test_update_is_first_writer_wins(self, master, rng):
        vault = PseudonymVault(vault_config("C"), rng=rng)
        qids = IndexedQids(vault, master, rng)
        first = vault.update_mapping(qids.token(1), qids.stored(1))
        assert vault.update_mapping(qids.token(1), qids.stored(1)) == first
        assert len(vault) == 1

    def test_search_finds_own_entry_in_canonical_order(self, master, rng):
        vault = PseudonymVault(vault_config("C"), rng=rng)
        qids = IndexedQids(vault, master, rng)
        pseudonyms = {i: vault.update_mapping(qids.token(i), qids.stored(i)) for i in range(30)}
        for i in range(30):
            matched = vault.search_mapping(qids.lookup(i))
            assert [e.key for e in matched] == sorted(e.key for e in matched)
            own = [e for e in matched if e.hmac_token == qids.token(i)]
            assert len(own) == 1 and own[0].pseudonym == pseudonyms[i]

    def test_filter_size_must_match(self, master, rng):
        vault = PseudonymVault(vault_config("C"), rng=rng)
        with pytest.raises(VaultError) as excinfo:
            vault.search_mapping(BloomFilter.empty(vault.params.m + 8))
        assert excinfo.value.code == "mismatch"

    def test_unobservable_mode_matches_stored_subsets(self, master, rng):
        vault = PseudonymVault(vault_config("B"), rng=rng)
        keys = IndexKeySet.derive(master, vault.params.k_star)
        m = vault.params.m
        stored = full_trapdoor(keys, token(5), m).to_filter(m)
        pseudonym = vault.update_mapping(None, stored, item="10.0.0.5")
        lookup = stored.with_positions(np.arange(0, m, 7))
        matched = vault.search_mapping(lookup)
        assert [(e.item, e.pseudonym) for e in matched] == [("10.0.0.5", pseudonym)]
        with pytest.raises(VaultError):
            vault.update_mapping(None, stored)

    def test_ot_response_opens_only_for_the_owner(self, master, rng):
        vault = PseudonymVault(vault_config("D"), rng=rng)
        qids = IndexedQids(vault, master, rng)
        pseudonyms = {i: vault.update_mapping(qids.token(i), qids.stored(i)) for i in range(10)}

        own = qids.token(3)
        receiver = receiver_derive(TEST_GROUP, vault.ot_sender.s, index_for(TEST_GROUP, own), TEST_GROUP.q, rng)
        sealed = vault.ot_respond(vault.entries, receiver.r)
        plaintext = receiver_open(sealed, receiver, own)
        assert plaintext == own + pseudonyms[3]

        # el receptor no localiza entradas ajenas con su clave
        other = next(qids.token(i) for i in range(10)
                     if index_for(TEST_GROUP, qids.token(i)) != index_for(TEST_GROUP, own))
        copied = OtCiphertextSet(tuple(OtEntry(e.ot_index, e.ciphertext) for e in sealed.entries))
        assert receiver_open(copied, receiver, other) is None


# ---------------------------------------------------------------------------
# Presupuestos
# ---------------------------------------------------------------------------

class TestBudget:
    def test_fourth_lookup_gets_a_new_pseudonym(self, rng):
        vault = PseudonymVault(vault_config("A", budget=3), rng=rng)
        first = [vault.lookup_or_create_A(token(1)) for _ in range(3)]
        assert len(set(first)) == 1
        assert len(vault) == 0
        assert vault.lookup_or_create_A(token(1)) != first[0]
        assert vault.evicted_budgets == [3.0]

    def test_spurious_matches_never_delay_eviction(self, master, rng):
        def own_lookups_until_eviction(spurious: int) -> int:
            vault = PseudonymVault(vault_config("C", budget=3), rng=rng)
            qids = IndexedQids(vault, master, rng)
            stored = qids.stored(1)
            vault.update_mapping(qids.token(1), stored)
            for _ in range(spurious):
                # una búsqueda ajena que casa con la entrada
                vault.charge_budget(vault.search_mapping(stored))
            lookups = 0
            while len(vault):
                lookups += 1
                vault.charge_budget(vault.search_mapping(qids.lookup(1)))
            return lookups

        clean = own_lookups_until_eviction(0)
        assert clean == 2
        assert own_lookups_until_eviction(1) <= clean

    def test_custom_cost_function(self, rng):
        vault = PseudonymVault(vault_config("A", budget=10), rng=rng, cost_fn=lambda entry: 5)
        vault.lookup_or_create_A(token(1))
        assert len(vault) == 1
        vault.lookup_or_create_A(token(1))
        assert len(vault) == 0
        assert vault.stats["evictions"] == 1

    def test_zero_budget_disables_eviction(self, rng):
        vault = PseudonymVault(vault_config("A"), rng=rng)
        for _ in range(50):
            vault.lookup_or_create_A(token(1))
        assert len(vault) == 1 and vault.entries[0].budget_used == 0


# ---------------------------------------------------------------------------
# Epochs y persistencia
# ---------------------------------------------------------------------------

class TestEpochs:
    def test_rollover_clears_mapping_and_snapshot(self, tmp_path, rng):
        path = str(tmp_path / "snap.json")
        clock = SimClock()
        vault = PseudonymVault(vault_config("A", epoch_seconds=10, snapshot_path=path), rng=rng, clock=clock)
        vault.lookup_or_create_A(token(1))
        vault.persist()

        clock.advance(10)
        assert run(vault.tick()) is True
        assert len(vault) == 0 and vault.current_epoch == 1
        with open(path) as f:
            assert json.load(f) == {"epoch": 1, "mode": "A", "entries": []}
        assert run(vault.tick()) is False
        with pytest.raises(ValueError):
            vault.epoch_rollover(1)

    def test_epoch_follows_clock(self, rng):
        clock = SimClock(95.0)
        vault = PseudonymVault(vault_config("A", epoch_seconds=30), rng=rng, clock=clock)
        assert vault.current_epoch == 3
        assert PseudonymVault(vault_config("A"), clock=clock).current_epoch == 0


class TestSnapshots:
    def test_restore_rebuilds_the_index(self, tmp_path, master, rng):
        path = str(tmp_path / "snap.json")
        vault = PseudonymVault(vault_config("C", snapshot_path=path, budget=5), rng=rng)
        qids = IndexedQids(vault, master, rng)
        for i in range(5):
            vault.update_mapping(qids.token(i), qids.stored(i))
        vault.persist()

        restored = PseudonymVault(vault_config("C", snapshot_path=path, budget=5), rng=rng)
        restored.restore()
        assert restored.dump_mapping() == vault.dump_mapping()
        assert [e.budget_used for e in restored.entries] == [1.0] * 5
        own = [e for e in restored.search_mapping(qids.lookup(2)) if e.hmac_token == qids.token(2)]
        assert own[0].pseudonym == vault.dump_mapping()[qids.token(2)]
        assert not [f for f in os.listdir(tmp_path) if f.endswith(".tmp")]

    def test_corrupt_snapshot_is_an_error(self, tmp_path, rng):
        path = tmp_path / "snap.json"
        path.write_text("{ no es json")
        vault = PseudonymVault(vault_config("A", snapshot_path=str(path)), rng=rng)
        with pytest.raises(VaultError) as excinfo:
            vault.restore()
        assert excinfo.value.code == "snapshot"

    def test_past_epoch_snapshot_is_discarded(self, tmp_path, rng):
        path = tmp_path / "snap.json"
        path.write_text(json.dumps({"epoch": 0, "mode": "A", "entries": [
            {"pseudonym": "00" * 16, "budget": 0, "hmac": "A" * 43 + "="}]}))
        vault = PseudonymVault(vault_config("A", snapshot_path=str(path), epoch_seconds=10),
                               rng=rng, clock=SimClock(25.0))
        vault.restore()
        assert len(vault) == 0
        assert not path.exists()

    def test_future_epoch_snapshot_is_an_error(self, tmp_path, rng):
        path = tmp_path / "snap.json"
        path.write_text(json.dumps({"epoch": 7, "mode": "A", "entries": []}))
        vault = PseudonymVault(vault_config("A", snapshot_path=str(path)), rng=rng)
        with pytest.raises(VaultError):
            vault.restore()

    def test_missing_snapshot_starts_empty(self, tmp_path, rng):
        vault = PseudonymVault(vault_config("A", snapshot_path=str(tmp_path / "none.json")), rng=rng)
        vault.restore()
        assert len(vault) == 0


# ---------------------------------------------------------------------------
# Sesiones
# ---------------------------------------------------------------------------

class TestSessions:
    def test_handshake_then_lookup(self, rng):
        async def scenario():
            vault = PseudonymVault(vault_config("A"), rng=rng)
            client = vault.connect_in_process()
            await client.send(hello_for(vault))
            notice = await client.receive()
            await client.send(make(MessageType.LOOKUP_REQUEST, Mode.HMAC, 0, token=token(9)))
            reply = await client.receive()
            await client.close()
            await vault.shutdown()
            return notice, reply

        notice, reply = run(scenario())
        assert notice.type is MessageType.EPOCH_NOTICE
        assert reply.type is MessageType.LOOKUP_RESPONSE and reply.body["token"] == token(9)

    def test_ot_mode_sends_public_key_first(self, rng):
        async def scenario():
            vault = PseudonymVault(vault_config("D"), rng=rng)
            client = vault.connect_in_process()
            await client.send(hello_for(vault))
            replies = [await client.receive(), await client.receive()]
            await vault.shutdown()
            return vault, replies

        vault, replies = run(scenario())
        assert [r.type for r in replies] == [MessageType.OT_PUBLIC_KEY, MessageType.EPOCH_NOTICE]
        assert TEST_GROUP.decode(replies[0].body["s"]) == vault.ot_sender.s

    @pytest.mark.parametrize("changes,code", [
        ({"m": 9}, "mismatch"),
        ({"group": "production"}, "mismatch"),
        ({"epoch_seconds": 60}, "mismatch"),
    ])
    def test_parameter_mismatch_is_rejected(self, rng, changes, code):
        async def scenario():
            vault = PseudonymVault(vault_config("C"), rng=rng)
            client = vault.connect_in_process()
            await client.send(hello_for(vault, **changes))
            reply = await client.receive()
            await vault.shutdown()
            return reply

        reply = run(scenario())
        assert reply.type is MessageType.ERROR and reply.body["code"] == code

    def test_session_must_start_with_hello_and_survives_garbage(self, rng):
        async def scenario():
            vault = PseudonymVault(vault_config("A"), rng=rng)
            client = vault.connect_in_process()
            await client.send(make(MessageType.LOOKUP_REQUEST, Mode.HMAC, 0, token=token(1)))
            early = await client.receive()
            await client.send_raw(b"no es json\n")
            garbage = await client.receive()
            await client.send(make(MessageType.HELLO, Mode.SECURE_INDEX, 0, k_star=2, m=8, blind_bits=0,
                                   group="test", epoch_seconds=0))
            wrong_mode = await client.receive()
            await client.send(hello_for(vault))
            notice = await client.receive()
            await vault.shutdown()
            return early, garbage, wrong_mode, notice

        early, garbage, wrong_mode, notice = run(scenario())
        assert early.body["code"] == "protocol"
        assert garbage.body["code"] == "malformed"
        assert wrong_mode.body["code"] == "mode"
        assert notice.type is MessageType.EPOCH_NOTICE

    def test_capacity_error_reaches_the_client(self, rng):
        async def scenario():
            vault = PseudonymVault(vault_config("A", capacity=1), rng=rng)
            client = vault.connect_in_process()
            await client.send(hello_for(vault))
            await client.receive()
            replies = []
            for i in range(2):
                await client.send(make(MessageType.LOOKUP_REQUEST, Mode.HMAC, 0, token=token(i)))
                replies.append(await client.receive())
            await vault.shutdown()
            return replies

        ok, full = run(scenario())
        assert ok.type is MessageType.LOOKUP_RESPONSE
        assert full.type is MessageType.ERROR and full.body["code"] == "capacity"

    def test_rollover_is_broadcast(self, rng):
        async def scenario():
            clock = SimClock()
            vault = PseudonymVault(vault_config("A", epoch_seconds=5), rng=rng, clock=clock)
            client = vault.connect_in_process()
            await client.send(hello_for(vault))
            await client.receive()
            clock.advance(5)
            await vault.tick()
            notice = await client.receive()
            await vault.shutdown()
            return notice

        notice = run(scenario())
        assert notice.type is MessageType.EPOCH_NOTICE and notice.epoch == 1
