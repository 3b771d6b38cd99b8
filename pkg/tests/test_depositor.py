import json

import pytest

from conftest import connected, depositor_config, in_process, run, vault_config
from crypto import parse_pseudonym
from depositor import (
    Depositor,
    DepositorError,
    VaultUnavailable,
    epoch_token,
    get_path,
    qid_bytes,
    set_path,
)
from protocol import MessageType, decode
from pvault import PseudonymVault

MODES = ["A", "B", "C", "D"]


def test_dotted_paths():
    record = {"src": {"ip": "10.0.0.1"}, "user": "ana"}
    assert get_path(record, "src.ip") == (True, "10.0.0.1")
    assert get_path(record, "dst.ip") == (False, None)
    assert get_path(record, "user.name") == (False, None)
    set_path(record, "src.ip", "pn:00")
    assert record["src"]["ip"] == "pn:00"


def test_qid_bytes_is_canonical():
    assert qid_bytes("10.0.0.1") == b"10.0.0.1"
    assert qid_bytes(b"raw") == b"raw"
    assert qid_bytes({"b": 1, "a": 2}) == b'{"a":2,"b":1}'
    assert qid_bytes(42) == b"42"


def test_epoch_tokens_differ_per_epoch(master):
    tokens = {epoch_token(master, b"10.0.0.1", e) for e in range(3)}
    assert len(tokens) == 3


@pytest.mark.parametrize("mode", MODES)
def test_repeated_qid_keeps_its_pseudonym(mode, master, rng):
    async def scenario():
        vault = PseudonymVault(vault_config(mode), rng=rng)
        depositor = await connected(vault, master, rng)
        first = await depositor.pseudonym_for(b"10.0.0.1")
        second = await depositor.pseudonym_for(b"10.0.0.1")
        other = await depositor.pseudonym_for(b"10.0.0.2")
        await depositor.close()
        await vault.shutdown()
        return first, second, other, depositor.stats

    first, second, other, stats = run(scenario())
    assert first == second != other
    assert stats["lookups"] == 3
    if mode != "A":
        assert stats["dummies"] == 1
        assert stats["creations"] == 3


@pytest.mark.parametrize("mode", ["B", "C", "D"])
def test_every_lookup_is_followed_by_one_create(mode, master, rng):
    async def scenario():
        capture = []
        vault = PseudonymVault(vault_config(mode), rng=rng)
        depositor = await connected(vault, master, rng, capture=capture)
        for qid in [b"10.0.0.1", b"10.0.0.1", b"10.0.0.2", b"10.0.0.1"]:
            await depositor.pseudonym_for(qid)
        await depositor.close()
        await vault.shutdown()
        return capture, len(vault)

    capture, size = run(scenario())
    requests = [decode(frame).type for frame in capture]
    requests = [t for t in requests if t in (MessageType.LOOKUP_REQUEST, MessageType.OT_TRANSFER_REQUEST,
                                             MessageType.CREATE_REQUEST)]
    assert len(requests) == 8
    assert requests[1::2] == [MessageType.CREATE_REQUEST] * 4
    # dos entradas reales y dos dummies
    assert size == 4


def test_unobservable_mode_sends_item_and_hex_dummies(master, rng):
    async def scenario():
        capture = []
        vault = PseudonymVault(vault_config("B"), rng=rng)
        depositor = await connected(vault, master, rng, capture=capture)
        await depositor.pseudonym_for(b"10.0.0.9")
        await depositor.pseudonym_for(b"10.0.0.9")
        await vault.shutdown()
        return capture

    creates = [decode(f) for f in run(scenario()) if decode(f).type is MessageType.CREATE_REQUEST]
    assert creates[0].body["item"] == "10.0.0.9"
    dummy = creates[1].body["item"]
    assert len(dummy) == 64 and int(dummy, 16) >= 0


def test_dummy_seed_makes_dummies_reproducible(master):
    cfg = depositor_config("C", dummy_seed=3)
    a = Depositor(cfg, master, in_process(None))
    b = Depositor(depositor_config("C", dummy_seed=3), master, in_process(None))
    assert a.make_dummy(0)[0] == b.make_dummy(0)[0]


def test_pseudonymise_replaces_only_qid_fields(master, rng):
    async def scenario():
        vault = PseudonymVault(vault_config("C"), rng=rng)
        depositor = await connected(vault, master, rng, qid_paths=["src.ip", "dst.ip", "user"])
        record = {"src": {"ip": "10.0.0.1", "port": 443}, "dst": {"ip": "10.0.0.1"}, "action": "connect"}
        output = await depositor.pseudonymise(record)
        await vault.shutdown()
        return record, output

    record, output = run(scenario())
    assert record["src"]["ip"] == "10.0.0.1"
    assert output["src"]["ip"] == output["dst"]["ip"]
    assert len(parse_pseudonym(output["src"]["ip"])) == 16
    assert output["src"]["port"] == 443 and output["action"] == "connect"
    assert "user" not in output


def test_pipeline_keeps_order_and_skips_bad_lines(master, rng):
    lines = ['{"src": {"ip": "10.0.0.1"}, "n": 1}', "no json", "[1, 2]", "",
             '{"src": {"ip": "10.0.0.2"}, "n": 2}', '{"src": {"ip": "10.0.0.1"}, "n": 3}']

    async def source():
        for line in lines:
            yield line

    async def scenario():
        vault = PseudonymVault(vault_config("A"), rng=rng)
        depositor = await connected(vault, master, rng, buffer_size=2)
        out = []
        written = await depositor.run_pipeline(source(), out.append)
        await vault.shutdown()
        return written, out, depositor.stats

    written, out, stats = run(scenario())
    records = [json.loads(line) for line in out]
    assert written == 3 and stats["failed"] == 2
    assert [r["n"] for r in records] == [1, 2, 3]
    assert records[0]["src"]["ip"] == records[2]["src"]["ip"] != records[1]["src"]["ip"]


async def lines_from(items):
    for item in items:
        yield item


def test_unencodable_qid_rejects_only_its_record(master, rng):
    lines = ['{"src": {"ip": "\\ud800"}, "n": 1}',
             '{"src": {"ip": "10.0.0.1"}, "note": "\\udc00", "n": 2}',
             '{"action":  "noop", "n": 3}']

    async def scenario():
        vault = PseudonymVault(vault_config("A"), rng=rng)
        depositor = await connected(vault, master, rng)
        out = []
        written = await depositor.run_pipeline(lines_from(lines), out.append)
        await vault.shutdown()
        return written, out, depositor.stats

    written, out, stats = run(scenario())
    assert written == 2 and stats["failed"] == 1
    # el surrogate fuera de los QIDs sobrevive escapado
    out[0].encode("utf-8")
    assert json.loads(out[0])["note"] == "\udc00"
    # sin QIDs la línea no se toca
    assert out[1] == lines[2]
    with pytest.raises(DepositorError):
        qid_bytes("\ud800")


@pytest.mark.parametrize("mode", ["A", "C"])
def test_output_stream_reverses_through_the_mapping(mode, master, rng):
    universe = [f"10.0.0.{i}" for i in range(20)]
    records = [{"src": {"ip": universe[i % 20], "port": 1000 + i}, "dst": {"ip": universe[(7 * i) % 20]}, "n": i}
               for i in range(40)]

    async def scenario():
        vault = PseudonymVault(vault_config(mode), rng=rng)
        depositor = await connected(vault, master, rng, qid_paths=["src.ip", "dst.ip"])
        out = []
        await depositor.run_pipeline(lines_from([json.dumps(r) for r in records]), out.append)
        await vault.shutdown()
        return out, vault.dump_mapping()

    out, mapping = run(scenario())

    # GIVEN el mapping del PVault y los tokens de epoch del universo
    by_token = {epoch_token(master, qid.encode(), 0): qid for qid in universe}
    by_pseudonym = {pn: by_token[token] for token, pn in mapping.items() if token in by_token}
    assert len(by_pseudonym) == 20

    # WHEN cada pseudónimo de la salida se deshace
    restored = []
    for line in out:
        record = json.loads(line)
        for path in ("src.ip", "dst.ip"):
            _, value = get_path(record, path)
            set_path(record, path, by_pseudonym[parse_pseudonym(value)])
        restored.append(record)

    # THEN se recupera la entrada exacta
    assert restored == records


def test_handshake_mismatch_is_reported(master, rng):
    async def scenario():
        vault = PseudonymVault(vault_config("C"), rng=rng)
        depositor = Depositor(depositor_config("C", fp=0.01), master, in_process(vault), rng=rng)
        try:
            await depositor.connect()
        finally:
            await vault.shutdown()

    with pytest.raises(DepositorError) as excinfo:
        run(scenario())
    assert excinfo.value.code == "mismatch"


class TestReconnect:
    def test_first_connection_is_retried(self, master, rng):
        async def scenario():
            vault = PseudonymVault(vault_config("A"), rng=rng)
            attempts = []

            async def flaky():
                attempts.append(1)
                if len(attempts) == 1:
                    raise ConnectionRefusedError("todavía no")
                return vault.connect_in_process()

            depositor = Depositor(depositor_config("A"), master, flaky, rng=rng)
            await depositor.open()
            pseudonym = await depositor.pseudonym_for(b"10.0.0.1")
            await vault.shutdown()
            return pseudonym, depositor.stats["reconnects"]

        pseudonym, reconnects = run(scenario())
        assert len(pseudonym) == 16 and reconnects == 1

    def test_lookup_survives_a_dropped_session(self, master, rng):
        async def scenario():
            vault = PseudonymVault(vault_config("C"), rng=rng)
            depositor = await connected(vault, master, rng)
            before = await depositor.pseudonym_for(b"10.0.0.1")
            await vault.shutdown()
            after = await depositor.pseudonym_for(b"10.0.0.1")
            await vault.shutdown()
            return before, after, depositor.stats["reconnects"]

        before, after, reconnects = run(scenario())
        assert before == after and reconnects == 1

    def test_unreachable_vault(self, master, rng):
        async def never():
            raise ConnectionRefusedError("sin PVault")

        async def scenario():
            depositor = Depositor(depositor_config("A", retry_attempts=2), master, never, rng=rng)
            await depositor.open()

        with pytest.raises(VaultUnavailable):
            run(scenario())
