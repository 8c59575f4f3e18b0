import random
import struct
import zlib

import pytest

from dtn_learn.bundle import BundleMeta, Kind, Priority, create_bundle, payload_digest
from dtn_learn.store import BundleStore, PutResult, RemoveReason, StorageFull

HOUR = 3600 * 1000


def mk(source="rural-1", dest="urban-1", payload=b"data", ttl=24 * HOUR, now=0,
       kind=Kind.CONTENT_UPDATE, priority=Priority.CONTENT):
    return create_bundle(source, dest, kind, priority, payload, ttl, now)


def test_put_then_duplicate(tmp_path):
    st = BundleStore(tmp_path / "s")
    b = mk()
    assert st.put(b) == PutResult.INSERTED
    assert st.put(b) == PutResult.DUPLICATE
    assert len(st.entries()) == 1
    assert st.read_payload(b.id) == b.payload


def test_reopen_round_trip(tmp_path):
    root = tmp_path / "s"
    st = BundleStore(root)
    bundles = [mk(payload=bytes([i]) * (1000 + i), now=i) for i in range(3)]
    for b in bundles:
        st.put(b)
    st.close()

    st2 = BundleStore(root)
    for b in bundles:
        assert st2.has_complete(b.id)
        assert st2.read_payload(b.id) == b.payload
        got = st2.get_bundle(b.id)
        assert got == b


def test_quota_enforced(tmp_path):
    st = BundleStore(tmp_path / "s", quota=1_000_000)
    kept = [mk(payload=bytes([i]) * 200_000, now=i) for i in range(3)]
    for b in kept:
        st.put(b)
    big = mk(payload=b"z" * 400_001, now=99)
    with pytest.raises(StorageFull):
        st.put(big)
    for b in kept:
        assert st.has_complete(b.id)
    assert st.get(big.id) is None


def test_expire_against_brute_force(tmp_path):
    rng = random.Random(7)
    st = BundleStore(tmp_path / "s")
    bundles = []
    for i in range(100):
        b = mk(payload=bytes([i % 256]) * 10, ttl=rng.randrange(1, 1000), now=i)
        bundles.append(b)
        st.put(b)
    now = 500
    expected = sorted(b.id for b in bundles if b.created_at + b.ttl <= now)
    got = st.expire_bundles(now)
    assert got == expected
    remaining = {e.meta.id for e in st.entries()}
    assert remaining == {b.id for b in bundles if b.created_at + b.ttl > now}


def test_expire_boundary(tmp_path):
    st = BundleStore(tmp_path / "s")
    b = mk(ttl=HOUR, now=0)
    st.put(b)
    assert st.expire_bundles(HOUR - 60_000) == []
    assert st.expire_bundles(HOUR) == [b.id]


def test_offer_queue_priority_then_age(tmp_path):
    st = BundleStore(tmp_path / "s")
    content_old = mk(payload=b"c1", now=100)
    control_new = mk(payload=b"r", now=200, kind=Kind.TOPIC_REQUEST, priority=Priority.CONTROL)
    content_new = mk(payload=b"c2", now=300)
    for b in (content_new, control_new, content_old):
        st.put(b)
    assert st.offer_queue(now=1000) == [control_new.id, content_old.id, content_new.id]


def test_offer_queue_matches_sort_oracle(tmp_path):
    rng = random.Random(21)
    st = BundleStore(tmp_path / "s")
    metas = []
    for i in range(50):
        b = mk(
            payload=bytes([i]) * rng.randrange(1, 50),
            now=rng.randrange(0, 500),
            ttl=rng.randrange(400, 2000),
            priority=rng.choice([Priority.CONTROL, Priority.CONTENT]),
            kind=rng.choice([Kind.TOPIC_REQUEST, Kind.CONTENT_UPDATE, Kind.CONTENT_RESPONSE]),
        )
        if st.get(b.id) is None:
            st.put(b)
            metas.append(b)
    now = 700
    live = [b for b in metas if b.created_at + b.ttl > now]
    oracle = [b.id for b in sorted(live, key=lambda b: (int(b.priority), b.created_at, b.id))]
    assert st.offer_queue(now) == oracle


def test_offer_queue_excludes_partials_and_expired(tmp_path):
    st = BundleStore(tmp_path / "s")
    done = mk(payload=b"ok", now=0)
    st.put(done)
    expired = mk(payload=b"old", ttl=10, now=0)
    st.put(expired)
    pending = mk(payload=b"pp" * 100, now=0, dest="rural-2")
    st.begin_partial(BundleMeta.of(pending), now=0)
    st.write_chunk(pending.id, 0, pending.payload[:50])
    assert st.offer_queue(now=5000) == [done.id]


def test_partial_chunks_then_promote(tmp_path):
    st = BundleStore(tmp_path / "s")
    b = mk(payload=b"abcdefgh" * 1000, now=0)
    meta = BundleMeta.of(b)
    st.begin_partial(meta, now=10)
    data = b.payload
    st.write_chunk(b.id, 0, data[:3000])
    st.write_chunk(b.id, 3000, data[3000:])
    assert st.promote(b.id)
    assert st.has_complete(b.id)
    assert st.read_payload(b.id) == data


def test_promote_rejects_bad_digest(tmp_path):
    st = BundleStore(tmp_path / "s")
    b = mk(payload=b"x" * 100, now=0)
    meta = BundleMeta.of(b)
    st.begin_partial(meta, now=0)
    st.write_chunk(b.id, 0, b"y" * 100)  # wrong bytes, right length
    assert not st.promote(b.id)
    assert not st.has_complete(b.id)


def test_partial_survives_reopen(tmp_path):
    root = tmp_path / "s"
    st = BundleStore(root)
    b = mk(payload=bytes(range(256)) * 64, now=0)
    meta = BundleMeta.of(b)
    st.begin_partial(meta, now=0)
    st.write_chunk(b.id, 0, b.payload[:4096])
    st.write_chunk(b.id, 4096, b.payload[4096:8192])
    st.close()

    st2 = BundleStore(root)
    e = st2.get(b.id)
    assert e is not None and not e.complete
    assert e.ranges == [(0, 8192)]
    st2.write_chunk(b.id, 8192, b.payload[8192:])
    assert st2.promote(b.id)


def test_torn_journal_tail_dropped(tmp_path):
    root = tmp_path / "s"
    st = BundleStore(root)
    b1 = mk(payload=b"one", now=1)
    b2 = mk(payload=b"two", now=2)
    st.put(b1)
    st.put(b2)
    st.close()

    journal = root / "index.journal"
    raw = journal.read_bytes()
    journal.write_bytes(raw[:-3])  # tear the final record

    st2 = BundleStore(root)
    assert st2.has_complete(b1.id)
    assert st2.get(b2.id) is None


def test_corrupt_journal_record_stops_replay(tmp_path):
    root = tmp_path / "s"
    st = BundleStore(root)
    b1 = mk(payload=b"one", now=1)
    b2 = mk(payload=b"two", now=2)
    st.put(b1)
    st.put(b2)
    st.close()

    journal = root / "index.journal"
    raw = bytearray(journal.read_bytes())
    # find the second record's body and flip a byte
    (len1,) = struct.unpack_from("<I", raw, 1)
    second_body_at = 1 + 4 + len1 + 4 + 4
    raw[second_body_at + 5] ^= 0xFF
    journal.write_bytes(bytes(raw))

    st2 = BundleStore(root)
    assert st2.has_complete(b1.id)
    assert st2.get(b2.id) is None


def test_torn_chunk_loses_only_last_chunk(tmp_path):
    root = tmp_path / "s"
    st = BundleStore(root)
    b = mk(payload=bytes(range(256)) * 128, now=0)  # 32 KiB
    meta = BundleMeta.of(b)
    st.begin_partial(meta, now=0)
    for off in range(0, 32768, 8192):
        st.write_chunk(b.id, off, b.payload[off : off + 8192])
    st.close()

    # tear the payload bytes of the final chunk without touching the journal
    payload_file = root / f"{b.id.hex()}.payload"
    data = bytearray(payload_file.read_bytes())
    data[32768 - 100] ^= 0xFF
    payload_file.write_bytes(bytes(data))

    st2 = BundleStore(root)
    e = st2.get(b.id)
    assert e is not None and not e.complete
    assert e.ranges == [(0, 24576)]  # last chunk dropped, earlier prefix intact


def test_remove_custody(tmp_path):
    st = BundleStore(tmp_path / "s")
    b = mk()
    st.put(b)
    st.remove(b.id, RemoveReason.CUSTODY)
    assert st.get(b.id) is None
    assert not (tmp_path / "s" / f"{b.id.hex()}.payload").exists()


def test_dedup_property_many_puts(tmp_path):
    rng = random.Random(3)
    st = BundleStore(tmp_path / "s")
    pool = [mk(payload=bytes([i]) * 8, now=i) for i in range(10)]
    for _ in range(100):
        st.put(rng.choice(pool))
    ids = [e.meta.id for e in st.entries()]
    assert len(ids) == len(set(ids)) == 10


def test_journal_crc_layout(tmp_path):
    # first journal record after the version byte is CRC-framed as documented
    st = BundleStore(tmp_path / "s")
    b = mk()
    st.put(b)
    st.close()
    raw = (tmp_path / "s" / "index.journal").read_bytes()
    assert raw[0] == 0x01
    (body_len,) = struct.unpack_from("<I", raw, 1)
    body = raw[5 : 5 + body_len]
    (crc,) = struct.unpack_from("<I", raw, 5 + body_len)
    assert zlib.crc32(body) == crc
