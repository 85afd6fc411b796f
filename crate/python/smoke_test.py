#!/usr/bin/env python3
"""End-to-end smoke test for the hekate_mini extension module.

Builds the cdylib if needed, imports it, and exercises the whole surface:
content store, handshake and frame codecs, a live seeder served over real
TCP, and the benchmark entry points. Exits nonzero on the first failure.
"""

import shutil
import socket
import subprocess
import sys
import time
from pathlib import Path

HERE = Path(__file__).resolve().parent
REPO = HERE.parent
CDYLIB = REPO / "target" / "debug" / "libhekate_mini.so"
MODULE = HERE / "hekate_mini.so"


def ensure_module():
    if not CDYLIB.exists():
        subprocess.run(
            ["cargo", "build", "-p", "hekate-py"], cwd=REPO, check=True
        )
    if not MODULE.exists() or CDYLIB.stat().st_mtime > MODULE.stat().st_mtime:
        shutil.copy2(CDYLIB, MODULE)
    sys.path.insert(0, str(HERE))


ensure_module()
import hekate_mini as hm  # noqa: E402

PEER_ID = b"-HK0001-pysmoke00000"
assert len(PEER_ID) == 20


def recv_exact(sock, n):
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError(f"peer closed after {len(buf)} of {n} bytes")
        buf += chunk
    return buf


def check_store_and_codec():
    content = bytes((i * 7 + 3) % 256 for i in range(256 * 1024))
    store = hm.ContentStore(content, piece_length=64 * 1024)
    assert len(store) == len(content)
    assert store.piece_length == 64 * 1024
    info_hash = store.info_hash()
    assert isinstance(info_hash, bytes) and len(info_hash) == 20
    # The id is a digest of the content layout: same input, same id.
    assert hm.ContentStore(content, piece_length=64 * 1024).info_hash() == info_hash

    hs = hm.encode_handshake(info_hash, PEER_ID)
    assert len(hs) == hm.HANDSHAKE_LEN == 54
    assert hs[1:14] == hm.PROTOCOL_TAG
    back_hash, back_id = hm.decode_handshake(hs)
    assert back_hash == info_hash and back_id == PEER_ID
    try:
        hm.decode_handshake(b"\x0dNOT-THE-TAG!!" + bytes(40))
    except ValueError:
        pass
    else:
        raise AssertionError("bad protocol tag was accepted")

    reader = hm.FrameReader()
    reader.push(hm.encode_keepalive())
    reader.push(hm.encode_unchoke())
    assert reader.next_frame() == {"type": "keepalive"}
    assert reader.next_frame() == {"type": "unchoke"}
    assert reader.next_frame() is None

    # A frame arriving one byte at a time decodes only once complete.
    req = hm.encode_request(2, 16384, 16384)
    for byte_at_a_time in req[:-1]:
        reader.push(bytes([byte_at_a_time]))
        assert reader.next_frame() is None
    reader.push(req[-1:])
    assert reader.next_frame() == {
        "type": "request",
        "index": 2,
        "begin": 16384,
        "length": 16384,
    }

    piece = hm.encode_piece(1, 512, b"abc")
    reader.push(piece)
    assert reader.next_frame() == {"type": "piece", "index": 1, "begin": 512, "data": b"abc"}
    return content, store


def fetch_chunk(port, info_hash, index, begin, length):
    with socket.create_connection(("127.0.0.1", port), timeout=5) as sock:
        sock.settimeout(5)
        sock.sendall(hm.encode_handshake(info_hash, PEER_ID))
        their_hash, _their_id = hm.decode_handshake(recv_exact(sock, hm.HANDSHAKE_LEN))
        assert their_hash == info_hash
        sock.sendall(hm.encode_interested())

        reader = hm.FrameReader()
        unchoked = False
        requested = False
        deadline = time.monotonic() + 5
        while time.monotonic() < deadline:
            frame = reader.next_frame()
            if frame is None:
                reader.push(sock.recv(65536))
                continue
            if frame["type"] == "unchoke":
                unchoked = True
                if not requested:
                    sock.sendall(hm.encode_request(index, begin, length))
                    requested = True
            elif frame["type"] == "piece":
                assert unchoked, "piece arrived before unchoke"
                assert frame["index"] == index and frame["begin"] == begin
                return frame["data"]
        raise AssertionError("no piece within the deadline")


def check_live_seeder(content, store):
    seeder = hm.start_seeder(store, choke_interval_ms=100, idle_timeout_ms=10_000)
    try:
        assert seeder.is_running()
        assert seeder.info_hash() == store.info_hash()
        assert seeder.port > 0

        piece_len = store.piece_length
        index, begin, length = 1, 4096, 8192
        data = fetch_chunk(seeder.port, store.info_hash(), index, begin, length)
        start = index * piece_len + begin
        assert data == content[start : start + length], "served bytes differ from the store"

        deadline = time.monotonic() + 3
        while time.monotonic() < deadline:
            stats = seeder.stats()
            if stats["sessions_closed"] == stats["sessions_opened"]:
                break
            time.sleep(0.05)
        stats = seeder.stats()
        assert stats["sessions_opened"] == 1
        assert stats["requests_served"] == 1
        assert stats["bytes_sent"] >= length
    finally:
        seeder.stop()
    assert not seeder.is_running()
    seeder.stop()  # idempotent

    # The context-manager form winds down on exit.
    with hm.start_seeder(store) as ctx_seeder:
        port = ctx_seeder.port
        assert port > 0
    assert not ctx_seeder.is_running()


def check_benchmarks():
    spawn = hm.bench_spawn(tasks=20_000)
    assert spawn["tasks"] == 20_000
    assert 0 < spawn["bytes_per_task"] <= 2048
    assert spawn["spawns_per_sec"] > 0

    switch = hm.bench_switch(pairs=1, iters=200_000)
    # Each task's startup resume counts too, so a pair contributes a little
    # over 2x its iterations.
    assert switch["switches"] >= 400_000
    assert switch["switches_per_sec"] > 0

    summary = hm.run_local_swarm(
        peers=8,
        chunks_per_peer=16,
        content_len=1 << 20,
        choke_interval_ms=50,
        seed=7,
    )
    assert summary["peers_completed"] == 8
    assert not summary["timed_out"]
    assert summary["payload_bytes"] == 8 * 16 * 16_384
    assert summary["requests_sent"] == 8 * 16
    assert summary["fairness"]["bound_violations"] == 0
    assert summary["fairness"]["never_unchoked"] == 0
    assert summary["seeder"]["requests_served"] == 8 * 16
    assert summary["runtime"]["live_tasks"] == 0
    return spawn, switch, summary


def main():
    content, store = check_store_and_codec()
    print("codec and content store: ok")
    check_live_seeder(content, store)
    print("live TCP seeder round trip: ok")
    spawn, switch, summary = check_benchmarks()
    print(
        "benchmarks: ok "
        f"({spawn['bytes_per_task']} bytes/task, "
        f"{switch['switches_per_sec'] / 1e6:.1f}M switches/s, "
        f"swarm {summary['aggregate_throughput'] / 1e6:.0f} MB/s)"
    )
    print("smoke test passed")


if __name__ == "__main__":
    main()
