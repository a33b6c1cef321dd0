"""Binary path store.

Layout (all integers little-endian)::

    b"PDMP1"  u8 version  u32 header_len  header (canonical JSON, UTF-8)
    repeated: u32 record_len  record

A record starts with ``u32 path_index, u8 status``. Status 0 is a trajectory;
any other status is an error path followed by ``u16 len`` and a UTF-8
message. A trajectory record continues with::

    u8 d, u8 N, x0[N*d] f64, v0[N*d] f64, t_max f64, t_next f64,
    u32 n_pass, u32 n_cancel, u16 n_windows, u16 n_events,
    windows: u8 i, u8 j, u16 k, f64 s, f64 t, f64 gamma, u8 status
    events:  b"C" u8 i, u8 j, u16 k, f64 s, f64 t, f64 gamma, f64 sigma,
               u8 suppressed, e[d] (NaN when absent), v_pre[2d], v_post[2d]
             b"R" u8 i, u16 l, f64 tau, x_hit[d], v_pre[d], v_post[d]

The digest is blake2b with an 8-byte output over the header and all records
in index order, so it does not depend on how the paths were produced.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from pathlib import Path
from typing import Dict, Iterable, Iterator, Tuple, Union

from .errors import EventCapExceeded, PdmpError, RejectionBudgetExceeded, SimultaneousEvents
from .simulator import Collision, Reflection, Trajectory, Window

MAGIC = b"PDMP1"
VERSION = 1

_STATUS = {EventCapExceeded: 1, SimultaneousEvents: 2, RejectionBudgetExceeded: 3}
_STATUS_NAMES = {0: "ok", 1: "EventCapExceeded", 2: "SimultaneousEvents", 3: "RejectionBudgetExceeded", 4: "PdmpError"}


class StoredError(PdmpError):
    """An error path read back from a store."""

    def __init__(self, kind: str, message: str):
        super().__init__(f"{kind}: {message}")
        self.kind = kind
        self.message = message


def _f(n: int) -> str:
    return "<" + "d" * n


def encode_record(index: int, item) -> bytes:
    if isinstance(item, Exception):
        status = next((v for k, v in _STATUS.items() if isinstance(item, k)), 4)
        msg = str(item).encode("utf-8")[:65535]
        return struct.pack("<IBH", index, status, len(msg)) + msg
    traj: Trajectory = item
    N = len(traj.x0)
    d = len(traj.x0[0]) if N else 0
    parts = [struct.pack("<IBBB", index, 0, d, N)]
    parts.append(struct.pack(_f(2 * N * d), *[c for x in traj.x0 for c in x], *[c for v in traj.v0 for c in v]))
    parts.append(struct.pack("<ddIIHH", traj.t_max, traj.t_next, traj.n_pass, traj.n_cancel, len(traj.windows), len(traj.events)))
    for w in traj.windows:
        parts.append(struct.pack("<BBHdddB", w.i, w.j, w.k, w.s_entry, w.t_exit, w.gamma, w.status))
    nan_e = (math.nan,) * d
    for ev in traj.events:
        if isinstance(ev, Collision):
            parts.append(struct.pack("<cBBHddddB", b"C", ev.i, ev.j, ev.k, ev.s_entry, ev.t_exit, ev.gamma, ev.sigma, ev.suppressed))
            parts.append(struct.pack(_f(5 * d), *(ev.e if ev.e is not None else nan_e), *ev.v_pre[0], *ev.v_pre[1], *ev.v_post[0], *ev.v_post[1]))
        else:
            parts.append(struct.pack("<cBHd", b"R", ev.i, ev.l, ev.tau))
            parts.append(struct.pack(_f(3 * d), *ev.x_hit, *ev.v_pre, *ev.v_post))
    return b"".join(parts)


def decode_record(buf: bytes) -> Tuple[int, Union[Trajectory, StoredError]]:
    index, status = struct.unpack_from("<IB", buf, 0)
    if status != 0:
        (n,) = struct.unpack_from("<H", buf, 5)
        return index, StoredError(_STATUS_NAMES.get(status, "PdmpError"), buf[7 : 7 + n].decode("utf-8"))
    d, N = struct.unpack_from("<BB", buf, 5)
    off = 7
    flat = struct.unpack_from(_f(2 * N * d), buf, off)
    off += 16 * N * d
    x0 = tuple(tuple(flat[p * d : (p + 1) * d]) for p in range(N))
    v0 = tuple(tuple(flat[N * d + p * d : N * d + (p + 1) * d]) for p in range(N))
    t_max, t_next, n_pass, n_cancel, nw, ne = struct.unpack_from("<ddIIHH", buf, off)
    off += struct.calcsize("<ddIIHH")
    wsize = struct.calcsize("<BBHdddB")
    windows = []
    for _ in range(nw):
        windows.append(Window(*struct.unpack_from("<BBHdddB", buf, off)))
        off += wsize
    csize, rsize = struct.calcsize("<cBBHddddB"), struct.calcsize("<cBHd")
    events = []
    for m in range(1, ne + 1):
        tag = buf[off : off + 1]
        if tag == b"C":
            _, i, j, k, s, t, g, sig, sup = struct.unpack_from("<cBBHddddB", buf, off)
            off += csize
            vals = struct.unpack_from(_f(5 * d), buf, off)
            off += 40 * d
            e = tuple(vals[:d])
            e = None if math.isnan(e[0]) else e
            vp = (tuple(vals[d : 2 * d]), tuple(vals[2 * d : 3 * d]))
            vq = (tuple(vals[3 * d : 4 * d]), tuple(vals[4 * d : 5 * d]))
            events.append(Collision(i, j, k, s, t, g, sig, e, vp, vq, bool(sup), m))
        else:
            _, i, l, tau = struct.unpack_from("<cBHd", buf, off)
            off += rsize
            vals = struct.unpack_from(_f(3 * d), buf, off)
            off += 24 * d
            events.append(Reflection(i, l, tau, tuple(vals[:d]), tuple(vals[d : 2 * d]), tuple(vals[2 * d :]), m))
    return index, Trajectory(x0, v0, tuple(events), tuple(windows), t_max, t_next, n_pass, n_cancel)


def _header_bytes(header: Dict) -> bytes:
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<BI", VERSION, len(blob)) + blob


class StoreWriter:
    """Streams records to disk (or only hashes them when ``path`` is None)."""

    def __init__(self, path, header: Dict):
        self.path = Path(path) if path is not None else None
        self.hasher = hashlib.blake2b(digest_size=8)
        self._fh = open(self.path, "wb") if self.path is not None else None
        self._next = 0
        self.counts: Dict[str, int] = {}
        self._write(_header_bytes(header))

    def _write(self, blob: bytes) -> None:
        self.hasher.update(blob)
        if self._fh is not None:
            self._fh.write(blob)

    def append(self, record: bytes) -> None:
        index, status = struct.unpack_from("<IB", record, 0)
        if index != self._next:
            raise ValueError(f"records must arrive in index order (expected {self._next}, got {index})")
        self._next += 1
        name = _STATUS_NAMES.get(status, "PdmpError")
        self.counts[name] = self.counts.get(name, 0) + 1
        self._write(struct.pack("<I", len(record)) + record)

    def close(self) -> str:
        if self._fh is not None:
            self._fh.close()
            self._fh = None
        return self.hasher.hexdigest()


def read_store(path) -> Tuple[Dict, Iterator[Tuple[int, Union[Trajectory, StoredError]]]]:
    """Return the header and a lazy iterator over decoded records."""
    raw = Path(path).read_bytes()
    if raw[:5] != MAGIC:
        raise PdmpError(f"{path}: not a path store (bad magic)")
    version, hlen = struct.unpack_from("<BI", raw, 5)
    if version != VERSION:
        raise PdmpError(f"{path}: unsupported store version {version}")
    header = json.loads(raw[10 : 10 + hlen].decode("utf-8"))

    def records():
        off = 10 + hlen
        while off < len(raw):
            (n,) = struct.unpack_from("<I", raw, off)
            off += 4
            yield decode_record(raw[off : off + n])
            off += n

    return header, records()


def store_digest(path) -> str:
    h = hashlib.blake2b(digest_size=8)
    h.update(Path(path).read_bytes())
    return h.hexdigest()


def digest_records(header: Dict, items: Iterable) -> str:
    """Digest of ``(index, trajectory_or_error)`` items without touching disk."""
    w = StoreWriter(None, header)
    for idx, item in items:
        w.append(encode_record(idx, item))
    return w.close()


def _apply_chunk(args):
    fn, batch = args
    return [fn(idx, item) for idx, item in batch]


def iter_store_chunks(path, fn, workers: int = 1, chunk: int = 1000):
    """Return the header and an iterator over chunks of ``fn(index, item)`` in index order."""
    header, records = read_store(path)

    def batches():
        batch = []
        for rec in records:
            batch.append(rec)
            if len(batch) == chunk:
                yield batch
                batch = []
        if batch:
            yield batch

    def run():
        if workers <= 1:
            for b in batches():
                yield _apply_chunk((fn, b))
            return
        from collections import deque
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            pending = deque()
            for b in batches():
                pending.append(pool.submit(_apply_chunk, (fn, b)))
                if len(pending) >= 2 * workers:
                    yield pending.popleft().result()
            while pending:
                yield pending.popleft().result()

    return header, run()
