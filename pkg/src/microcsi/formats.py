"""On-disk formats: binary CSI traces and text fingerprint libraries.

Trace file (``.mcsi``), all integers and floats little-endian::

    magic        8 bytes   b"MCSITRC\\0"
    version      u8        1
    digest       32 bytes  SHA-256 of the signal configuration
    dft_len      u16
    leak_half    u16
    n_tones      u16
    map_name     u8 length + UTF-8 bytes
    subcarriers  n_tones x i16
    lts          n_tones x (f64 re, f64 im)
    n_devices    u16, then per device: u16 length + UTF-8 id
    n_records    u64       (patched when the writer closes)
    records      n_records x {u16 device index, u16 rx_chain, i64 seq_no,
                              i64 timestamp_us, n_tones x (f64 re, f64 im)}

Records are sorted by (device index, rx_chain, seq_no).

Fingerprint / library file (UTF-8 text): a ``#`` banner line, one line of
JSON header, then one line per fingerprint::

    identity <TAB> n_csi <TAB> n_chains <TAB> extracted_at <TAB> re im re im ...

with every float written to 17 significant digits so values round-trip exactly.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct

import numpy as np

from .channel import CsiMeasurement
from .errors import FormatError
from .extraction import Fingerprint
from .matcher import FingerprintLibrary, MatcherParams
from .signal import SignalConfig, config_from_dict

TRACE_MAGIC = b"MCSITRC\x00"
TRACE_VERSION = 1
LIBRARY_VERSION = 1
LIBRARY_BANNER = "# micro-csi fingerprint file"

_COUNT = struct.Struct("<Q")


def record_dtype(n_tones):
    return np.dtype(
        [("device", "<u2"), ("chain", "<u2"), ("seq", "<i8"), ("ts", "<i8"), ("csi", "<f8", (n_tones, 2))]
    )


def _complex(re, im):
    # exact, unlike re + 1j * im which can flip the sign of a zero
    z = np.empty(len(re), dtype=np.complex128)
    z.real, z.imag = re, im
    return z


def _pack_str(s, width_fmt):
    b = s.encode("utf-8")
    return struct.pack(width_fmt, len(b)) + b


class TraceWriter:
    """Streaming writer; use as a context manager."""

    def __init__(self, path, config, device_ids, chunk=4096):
        self.path = path
        self.config = config
        self.device_ids = list(device_ids)
        if len(set(self.device_ids)) != len(self.device_ids):
            raise FormatError("duplicate device ids")
        self._index = {d: i for i, d in enumerate(self.device_ids)}
        self._dtype = record_dtype(config.n_tones)
        self._buf = np.zeros(chunk, dtype=self._dtype)
        self._fill = 0
        self._count = 0
        self._last = None
        self._fh = open(path, "wb")
        self._write_header()

    def _write_header(self):
        c = self.config
        parts = [
            TRACE_MAGIC,
            struct.pack("<B", TRACE_VERSION),
            bytes.fromhex(c.digest),
            struct.pack("<HHH", c.dft_len, c.leak_halfwidth, c.n_tones),
            _pack_str(c.map_name, "<B"),
            np.asarray(c.signed_subcarriers, dtype="<i2").tobytes(),
            np.stack([c.lts.real, c.lts.imag], axis=1).astype("<f8").tobytes(),
            struct.pack("<H", len(self.device_ids)),
        ]
        parts += [_pack_str(d, "<H") for d in self.device_ids]
        self._fh.write(b"".join(parts))
        self._count_offset = self._fh.tell()
        self._fh.write(_COUNT.pack(0))

    def write(self, m):
        try:
            dev = self._index[m.device_id]
        except KeyError:
            raise FormatError(f"device {m.device_id!r} not declared in the trace header") from None
        key = (dev, m.rx_chain, m.seq_no)
        if self._last is not None and key <= self._last:
            raise FormatError(f"records out of (device, chain, seq_no) order at {key}", self._count)
        if m.csi.shape != (self.config.n_tones,):
            raise FormatError(f"csi length {m.csi.shape} does not match {self.config.n_tones} tones", self._count)
        self._last = key
        row = self._buf[self._fill]
        row["device"], row["chain"], row["seq"], row["ts"] = dev, m.rx_chain, m.seq_no, m.timestamp_us
        row["csi"][:, 0] = m.csi.real
        row["csi"][:, 1] = m.csi.imag
        self._fill += 1
        self._count += 1
        if self._fill == self._buf.size:
            self._flush()

    def _flush(self):
        self._fh.write(self._buf[: self._fill].tobytes())
        self._fill = 0

    def close(self):
        if self._fh.closed:
            return
        self._flush()
        self._fh.seek(self._count_offset)
        self._fh.write(_COUNT.pack(self._count))
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_trace(path, stream, config, device_ids=None):
    """Write measurements to ``path``; returns the record count.

    Without ``device_ids`` the stream is materialised to discover them
    (in order of first appearance); pass them to keep writing streaming.
    """
    if device_ids is None:
        stream = list(stream)
        device_ids = list(dict.fromkeys(m.device_id for m in stream))
    with TraceWriter(path, config, device_ids) as w:
        for m in stream:
            w.write(m)
        return w._count


class TraceReader:
    """Streaming reader.  Header fields are available right after opening."""

    def __init__(self, path, expected_digest=None, chunk=4096):
        self.path = path
        self.chunk = chunk
        self._fh = open(path, "rb")
        try:
            self._read_header()
        except Exception:
            self._fh.close()
            raise
        if expected_digest is not None and expected_digest != self.digest:
            self._fh.close()
            raise FormatError("trace configuration digest does not match the expected configuration")

    def _take(self, n, what):
        b = self._fh.read(n)
        if len(b) != n:
            raise FormatError(f"trace header truncated while reading {what}")
        return b

    def _read_header(self):
        if self._take(8, "magic") != TRACE_MAGIC:
            raise FormatError("not a CSI trace file (bad magic)")
        (version,) = struct.unpack("<B", self._take(1, "version"))
        if version != TRACE_VERSION:
            raise FormatError(f"unsupported trace version {version}; this reader handles {TRACE_VERSION}")
        self.digest = self._take(32, "digest").hex()
        n, np_, k = struct.unpack("<HHH", self._take(6, "dimensions"))
        (ln,) = struct.unpack("<B", self._take(1, "map name"))
        name = self._take(ln, "map name").decode("utf-8")
        sc = np.frombuffer(self._take(2 * k, "subcarriers"), dtype="<i2").astype(np.int64)
        lts = np.frombuffer(self._take(16 * k, "lts"), dtype="<f8").reshape(k, 2)
        self.config = SignalConfig(
            dft_len=n,
            subcarriers=sc % n,
            lts=_complex(lts[:, 0], lts[:, 1]),
            leak_halfwidth=np_,
            tap_set=np.arange(-np_, np_ + 1) % n,
            map_name=name,
        )
        if self.config.digest != self.digest:
            raise FormatError("trace header is inconsistent with its configuration digest")
        (nd,) = struct.unpack("<H", self._take(2, "device count"))
        ids = []
        for _ in range(nd):
            (ln,) = struct.unpack("<H", self._take(2, "device id"))
            ids.append(self._take(ln, "device id").decode("utf-8"))
        self.device_ids = ids
        (self.count,) = _COUNT.unpack(self._take(8, "record count"))
        self._dtype = record_dtype(k)

    def blocks(self):
        """Yield raw structured record arrays of at most ``chunk`` records."""
        done = 0
        last = None
        nd = len(self.device_ids)
        while done < self.count:
            want = min(self.chunk, self.count - done)
            raw = self._fh.read(want * self._dtype.itemsize)
            got = len(raw) // self._dtype.itemsize
            if got < want:
                good = done + got - 1
                raise FormatError(
                    f"trace truncated: expected {self.count} records, last good record index is {good}", good
                )
            block = np.frombuffer(raw, dtype=self._dtype)
            bad = np.nonzero(block["device"] >= nd)[0]
            if bad.size:
                raise FormatError(f"record {done + bad[0]} references an undeclared device", done + bad[0])
            keys = np.stack([block["device"].astype(np.int64), block["chain"].astype(np.int64), block["seq"]], 1)
            if last is not None:
                keys = np.vstack([last, keys])
            step = np.lexsort(keys.T[::-1])
            if np.any(step != np.arange(keys.shape[0])) or np.any(np.all(keys[1:] == keys[:-1], axis=1)):
                raise FormatError(f"records out of order within records {done}..{done + got - 1}", done)
            last = keys[-1:]
            done += got
            yield block
        if self._fh.read(1):
            raise FormatError(f"unexpected data after record {self.count - 1}", self.count - 1)

    def __iter__(self):
        ids = self.device_ids
        for block in self.blocks():
            csi = np.ascontiguousarray(block["csi"]).view("<c16").reshape(block.shape[0], -1).astype(np.complex128)
            csi.setflags(write=False)
            for i in range(block.shape[0]):
                r = block[i]
                yield CsiMeasurement(ids[r["device"]], int(r["chain"]), int(r["seq"]), int(r["ts"]), csi[i])

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_trace(path, expected_digest=None):
    """Generator over the measurements in a trace file (constant memory)."""
    with TraceReader(path, expected_digest) as r:
        yield from r


def export_trace_csv(trace_path, csv_path):
    """Text dump of a trace for inspection: one row per record, re/im columns per tone."""
    with TraceReader(trace_path) as r, open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        tones = r.config.signed_subcarriers
        w.writerow(["device_id", "rx_chain", "seq_no", "timestamp_us"]
                   + [f"{p}{t}" for t in tones for p in ("re", "im")])
        for m in r:
            vals = np.stack([m.csi.real, m.csi.imag], axis=1).ravel()
            w.writerow([m.device_id, m.rx_chain, m.seq_no, m.timestamp_us] + [format(v, ".17g") for v in vals])


# ---------------------------------------------------------------------------
# fingerprint and library files


def _fmt(x):
    return format(float(x), ".17g")


def write_fingerprints(path, fingerprints_by_id, config, params=None, thresholds=None, kind="fingerprints"):
    """Write ``{identity: [Fingerprint, ...]}`` as a fingerprint/library file."""
    header = {
        "format": "microcsi",
        "kind": kind,
        "version": LIBRARY_VERSION,
        "config_digest": config.digest,
        "config": config.to_dict(),
        "matcher": params.to_dict() if params is not None else None,
        "thresholds": {k: float(v) for k, v in (thresholds or {}).items()},
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(LIBRARY_BANNER + "\n")
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for ident, fps in fingerprints_by_id.items():
            if any(c in ident for c in "\t\n\r"):
                raise FormatError(f"identity {ident!r} contains tab or newline")
            for fp in fps:
                pairs = np.stack([fp.values.real, fp.values.imag], axis=1).ravel()
                fh.write(
                    f"{ident}\t{fp.n_csi}\t{fp.n_chains}\t{fp.extracted_at}\t"
                    + " ".join(_fmt(v) for v in pairs)
                    + "\n"
                )


def read_fingerprints(path, expected_digest=None):
    """Return ``(header, {identity: [Fingerprint, ...]}, config)``."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        banner = fh.readline().rstrip("\n")
        if banner != LIBRARY_BANNER:
            raise FormatError("not a fingerprint file (bad banner)")
        try:
            header = json.loads(fh.readline())
        except json.JSONDecodeError as e:
            raise FormatError(f"bad fingerprint file header: {e}") from None
        if header.get("format") != "microcsi" or header.get("version") != LIBRARY_VERSION:
            raise FormatError(f"unsupported fingerprint file version {header.get('version')!r}")
        config = config_from_dict(header["config"])
        if config.digest != header.get("config_digest"):
            raise FormatError("fingerprint file configuration does not match its digest")
        if expected_digest is not None and expected_digest != config.digest:
            raise FormatError("fingerprint file configuration digest does not match the expected configuration")
        k = config.n_tones
        for i, line in enumerate(fh):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                ident, n_csi, n_chains, ts, nums = line.split("\t")
                vals = np.array([float(x) for x in nums.split()])
                if vals.size != 2 * k:
                    raise ValueError(f"expected {2 * k} numbers, got {vals.size}")
                fp = Fingerprint(_complex(vals[0::2], vals[1::2]), int(n_csi), int(n_chains), ident, int(ts))
            except (ValueError, TypeError) as e:
                raise FormatError(f"malformed fingerprint record {i}: {e}", i) from None
            out.setdefault(ident, []).append(fp)
    return header, out, config


def write_library(path, library, config, params=None):
    if library.config_digest is not None and library.config_digest != config.digest:
        raise FormatError("library digest does not match the configuration")
    write_fingerprints(path, library.entries, config, params, library.thresholds, kind="library")


def read_library(path, expected_digest=None):
    """Return ``(library, params, config)``; ``params`` is ``None`` if the file has none."""
    header, entries, config = read_fingerprints(path, expected_digest)
    m = header.get("matcher")
    params = MatcherParams(**m) if m else None
    lib = FingerprintLibrary(config.digest, entries, dict(header.get("thresholds") or {}))
    return lib, params, config


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()
