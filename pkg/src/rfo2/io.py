"""File formats: region, field and spin binaries, CSV tables and run manifests.

Binary layouts (all little-endian)::

    RFO1  magic(4) version(u16) d(u16) runs(u64)
          runs * [start coords (d * i64), length (i64)]   runs along the last axis
    RFOF  magic(4) version(u16) d(u16) bc(u8) pad(7) lam(f64) eps(f64) seed(u64)
          region_sha256(32) n(u64) values(n * f64)        lexicographic site order
    RFOS  magic(4) version(u16) d(u16) pad(4) region_sha256(32) n(u64) angles(n * f64)
"""

import csv
import hashlib
import io as _io
import json
import os
import platform
import struct

import numpy as np

from .fields import DIRICHLET, NEUMANN, ScalarField
from .geometry import Region

__all__ = [
    "FormatError",
    "region_to_bytes",
    "region_from_bytes",
    "region_hash",
    "region_to_json",
    "region_from_json",
    "field_to_bytes",
    "field_from_bytes",
    "write_field",
    "read_field",
    "spins_to_bytes",
    "spins_from_bytes",
    "write_csv",
    "csv_text",
    "file_sha256",
    "RunDir",
]

VERSION = 1
_BC_CODE = {DIRICHLET: 0, NEUMANN: 1}
_BC_NAME = {v: k for k, v in _BC_CODE.items()}


class FormatError(ValueError):
    pass


# ----------------------------------------------------------------------------
# regions


def _runs(coords):
    """Maximal runs of consecutive sites along the last axis (sorted input)."""
    if len(coords) == 0:
        return np.zeros((0, coords.shape[1])), np.zeros(0, dtype=np.int64)
    brk = np.ones(len(coords), dtype=bool)
    same = np.all(coords[1:, :-1] == coords[:-1, :-1], axis=1)
    step = coords[1:, -1] == coords[:-1, -1] + 1
    brk[1:] = ~(same & step)
    starts = np.flatnonzero(brk)
    lengths = np.diff(np.append(starts, len(coords)))
    return coords[starts], lengths


def region_to_bytes(region):
    c = region.coords
    d = region.d
    starts, lengths = _runs(c)
    body = np.column_stack([starts, lengths]).astype("<i8") if len(lengths) else np.zeros((0, d + 1), "<i8")
    return b"RFO1" + struct.pack("<HHQ", VERSION, d, len(lengths)) + body.tobytes()


def region_from_bytes(data):
    if data[:4] != b"RFO1":
        raise FormatError("not a region file (bad magic)")
    version, d, nr = struct.unpack_from("<HHQ", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported region format version {version}")
    off = 4 + struct.calcsize("<HHQ")
    need = off + nr * (d + 1) * 8
    if len(data) != need:
        raise FormatError("truncated or oversized region file")
    body = np.frombuffer(data, "<i8", count=nr * (d + 1), offset=off).reshape(nr, d + 1)
    if nr == 0:
        return Region(np.zeros((0, d), dtype=np.int64), d=d)
    lengths = body[:, -1]
    if np.any(lengths < 1):
        raise FormatError("non-positive run length")
    rep = np.repeat(body[:, :d], lengths, axis=0)
    within = np.arange(lengths.sum()) - np.repeat(np.cumsum(lengths) - lengths, lengths)
    rep[:, -1] += within
    return Region(rep, d=d)


def region_hash(region):
    return hashlib.sha256(region_to_bytes(region)).hexdigest()


def region_to_json(region):
    return json.dumps({"d": region.d, "sites": region.coords.tolist()})


def region_from_json(text):
    obj = json.loads(text)
    d = int(obj["d"])
    sites = np.asarray(obj["sites"], dtype=np.int64).reshape(-1, d)
    return Region(sites, d=d)


# ----------------------------------------------------------------------------
# scalar fields and spins

_FHEAD = "<HHB7xddQ32sQ"
_SHEAD = "<HH4x32sQ"


def field_to_bytes(field, lam=0.0, bc=DIRICHLET, epsilon=0.0, seed=0):
    reg = field.region
    h = bytes.fromhex(region_hash(reg))
    head = struct.pack(_FHEAD, VERSION, reg.d, _BC_CODE[bc], float(lam), float(epsilon),
                       int(seed), h, len(reg))
    return b"RFOF" + head + np.asarray(field.values, dtype="<f8").tobytes()


def field_from_bytes(data, region):
    """Decode a field dump against its region; the stored hash must match."""
    if data[:4] != b"RFOF":
        raise FormatError("not a field file (bad magic)")
    version, d, bc, lam, eps, seed, h, n = struct.unpack_from(_FHEAD, data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported field format version {version}")
    if h != bytes.fromhex(region_hash(region)) or n != len(region) or d != region.d:
        raise FormatError("field does not belong to this region")
    off = 4 + struct.calcsize(_FHEAD)
    if len(data) != off + 8 * n:
        raise FormatError("truncated or oversized field file")
    vals = np.frombuffer(data, "<f8", count=n, offset=off).astype(np.float64)
    meta = {"d": d, "lam": lam, "bc": _BC_NAME[bc], "epsilon": eps, "seed": seed,
            "region_sha256": h.hex()}
    return ScalarField(region, vals), meta


def write_field(path, field, lam=0.0, bc=DIRICHLET, epsilon=0.0, seed=0, extra=None):
    """Write ``path`` (binary), ``path + '.region'`` and a JSON sidecar."""
    data = field_to_bytes(field, lam, bc, epsilon, seed)
    with open(path, "wb") as f:
        f.write(data)
    with open(path + ".region", "wb") as f:
        f.write(region_to_bytes(field.region))
    meta = {"format": "RFOF", "version": VERSION, "d": field.region.d, "lam": lam, "bc": bc,
            "epsilon": epsilon, "seed": seed, "sites": len(field.region),
            "region_sha256": region_hash(field.region), "region_file": os.path.basename(path) + ".region"}
    meta.update(extra or {})
    with open(path + ".json", "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    return [path, path + ".region", path + ".json"]


def read_field(path):
    with open(path + ".region", "rb") as f:
        reg = region_from_bytes(f.read())
    with open(path, "rb") as f:
        return field_from_bytes(f.read(), reg)


def spins_to_bytes(config):
    reg = config.region
    head = struct.pack(_SHEAD, VERSION, reg.d, bytes.fromhex(region_hash(reg)), len(reg))
    return b"RFOS" + head + np.asarray(config.theta, dtype="<f8").tobytes()


def spins_from_bytes(data, region):
    from .energy import SpinConfig

    if data[:4] != b"RFOS":
        raise FormatError("not a spin file (bad magic)")
    version, d, h, n = struct.unpack_from(_SHEAD, data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported spin format version {version}")
    if h != bytes.fromhex(region_hash(region)) or n != len(region):
        raise FormatError("spins do not belong to this region")
    off = 4 + struct.calcsize(_SHEAD)
    if len(data) != off + 8 * n:
        raise FormatError("truncated or oversized spin file")
    return SpinConfig(region, np.frombuffer(data, "<f8", count=n, offset=off).astype(np.float64))


# ----------------------------------------------------------------------------
# tables and manifests


def csv_text(header, rows):
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(csv_text(header, rows))
    return path


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunDir:
    """Output directory that records every file it writes in ``manifest.json``.

    The manifest holds the config hash, the seed and library versions, and
    is itself deterministic (no timestamps), so repeated runs compare equal.
    """

    def __init__(self, path, config_text="", seed=None, command=None):
        self.path = path
        os.makedirs(path, exist_ok=True)
        self.files = []
        self.config_hash = hashlib.sha256(config_text.encode("utf-8")).hexdigest()
        self.seed = seed
        self.command = command

    def file(self, name):
        p = os.path.join(self.path, name)
        self.files.append(name)
        return p

    def write_text(self, name, text):
        with open(self.file(name), "w", encoding="utf-8", newline="") as f:
            f.write(text)

    def write_json(self, name, obj):
        self.write_text(name, json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")

    def write_csv(self, name, header, rows):
        self.write_text(name, csv_text(header, rows))

    def write_bytes(self, name, data):
        with open(self.file(name), "wb") as f:
            f.write(data)

    def finish(self):
        import scipy

        from . import __version__

        entries = []
        for name in sorted(set(self.files)):
            entries.append({"file": name, "sha256": file_sha256(os.path.join(self.path, name))})
        man = {
            "command": self.command,
            "config_sha256": self.config_hash,
            "seed": self.seed,
            "versions": {"rfo2": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                         "python": platform.python_version()},
            "files": entries,
        }
        with open(os.path.join(self.path, "manifest.json"), "w", encoding="utf-8") as f:
            json.dump(man, f, indent=2, sort_keys=True)
            f.write("\n")
        return man


def _jsonable(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (set, frozenset)):
        return sorted(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")
