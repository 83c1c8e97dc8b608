"""On-disk formats: activation-trace archives, quantized checkpoints, JSON documents.

Trace archive (a directory)::

    manifest.json   index of every chunk, plus model id / step count / layers
    chunks.bin      concatenated chunks: 32-byte header + float32 LE payload

Chunk header, little-endian ``<8sHIIIBQx``: magic ``b"DTQTRACE"``, version
(u16), rows (u32), cols (u32), timestep (u32), condition (u8), 8-byte
BLAKE2b hash of the layer name (u64), one pad byte.

Checkpoint (a single file)::

    b"DTQCKPT\\0" | version u16 | manifest length u32 | manifest JSON | payload

The payload holds, per layer and per stored bit-width, bit-packed codes then
float32 scales (and float32 zero-points for asymmetric weights), followed by
the float32 scaling mask, the bit-packed rotation sign vector and float32
frozen activation params. Its size equals :func:`dtq.qgemm.checkpoint_bytes`.

Calibration file (JSON): per layer, the quantization setting, the fitted
alpha, the float64 scaling mask, the rotation seed and signs, and frozen
activation params. Weights are not stored; quantizing re-derives them from
the model so one calibration serves any weight bit-width.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .balance import BalanceTransform, RotationMatrix, ScalingMask
from .pipeline import LayerSetting, QuantLayerState, derive_widths
from .qgemm import layer_payload_bytes
from .quant_core import PER_OUTPUT_CHANNEL, GroupingScheme, GroupParams, QuantizedTensor
from .toydit import ActivationTrace

TRACE_MAGIC = b"DTQTRACE"
TRACE_VERSION = 1
CHUNK_HEADER = struct.Struct("<8sHIIIBQx")
assert CHUNK_HEADER.size == 32

CKPT_MAGIC = b"DTQCKPT\0"
CKPT_VERSION = 1
CKPT_PREFIX = struct.Struct("<8sHI")

MANIFEST = "manifest.json"
CHUNKS = "chunks.bin"


class FormatError(ValueError):
    """Base class for every on-disk format problem."""


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class ShapeMismatchError(FormatError):
    pass


class PackingError(FormatError):
    pass


def layer_hash(name: str) -> int:
    return int.from_bytes(hashlib.blake2b(name.encode(), digest_size=8).digest(), "little")


def dump_json(obj) -> str:
    """Deterministic JSON text (sorted keys, fixed indent, trailing newline)."""
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dump_json(obj), encoding="utf-8")


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# bit packing


def pack_codes(codes, bits: int) -> bytes:
    """Pack unsigned codes into a little-endian bit stream, ``bits`` per code.

    Code ``i`` occupies stream bits ``[i * bits, (i + 1) * bits)``; the tail of
    the last byte is zero.
    """
    if bits not in (1, 2, 4, 6, 8):
        raise PackingError(f"unsupported packing width {bits}")
    c = np.asarray(codes).reshape(-1)
    if c.size and (c.min() < 0 or c.max() >= 1 << bits):
        raise PackingError(f"codes do not fit in {bits} bits")
    c = c.astype(np.uint8)
    if bits == 8:
        return c.tobytes()
    planes = np.unpackbits(c[:, None], axis=1, bitorder="little")[:, :bits]
    return np.packbits(planes.reshape(-1), bitorder="little").tobytes()


def unpack_codes(data: bytes, count: int, bits: int) -> np.ndarray:
    """Inverse of :func:`pack_codes`; rejects wrong lengths and dirty padding."""
    if bits not in (1, 2, 4, 6, 8):
        raise PackingError(f"unsupported packing width {bits}")
    expected = math.ceil(count * bits / 8)
    if len(data) != expected:
        raise PackingError(f"{count} x {bits}-bit codes need {expected} bytes, got {len(data)}")
    raw = np.frombuffer(data, dtype=np.uint8)
    if bits == 8:
        return raw.copy()
    stream = np.unpackbits(raw, bitorder="little")
    if stream[count * bits:].any():
        raise PackingError("non-zero padding after the last code")
    planes = stream[: count * bits].reshape(count, bits)
    return (planes.astype(np.uint16) @ (1 << np.arange(bits, dtype=np.uint16))).astype(np.uint8)


# ---------------------------------------------------------------------------
# trace archives


@dataclass
class TraceArchive:
    traces: list[ActivationTrace]
    model_id: str = ""
    steps: int | None = None

    @property
    def layers(self) -> list[str]:
        return list(dict.fromkeys(t.layer_name for t in self.traces))

    def manifest(self) -> dict:
        entries, offset = [], 0
        for t in self.traces:
            rows, cols = t.X.shape
            entries.append({"layer": t.layer_name, "timestep": int(t.timestep), "condition": int(t.condition),
                            "rows": rows, "cols": cols, "offset": offset})
            offset += CHUNK_HEADER.size + 4 * rows * cols
        return {
            "format": "dtq-trace",
            "version": TRACE_VERSION,
            "endianness": "little",
            "dtype": "float32",
            "model_id": self.model_id,
            "steps": self.steps,
            "conditions": sorted({int(t.condition) for t in self.traces}),
            "layers": self.layers,
            "entries": entries,
        }


def _chunk(t: ActivationTrace) -> bytes:
    x = np.ascontiguousarray(t.X, dtype="<f4")
    if x.ndim != 2:
        raise ShapeMismatchError(f"trace {t.layer_name} is not 2-D")
    rows, cols = x.shape
    head = CHUNK_HEADER.pack(TRACE_MAGIC, TRACE_VERSION, rows, cols, int(t.timestep), int(t.condition),
                             layer_hash(t.layer_name))
    return head + x.tobytes()


def write_trace(path, archive: TraceArchive) -> None:
    """Write ``archive`` as a directory (created if needed)."""
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / CHUNKS, "wb") as f:
        for t in archive.traces:
            f.write(_chunk(t))
    write_json(d / MANIFEST, archive.manifest())


def read_trace(path) -> TraceArchive:
    """Read and fully validate a trace archive.

    Raises:
        VersionError: unknown archive or chunk version.
        BadMagicError: a chunk header does not start with ``DTQTRACE``.
        TruncatedError: the data file ends inside a chunk.
        ShapeMismatchError: header and manifest disagree, or trailing bytes.
    """
    d = Path(path)
    try:
        man = read_json(d / MANIFEST)
    except FileNotFoundError as e:
        raise FormatError(f"no trace manifest in {d}") from e
    if man.get("format") != "dtq-trace":
        raise FormatError("not a trace archive manifest")
    if man.get("version") != TRACE_VERSION:
        raise VersionError(f"unsupported trace archive version {man.get('version')!r}")
    data = (d / CHUNKS).read_bytes() if (d / CHUNKS).exists() else b""
    traces, pos = [], 0
    for i, e in enumerate(man["entries"]):
        if pos != e["offset"]:
            raise ShapeMismatchError(f"chunk {i}: manifest offset {e['offset']} != stream position {pos}")
        if len(data) - pos < CHUNK_HEADER.size:
            raise TruncatedError(f"chunk {i}: header truncated")
        magic, version, rows, cols, timestep, cond, h = CHUNK_HEADER.unpack_from(data, pos)
        if magic != TRACE_MAGIC:
            raise BadMagicError(f"chunk {i}: bad magic {magic!r}")
        if version != TRACE_VERSION:
            raise VersionError(f"chunk {i}: unsupported chunk version {version}")
        if (rows, cols, timestep, cond) != (e["rows"], e["cols"], e["timestep"], e["condition"]):
            raise ShapeMismatchError(f"chunk {i}: header disagrees with manifest entry")
        if h != layer_hash(e["layer"]):
            raise ShapeMismatchError(f"chunk {i}: layer hash does not match {e['layer']!r}")
        pos += CHUNK_HEADER.size
        n = 4 * rows * cols
        if len(data) - pos < n:
            raise TruncatedError(f"chunk {i}: payload truncated ({len(data) - pos} of {n} bytes)")
        x = np.frombuffer(data, dtype="<f4", count=rows * cols, offset=pos).reshape(rows, cols).astype(np.float32)
        traces.append(ActivationTrace(e["layer"], timestep, cond, x))
        pos += n
    if pos != len(data):
        raise ShapeMismatchError(f"{len(data) - pos} trailing bytes after the last chunk")
    return TraceArchive(traces, man.get("model_id", ""), man.get("steps"))


def traces_equal(a: TraceArchive, b: TraceArchive) -> bool:
    if len(a.traces) != len(b.traces) or a.model_id != b.model_id or a.steps != b.steps:
        return False
    for s, t in zip(a.traces, b.traces):
        if (s.layer_name, s.timestep, s.condition) != (t.layer_name, t.timestep, t.condition):
            return False
        if s.X.shape != t.X.shape or s.X.astype("<f4").tobytes() != t.X.astype("<f4").tobytes():
            return False
    return True


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class StoredWeights:
    codes: np.ndarray  # uint8 [C_out, C_in]
    scales: np.ndarray  # float32 [C_out]
    zero_points: np.ndarray | None = None  # float32 [C_out]; None = symmetric mid-code

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.uint8)
        self.scales = np.asarray(self.scales, dtype=np.float32)
        if self.zero_points is not None:
            self.zero_points = np.asarray(self.zero_points, dtype=np.float32)


@dataclass
class CheckpointLayer:
    """Everything needed to rebuild one quantized layer, with 32-bit reals."""

    shape: tuple[int, int]
    weights: dict[int, StoredWeights]
    w_bits: int
    a_bits: int = 8
    act_mode: str = "dynamic"
    act_scheme: str = "per_token"
    balance: str = "none"
    alpha: float | None = None
    mask: np.ndarray | None = None  # float32 [C_in]
    rotation_seed: int | None = None
    rotation_signs: np.ndarray | None = None  # +-1, [C_in]
    act_scales: np.ndarray | None = None  # float32
    act_zero_points: np.ndarray | None = None  # float32
    derived_bits: tuple[int, ...] = ()  # narrower widths rebuilt from the stored codes

    @property
    def symmetric(self) -> bool:
        return all(w.zero_points is None for w in self.weights.values())

    def payload_bytes(self) -> int:
        return layer_payload_bytes(
            self.shape, tuple(sorted(self.weights)), mask=self.mask is not None,
            rotation=self.rotation_signs is not None, symmetric=self.symmetric,
            act_param_groups=0 if self.act_scales is None else len(self.act_scales),
        )


@dataclass
class QuantCheckpoint:
    layers: dict[str, CheckpointLayer]
    meta: dict = field(default_factory=dict)

    def payload_bytes(self) -> int:
        return sum(l.payload_bytes() for l in self.layers.values())

    def weight_code_bytes(self) -> int:
        return sum(math.ceil(w.codes.size * b / 8) for l in self.layers.values() for b, w in l.weights.items())


def checkpoint_from_states(states: dict[str, QuantLayerState], meta: dict | None = None) -> QuantCheckpoint:
    """Snapshot calibrated layers; float params are narrowed to float32."""
    layers = {}
    for name, st in states.items():
        s = st.setting
        weights = {}
        widest = max(st.weights)
        for b, q in sorted(st.weights.items()):
            if b != widest:
                continue
            mid = 1 << (b - 1)
            sym = q.symmetric and np.all(q.group_params.zero_points == mid)
            weights[b] = StoredWeights(q.ints, q.group_params.scales,
                                       None if sym else q.group_params.zero_points.astype(np.float32))
        t = st.transform
        mask = None if t is None or t.mask is None else t.mask.s.astype(np.float32)
        rot = None if t is None else t.rotation
        signs = None
        if rot is not None:
            signs = np.ones(rot.n, dtype=np.int8) if rot.sign_diag is None else rot.sign_diag.astype(np.int8)
        ap = st.act_params
        layers[name] = CheckpointLayer(
            shape=tuple(st.shape), weights=weights, w_bits=s.w_bits, a_bits=s.a_bits,
            act_mode=s.act_mode, act_scheme=str(s.act_scheme), balance=s.balance,
            alpha=None if st.alpha is None else float(st.alpha), mask=mask,
            rotation_seed=None if rot is None else rot.seed, rotation_signs=signs,
            act_scales=None if ap is None else ap.scales.astype(np.float32),
            act_zero_points=None if ap is None else ap.zero_points.astype(np.float32),
            derived_bits=tuple(sorted(b for b in st.weights if b != widest)),
        )
    return QuantCheckpoint(layers, dict(meta or {}))


def states_from_checkpoint(ck: QuantCheckpoint) -> dict[str, QuantLayerState]:
    """Rebuild runnable layer states from a checkpoint."""
    states = {}
    for name, l in ck.layers.items():
        setting = LayerSetting(l.w_bits, l.a_bits, l.act_mode, GroupingScheme.parse(l.act_scheme), l.balance,
                               l.alpha, 0 if l.rotation_seed is None else l.rotation_seed)
        weights = {}
        for b, w in l.weights.items():
            zp = np.full(w.scales.shape, 1 << (b - 1)) if w.zero_points is None else w.zero_points.astype(np.int64)
            gp = GroupParams(w.scales.astype(np.float64), zp, b)
            weights[b] = QuantizedTensor(w.codes.copy(), PER_OUTPUT_CHANNEL, gp, w.zero_points is None)
        if l.derived_bits:
            weights = derive_widths(weights[max(weights)], l.derived_bits)
        mask = None if l.mask is None else ScalingMask(l.mask.astype(np.float64), 0.0 if l.alpha is None else l.alpha)
        rot = None
        if l.rotation_signs is not None:
            rot = RotationMatrix(len(l.rotation_signs), l.rotation_signs.astype(np.float64), l.rotation_seed)
        transform = None if mask is None and rot is None else BalanceTransform(mask, rot)
        act = None
        if l.act_scales is not None:
            act = GroupParams(l.act_scales.astype(np.float64), l.act_zero_points.astype(np.int64), l.a_bits)
        states[name] = QuantLayerState(name, setting, transform, weights, act, l.alpha)
    return states


def _f32(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def _check_f32_ints(a: np.ndarray, what: str) -> None:
    if not np.array_equal(a, np.round(a)) or np.abs(a).max(initial=0) > 2**24:
        raise FormatError(f"{what} are not exactly representable as float32 integers")


def write_checkpoint(path, ck: QuantCheckpoint) -> int:
    """Serialise ``ck``; returns the payload size in bytes."""
    payload = bytearray()
    layers_meta = []  # a list keeps layer order under sort_keys
    for name, l in ck.layers.items():
        c_out, c_in = l.shape
        widths = []
        for b in sorted(l.weights):
            w = l.weights[b]
            if w.codes.shape != (c_out, c_in) or w.scales.shape != (c_out,):
                raise ShapeMismatchError(f"{name}: {b}-bit weights do not match shape {l.shape}")
            entry = {"bits": b, "codes": len(payload)}
            payload += pack_codes(w.codes, b)
            entry["scales"] = len(payload)
            payload += _f32(w.scales)
            if w.zero_points is not None:
                _check_f32_ints(w.zero_points, f"{name} zero-points")
                entry["zero_points"] = len(payload)
                payload += _f32(w.zero_points)
            widths.append(entry)
        meta = {
            "shape": [c_out, c_in], "weights": widths, "w_bits": l.w_bits, "a_bits": l.a_bits,
            "act_mode": l.act_mode, "act_scheme": l.act_scheme, "balance": l.balance, "alpha": l.alpha,
            "rotation_seed": l.rotation_seed, "derived_bits": list(l.derived_bits),
        }
        if l.mask is not None:
            meta["mask"] = len(payload)
            payload += _f32(l.mask)
        if l.rotation_signs is not None:
            meta["rotation"] = len(payload)
            payload += pack_codes((np.asarray(l.rotation_signs) < 0).astype(np.uint8), 1)
        if l.act_scales is not None:
            _check_f32_ints(l.act_zero_points, f"{name} activation zero-points")
            meta["act_params"] = {"offset": len(payload), "groups": len(l.act_scales)}
            payload += _f32(np.stack([l.act_scales, l.act_zero_points], axis=1))
        meta["name"] = name
        layers_meta.append(meta)
    manifest = json.dumps({"meta": ck.meta, "layers": layers_meta, "payload_bytes": len(payload)},
                          sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CKPT_PREFIX.pack(CKPT_MAGIC, CKPT_VERSION, len(manifest)))
        f.write(manifest)
        f.write(payload)
    return len(payload)


def _take(buf: bytes, offset: int, n: int, what: str) -> bytes:
    if offset < 0 or offset + n > len(buf):
        raise TruncatedError(f"{what}: needs bytes [{offset}, {offset + n}) of a {len(buf)}-byte payload")
    return buf[offset:offset + n]


def _read_f32(buf, offset, count, what) -> np.ndarray:
    return np.frombuffer(_take(buf, offset, 4 * count, what), dtype="<f4").astype(np.float32)


def read_checkpoint(path) -> QuantCheckpoint:
    """Parse a checkpoint file, refusing unknown versions before reading any layer."""
    data = Path(path).read_bytes()
    if len(data) < CKPT_PREFIX.size:
        raise TruncatedError("file shorter than the checkpoint prefix")
    magic, version, mlen = CKPT_PREFIX.unpack_from(data, 0)
    if magic != CKPT_MAGIC:
        raise BadMagicError(f"bad checkpoint magic {magic!r}")
    if version != CKPT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    start = CKPT_PREFIX.size
    if len(data) < start + mlen:
        raise TruncatedError("manifest truncated")
    man = json.loads(data[start:start + mlen])
    payload = data[start + mlen:]
    if len(payload) != man["payload_bytes"]:
        raise TruncatedError(f"payload is {len(payload)} bytes, manifest says {man['payload_bytes']}")
    layers = {}
    for m in man["layers"]:
        name = m["name"]
        c_out, c_in = m["shape"]
        weights = {}
        for e in m["weights"]:
            b = e["bits"]
            n = math.ceil(c_out * c_in * b / 8)
            codes = unpack_codes(_take(payload, e["codes"], n, f"{name} codes"), c_out * c_in, b)
            scales = _read_f32(payload, e["scales"], c_out, f"{name} scales")
            zps = _read_f32(payload, e["zero_points"], c_out, f"{name} zero-points") if "zero_points" in e else None
            weights[b] = StoredWeights(codes.reshape(c_out, c_in), scales, zps)
        mask = _read_f32(payload, m["mask"], c_in, f"{name} mask") if "mask" in m else None
        signs = None
        if "rotation" in m:
            bits = unpack_codes(_take(payload, m["rotation"], math.ceil(c_in / 8), f"{name} rotation"), c_in, 1)
            signs = np.where(bits == 1, -1, 1).astype(np.int8)
        a_s = a_z = None
        if "act_params" in m:
            g = m["act_params"]["groups"]
            pairs = _read_f32(payload, m["act_params"]["offset"], 2 * g, f"{name} act params").reshape(g, 2)
            a_s, a_z = pairs[:, 0].copy(), pairs[:, 1].copy()
        layers[name] = CheckpointLayer(
            (c_out, c_in), weights, m["w_bits"], m["a_bits"], m["act_mode"], m["act_scheme"], m["balance"],
            m["alpha"], mask, m["rotation_seed"], signs, a_s, a_z, tuple(m.get("derived_bits", ())),
        )
    return QuantCheckpoint(layers, man["meta"])


def _arr_eq(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()


def checkpoints_equal(a: QuantCheckpoint, b: QuantCheckpoint) -> bool:
    if a.meta != b.meta or list(a.layers) != list(b.layers):
        return False
    for name in a.layers:
        x, y = a.layers[name], b.layers[name]
        plain = ("w_bits", "a_bits", "act_mode", "act_scheme", "balance", "alpha", "rotation_seed", "derived_bits")
        if tuple(x.shape) != tuple(y.shape) or any(getattr(x, f) != getattr(y, f) for f in plain):
            return False
        if sorted(x.weights) != sorted(y.weights):
            return False
        for k in x.weights:
            u, v = x.weights[k], y.weights[k]
            if not (_arr_eq(u.codes, v.codes) and _arr_eq(u.scales, v.scales) and _arr_eq(u.zero_points, v.zero_points)):
                return False
        if not (_arr_eq(x.mask, y.mask) and _arr_eq(x.act_scales, y.act_scales)
                and _arr_eq(x.act_zero_points, y.act_zero_points)):
            return False
        if (x.rotation_signs is None) != (y.rotation_signs is None):
            return False
        if x.rotation_signs is not None and not np.array_equal(x.rotation_signs, y.rotation_signs):
            return False
    return True


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p


# ---------------------------------------------------------------------------
# calibration documents

CALIB_VERSION = 1


@dataclass
class CalibratedLayer:
    """A layer's fitted balance and activation params, without weights."""

    setting: LayerSetting
    transform: BalanceTransform | None
    act_params: GroupParams | None = None
    alpha: float | None = None


def _setting_dict(s: LayerSetting) -> dict:
    return {
        "w_bits": s.w_bits, "a_bits": s.a_bits, "act_mode": s.act_mode, "act_scheme": str(s.act_scheme),
        "balance": s.balance, "alpha": s.alpha, "rotation_seed": s.rotation_seed,
        "alpha_grid": None if s.alpha_grid is None else list(s.alpha_grid),
    }


def _setting_from(d: dict) -> LayerSetting:
    grid = d.get("alpha_grid")
    return LayerSetting(int(d["w_bits"]), int(d["a_bits"]), d["act_mode"], GroupingScheme.parse(d["act_scheme"]),
                        d["balance"], d["alpha"], int(d["rotation_seed"]),
                        None if grid is None else tuple(float(a) for a in grid))


def calibration_to_dict(states: dict[str, QuantLayerState], meta: dict | None = None) -> dict:
    layers = []
    for name, st in states.items():
        t, ap = st.transform, st.act_params
        rot = None if t is None else t.rotation
        layers.append({
            "name": name,
            "setting": _setting_dict(st.setting),
            "alpha": None if st.alpha is None else float(st.alpha),
            "mask": None if t is None or t.mask is None else [float(v) for v in t.mask.s],
            "rotation": None if rot is None else {
                "seed": rot.seed,
                "signs": None if rot.sign_diag is None else [int(v) for v in rot.sign_diag],
            },
            "act_params": None if ap is None else {
                "bits": ap.bits, "scales": [float(v) for v in ap.scales],
                "zero_points": [int(v) for v in ap.zero_points],
            },
        })
    return {"format": "dtq-calibration", "version": CALIB_VERSION, "meta": dict(meta or {}), "layers": layers}


def calibration_from_dict(d: dict) -> tuple[dict, dict[str, CalibratedLayer]]:
    """Inverse of :func:`calibration_to_dict`; returns ``(meta, layers)``."""
    if d.get("format") != "dtq-calibration":
        raise FormatError("not a calibration document")
    if d.get("version") != CALIB_VERSION:
        raise VersionError(f"unsupported calibration version {d.get('version')!r}")
    out = {}
    try:
        for e in d["layers"]:
            mask = rot = None
            if e["mask"] is not None:
                mask = ScalingMask(np.array(e["mask"], dtype=np.float64), e["alpha"] if e["alpha"] is not None else 0.0)
            if e["rotation"] is not None:
                signs = e["rotation"]["signs"]
                n = len(signs) if signs is not None else None
                if n is None:
                    raise FormatError(f"{e['name']}: rotation without signs")
                rot = RotationMatrix(n, np.array(signs, dtype=np.float64), e["rotation"]["seed"])
            ap = None
            if e["act_params"] is not None:
                a = e["act_params"]
                ap = GroupParams(np.array(a["scales"], dtype=np.float64), np.array(a["zero_points"], dtype=np.int64),
                                 int(a["bits"]))
            transform = None if mask is None and rot is None else BalanceTransform(mask, rot)
            out[e["name"]] = CalibratedLayer(_setting_from(e["setting"]), transform, ap, e["alpha"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed calibration document: {exc!r}") from exc
    return dict(d.get("meta", {})), out
