import json
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dtq.pipeline import STATIC_DYNAMIC_W4A8, calibrate, make_state, runtime
from dtq.toydit import run_denoise
from dtq.trace_io import (
    CKPT_PREFIX,
    CHUNKS,
    MANIFEST,
    BadMagicError,
    FormatError,
    PackingError,
    ShapeMismatchError,
    TraceArchive,
    TruncatedError,
    VersionError,
    calibration_from_dict,
    calibration_to_dict,
    checkpoint_from_states,
    checkpoints_equal,
    pack_codes,
    read_checkpoint,
    read_trace,
    states_from_checkpoint,
    traces_equal,
    unpack_codes,
    write_checkpoint,
    write_trace,
)

from conftest import STEPS
from helpers import random_archive, random_checkpoint


def test_pack_examples():
    assert pack_codes([1, 2, 3], 4) == bytes([0x21, 0x03])
    assert pack_codes([1, 2, 3, 0, 1], 2) == bytes([0b00111001, 0b01])
    assert pack_codes([1, 0, 1], 1) == bytes([0b101])
    assert pack_codes([], 4) == b""


def test_pack_errors():
    with pytest.raises(PackingError):
        pack_codes([16], 4)
    with pytest.raises(PackingError):
        pack_codes([1], 3)
    with pytest.raises(PackingError):
        unpack_codes(b"\x01\x00\x00", 3, 4)
    with pytest.raises(PackingError):
        unpack_codes(bytes([0xF1]), 1, 4)  # dirty tail


@given(bits=st.sampled_from([1, 2, 4, 6, 8]), n=st.integers(0, 67), seed=st.integers(0, 2**32 - 1))
def test_prop_pack_round_trip(bits, n, seed):
    codes = np.random.default_rng(seed).integers(0, 1 << bits, size=n)
    data = pack_codes(codes, bits)
    assert len(data) == -(-n * bits // 8)
    assert np.array_equal(unpack_codes(data, n, bits), codes)


def test_empty_archive(tmp_path):
    write_trace(tmp_path / "t", TraceArchive([]))
    back = read_trace(tmp_path / "t")
    assert back.traces == [] and traces_equal(back, TraceArchive([]))


def test_default_run_round_trip(tmp_path, model, fp_run):
    arch = TraceArchive(fp_run.traces, model.digest(), STEPS)
    write_trace(tmp_path / "t", arch)
    back = read_trace(tmp_path / "t")
    assert traces_equal(arch, back)
    assert back.layers == arch.layers


def test_random_archive_byte_exact(tmp_path):
    rng = np.random.default_rng(0)
    for i in range(25):
        arch = random_archive(rng)
        write_trace(tmp_path / f"a{i}", arch)
        back = read_trace(tmp_path / f"a{i}")
        write_trace(tmp_path / f"b{i}", back)
        for f in (MANIFEST, CHUNKS):
            assert (tmp_path / f"a{i}" / f).read_bytes() == (tmp_path / f"b{i}" / f).read_bytes()


def _archive(tmp_path):
    rng = np.random.default_rng(1)
    arch = random_archive(rng)
    while len(arch.traces) < 2:
        arch = random_archive(rng)
    write_trace(tmp_path, arch)
    return tmp_path / CHUNKS, tmp_path / MANIFEST


def test_trace_bad_magic(tmp_path):
    chunks, _ = _archive(tmp_path)
    data = bytearray(chunks.read_bytes())
    data[0:8] = b"NOTTRACE"
    chunks.write_bytes(data)
    with pytest.raises(BadMagicError):
        read_trace(tmp_path)


def test_trace_truncated(tmp_path):
    chunks, _ = _archive(tmp_path)
    chunks.write_bytes(chunks.read_bytes()[:-3])
    with pytest.raises(TruncatedError):
        read_trace(tmp_path)


def test_trace_version(tmp_path):
    _, man = _archive(tmp_path)
    d = json.loads(man.read_text())
    d["version"] = 99
    man.write_text(json.dumps(d))
    with pytest.raises(VersionError):
        read_trace(tmp_path)


def test_trace_shape_mismatch(tmp_path):
    _, man = _archive(tmp_path)
    d = json.loads(man.read_text())
    d["entries"][0]["rows"] += 1
    man.write_text(json.dumps(d))
    with pytest.raises(ShapeMismatchError):
        read_trace(tmp_path)


def test_trace_trailing_bytes(tmp_path):
    chunks, _ = _archive(tmp_path)
    chunks.write_bytes(chunks.read_bytes() + b"\0")
    with pytest.raises(ShapeMismatchError):
        read_trace(tmp_path)


def test_trace_missing_manifest(tmp_path):
    with pytest.raises(FormatError):
        read_trace(tmp_path)


# ---------------------------------------------------------------------------
# checkpoints


def test_random_checkpoint_byte_exact(tmp_path):
    rng = np.random.default_rng(2)
    for i in range(25):
        ck = random_checkpoint(rng)
        n = write_checkpoint(tmp_path / f"a{i}", ck)
        assert n == ck.payload_bytes()
        back = read_checkpoint(tmp_path / f"a{i}")
        assert checkpoints_equal(ck, back)
        write_checkpoint(tmp_path / f"b{i}", back)
        assert (tmp_path / f"a{i}").read_bytes() == (tmp_path / f"b{i}").read_bytes()


def test_model_checkpoint_runs_identically(tmp_path, model, fp_run, w4a8_states, w4a8_run):
    ck = checkpoint_from_states(w4a8_states, {"model_id": model.digest()})
    write_checkpoint(tmp_path / "ck", ck)
    states = states_from_checkpoint(read_checkpoint(tmp_path / "ck"))
    run = run_denoise(model, STEPS, True, runtime(model, states, STEPS))
    assert np.array_equal(run.output, w4a8_run.output)


def test_derived_widths_are_rebuilt(tmp_path, model):
    w = model.weight("blocks.0.ffn.fc2")
    st = make_state("blocks.0.ffn.fc2", STATIC_DYNAMIC_W4A8, None, w, {4, 8})
    ck = checkpoint_from_states({st.name: st})
    layer = ck.layers[st.name]
    assert list(layer.weights) == [8] and layer.derived_bits == (4,)
    write_checkpoint(tmp_path / "ck", ck)
    back = states_from_checkpoint(read_checkpoint(tmp_path / "ck"))[st.name]
    assert sorted(back.weights) == [4, 8]
    assert np.array_equal(back.weights[4].ints, st.weights[4].ints)


def _ck_file(tmp_path):
    ck = random_checkpoint(np.random.default_rng(3), max_layers=3)
    while not ck.layers:
        ck = random_checkpoint(np.random.default_rng(4), max_layers=3)
    p = tmp_path / "ck"
    write_checkpoint(p, ck)
    return p


def test_checkpoint_errors(tmp_path):
    p = _ck_file(tmp_path)
    data = p.read_bytes()
    p.write_bytes(b"XXXXXXXX" + data[8:])
    with pytest.raises(BadMagicError):
        read_checkpoint(p)
    p.write_bytes(data[:8] + struct.pack("<H", 2) + data[10:])
    with pytest.raises(VersionError):
        read_checkpoint(p)
    p.write_bytes(data[:-1])
    with pytest.raises(TruncatedError):
        read_checkpoint(p)
    p.write_bytes(data[: CKPT_PREFIX.size - 1])
    with pytest.raises(TruncatedError):
        read_checkpoint(p)


def test_calibration_round_trip(model, fp_run, w4a8_states):
    doc = json.loads(json.dumps(calibration_to_dict(w4a8_states, {"bits": "W4A8"})))
    meta, layers = calibration_from_dict(doc)
    assert meta == {"bits": "W4A8"} and list(layers) == list(w4a8_states)
    for name, cal in layers.items():
        st = make_state(name, cal.setting, cal.transform, model.weight(name), {cal.setting.w_bits},
                        cal.act_params, cal.alpha)
        assert np.array_equal(st.weights[4].ints, w4a8_states[name].weights[4].ints)


def test_calibration_errors():
    with pytest.raises(FormatError):
        calibration_from_dict({"format": "other"})
    with pytest.raises(VersionError):
        calibration_from_dict({"format": "dtq-calibration", "version": 7})
    with pytest.raises(FormatError):
        calibration_from_dict({"format": "dtq-calibration", "version": 1, "layers": [{"name": "x"}]})
