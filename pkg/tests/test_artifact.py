import hashlib

import numpy as np
import pytest

from axisdelta.artifact import (
    EMPTY_ARTIFACT_BYTES,
    ArtifactError,
    DeltaLayerRecord,
    FingerprintMismatch,
    bench_load,
    expected_artifact_bytes,
    fingerprint_file,
    load_and_apply,
    load_artifact,
    read_fp16_checkpoint,
    records_from_state,
    save_artifact,
    size_report,
    write_fp16_checkpoint,
)
from axisdelta.codec import sign_mask, unpack_signs
from axisdelta.fitting import CompressedLayer, StudentState, init_scale32
from axisdelta.model import (
    DeltaProfile,
    ModelSpec,
    init_base,
    linear_layer_names,
    model_to_entries,
    param_fingerprint,
    save_model,
    synth_finetune,
)
from axisdelta.tensor import to_half_array

SPEC = ModelSpec(vocab=32, d_model=16, n_heads=2, d_ff=24, n_layers=1, seed=3)


def make_record(name="w", axis="row", d_out=4, d_in=11, seed=0):
    rng = np.random.default_rng(seed)
    mask = sign_mask(rng.normal(size=(d_out, d_in)).astype(np.float32))
    vlen = d_out if axis == "row" else d_in
    vec = rng.uniform(0, 0.1, vlen).astype(np.float16)
    return DeltaLayerRecord(name, axis, d_out, d_in, mask.tobytes(), vec)


def compressed_state(base, ft, axis="row"):
    state = StudentState(base)
    for name in linear_layer_names(base):
        delta = ft.params[name] - base.params[name]
        mask = sign_mask(delta)
        state.install(
            CompressedLayer(
                name, base.params[name].copy(), mask, unpack_signs(mask),
                axis, init_scale32(delta, axis),
            )
        )
    return state


class TestRecord:
    def test_mask_length_validated(self):
        with pytest.raises(ArtifactError, match="mask"):
            DeltaLayerRecord("w", "row", 4, 11, b"\x00" * 7, np.zeros(4, np.float16))

    def test_vector_length_validated(self):
        mask = b"\x00" * 8
        with pytest.raises(ArtifactError, match="vector"):
            DeltaLayerRecord("w", "row", 4, 11, mask, np.zeros(11, np.float16))
        with pytest.raises(ArtifactError, match="vector"):
            DeltaLayerRecord("w", "col", 4, 11, mask, np.zeros(4, np.float16))

    def test_bad_axis(self):
        with pytest.raises(ArtifactError, match="axis"):
            DeltaLayerRecord("w", "diag", 1, 1, b"\x00", np.zeros(1, np.float16))

    def test_byte_accounting(self):
        r = make_record(d_out=4, d_in=11)
        assert r.payload_bytes() == 4 * 2 + 2 * 4  # 2 mask bytes/row, 4 halves
        assert r.encoded_bytes() == 4 + 1 + 1 + 8 + r.payload_bytes()


class TestRoundtrip:
    def test_records_roundtrip_bitwise(self, tmp_path):
        recs = [
            make_record("a", "row", 4, 11, seed=1),
            make_record("b", "col", 7, 3, seed=2),
        ]
        fp = hashlib.sha256(b"base").digest()
        p = tmp_path / "d.dlt"
        written = save_artifact(p, recs, fp)
        assert written == p.stat().st_size == expected_artifact_bytes(recs)
        got_fp, got = load_artifact(p)
        assert got_fp == fp
        for a, b in zip(recs, got):
            assert (a.name, a.axis, a.d_out, a.d_in) == (b.name, b.axis, b.d_out, b.d_in)
            assert a.mask_bytes == b.mask_bytes
            assert a.vector.tobytes() == b.vector.tobytes()

    def test_empty_artifact_size(self, tmp_path):
        p = tmp_path / "e.dlt"
        assert save_artifact(p, [], b"\x00" * 32) == EMPTY_ARTIFACT_BYTES == 76

    def test_duplicate_names_rejected(self, tmp_path):
        with pytest.raises(ArtifactError, match="duplicate"):
            save_artifact(tmp_path / "d.dlt", [make_record(), make_record()], b"\x00" * 32)

    def test_bad_fingerprint_length(self, tmp_path):
        with pytest.raises(ArtifactError, match="32 bytes"):
            save_artifact(tmp_path / "d.dlt", [], b"short")

    def test_corruption_detected(self, tmp_path):
        p = tmp_path / "d.dlt"
        save_artifact(p, [make_record()], b"\x00" * 32)
        blob = bytearray(p.read_bytes())
        blob[50] ^= 0xFF
        p.write_bytes(bytes(blob))
        with pytest.raises(ArtifactError, match="checksum"):
            load_artifact(p)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "d.dlt"
        p.write_bytes(b"XXXX" + b"\x00" * 80)
        with pytest.raises(ArtifactError, match="magic"):
            load_artifact(p)


class TestLoadAndApply:
    def test_patches_match_direct_reconstruction(self, tmp_path):
        base = init_base(SPEC)
        ft = synth_finetune(base, DeltaProfile(axis="row", seed=5)).model
        state = compressed_state(base, ft)
        base_path = tmp_path / "base.tnc"
        save_model(base_path, base)
        fp = fingerprint_file(base_path)
        art = tmp_path / "d.dlt"
        save_artifact(art, records_from_state(state), fp)
        patched, report = load_and_apply(base, art, expected_fingerprint=fp)
        for name in linear_layer_names(base):
            assert np.array_equal(patched.params[name], state.model.params[name])
        assert report.bytes_read == art.stat().st_size

    def test_fingerprint_guard(self, tmp_path):
        base = init_base(SPEC)
        art = tmp_path / "d.dlt"
        save_artifact(art, [], hashlib.sha256(b"other base").digest())
        with pytest.raises(FingerprintMismatch):
            load_and_apply(base, art, expected_fingerprint=b"\x11" * 32)
        # skip flag bypasses the guard
        load_and_apply(base, art, expected_fingerprint=b"\x11" * 32, skip_fingerprint=True)

    def test_unknown_layer_rejected(self, tmp_path):
        base = init_base(SPEC)
        art = tmp_path / "d.dlt"
        save_artifact(art, [make_record("no.such.layer", d_out=4, d_in=4)], b"\x00" * 32)
        with pytest.raises(ArtifactError, match="unknown layer"):
            load_and_apply(base, art, skip_fingerprint=True)

    def test_shape_mismatch_rejected(self, tmp_path):
        base = init_base(SPEC)
        art = tmp_path / "d.dlt"
        save_artifact(
            art, [make_record("blocks.0.attn.q_proj", d_out=4, d_in=4)], b"\x00" * 32
        )
        with pytest.raises(ArtifactError, match="dims"):
            load_and_apply(base, art, skip_fingerprint=True)

    def test_base_not_mutated(self, tmp_path):
        base = init_base(SPEC)
        ft = synth_finetune(base, DeltaProfile(seed=1)).model
        state = compressed_state(base, ft)
        art = tmp_path / "d.dlt"
        save_artifact(art, records_from_state(state), b"\x00" * 32)
        before = param_fingerprint(base)
        load_and_apply(base, art, skip_fingerprint=True)
        assert param_fingerprint(base) == before


class TestFp16Checkpoint:
    def test_roundtrip_to_half_precision(self, tmp_path):
        m = init_base(SPEC)
        p = tmp_path / "m.fp16ckpt"
        write_fp16_checkpoint(p, m)
        back = read_fp16_checkpoint(p)
        assert back.spec == m.spec
        for name, w in m.params.items():
            want = to_half_array(w.reshape(np.atleast_2d(w).shape)).astype(np.float32)
            assert np.array_equal(back.params[name].reshape(-1), want.reshape(-1))

    def test_size_is_two_bytes_per_param_plus_headers(self, tmp_path):
        m = init_base(SPEC)
        p = tmp_path / "m.fp16ckpt"
        written = write_fp16_checkpoint(p, m)
        entries = model_to_entries(m)
        payload = sum(2 * int(np.prod(e.shape)) for e in entries.values())
        headers = 12 + sum(4 + len(n.encode()) + 8 for n in entries)
        assert written == payload + headers == p.stat().st_size


class TestSizeReport:
    def test_exact_ratio_square_layers(self, tmp_path):
        # one 64x64 layer: fp16 = 8192 payload bytes, delta payload = 512 mask
        # + 128 vector = 640 bytes -> exactly 12.8x on the payload comparison
        rng = np.random.default_rng(0)
        rec = DeltaLayerRecord(
            "w", "row", 64, 64,
            sign_mask(rng.normal(size=(64, 64)).astype(np.float32)).tobytes(),
            np.zeros(64, np.float16),
        )
        art = tmp_path / "d.dlt"
        save_artifact(art, [rec], b"\x00" * 32)
        rep = size_report(art, {"w": np.zeros((64, 64), np.float32)})
        assert rep.patched_payload_bytes == 640
        assert rep.patched_fp16_bytes == 8192
        assert rep.patched_layers_ratio == pytest.approx(12.8)

    def test_ratio_approaches_16x_with_width(self, tmp_path):
        # vector overhead amortizes as d_in grows: ratio -> 16x
        ratios = []
        for d_in in (64, 512, 4096):
            rec = DeltaLayerRecord(
                "w", "row", 8, d_in, b"\x00" * (8 * (d_in // 8)),
                np.zeros(8, np.float16),
            )
            art = tmp_path / f"d{d_in}.dlt"
            save_artifact(art, [rec], b"\x00" * 32)
            rep = size_report(art, {"w": np.zeros((8, d_in), np.float32)})
            ratios.append(rep.patched_layers_ratio)
        assert ratios == sorted(ratios)
        assert ratios[-1] > 15.9


class TestBenchLoad:
    def test_runs_and_accounts_bytes(self, tmp_path):
        base = init_base(SPEC)
        ft = synth_finetune(base, DeltaProfile(seed=2)).model
        state = compressed_state(base, ft)
        art = tmp_path / "d.dlt"
        save_artifact(art, records_from_state(state), b"\x00" * 32)
        full = tmp_path / "m.fp16ckpt"
        write_fp16_checkpoint(full, ft)
        res = bench_load(base, art, full, runs=3)
        assert len(res.rows) == 6
        assert res.bytes_read("delta") == art.stat().st_size
        assert res.bytes_read("full") == full.stat().st_size
        assert res.bytes_read("delta") < res.bytes_read("full")
        assert res.median("delta") > 0 and res.median("full") > 0
