"""Delta checkpoint format: round-trips, integrity, fingerprints, sizes."""

import numpy as np
import pytest

from petlkit.backbone import ArchConfig, HeadConfig, build_backbone, build_head
from petlkit.checkpoint import (
    CheckpointError,
    FingerprintMismatchError,
    IntegrityError,
    load_delta,
    save_delta,
)
from petlkit.petl import Adapter, BitFit, Lora, Prompt, apply_method

ARCH = ArchConfig("transformer", 16, 2, 2, ff_mult=2, max_seq=64)


def _trained_model(method=None, seed=0, with_head=True):
    base = build_backbone(ARCH, seed=seed, use_layers=2)
    head = build_head(16, HeadConfig(n_outputs=3), seed=seed) if with_head else None
    model = apply_method(base, method if method is not None else Lora(2, "all"), head=head)
    rng = np.random.default_rng(7)
    for p in model.trainable_parameters():
        p.data[...] = rng.normal(0.0, 0.2, p.data.shape).astype(p.data.dtype)
    return model


class TestRoundTrip:
    @pytest.mark.parametrize(
        "method", [Lora(2, "all"), Adapter(4), Prompt(3), BitFit()], ids=lambda m: str(m)
    )
    def test_forward_bitwise_after_reload(self, method, tmp_path, rng):
        model = _trained_model(method)
        path = tmp_path / "delta.petl"
        save_delta(model, str(path))
        fresh_base = build_backbone(ARCH, seed=0, use_layers=2)
        loaded = load_delta(fresh_base, str(path))
        x = rng.normal(size=(5, 16)).astype(np.float32)
        a = model.forward(x, training=False).data
        b = loaded.forward(x, training=False).data
        assert a.tobytes() == b.tobytes()

    def test_trainable_values_roundtrip_bitwise(self, tmp_path):
        model = _trained_model()
        path = tmp_path / "delta.petl"
        save_delta(model, str(path))
        loaded = load_delta(build_backbone(ARCH, seed=0, use_layers=2), str(path))
        original = {p.name: p.data.tobytes() for p in model.trainable_parameters()}
        for p in loaded.trainable_parameters():
            assert p.data.tobytes() == original[p.name]

    def test_file_contains_no_frozen_weights(self, tmp_path):
        model = _trained_model(Prompt(3))
        path = tmp_path / "delta.petl"
        n_entries = save_delta(model, str(path))
        # prompt bank + head fc1/fc2 weights and biases only
        assert n_entries == 1 + 4
        frozen_bytes = model.base.registry["layer.0.attn.q.weight"].data.tobytes()
        assert frozen_bytes not in path.read_bytes()


class TestIntegrity:
    def test_every_corrupted_byte_fails_closed(self, tmp_path, rng):
        model = _trained_model()
        path = tmp_path / "delta.petl"
        save_delta(model, str(path))
        blob = bytearray(path.read_bytes())
        for offset in (0, 7, 40, len(blob) // 2, len(blob) - 6):
            corrupt = bytearray(blob)
            corrupt[offset] ^= 0xFF
            bad = tmp_path / f"bad-{offset}.petl"
            bad.write_bytes(bytes(corrupt))
            with pytest.raises((IntegrityError, CheckpointError)):
                load_delta(build_backbone(ARCH, seed=0, use_layers=2), str(bad))

    def test_corruption_leaves_base_unmodified(self, tmp_path):
        model = _trained_model()
        path = tmp_path / "delta.petl"
        save_delta(model, str(path))
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        path.write_bytes(bytes(blob))
        base = build_backbone(ARCH, seed=0, use_layers=2)
        snapshot = {n: p.data.tobytes() for n, p in base.registry.items()}
        with pytest.raises(IntegrityError):
            load_delta(base, str(path))
        assert all(p.data.tobytes() == snapshot[n] for n, p in base.registry.items())

    def test_truncated_file_fails_closed(self, tmp_path):
        model = _trained_model()
        path = tmp_path / "delta.petl"
        save_delta(model, str(path))
        blob = path.read_bytes()
        for cut in (3, 20, len(blob) - 2):
            trunc = tmp_path / f"trunc-{cut}.petl"
            trunc.write_bytes(blob[:cut])
            with pytest.raises(IntegrityError):
                load_delta(build_backbone(ARCH, seed=0, use_layers=2), str(trunc))

    def test_fingerprint_mismatch_names_both(self, tmp_path):
        model = _trained_model()
        path = tmp_path / "delta.petl"
        save_delta(model, str(path))
        other_arch = ArchConfig("transformer", 16, 2, 4, ff_mult=2)
        with pytest.raises(FingerprintMismatchError, match="checkpoint .*base"):
            load_delta(build_backbone(other_arch, seed=0, use_layers=2), str(path))

    def test_newer_format_version_fails_closed(self, tmp_path):
        import struct
        import zlib

        model = _trained_model()
        path = tmp_path / "delta.petl"
        save_delta(model, str(path))
        blob = bytearray(path.read_bytes())
        blob[4:8] = struct.pack("<I", 99)
        body = bytes(blob[:-4])
        blob[-4:] = struct.pack("<I", zlib.crc32(body))
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="version 99"):
            load_delta(build_backbone(ARCH, seed=0, use_layers=2), str(path))


class TestReferenceSizes:
    def test_bitfit_backbone_entry_values_match_reference(self, tmp_path):
        arch = ArchConfig("transformer", 768, 6, 12)
        base = build_backbone(arch, seed=0, use_layers=6)
        model = apply_method(base, BitFit(), head=build_head(768, HeadConfig(n_outputs=10), seed=0))
        path = tmp_path / "bitfit.petl"
        save_delta(model, str(path))
        loaded = load_delta(build_backbone(arch, seed=0, use_layers=6), str(path))
        backbone_values = sum(
            p.tensor.size for p in loaded.trainable_parameters() if not p.name.startswith("head.")
        )
        assert backbone_values == 50_688

    def test_lora_payload_size_arithmetic(self, tmp_path):
        # non-head payload bytes = 4 bytes x injected count; total file size is
        # payload + names + fixed per-entry and header overhead
        model = _trained_model(Lora(2, "all"), with_head=False)
        path = tmp_path / "lora.petl"
        n_entries = save_delta(model, str(path))
        injected = model.injected.total_size()
        payload = 4 * injected
        names = sum(len(p.name.encode()) for p in model.trainable_parameters())
        shapes = sum(2 + 1 + 1 + 4 * p.data.ndim for p in model.trainable_parameters())
        header = 4 + 4 + 32 + 4 + len_blob(model) + 4
        assert path.stat().st_size == payload + names + shapes + header + 4  # trailing crc

    def test_lora_reference_scale_payload(self, tmp_path):
        # d=768, 6 used layers, rank-2 all-scope: injected payload is exactly
        # 4 bytes x 165,888 values; the rest of the file is names + headers
        arch = ArchConfig("transformer", 768, 6, 12)
        base = build_backbone(arch, seed=0, use_layers=6)
        model = apply_method(base, Lora(2, "all"))
        path = tmp_path / "lora768.petl"
        save_delta(model, str(path))
        payload = 4 * model.injected.total_size()
        assert payload == 4 * 165_888
        overhead = path.stat().st_size - payload
        assert 0 < overhead < 16_384  # names, shapes, header, crc

    def test_loading_onto_differently_seeded_base_is_allowed(self, tmp_path, rng):
        # deltas are keyed by shape fingerprint, not by base values
        model = _trained_model(Lora(2, "all"), seed=0)
        path = tmp_path / "delta.petl"
        save_delta(model, str(path))
        other = load_delta(build_backbone(ARCH, seed=99, use_layers=2), str(path))
        x = rng.normal(size=(4, 16)).astype(np.float32)
        assert other.forward(x, training=False).shape == (3,)


def len_blob(model) -> int:
    from petlkit.checkpoint import _method_blob

    return len(_method_blob(model))
