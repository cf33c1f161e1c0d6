"""Acceptance suite: ten binding criteria, one test per criterion.

Each test prints `[acceptance] criterion NN <name>: PASS (<elapsed>)` on
success and enforces its stated runtime budget. Run with:

    pytest tests/test_acceptance.py -v -s
"""

import time

import numpy as np
import pytest

from petlkit.accounting import audit, predict_count
from petlkit.backbone import ArchConfig, HeadConfig, build_backbone, build_head
from petlkit.checkpoint import IntegrityError, load_delta, save_delta
from petlkit.gradcheck import check_gradients
from petlkit.metrics import bootstrap_ci, key_score, map_metric, tempo_acc1
from petlkit.petl import (
    Adapter,
    BitFit,
    FullFinetune,
    Lora,
    Prefix,
    Probing,
    Prompt,
    Ssf,
    apply_method,
    inject,
    merge_lora,
    merge_ssf,
)
from petlkit.tasks import TaskSpec, generate_task
from petlkit.tensor import Tensor, using_dtype
from petlkit.training import TrainConfig, train


class _Budget:
    def __init__(self, name: str, seconds: float):
        self.name = name
        self.seconds = seconds
        self.start = time.perf_counter()

    def done(self):
        elapsed = time.perf_counter() - self.start
        assert elapsed < self.seconds, f"{self.name} took {elapsed:.1f}s (budget {self.seconds}s)"
        print(f"[acceptance] {self.name}: PASS ({elapsed:.2f}s, budget {self.seconds:.0f}s)")


REF_TRANSFORMER = ArchConfig("transformer", 768, 12, 12)
REF_CONFORMER = ArchConfig("conformer", 1024, 12, 8)

DESK_ARCH = ArchConfig("transformer", 32, 2, 4, max_seq=128)
DESK_CONFORMER = ArchConfig("conformer", 32, 2, 4, conv_kernel=5, max_seq=128)

GRID_15 = (
    [Adapter(b) for b in (8, 16, 32)]
    + [Prefix(n) for n in (16, 32, 64)]
    + [Lora(r, "att") for r in (1, 2, 4)]
    + [Lora(r, "all") for r in (1, 2, 4)]
    + [Prompt(64), BitFit(), Ssf()]
)

ALL_METHODS = [Adapter(16), Prompt(64), Prefix(32), BitFit(), Ssf(), Lora(2, "all")]


def _desk_model(arch, method, task, seed=0):
    base = build_backbone(arch, seed=seed, use_layers=arch.n_layers)
    head = build_head(
        arch.d_model,
        HeadConfig(n_outputs=task.n_outputs, output_kind=task.output_kind),
        seed=seed,
    )
    return apply_method(base, method, head=head)


def test_criterion_01_complexity_table_reproduction():
    budget = _Budget("criterion 01 complexity-table", 1.0)
    transformer_cells = {
        Adapter(16): 322_752,
        Prompt(64): 49_152,
        BitFit(): 50_688,
        Ssf(): 82_944,
        Lora(2, "all"): 165_888,
    }
    for cfg, expected in transformer_cells.items():
        got = predict_count(REF_TRANSFORMER, cfg, 6).total_trainable
        assert got == expected, f"{cfg}: {got} != {expected}"
    for cfg, expected in {Prompt(64): 65_536, Lora(2, "all"): 405_504}.items():
        got = predict_count(REF_CONFORMER, cfg, 6).total_trainable
        assert got == expected, f"conformer {cfg}: {got} != {expected}"
    budget.done()


def test_criterion_02_predict_audit_agreement():
    budget = _Budget("criterion 02 predict/audit agreement", 5.0)
    rng = np.random.default_rng(0)
    for cfg in GRID_15:
        d = int(rng.choice([8, 16, 32]))
        heads = int(rng.choice([1, 2, 4]))
        family = str(rng.choice(["transformer", "conformer"]))
        arch = ArchConfig(family, d, 2, heads, conv_kernel=3, max_seq=256)
        model = apply_method(build_backbone(arch, seed=1, use_layers=2), cfg)
        report = audit(model)  # hard error on divergence
        assert report.total_trainable == predict_count(arch, cfg, 2).total_trainable
    budget.done()


def test_criterion_03_merge_soundness():
    budget = _Budget("criterion 03 merge soundness", 10.0)
    rng = np.random.default_rng(1)
    inputs = [rng.normal(0, 1, (10, 32)).astype(np.float32) for _ in range(100)]
    for method, merge in ((Ssf(), merge_ssf), (Lora(2, "all"), merge_lora)):
        model = inject(build_backbone(DESK_ARCH, seed=2, use_layers=2), method)
        for _, p in model.injected.items():
            offset = 1.0 if p.name.endswith("scale") else 0.0
            p.data[...] = (rng.normal(0, 0.1, p.data.shape) + offset).astype(np.float32)
        before = [model.forward_features(Tensor(x)).data.copy() for x in inputs]
        merge(model)
        worst = max(
            float(np.abs(model.forward_features(Tensor(x)).data - b).max())
            for x, b in zip(inputs, before)
        )
        assert worst <= 1e-5, f"{method}: forward deviated by {worst}"
        reference = build_backbone(DESK_ARCH, seed=2, use_layers=2)
        assert model.structural_tree() == {
            n: p.tensor.shape for n, p in reference.registry.items()
        }, f"{method}: merged tree is not structurally identical"
    budget.done()


def test_criterion_04_prefix_oracle():
    from petlkit.backbone import attention

    budget = _Budget("criterion 04 prefix oracle", 5.0)
    rng = np.random.default_rng(2)
    for n_prefix in (1, 4, 32):
        for n_heads in (1, 4):
            q, k, v = (Tensor(rng.normal(0, 1, (6, 32)).astype(np.float32)) for _ in range(3))
            ek = Tensor(rng.normal(0, 1, (n_prefix, 32)).astype(np.float32))
            ev = Tensor(rng.normal(0, 1, (n_prefix, 32)).astype(np.float32))
            fused = attention(q, k, v, n_heads, extra_k=ek, extra_v=ev)
            explicit = attention(
                q,
                Tensor(np.concatenate([ek.data, k.data])),
                Tensor(np.concatenate([ev.data, v.data])),
                n_heads,
            )
            diff = float(np.abs(fused.data - explicit.data).max())
            assert diff <= 1e-6, f"n_prefix={n_prefix}, heads={n_heads}: {diff}"
    budget.done()


def test_criterion_05_identity_at_init():
    budget = _Budget("criterion 05 identity-at-init", 5.0)
    rng = np.random.default_rng(3)
    for arch in (DESK_ARCH, DESK_CONFORMER):
        x = Tensor(rng.normal(0, 1, (9, 32)).astype(np.float32))
        base_out = build_backbone(arch, seed=4, use_layers=2).forward_features(x).data
        for cfg in (Adapter(16), Lora(2, "all"), Ssf(), Prompt(0), Prefix(0)):
            model = inject(build_backbone(arch, seed=4, use_layers=2), cfg)
            out = model.forward_features(x).data
            assert out.tobytes() == base_out.tobytes(), f"{arch.family}/{cfg}: not bitwise identity"
    budget.done()


def test_criterion_06_freeze_law():
    budget = _Budget("criterion 06 freeze law", 60.0)
    task = TaskSpec("genre", seq_len=8, d_input=32, n_train=16, n_val=8, n_test=8, seed=5)
    dataset = generate_task(task)
    cfg = TrainConfig(
        steps=100, batch_size=4, lr_petl=2e-3, lr_head=5e-3, lr_ft=2e-3, eval_every=50, seed=0
    )
    for method in ALL_METHODS + [FullFinetune(), Probing()]:
        model = _desk_model(DESK_ARCH, method, task, seed=6)
        frozen = {
            n: p.data.tobytes() for n, p in model.base.registry.items() if not p.trainable
        }
        trained_names = {n for n, p in model.base.registry.items() if p.trainable}
        if isinstance(method, BitFit):
            assert trained_names == {
                n for n, _ in model.base.registry.items() if n.endswith(".bias")
            }, "bias-only exemption set is wrong"
        train(model, dataset, cfg)
        for name, blob in frozen.items():
            assert (
                model.base.registry[name].data.tobytes() == blob
            ), f"{method}: frozen {name} changed"
    budget.done()


def test_criterion_07_gradcheck():
    budget = _Budget("criterion 07 gradcheck", 120.0)
    rng = np.random.default_rng(7)
    with using_dtype(np.float64):
        for family in ("transformer", "conformer"):
            arch = ArchConfig(family, 8, 2, 2, ff_mult=2, conv_kernel=3)
            for method in (None, Adapter(4), Lora(2, "all"), Ssf(), Prefix(3)):
                bb = build_backbone(arch, seed=8, use_layers=2)
                for name, p in bb.registry.items():
                    if name.endswith(".weight") and p.data.ndim >= 2:
                        p.data[...] = rng.normal(0, 0.4, p.data.shape)
                if method is None:
                    model_forward = bb.forward_features
                    tensors = {n: p.tensor for n, p in bb.registry.items()}
                else:
                    model = inject(bb, method)
                    for _, p in model.injected.items():
                        offset = 1.0 if p.name.endswith("scale") else 0.0
                        p.data[...] = rng.normal(0, 0.2, p.data.shape) + offset
                    model_forward = model.forward_features
                    tensors = {n: p.tensor for n, p in model.injected.items()}
                x = Tensor(rng.normal(size=(4, 8)))
                proj = Tensor(rng.normal(size=(4, 8)))
                check_gradients(lambda: (model_forward(x) * proj).sum(), tensors)
    budget.done()


def test_criterion_08_learnability():
    budget = _Budget("criterion 08 learnability", 120.0)
    task = TaskSpec("genre", seq_len=8, d_input=32, n_train=48, n_val=16, n_test=16, seed=1, planted_rank=4)
    dataset = generate_task(task)
    cfg = TrainConfig(
        steps=200, batch_size=8, lr_petl=2e-3, lr_head=5e-3, lr_ft=2e-3, eval_every=100, seed=0
    )
    ratios = {}
    for method in ALL_METHODS + [FullFinetune(), Probing()]:
        model = _desk_model(DESK_ARCH, method, task, seed=3)
        history = train(model, dataset, cfg)
        ratio = history.final_loss / history.initial_loss
        ratios[type(method).__name__] = ratio
        threshold = 0.8 if isinstance(method, Probing) else 0.5
        assert ratio < threshold, f"{method}: loss ratio {ratio:.3f} >= {threshold}"
    print("  loss ratios:", {k: round(v, 3) for k, v in ratios.items()})
    budget.done()


def test_criterion_09_metric_oracles():
    budget = _Budget("criterion 09 metric oracles", 60.0)
    # mAP hand-computed case
    assert map_metric(
        np.array([[0.9], [0.8], [0.1]]), np.array([[1], [0], [1]])
    ) == pytest.approx((1.0 + 2.0 / 3.0) / 2.0)
    # key weighted accuracy reference cases
    assert key_score((0, "major"), (0, "major")) == 1.0
    assert key_score((7, "major"), (0, "major")) == 0.5
    assert key_score((9, "minor"), (0, "major")) == 0.3
    assert key_score((0, "minor"), (0, "major")) == 0.2
    assert key_score((1, "major"), (0, "major")) == 0.0
    # tempo boundary is inclusive at exactly 4%
    assert tempo_acc1([124.8], [120.0]) == 1.0
    assert tempo_acc1([125.0], [120.0]) == 0.0
    assert tempo_acc1([120.0], [120.0]) == 1.0
    # bootstrap coverage over 200 seeded Bernoulli(0.8, n=100) trials
    rng = np.random.default_rng(2024)
    hits = sum(
        1
        for trial in range(200)
        if (lambda lo_hi: lo_hi[0] <= 0.8 <= lo_hi[1])(
            bootstrap_ci((rng.random(100) < 0.8).astype(float), b=1000, level=0.95, seed=trial)
        )
    )
    assert hits / 200 >= 0.90, f"bootstrap coverage {hits / 200:.2%} < 90%"
    budget.done()


def test_criterion_10_checkpoint_roundtrip(tmp_path):
    budget = _Budget("criterion 10 checkpoint round-trip", 5.0)
    rng = np.random.default_rng(9)
    task = TaskSpec("genre", seq_len=8, d_input=32, n_train=8, n_val=4, n_test=4, seed=5)
    model = _desk_model(DESK_ARCH, Lora(2, "all"), task, seed=6)
    for p in model.trainable_parameters():
        p.data[...] = rng.normal(0, 0.2, p.data.shape).astype(np.float32)
    path = tmp_path / "model.petl"
    save_delta(model, str(path))
    loaded = load_delta(build_backbone(DESK_ARCH, seed=6, use_layers=2), str(path))
    x = rng.normal(0, 1, (8, 32)).astype(np.float32)
    assert (
        model.forward(x, training=False).data.tobytes()
        == loaded.forward(x, training=False).data.tobytes()
    ), "round-trip forward is not bitwise identical"
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 3] ^= 0x01
    bad = tmp_path / "bad.petl"
    bad.write_bytes(bytes(blob))
    with pytest.raises(IntegrityError):
        load_delta(build_backbone(DESK_ARCH, seed=6, use_layers=2), str(bad))
    budget.done()
