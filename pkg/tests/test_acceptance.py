"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines. Reported full-scale numbers (leaderboard score, scheduler and
head-only reference accuracies) depend on a private dataset and are
metadata only; everything here is property-based at desk scale.
"""

import math

import numpy as np
import pytest
import torch
import torch.nn as nn

from conftest import MILD_POLICY, NOOP_POLICY, config_text, lattice_image
from hdff.ablation import ablate_finetune_depth
from hdff.augment import AugmentationOp, AugmentationPolicy, apply_policy, imagenet_policy
from hdff.cli import dispatch
from hdff.config import parse_config
from hdff.data import load_manifest, make_loader
from hdff.errors import CheckpointError
from hdff.evaluation import evaluate_logits_fn
from hdff.fusion import (
    FreezeMode,
    FreezePolicy,
    FusionHead,
    GrandModel,
    extract_fused,
    layout_of,
    load_grand_model,
)
from hdff.pipeline import run_pipeline, write_predictions
from hdff.registry import (
    BackboneAdapter,
    BackboneSpec,
    ParamBudget,
    REFERENCE_TOTAL_PARAMS,
    check_budget,
    default_registry,
)
from hdff.schedules import CosineSchedule, OptimizerConfig
from hdff.synthetic import make_forgery_dataset, make_xor_dataset
from hdff.training import (
    StageConfig,
    StageId,
    SubModelUnit,
    GrandModelUnit,
    load_checkpoint,
    run_stage,
)

ALL_MOCKS = ("mock_tiny", "mock_small", "mock_narrow", "mock_wide")


def ok(n, text):
    print(f"\n[acceptance] criterion {n:02d}: PASS — {text}")


def state_bytes(state):
    return {k: v.numpy().tobytes() for k, v in state.items()}


def test_criterion_01_cosine_closed_form():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        eta_max = float(10 ** rng.uniform(-6, -1))
        eta_min = eta_max * float(rng.uniform(0.0, 0.99))
        t_max = int(rng.integers(1, 120))
        s = CosineSchedule(eta_max=eta_max, eta_min=eta_min, t_max=t_max)
        for t in range(t_max + 1):
            closed = eta_min + 0.5 * (eta_max - eta_min) * (
                1.0 + math.cos(math.pi * t / t_max)
            )
            assert abs(s.lr_at(t) - closed) <= 1e-12
            assert abs(s.lr_at(t) + s.lr_at(t_max - t) - (eta_min + eta_max)) <= 1e-12
    ok(1, "cosine schedule matches the closed form and symmetry to 1e-12")


@pytest.fixture(scope="module")
def stage_loaders(forgery_dataset):
    manifest, _ = forgery_dataset
    records = load_manifest(manifest)
    train = [r for r in records if r.split == "train"]
    val = [r for r in records if r.split == "val"]
    train_loader = make_loader(train, 8, shuffle_seed=3, input_size=48)
    val_loader = make_loader(val, 16, shuffle_seed=0, input_size=48, shuffle=False)
    return train_loader, val_loader


def test_criterion_02_freeze_conservation(stage_loaders):
    train_loader, val_loader = stage_loaders
    reg = default_registry()

    adapters = [
        reg.load_adapter(name, "random", seed=i, input_size=48)
        for i, name in enumerate(ALL_MOCKS)
    ]
    head = FusionHead(layout_of(adapters).width, 2, generator=torch.Generator().manual_seed(0))
    unit = GrandModelUnit(GrandModel(adapters, head))
    before = [state_bytes(a.extractor.state_dict()) for a in adapters]
    cfg = StageConfig(
        stage=StageId.FUSION_TRAIN,
        epochs=4,
        freeze=FreezePolicy(FreezeMode.FUSION_ONLY),
        optimizer=OptimizerConfig(base_lr=1e-2),
        scheduler=CosineSchedule(eta_max=1e-2, t_max=4),
        batch_size=8,
        seed=0,
    )
    report = run_stage(cfg, unit, train_loader, val_loader)
    assert report.optimizer_steps >= 50
    for adapter, saved in zip(adapters, before):
        assert state_bytes(adapter.extractor.state_dict()) == saved

    sub = reg.load_adapter("mock_small", "random", seed=9, input_size=48)
    sub.attach_head(2, generator=torch.Generator().manual_seed(1))
    body_before = state_bytes(sub.extractor.state_dict())
    sel = StageConfig(
        stage=StageId.SELECTIVE_FT,
        epochs=2,
        freeze=FreezePolicy(FreezeMode.HEAD_ONLY),
        optimizer=OptimizerConfig(base_lr=1e-3),
        scheduler=CosineSchedule(eta_max=1e-3, t_max=2),
        batch_size=8,
        seed=0,
    )
    run_stage(sel, SubModelUnit(sub), train_loader, val_loader)
    assert state_bytes(sub.extractor.state_dict()) == body_before
    ok(2, f"frozen blobs bitwise unchanged after {report.optimizer_steps} fusion steps "
          "and after head-only fine-tuning")


class _StubExtractor(nn.Module):
    def __init__(self, width):
        super().__init__()
        self.width = width

    def forward(self, x):
        return x.new_zeros(x.shape[0], self.width)


def test_criterion_03_fusion_dimension_invariant(tmp_path):
    rng = np.random.default_rng(7)
    for case in range(200):
        dims = [int(d) for d in rng.integers(1, 96, size=rng.integers(1, 6))]
        adapters = [
            BackboneAdapter(BackboneSpec(name=f"bb{i}", input_size=8), _StubExtractor(d))
            for i, d in enumerate(dims)
        ]
        fused = extract_fused(adapters, torch.zeros(2, 3, 8, 8))
        assert fused.values.shape[1] == sum(dims)
        offsets = [entry[1] for entry in fused.layout.entries]
        assert offsets == [sum(dims[:i]) for i in range(len(dims))]

    reg = default_registry()
    adapter = reg.load_adapter("mock_tiny", "random", seed=0, input_size=48)
    grand = GrandModel([adapter], FusionHead(16, 2))
    path = tmp_path / "grand.pt"
    grand.save(path)
    payload = torch.load(path, weights_only=False)
    payload["manifest"]["fused_width"] = 31
    torch.save(payload, path)
    with pytest.raises(CheckpointError):
        load_grand_model(path, reg)
    ok(3, "fused width equals the dim sum over 200 random layouts; "
          "mismatched checkpoints are rejected")


def test_criterion_04_forward_path_oracle():
    rng = np.random.default_rng(11)
    for _ in range(50):
        batch = int(rng.integers(1, 9))
        width = int(rng.integers(1, 65))
        head = FusionHead(width, 2, generator=torch.Generator().manual_seed(batch))
        values = torch.tensor(rng.normal(size=(batch, width)), dtype=torch.float32)
        logits = head(values).detach().numpy()
        w = head.linear.weight.detach().numpy()
        b = head.linear.bias.detach().numpy()
        for i in range(batch):
            for j in range(2):
                oracle = b[j]
                for k in range(width):
                    oracle += values[i, k].item() * w[j, k]
                assert abs(logits[i, j] - oracle) <= 1e-6
    ok(4, "fusion forward matches the hand-rolled dot-product oracle to 1e-6")


def _pipeline_config(tmp_path, manifest, run_name, policy_path, *, seed, stages):
    path = tmp_path / f"{run_name}.toml"
    path.write_text(
        config_text(
            manifest,
            tmp_path / run_name,
            policy_file=policy_path,
            seed=seed,
            selective=stages[0],
            full=stages[1],
            fusion=stages[2],
        )
    )
    return parse_config(path)


def test_criterion_05_pipeline_determinism(tmp_path, forgery_dataset):
    manifest, _ = forgery_dataset
    policy = tmp_path / "mild.txt"
    policy.write_text(MILD_POLICY)
    stages = ((2, 16, "1e-3"), (2, 16, "1e-3"), (2, 16, "1e-2"))
    results = []
    for run_name in ("det_a", "det_b"):
        cfg = _pipeline_config(tmp_path, manifest, run_name, policy, seed=77, stages=stages)
        results.append(run_pipeline(cfg))
    a, b = results
    assert a.final_metrics.accuracy == pytest.approx(b.final_metrics.accuracy, abs=1e-6)
    assert a.final_metrics.auc == pytest.approx(b.final_metrics.auc, abs=1e-6)
    assert a.final_metrics.mean_loss == pytest.approx(b.final_metrics.mean_loss, abs=1e-6)

    records = [r for r in load_manifest(manifest) if r.split == "val"]
    preds = []
    for result, name in zip(results, ("pa.csv", "pb.csv")):
        grand = load_grand_model(result.grand_checkpoint, default_registry())
        preds.append(write_predictions(grand, records, tmp_path / name, input_size=48))
    assert preds[0].read_bytes() == preds[1].read_bytes()
    ok(5, "two fixed-seed pipeline runs agree to 1e-6 with byte-identical predictions")


def test_criterion_06_resume_equivalence(tmp_path, forgery_dataset):
    manifest, _ = forgery_dataset
    records = load_manifest(manifest)
    train = [r for r in records if r.split == "train"]
    val = [r for r in records if r.split == "val"]
    train_loader = make_loader(train, 16, shuffle_seed=5, input_size=48)
    val_loader = make_loader(val, 16, shuffle_seed=0, input_size=48, shuffle=False)

    def fresh_unit():
        adapter = default_registry().load_adapter(
            "mock_tiny", "random", seed=13, input_size=48
        )
        adapter.attach_head(2, generator=torch.Generator().manual_seed(13))
        return SubModelUnit(adapter)

    def config():
        return StageConfig(
            stage=StageId.SELECTIVE_FT,
            epochs=3,
            freeze=FreezePolicy(FreezeMode.HEAD_ONLY),
            optimizer=OptimizerConfig(base_lr=1e-3),
            scheduler=CosineSchedule(eta_max=1e-3, t_max=3),
            batch_size=16,
            seed=13,
        )

    straight = fresh_unit()
    run_stage(config(), straight, train_loader, val_loader, stage_dir=tmp_path / "straight")

    # Interrupted run: epoch checkpoints are on disk; the process dies after
    # the first epoch, so only epoch_0000.ckpt survives to resume from.
    interrupted_dir = tmp_path / "interrupted"
    run_stage(config(), fresh_unit(), train_loader, val_loader, stage_dir=interrupted_dir)
    first_epoch = load_checkpoint(interrupted_dir / "epoch_0000.ckpt")

    resumed = fresh_unit()
    run_stage(
        config(),
        resumed,
        train_loader,
        val_loader,
        stage_dir=tmp_path / "resumed",
        resume_from=first_epoch,
    )
    assert state_bytes(resumed.state_dict()) == state_bytes(straight.state_dict())
    ok(6, "interrupt-after-epoch-1 resume reproduces the straight run bitwise")


def test_criterion_07_end_to_end_learning(tmp_path):
    manifest = make_forgery_dataset(
        tmp_path / "data", n_train=320, n_val=160, size=64, seed=7
    )
    policy = tmp_path / "mild.txt"
    policy.write_text(MILD_POLICY)
    cfg = _pipeline_config(
        tmp_path,
        manifest,
        "learn",
        policy,
        seed=99,
        stages=((3, 16, "1e-3"), (10, 16, "1e-3"), (12, 16, "1e-2")),
    )
    result = run_pipeline(cfg)
    fused = result.final_metrics.accuracy
    best_sub = max(result.sub_model_val_accuracy.values())
    assert fused >= 0.90
    assert fused >= best_sub - 0.02
    ok(7, f"pipeline reaches val accuracy {fused:.3f} "
          f"(best single sub-model {best_sub:.3f}, fusion keeps it within 0.02)")


def test_criterion_08_head_only_cap_vs_full_finetune(tmp_path):
    manifest = make_xor_dataset(
        tmp_path / "xor", n_train=480, n_val=160, size=48, seed=11
    )
    policy = tmp_path / "noop.txt"
    policy.write_text(NOOP_POLICY)
    cfg_path = tmp_path / "xor.toml"
    cfg_path.write_text(
        config_text(
            manifest,
            tmp_path / "run",
            backbones=("mock_small",),
            policy_file=policy,
            seed=11,
            selective=(6, 32, "1e-3"),
            full=(40, 32, "1e-3"),
        )
    )
    results = ablate_finetune_depth(parse_config(cfg_path))
    by_variant = {r.variant: r for r in results}
    head_only = by_variant["head_only"].final["accuracy"]
    full_ft = by_variant["full_ft"].final["accuracy"]
    assert head_only <= 0.80
    assert full_ft >= head_only + 0.10
    ok(8, f"head-only caps at {head_only:.3f}; full fine-tune reaches {full_ft:.3f}")


def test_criterion_09_augmentation_contracts(rng):
    zero_policy = AugmentationPolicy(
        [
            (AugmentationOp("Rotate", 0.0, 9), AugmentationOp("Invert", 0.0, 0)),
            (AugmentationOp("Solarize", 0.0, 9), AugmentationOp("Color", 0.0, 9)),
        ]
    )
    invert_twice = AugmentationPolicy(
        [(AugmentationOp("Invert", 1.0, 0), AugmentationOp("Invert", 1.0, 0))]
    )
    full_policy = imagenet_policy()
    for trial in range(25):
        img = lattice_image(rng, size=24)
        out = apply_policy(zero_policy, img, np.random.default_rng(trial))
        assert out.tobytes() == img.tobytes()
        out = apply_policy(invert_twice, img, np.random.default_rng(trial))
        assert out.tobytes() == img.tobytes()
        a = apply_policy(full_policy, img, np.random.default_rng(trial))
        b = apply_policy(full_policy, img, np.random.default_rng(trial))
        assert a.tobytes() == b.tobytes()
        assert a.min() >= 0.0 and a.max() <= 1.0
    off_lattice = rng.uniform(0, 1, size=(3, 24, 24)).astype(np.float32)
    out = apply_policy(zero_policy, off_lattice, np.random.default_rng(0))
    assert out.tobytes() == off_lattice.tobytes()
    ok(9, "probability-0 identity, Invert involution, seed reproducibility, "
          "and [0,1] clamping all hold bitwise")


def test_criterion_10_metrics_oracles(forgery_dataset):
    manifest, _ = forgery_dataset
    records = [r for r in load_manifest(manifest) if r.split == "val"]
    loader = make_loader(records, 16, shuffle_seed=0, input_size=48, shuffle=False)
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(len(records), 2)).astype(np.float32)
    # quantize so tied scores occur
    logits = np.round(logits, 1)

    cursor = {"i": 0}

    def fixed_logits(x):
        sl = torch.tensor(logits[cursor["i"] : cursor["i"] + x.shape[0]])
        cursor["i"] += x.shape[0]
        return sl

    metrics = evaluate_logits_fn(fixed_logits, loader)
    labels = np.array([r.label for r in records])
    preds = np.argmax(logits, axis=1)
    correct = int((preds == labels).sum())
    assert metrics.accuracy * metrics.n == pytest.approx(correct, abs=1e-9)

    probs = torch.softmax(torch.tensor(logits), dim=1)[:, 1].numpy()
    pos = probs[labels == 1]
    neg = probs[labels == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else (0.5 if p == q else 0.0)
    brute = total / (len(pos) * len(neg))
    assert metrics.auc == pytest.approx(brute, abs=1e-9)
    ok(10, "accuracy recount is exact and AUC matches the pairwise statistic to 1e-9")


def test_criterion_11_budget_gate(tmp_path, forgery_dataset, capsys):
    manifest, _ = forgery_dataset
    cfg_path = tmp_path / "tight.toml"
    cfg_path.write_text(
        config_text(manifest, tmp_path / "tight_run", param_limit=1000)
    )
    code = dispatch(["train", "--config", str(cfg_path)])
    capsys.readouterr()
    assert code == 1
    assert not (tmp_path / "tight_run" / "grand_model.pt").exists()
    assert not (tmp_path / "tight_run" / "fusion").exists()

    reference = check_budget(
        ParamBudget(per_model={"fused_reference_model": REFERENCE_TOTAL_PARAMS})
    )
    assert reference.passed
    assert reference.total == 180_160_000
    assert reference.headroom == 19_840_000
    ok(11, "over-budget config aborts with exit 1 before fusion; "
           "the 180.16M/200M reference case passes with 19.84M headroom")
