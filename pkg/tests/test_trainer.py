import math
from dataclasses import replace

import numpy as np
import pytest

from src.services.checkpoint import checkpoint_bytes
from src.services.encoders import build_model, embed_video
from src.services.numerics import Tensor, no_grad
from src.services.retrieval import binomial_std, chance_recall, effective_tau
from src.services.synthdata import generate_dataset, permute_frames, stack_batch
from src.services.trainer import (
    AdamOptimizer,
    DivergenceError,
    StepRecord,
    batch_loss,
    evaluate,
    steps_per_epoch,
    train,
    train_multiseed,
)


def test_zero_epochs_returns_initialization(small_config, small_dataset):
    """Test 0 epochs leaves every tunable at its initial value."""
    config = small_config.updated(**{"train.epochs": "0"})
    train_samples, _ = small_dataset.split()
    result = train(config, train_samples)
    init = build_model(config)
    assert result.log == []
    for name, tensor in init.tunable.items():
        assert result.state.tunable[name].data.tobytes() == tensor.data.tobytes()


def test_backbone_untouched_by_training(small_config, small_dataset):
    """Test frozen parameters are bitwise unchanged after training steps."""
    train_samples, _ = small_dataset.split()
    state = build_model(small_config)
    before = {name: t.data.tobytes() for name, t in state.backbone.items()}
    tunable_before = {name: t.data.copy() for name, t in state.tunable.items()}
    train(small_config, train_samples, state=state, max_steps=2)
    assert {name: t.data.tobytes() for name, t in state.backbone.items()} == before
    moved = [name for name, t in state.tunable.items() if not np.array_equal(t.data, tunable_before[name])]
    assert any(name.endswith(".w_up") for name in moved)


def test_training_is_deterministic(small_config, small_dataset):
    """Test two runs with one seed give identical logs and parameters."""
    train_samples, _ = small_dataset.split()
    a = train(small_config, train_samples, max_steps=3)
    b = train(small_config, train_samples, max_steps=3)
    assert [r.to_line() for r in a.log] == [r.to_line() for r in b.log]
    for name, tensor in a.state.tunable.items():
        assert b.state.tunable[name].data.tobytes() == tensor.data.tobytes()
    assert checkpoint_bytes(a.state) == checkpoint_bytes(b.state)


def test_step_log_caps_and_tau(small_config, small_dataset):
    """Test caps fall from cap_start to cap_end and tau never exceeds its cap."""
    config = small_config.updated(**{"train.epochs": "2"})
    train_samples, _ = small_dataset.split()
    lines = []
    result = train(config, train_samples, on_step=lambda r: lines.append(r.to_line()))
    caps = [r.cap for r in result.log]
    assert len(caps) == 8
    assert caps[0] == 100.0
    assert caps[-1] == 20.0
    assert all(a >= b for a, b in zip(caps, caps[1:]))
    assert all(1.0 <= r.tau <= r.cap for r in result.log)
    assert 1.0 <= result.state.tau.item() <= caps[-1]
    assert len(lines) == 8
    assert len(lines[0].split()) == 4


def test_constant_cap_schedule(small_config, small_dataset):
    """Test the constant cap keeps the upper bound at cap_start."""
    config = small_config.updated(**{"tau.cap": "constant"})
    result = train(config, small_dataset.split()[0])
    assert {r.cap for r in result.log} == {100.0}


def test_step_record_line():
    """Test the log line format."""
    assert StepRecord(3, 1.25, 99.5, 100.0).to_line() == "3 1.250000 99.500000 100.000000"


def test_optimizer_touches_only_tunables(toy_state):
    """Test moment buffers exist exactly for the tunable set."""
    optimizer = AdamOptimizer.from_config(toy_state.tunable, toy_state.config.train)
    assert set(optimizer.m) == set(toy_state.tunable) == set(optimizer.v)
    with pytest.raises(ValueError, match="outside the optimizer"):
        optimizer.step({"vision.proj": Tensor(np.zeros((48, 32)), name="vision.proj")})


def test_optimizer_first_step_moves_by_lr():
    """Test the bias-corrected first update has magnitude lr."""
    w = Tensor([1.0, -2.0], requires_grad=True, name="w")
    optimizer = AdamOptimizer({"w": w}, lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
    optimizer.step({"w": Tensor([0.5, -3.0], name="w")})
    np.testing.assert_allclose(w.data, [0.9, -1.9], rtol=1e-6)


def test_divergence_reports_step(small_config, small_dataset, monkeypatch):
    """Test a non-finite loss aborts with the failing step index."""
    from src.services import trainer as trainer_module

    real = trainer_module.batch_loss
    calls = {"n": 0}

    def flaky(state, frames, tokens, tau_eff):
        calls["n"] += 1
        loss = real(state, frames, tokens, tau_eff)
        if calls["n"] == 2:
            loss.data[...] = float("nan")
        return loss

    monkeypatch.setattr(trainer_module, "batch_loss", flaky)
    with pytest.raises(DivergenceError) as exc_info:
        train(small_config, small_dataset.split()[0])
    assert exc_info.value.step == 1


def test_steps_per_epoch():
    """Test full batches only, or a single smaller batch."""
    assert steps_per_epoch(16, 4) == (4, 4)
    assert steps_per_epoch(18, 4) == (4, 4)
    assert steps_per_epoch(3, 32) == (1, 3)
    with pytest.raises(ValueError):
        steps_per_epoch(1, 4)


def test_first_step_logs_pre_update_tau_and_loss(small_config, small_dataset):
    """Test step 0 logs the tau its loss was computed with and the loss of the untouched model."""
    config = small_config.updated(**{"train.batch_size": "16", "tau.init": "50"})
    train_samples, _ = small_dataset.split()
    result = train(config, train_samples, max_steps=1)
    record = result.log[0]
    assert record.tau == 50.0
    assert result.state.tau.item() != 50.0

    frames, tokens = stack_batch(train_samples)
    expected = batch_loss(build_model(config), frames, tokens, Tensor([50.0])).item()
    assert math.isclose(record.loss, expected, rel_tol=1e-9)


def test_default_first_step_uses_initial_tau(small_config, small_dataset):
    """Test the default run starts at tau = tau.init = 100 with the matching step-0 loss."""
    config = small_config.updated(**{"train.batch_size": "16"})
    train_samples, _ = small_dataset.split()
    record = train(config, train_samples, max_steps=1).log[0]
    assert record.tau == config.tau.init == 100.0
    frames, tokens = stack_batch(train_samples)
    expected = batch_loss(build_model(config), frames, tokens, Tensor([100.0])).item()
    assert math.isclose(record.loss, expected, rel_tol=1e-9)
    assert record.loss > math.log(16) + 0.15


def test_initial_loss_near_log_batch(toy_state, toy_config):
    """Test zero-init adapters start near uniform similarities at unit temperature."""
    spec = toy_config.data.model_copy(update={"n_pairs": 8, "n_test": 0})
    frames, tokens = stack_batch(generate_dataset(spec).samples)
    loss = batch_loss(toy_state, frames, tokens, effective_tau(Tensor([1.0]), 100.0))
    assert abs(loss.item() - math.log(8)) <= 0.15


def test_evaluate_is_deterministic(toy_state, small_dataset):
    """Test two evaluations give identical reports in both directions."""
    first = evaluate(toy_state, small_dataset.samples)
    second = evaluate(toy_state, small_dataset.samples)
    assert first == second
    assert first.t2v.direction == "T2V" and first.v2t.direction == "V2T"
    assert len(first.lines()) == 4


def test_evaluate_gallery_of_one(toy_state, small_dataset):
    """Test a single pair is always retrieved."""
    result = evaluate(toy_state, small_dataset.samples[:1])
    for report in result.reports():
        assert set(report.recalls.values()) == {100.0}


def test_evaluate_shuffled_pairs_near_chance(toy_state, small_config):
    """Test captions shuffled against their videos are retrieved at chance level."""
    samples = generate_dataset(small_config.data.model_copy(update={"n_pairs": 64, "n_test": 64})).samples
    perm = np.random.default_rng(0).permutation(len(samples))
    shuffled = [replace(s, tokens=samples[j].tokens) for s, j in zip(samples, perm)]
    report = evaluate(toy_state, shuffled).t2v
    # identical captions rank identically, so only distinct captions are independent queries
    distinct = len({s.tokens.tobytes() for s in shuffled})
    assert report.recalls[1] <= chance_recall(len(samples)) + 3 * binomial_std(len(samples), distinct)


def test_evaluate_rejects_empty(toy_state):
    """Test an empty gallery is rejected."""
    with pytest.raises(ValueError):
        evaluate(toy_state, [])


def test_multiseed_summary(small_config, small_dataset):
    """Test the multi-seed report summarizes every direction and cutoff."""
    config = small_config.updated(**{"train.epochs": "0"})
    train_samples, test_samples = small_dataset.split()
    report = train_multiseed(config, train_samples, test_samples, seeds=[0, 1])
    assert report.seeds == [0, 1]
    assert len(report.summary) == 4 * 3
    assert report.lines()[0].startswith("T2V R@1 ")
    with pytest.raises(ValueError):
        train_multiseed(config, train_samples, test_samples, seeds=[])


@pytest.mark.slow
def test_full_adapter_learns_order(toy_config):
    """Test the full adapter reaches 90% label-level text-to-video R@1 and halves its loss."""
    dataset = generate_dataset(toy_config.data)
    train_samples, test_samples = dataset.split()
    result = train(toy_config, train_samples)
    assert result.epoch_losses[-1] <= 0.5 * result.epoch_losses[0]
    report = evaluate(result.state, test_samples)
    assert report.t2v_label.recalls[1] >= 90.0


@pytest.mark.slow
def test_frame_independent_baseline_cannot_learn_order(toy_config):
    """Test AdaptMLP stays order-blind: pooled features ignore frame order, recall stays near half."""
    config = toy_config.updated(**{"adapter.video_mode": "adaptmlp_sequential", "cmi.layers": "none"})
    dataset = generate_dataset(config.data.model_copy(update={"noise_std": 0.0}))
    train_samples, test_samples = dataset.split()
    result = train(config, train_samples)

    sample = test_samples[0]
    reversed_sample = permute_frames(sample, list(range(sample.frames.shape[0]))[::-1])
    with no_grad():
        a = embed_video(sample.frames[None], result.state).data
        b = embed_video(reversed_sample.frames[None], result.state).data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-9)

    report = evaluate(result.state, test_samples)
    assert report.t2v_label.recalls[1] <= 60.0
    assert report.v2t_label.recalls[1] <= 60.0


@pytest.mark.slow
def test_constant_cap_run_completes(toy_config):
    """Test training with a fixed tau cap runs to completion."""
    config = toy_config.updated(**{"tau.cap": "constant", "train.epochs": "3"})
    train_samples, _ = generate_dataset(config.data).split()
    result = train(config, train_samples)
    assert all(r.cap == 100.0 for r in result.log)
    assert all(math.isfinite(r.loss) for r in result.log)
