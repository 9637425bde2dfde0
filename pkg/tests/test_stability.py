import io
import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from parallax.data import gen_provocation_set
from parallax.errors import ExplosionError, UsageError
from parallax.stability import (
    PRESETS,
    OptimizerState,
    StepStats,
    TrainConfig,
    Trainer,
    adamw_step,
    clip_global_norm,
    detect_explosion,
    emit_metrics,
    epoch_record,
    global_norm,
    multistep_lr,
    preset,
    record_step_stats,
    train_classifier,
)
from parallax.tensor import Tensor
from parallax.vit import Recipe, build_classifier

STEP_KEYS = ["step", "epoch", "loss", "max_abs_logit", "grad_max", "grad_l2", "lr"]


def tiny_model(variant="parallel_stabilized", seed=0):
    return build_classifier(Recipe("t", 2, 8, 32, 2, patch_size=8, image_size=32, num_classes=10), variant, seed)


# ----------------------------------------------------------------------
# AdamW
# ----------------------------------------------------------------------
def test_adamw_zero_grads_leave_params():
    p = Tensor(np.array([1.0, -2.0]))
    state = OptimizerState.for_params([p])
    adamw_step([p], [np.zeros(2)], state, lr=0.1, weight_decay=0.0)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert state.step == 1


def test_adamw_first_step_moves_by_lr():
    p = Tensor(np.array([1.0]))
    state = OptimizerState.for_params([p])
    adamw_step([p], [np.array([1.0])], state, lr=0.1, weight_decay=0.0)
    # m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
    assert p.data[0] == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-12)


def test_adamw_decoupled_decay():
    p = Tensor(np.array([2.0, -3.0]))
    state = OptimizerState.for_params([p])
    adamw_step([p], [np.zeros(2)], state, lr=0.1, weight_decay=0.1)
    np.testing.assert_allclose(p.data, np.array([2.0, -3.0]) * (1 - 0.01), rtol=1e-15)


def test_adamw_non_finite_grad_raises_without_mutation():
    p = Tensor(np.array([1.0, 2.0]))
    state = OptimizerState.for_params([p])
    with pytest.raises(ExplosionError):
        adamw_step([p], [np.array([np.nan, 0.0])], state, lr=0.1, weight_decay=0.1)
    np.testing.assert_array_equal(p.data, [1.0, 2.0])
    assert state.step == 0


def test_adamw_deterministic():
    rng = np.random.default_rng(0)
    g = [rng.standard_normal((3, 3)) for _ in range(4)]
    out = []
    for _ in range(2):
        p = Tensor(np.ones((3, 3)))
        s = OptimizerState.for_params([p])
        for gi in g:
            adamw_step([p], [gi.copy()], s, 1e-2, 0.05)
        out.append(p.data.copy())
    np.testing.assert_array_equal(out[0], out[1])


# ----------------------------------------------------------------------
# clipping
# ----------------------------------------------------------------------
def test_clip_examples():
    g = [np.array([3.0, 4.0])]
    assert clip_global_norm(g, 10.0) == 1.0
    np.testing.assert_array_equal(g[0], [3.0, 4.0])
    g = [np.array([30.0, 40.0])]
    clip_global_norm(g, 10.0)
    np.testing.assert_allclose(g[0], [6.0, 8.0], rtol=1e-6)
    assert clip_global_norm([np.zeros(3)], 10.0) == 1.0
    with pytest.raises(UsageError):
        clip_global_norm([np.ones(2)], 0.0)


grad_lists = st.lists(arrays(np.float64, st.integers(1, 6), elements=st.floats(-1e6, 1e6)), min_size=1, max_size=4)


@settings(max_examples=100, deadline=None)
@given(grad_lists, st.floats(1e-3, 1e3))
def test_clip_bound_and_idempotence(grads, threshold):
    once = [g.copy() for g in grads]
    clip_global_norm(once, threshold)
    assert global_norm(once) <= threshold + 1e-6
    twice = [g.copy() for g in once]
    clip_global_norm(twice, threshold)
    for a, b in zip(once, twice):
        np.testing.assert_array_equal(a, b)


# ----------------------------------------------------------------------
# schedule
# ----------------------------------------------------------------------
def test_multistep_examples():
    assert multistep_lr(1.0, 0, 200) == 1.0
    assert multistep_lr(1.0, 59, 200) == 1.0
    assert multistep_lr(1.0, 60, 200) == pytest.approx(0.1)
    assert multistep_lr(1.0, 180, 200) == pytest.approx(1e-3)
    with pytest.raises(UsageError):
        multistep_lr(1.0, 200, 200)


@given(st.integers(1, 500), st.floats(0.01, 0.99))
def test_multistep_non_increasing(total, factor):
    lrs = [multistep_lr(1.0, e, total, factor=factor) for e in range(total)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


# ----------------------------------------------------------------------
# monitoring
# ----------------------------------------------------------------------
class _OneParam:
    def __init__(self, grad):
        self.p = Tensor(np.zeros_like(grad))
        self.p.grad = grad

    def parameters(self):
        return [self.p]


def test_record_step_stats_norms():
    stats = record_step_stats(_OneParam(np.array([3.0, 4.0])), Tensor(np.zeros((2, 3))), 0)
    assert stats.grad_l2 == 5.0 and stats.grad_max == 4.0 and stats.max_abs_logit == 0.0


def test_zero_weight_model_has_zero_logits():
    model = tiny_model()
    for p in model.parameters():
        p.data[...] = 0.0
    logits = model(Tensor(np.random.default_rng(0).uniform(-1, 1, (2, 3, 32, 32))))
    assert record_step_stats(model, logits, 0).max_abs_logit == 0.0


def test_nan_logit_flags_explosion():
    stats = record_step_stats(_OneParam(np.ones(2)), Tensor(np.array([[np.nan, 0.0]])), 3)
    assert not stats.finite and detect_explosion(stats)


def test_detect_explosion_thresholds():
    base = StepStats(0, 0, 1.0, 10.0, 1.0, 1.0, 1e-4)
    assert not detect_explosion(base)
    assert detect_explosion(replace(base, max_abs_logit=4001.0))
    assert not detect_explosion(replace(base, max_abs_logit=4000.0))
    assert detect_explosion(replace(base, grad_max=math.inf))
    assert detect_explosion(replace(base, grad_max=2e4))


def test_metric_lines():
    buf = io.StringIO()
    emit_metrics(buf, StepStats(1, 0, 2.3, 5.0, 0.1, 0.2, 1e-4).record())
    emit_metrics(buf, epoch_record(0, "test", 0.25))
    emit_metrics(buf, {"step": 2, "loss": math.nan, "grad_max": math.inf})
    lines = [json.loads(line) for line in buf.getvalue().splitlines()]
    assert list(lines[0]) == STEP_KEYS
    assert lines[1] == {"epoch": 0, "split": "test", "accuracy": 0.25}
    assert lines[2]["loss"] == "nan" and lines[2]["grad_max"] == "inf"


# ----------------------------------------------------------------------
# config and training loop
# ----------------------------------------------------------------------
def test_train_config_validation():
    with pytest.raises(UsageError):
        TrainConfig(lr=-1.0)
    with pytest.raises(UsageError):
        TrainConfig(milestones=(0.6, 0.3))
    with pytest.raises(UsageError):
        TrainConfig(clip_threshold=0.0)
    assert preset("provocation").clip_threshold is None
    assert PRESETS["stabilizing"]["clip_threshold"] == 10.0


def test_zero_lr_epoch_keeps_params_and_loss():
    data = gen_provocation_set(64, 0).subset(8)
    model = tiny_model()
    before = [p.data.copy() for p in model.parameters()]
    cfg = TrainConfig(epochs=1, batch_size=4, weight_decay=0.0, augment_flips=False)
    cfg.lr = 0.0  # lr > 0 is a config invariant; bypass it for the zero-rate case
    result = train_classifier(model, data, cfg)
    for b, p in zip(before, model.parameters()):
        np.testing.assert_array_equal(b, p.data)
    # same batches are not revisited, so compare each step with a fresh forward pass
    assert len(result.steps) == 2 and all(math.isfinite(s.loss) for s in result.steps)
    again = train_classifier(model, data, cfg)
    assert [s.loss for s in again.steps] == [s.loss for s in result.steps]


def test_same_seed_same_stream():
    data = gen_provocation_set(64, 0)
    streams = []
    for _ in range(2):
        buf = io.StringIO()
        train_classifier(tiny_model(), data, TrainConfig(epochs=2, batch_size=16), data.subset(16, "test"), buf)
        streams.append(buf.getvalue())
    assert streams[0] == streams[1]
    assert '"split":"test"' in streams[0]


def test_explosion_halts_after_patience():
    data = gen_provocation_set(64, 0)
    buf = io.StringIO()
    cfg = TrainConfig(epochs=3, batch_size=8, logit_cap=1e-9)
    result = train_classifier(tiny_model(), data, cfg, sink=buf)
    assert result.halted and result.onset_step == 0
    assert len(result.steps) == cfg.patience
    last = json.loads(buf.getvalue().splitlines()[-1])
    assert last["halt"] == "explosion" and last["onset_step"] == 0


def test_clipping_bounds_every_step():
    data = gen_provocation_set(64, 0)
    model = tiny_model()
    cfg = TrainConfig(epochs=1, batch_size=8, clip_threshold=1e-3, lr=1e-3)
    trainer = Trainer(model, cfg)
    seen = []
    original = clip_global_norm

    import parallax.stability as S

    def spy(grads, threshold):
        f = original(grads, threshold)
        seen.append(global_norm(grads))
        return f

    S.clip_global_norm = spy
    try:
        trainer.fit(data)
    finally:
        S.clip_global_norm = original
    assert len(seen) == 8 and max(seen) <= 1e-3 + 1e-6


def test_trainer_resume_matches_uninterrupted():
    data = gen_provocation_set(64, 0)
    cfg = TrainConfig(epochs=3, batch_size=16)
    full = io.StringIO()
    Trainer(tiny_model(), cfg, full).fit(data)
    part = io.StringIO()
    first = Trainer(tiny_model(), cfg, part)
    first.fit(data, until_epoch=1)
    second = Trainer(tiny_model(seed=99), cfg, part)
    second.load_state(first.state())
    second.fit(data)
    assert part.getvalue() == full.getvalue()
