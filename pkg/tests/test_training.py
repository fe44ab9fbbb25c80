import json

import numpy as np
import pytest

from avfuse import corpus as cp
from avfuse import training as tr
from avfuse import video as vid
from avfuse.autodiff import Parameter
from avfuse.model import FusionMode, ModelConfig, SpeechModel, load_checkpoint, strip_gates

SPEC = cp.SyntheticLanguageSpec()


# -- optimizer -----------------------------------------------------------------

def test_adamw_first_step_example():
    p = Parameter(np.array(1.0), name="theta")
    tr.adamw_step({"theta": p}, {"theta": np.array(1.0)}, tr.AdamWState(), lr=0.1, weight_decay=0.0)
    assert p.item() == pytest.approx(1 - 0.1 * (1 / (1 + 1e-8)), abs=1e-15)
    assert p.item() == pytest.approx(0.9, abs=1e-8)


def test_adamw_pure_decay():
    p = Parameter(np.array([2.0, -3.0]), name="w")
    tr.adamw_step({"w": p}, {"w": np.zeros(2)}, tr.AdamWState(), lr=0.5, weight_decay=0.1)
    np.testing.assert_allclose(p.data, np.array([2.0, -3.0]) * (1 - 0.5 * 0.1), rtol=0, atol=1e-15)


def test_adamw_matches_reference_over_steps():
    r = np.random.default_rng(0)
    p = Parameter(r.normal(size=5), name="w")
    theta = p.data.copy()
    m = np.zeros(5)
    v = np.zeros(5)
    state = tr.AdamWState()
    for t in range(1, 6):
        g = r.normal(size=5)
        tr.adamw_step({"w": p}, {"w": g.copy()}, state, lr=0.01, weight_decay=0.02)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        theta = theta - 0.01 * ((m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8) + 0.02 * theta)
    np.testing.assert_allclose(p.data, theta, rtol=1e-12)


def test_adamw_skips_frozen_and_allocates_no_state():
    live = Parameter(np.ones(3), name="live")
    frozen = Parameter(np.ones(3), name="frozen")
    frozen.trainable = False
    state = tr.AdamWState()
    tr.adamw_step({"live": live, "frozen": frozen}, {"live": np.ones(3)}, state, 0.1, 0.1)
    assert set(state.m) == set(state.v) == {"live"}
    np.testing.assert_array_equal(frozen.data, np.ones(3))


def test_adamw_rejects_non_finite_grad():
    p = Parameter(np.ones(2), name="layer.w")
    with pytest.raises(FloatingPointError, match="layer.w"):
        tr.adamw_step({"layer.w": p}, {"layer.w": np.array([1.0, np.nan])}, tr.AdamWState(), 0.1, 0.0)


def test_clip_grad_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert tr.clip_grad_norm(g, 1.0) == pytest.approx(5.0)
    assert np.sqrt(g["a"] ** 2 + g["b"] ** 2)[0] == pytest.approx(1.0)


# -- schedule ------------------------------------------------------------------

def test_lr_schedule_examples():
    s = tr.LRSchedule(peak=1e-3, warmup_steps=100, total_steps=1000)
    assert tr.lr_at(0, s) == 0
    assert tr.lr_at(50, s) == pytest.approx(5e-4)
    assert tr.lr_at(100, s) == pytest.approx(1e-3)
    assert tr.lr_at(550, s) == pytest.approx(5e-4)
    assert tr.lr_at(1000, s) == 0
    with pytest.raises(ValueError):
        tr.lr_at(1001, s)
    with pytest.raises(ValueError):
        tr.lr_at(-1, s)
    with pytest.raises(ValueError):
        tr.LRSchedule(1e-3, 10, 10)


def test_train_config_validation():
    with pytest.raises(ValueError):
        tr.TrainConfig(stage="C")
    with pytest.raises(ValueError):
        tr.TrainConfig(warmup_steps=10, total_steps=5)
    with pytest.raises(ValueError):
        tr.TrainConfig(noise="loud")


# -- short end-to-end runs -----------------------------------------------------

TINY = ModelConfig(d_model=16, n_heads=2, n_enc_layers=1, n_dec_layers=1, d_ff=32, vocab_size=SPEC.vocab_size,
                   n_special=SPEC.n_special, max_source_positions=120, max_target_positions=32)


@pytest.fixture(scope="module")
def data():
    full = cp.generate_corpus(SPEC, 40, (1.0, 1.6), seed=5)
    train, valid, _ = full.split(8, 2)
    bank = cp.NoiseBank(SPEC, seed=9, n_speakers=6, n_babble=4, track_seconds=1.92)
    return train, valid, bank


@pytest.fixture(scope="module")
def stage_a(data, tmp_path_factory):
    train, valid, bank = data
    out = tmp_path_factory.mktemp("a")
    cfg = tr.TrainConfig(stage="A", total_steps=6, warmup_steps=2, eval_interval=3, seconds_budget=8, noise="noisy")
    res = tr.train_stage_a(SpeechModel(TINY, seed=0), train, valid, cfg, out, bank)
    return res, out


def test_stage_a_writes_best_and_log(stage_a):
    res, out = stage_a
    assert res.best_path.exists()
    pointer = json.loads((out / "stageA-best.json").read_text())
    assert pointer["val_token_acc"] == max(a for _, a in res.val_history)
    lines = [json.loads(x) for x in (out / "stageA.log.jsonl").read_text().splitlines()]
    assert [x["step"] for x in lines] == [3, 6]
    assert {"loss", "lr", "val_token_acc"} <= set(lines[0])


def test_noisy_stage_a_mixes_every_sample(stage_a, data):
    res, _ = stage_a
    train, _, _ = data
    assert res.mix_calls == sum(len(b.ids) for b in _steps_plans(train, 6))


def _steps_plans(train, steps):
    out, epoch = [], 0
    while len(out) < steps:
        plans, _ = cp.build_batches(cp.records_for(train), 8, 6, 120, seed=epoch)
        out += plans[: steps - len(out)]
        epoch += 1
    return out


def test_clean_stage_a_never_mixes(data, tmp_path):
    train, valid, bank = data
    cfg = tr.TrainConfig(stage="A", total_steps=3, warmup_steps=1, eval_interval=3, seconds_budget=8)
    res = tr.train_stage_a(SpeechModel(TINY, seed=0), train, valid, cfg, tmp_path, bank)
    assert res.mix_calls == 0


def test_training_is_deterministic(data, tmp_path):
    train, valid, bank = data
    cfg = tr.TrainConfig(stage="A", total_steps=5, warmup_steps=1, eval_interval=5, seconds_budget=8, noise="noisy")
    a = tr.train_stage_a(SpeechModel(TINY, seed=1), train, valid, cfg, tmp_path / "x", bank)
    b = tr.train_stage_a(SpeechModel(TINY, seed=1), train, valid, cfg, tmp_path / "y", bank)
    assert a.losses == b.losses


def test_nan_loss_aborts_with_diagnostic(data, tmp_path):
    train, valid, _ = data
    model = SpeechModel(TINY, seed=0)
    model.decoder.ln.gamma.data[0] = np.nan
    cfg = tr.TrainConfig(stage="A", total_steps=3, warmup_steps=1, eval_interval=3, seconds_budget=8)
    with pytest.raises(tr.TrainingDiverged, match=r"step 0.*lr"):
        tr.train_stage_a(model, train, valid, cfg, tmp_path, None)


def test_stage_b_freezes_base_and_visual(stage_a, data, tmp_path):
    res, _ = stage_a
    train, valid, bank = data
    enc = vid.VisualEncoder(vid.VisualEncoderConfig(d_visual=16, n_heads=2, n_layers=1, d_ff=16), seed=0)
    enc_hash = enc.param_hash()
    stats_before = enc.stem_bn.running_mean.copy()
    base = tr.load_stage_a(res.best_path)
    cfg = tr.TrainConfig(stage="B", total_steps=4, warmup_steps=1, eval_interval=2, seconds_budget=8, noise="noisy")
    res_b, fused = tr.train_stage_b(res.best_path, train, valid, cfg, tmp_path, enc, FusionMode.GATED,
                                    train_bank=bank)
    assert fused.base.param_hash() == base.param_hash()
    assert fused.visual_encoder.param_hash() == enc_hash
    assert np.abs(fused.visual_encoder.stem_bn.running_mean - stats_before).max() > 0
    assert strip_gates(fused).param_hash() == base.param_hash()
    tensors, header = load_checkpoint(res_b.best_path)
    assert header["stage_a_sha256"] == load_checkpoint(res.best_path)[1]["sha256"]
    assert not any(n.startswith("base.") for n in tensors)
    loaded = dict(tr.load_stage_b(res_b.best_path, res.best_path, enc).named_parameters())
    for name, arr in tensors.items():
        if name in loaded:
            np.testing.assert_array_equal(loaded[name].data, arr)


def test_stage_b_early_fusion_updates_base(stage_a, data, tmp_path):
    res, _ = stage_a
    train, valid, _ = data
    enc = vid.VisualEncoder(vid.VisualEncoderConfig(d_visual=16, n_heads=2, n_layers=1, d_ff=16), seed=0)
    base = tr.load_stage_a(res.best_path)
    cfg = tr.TrainConfig(stage="B", total_steps=2, warmup_steps=1, eval_interval=2, seconds_budget=8)
    _, fused = tr.train_stage_b(res.best_path, train, valid, cfg, tmp_path, enc, FusionMode.EARLY)
    before = dict(base.named_parameters())
    changed = [n for n, p in fused.base.named_parameters() if not np.array_equal(p.data, before[n].data)]
    assert len(changed) == len(before)


def test_stage_b_rejects_foreign_stage_a(stage_a, data, tmp_path):
    res, _ = stage_a
    train, valid, _ = data
    enc = vid.VisualEncoder(vid.VisualEncoderConfig(d_visual=16, n_heads=2, n_layers=1, d_ff=16), seed=0)
    cfg = tr.TrainConfig(stage="B", total_steps=2, warmup_steps=1, eval_interval=2, seconds_budget=8)
    res_b, _ = tr.train_stage_b(res.best_path, train, valid, cfg, tmp_path / "b", enc)
    other = tr.TrainConfig(stage="A", total_steps=2, warmup_steps=1, eval_interval=2, seconds_budget=8)
    res_a2 = tr.train_stage_a(SpeechModel(TINY, seed=5), train, valid, other, tmp_path / "a2")
    with pytest.raises(ValueError, match="different stage A"):
        tr.load_stage_b(res_b.best_path, res_a2.best_path, enc)
