import numpy as np
import pytest

from avfuse import corpus as cp
from avfuse import training as tr
from avfuse import video as vid
from avfuse.autodiff.tensor import ShapeError

SMALL = vid.VisualEncoderConfig(d_visual=16, n_heads=2, n_layers=1, d_ff=16, temporal_kernel=3)


def numbered_clip(t=6, size=96):
    """Every pixel encodes (frame, row, col), so crops can be located exactly."""
    f, y, x = np.meshgrid(np.arange(t), np.arange(size), np.arange(size), indexing="ij")
    return (f * 10000 + y * 100 + x).astype(np.float64)


# -- frames and clips -------------------------------------------------------------

@pytest.mark.parametrize("dur,frames", [(1.0, 25), (1.6, 40), (1.01, 26), (0.04, 1)])
def test_frame_count(dur, frames):
    assert vid.n_video_frames(dur) == frames


def test_render_range_and_shape():
    spec = cp.SyntheticLanguageSpec()
    frames = vid.render_frames([1, 2, 3], spec.glyphs, 4, np.random.default_rng(0))
    assert frames.shape == (12, 96, 96)
    assert frames.min() >= 0 and frames.max() <= 1


def test_glyphs_distinct_from_each_other_and_mirrors():
    g = vid.make_glyphs(40, np.random.default_rng(1))
    for i in range(40):
        for j in range(i + 1, 40):
            assert (g[i] != g[j]).sum() >= 8
            assert (g[i][:, ::-1] != g[j]).sum() >= 8


def test_clip_round_trip(tmp_path):
    clip = np.random.default_rng(0).random((5, 96, 96))
    vid.write_clip(tmp_path / "c.clip", clip)
    back = vid.read_clip(tmp_path / "c.clip")
    assert back.shape == clip.shape
    assert np.max(np.abs(back - clip)) <= 0.5 / 255 + 1e-12
    raw = (tmp_path / "c.clip").read_bytes()
    (tmp_path / "t.clip").write_bytes(raw[:-10])
    with pytest.raises(ValueError, match="truncated"):
        vid.read_clip(tmp_path / "t.clip")


# -- augmentation -----------------------------------------------------------------

def test_test_mode_is_centre_crop():
    clip = numbered_clip()
    out = vid.augment(clip, vid.CropFlipAug(mode="test"))
    np.testing.assert_array_equal(out, clip[:, 4:92, 4:92])


def test_forced_flip_twice_restores():
    clip = numbered_clip()
    aug = vid.CropFlipAug(mode="test")
    once = vid.augment(clip, aug, force_flip=True)
    np.testing.assert_array_equal(vid.hflip(once), vid.augment(clip, aug))


def test_train_mode_is_reproducible_and_clip_consistent():
    clip = numbered_clip()
    aug = vid.CropFlipAug(mode="train")
    for seed in range(20):
        a = vid.augment(clip, aug, np.random.default_rng(seed))
        b = vid.augment(clip, aug, np.random.default_rng(seed))
        np.testing.assert_array_equal(a, b)
        # every frame shares the offset and flip of frame 0
        corner = a[0, 0, 0] if a[0, 0, 0] < a[0, 0, -1] else a[0, 0, -1]
        oy, ox = int(corner // 100 % 100), int(corner % 100)
        flipped = a[0, 0, 0] > a[0, 0, -1]
        expect = clip[:, oy:oy + 88, ox:ox + 88]
        np.testing.assert_array_equal(a, expect[:, :, ::-1] if flipped else expect)


def test_flip_rate_near_half():
    clip = numbered_clip(t=1)
    aug = vid.CropFlipAug(mode="train")
    rng = np.random.default_rng(0)
    flips = 0
    for _ in range(400):
        a = vid.augment(clip, aug, rng)
        flips += a[0, 0, 0] > a[0, 0, -1]
    assert 0.4 < flips / 400 < 0.6


def test_augment_errors():
    with pytest.raises(ShapeError):
        vid.augment(np.zeros((2, 80, 80)), vid.CropFlipAug(mode="test"))
    with pytest.raises(ValueError):
        vid.augment(np.zeros((2, 96, 96)), vid.CropFlipAug(mode="train"))


# -- encoder ----------------------------------------------------------------------

def test_rate_preserved():
    enc = vid.VisualEncoder(SMALL, seed=0).eval()
    clip = np.random.default_rng(0).random((40, 88, 88))
    assert vid.encode_video(enc, clip).shape == (40, 16)


def test_eval_deterministic_and_train_stochastic():
    enc = vid.VisualEncoder(SMALL, seed=0)
    clip = np.random.default_rng(0).random((10, 88, 88))
    enc.eval()
    np.testing.assert_array_equal(vid.encode_video(enc, clip), vid.encode_video(enc, clip))
    enc.train()
    a = vid.encode_video(enc, clip, np.random.default_rng(1))
    b = vid.encode_video(enc, clip, np.random.default_rng(2))
    assert not np.array_equal(a, b)


def test_padding_does_not_change_valid_frames():
    enc = vid.VisualEncoder(SMALL, seed=0).eval()
    r = np.random.default_rng(3)
    clips, mask = cp.pad_stack([r.random((7, 88, 88)), r.random((12, 88, 88))])
    batch = enc.encode_batch(clips, mask).data
    alone = vid.encode_video(enc, clips[0, :7])
    np.testing.assert_allclose(batch[0, :7], alone, rtol=1e-10, atol=1e-12)


def test_encoder_errors():
    enc = vid.VisualEncoder(SMALL, seed=0)
    with pytest.raises(ShapeError):
        enc.encode_batch(np.zeros((1, 0, 88, 88)))
    with pytest.raises(ShapeError):
        enc.encode_batch(np.zeros((1, 3, 96, 96)))
    with pytest.raises(ValueError):
        vid.VisualEncoder(vid.VisualEncoderConfig(temporal_kernel=4))


def test_frozen_weights_with_live_batchnorm():
    enc = vid.freeze_with_live_stats(vid.VisualEncoder(SMALL, seed=0))
    assert not any(p.trainable for _, p in enc.named_parameters())
    h0 = vid.weight_hash(enc)
    mean0 = enc.stem_bn.running_mean.copy()
    r = np.random.default_rng(0)
    enc.train()
    for _ in range(10):
        enc(r.random((6, 88, 88)), r)
    assert vid.weight_hash(enc) == h0
    assert np.abs(enc.stem_bn.running_mean - mean0).max() > 0
    enc.eval()
    mean1 = enc.stem_bn.running_mean.copy()
    for _ in range(3):
        enc(r.random((6, 88, 88)))
    np.testing.assert_array_equal(enc.stem_bn.running_mean, mean1)


def test_optimizer_step_leaves_frozen_encoder_untouched():
    enc = vid.freeze_with_live_stats(vid.VisualEncoder(SMALL, seed=0))
    params = dict(enc.named_parameters())
    before = {n: p.data.copy() for n, p in params.items()}
    grads = {n: np.ones_like(p.data) for n, p in params.items()}
    tr.adamw_step(params, grads, tr.AdamWState(), lr=0.1, weight_decay=0.1)
    for n, p in params.items():
        np.testing.assert_array_equal(p.data, before[n])


def test_pretext_training_lowers_loss():
    spec = cp.SyntheticLanguageSpec()
    corpus = cp.generate_corpus(spec, 12, (1.0, 1.6), seed=2)
    enc = vid.VisualEncoder(SMALL, seed=0)
    losses = tr.pretrain_visual(enc, corpus, steps=30, lr=1e-2, batch_size=4, seed=0)
    assert np.mean(losses[-5:]) < np.mean(losses[:5])


def test_classifier_has_one_head_per_offset():
    enc = vid.VisualEncoder(SMALL, seed=0)
    head = vid.GlyphClassifier(enc, 40, context=(-1, 0, 1)).eval()
    out = head(np.zeros((2, 5, 88, 88)), np.ones((2, 5), dtype=bool))
    assert len(out) == 3 and out[0].shape == (2, 5, 41)
