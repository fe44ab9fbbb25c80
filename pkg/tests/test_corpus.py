import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from avfuse import corpus as cp
from avfuse import signal as sig
from avfuse import video as vid
from avfuse.model import ModelConfig, SpeechModel
from avfuse.autodiff import no_grad, ops
from avfuse.model.transformer import decode_teacher_forcing

SPEC = cp.SyntheticLanguageSpec()


@pytest.fixture(scope="module")
def small():
    return cp.generate_corpus(SPEC, 24, (1.0, 2.0), seed=7)


def matched_filter_decode(spec, audio, n_tokens):
    """Correlate each token's mean log-mel against analytic partial-power templates."""
    fb = sig.mel_filterbank()
    freqs = np.fft.rfftfreq(sig.WIN_LENGTH, 1 / sig.SAMPLE_RATE)
    temps = []
    for k in range(spec.n_content):
        amp = spec.token_amplitudes(k, cp.AUDIO_GRID.copy())
        t = np.log10(fb @ np.interp(freqs, cp.AUDIO_GRID, amp ** 2) + 1e-12)
        temps.append(t - t.mean())
    temps = np.array(temps)
    temps /= np.linalg.norm(temps, axis=1, keepdims=True)
    mel = sig.power_spectrogram(audio) @ fb.T
    per = int(round(spec.token_duration / 0.01))
    out = []
    for j in range(n_tokens):
        v = np.log10(mel[per * j: per * j + per - 2].mean(0) + 1e-12)
        out.append(int(np.argmax(temps @ (v - v.mean()))))
    return out


# -- generation ----------------------------------------------------------------

def test_generation_is_deterministic(tmp_path):
    a = cp.generate_corpus(SPEC, 5, (1.0, 2.0), seed=7)
    b = cp.generate_corpus(SPEC, 5, (1.0, 2.0), seed=7)
    cp.write_corpus(a, tmp_path / "a")
    cp.write_corpus(b, tmp_path / "b")
    assert cp.corpus_digest(tmp_path / "a") == cp.corpus_digest(tmp_path / "b")
    c = cp.generate_corpus(SPEC, 5, (1.0, 2.0), seed=8)
    cp.write_corpus(c, tmp_path / "c")
    assert cp.corpus_digest(tmp_path / "c") != cp.corpus_digest(tmp_path / "a")


def test_manifest_durations_in_range():
    c = cp.generate_corpus(SPEC, 100, (2.0, 6.0), seed=3)
    recs = c.manifest()
    assert len(recs) == 100
    assert len({r["id"] for r in recs}) == 100
    assert all(2.0 <= r["dur_s"] <= 6.0 for r in recs)
    assert all(set(r["translations"]) == set(SPEC.target_languages) for r in recs)


def test_duration_out_of_range():
    with pytest.raises(ValueError):
        cp.generate_corpus(SPEC, 3, (0.5, 2.0))
    with pytest.raises(ValueError):
        cp.generate_corpus(SPEC, 3, (1.0, 8.0), max_len_s=6.0)
    with pytest.raises(ValueError):
        cp.generate_corpus(SPEC, 0)


def test_audio_video_lengths_agree(small):
    for u in small.utterances:
        assert u.transcript
        t_audio = -(-sig.n_frames(len(u.audio)) // 2)  # encoder frames after the stride-2 conv
        t_video = len(u.video)
        assert t_audio in (2 * t_video, 2 * t_video - 1)
        assert abs(len(u.audio) / sig.SAMPLE_RATE - t_video / vid.FPS) <= 1 / vid.FPS


def test_matched_filter_recovers_narrow_formant_transcripts():
    narrow = cp.SyntheticLanguageSpec(formant_width=0.1)
    for u in cp.generate_corpus(narrow, 12, (1.0, 2.0), seed=7).utterances:
        assert matched_filter_decode(narrow, u.audio, u.n_tokens) == u.transcript


def test_default_formants_are_mostly_but_not_fully_separable(small):
    # wide formants overlap, so a linear template reader is good but imperfect
    hits = total = 0
    for u in small.utterances:
        decoded = matched_filter_decode(SPEC, u.audio, u.n_tokens)
        hits += sum(a == b for a, b in zip(decoded, u.transcript))
        total += u.n_tokens
    assert 0.85 <= hits / total < 1.0


def test_glyphs_recover_transcript_from_video(small):
    fpt = int(round(SPEC.token_duration * vid.FPS))
    pad = (vid.FRAME_SIZE - vid.GLYPH_CELLS * vid.CELL_PX) // 2
    for u in small.utterances[:5]:
        decoded = []
        for j in range(u.n_tokens):
            frame = u.video[j * fpt: (j + 1) * fpt].mean(0)
            cells = frame[pad:pad + 72, pad:pad + 72].reshape(6, 12, 6, 12).mean((1, 3)) > 0.5
            decoded.append(int(np.argmin([(cells != g).sum() for g in SPEC.glyphs])))
        assert decoded == u.transcript


def test_disk_round_trip_is_lossless(tmp_path, small):
    cp.write_corpus(small, tmp_path)
    back = cp.load_corpus(tmp_path)
    for u, v in zip(small.utterances, back.utterances):
        assert u.id == v.id and u.transcript == v.transcript and u.translations == v.translations
        np.testing.assert_array_equal(u.audio, v.audio)
        np.testing.assert_array_equal(u.video, v.video)


def test_manifest_missing_media(tmp_path, small):
    cp.write_corpus(small, tmp_path)
    (tmp_path / "wav" / f"{small.utterances[0].id}.wav").unlink()
    with pytest.raises(FileNotFoundError):
        cp.load_corpus(tmp_path)


def test_audio_signatures_distinguishable():
    fb = sig.mel_filterbank()
    freqs = np.fft.rfftfreq(sig.WIN_LENGTH, 1 / sig.SAMPLE_RATE)
    t = np.array([np.log10(fb @ np.interp(freqs, cp.AUDIO_GRID, SPEC.token_amplitudes(k, cp.AUDIO_GRID.copy()) ** 2)
                           + 1e-12) for k in range(SPEC.n_content)])
    d = np.linalg.norm(t[:, None] - t[None], axis=-1)
    assert d[~np.eye(len(t), dtype=bool)].min() > 0.1


# -- language rules ------------------------------------------------------------

@settings(max_examples=50)
@given(st.lists(st.integers(0, SPEC.n_content - 1), min_size=1, max_size=20))
def test_translation_round_trip(ids):
    for lang in SPEC.target_languages:
        out = SPEC.translate(ids, lang)
        assert len(out) == len(ids)
        assert SPEC.inverse_translate(out, lang) == ids


def test_translation_rules_differ_per_language():
    ids = list(range(12))
    a, b = (SPEC.translate(ids, lang) for lang in SPEC.target_languages)
    assert a != b and a != ids


def test_encode_targets_prompt_and_mask(small):
    u = small.utterances[0]
    toks, mask = cp.encode_targets(SPEC, u, "transcribe")
    assert toks[:4].tolist() == [cp.SOT, SPEC.lang_token("en"), cp.TRANSCRIBE, cp.NO_TIMESTAMPS]
    assert toks[-1] == cp.EOT
    assert mask.tolist() == [False] * 3 + [True] * (u.n_tokens + 1)
    toks, _ = cp.encode_targets(SPEC, u, "translate", "xb")
    assert toks[1] == SPEC.lang_token("xb") and toks[2] == cp.TRANSLATE
    assert [t - SPEC.word_id("xb", 0) for t in toks[4:-1]] == SPEC.translate(u.transcript, "xb")
    with pytest.raises(KeyError):
        cp.encode_targets(SPEC, u, "translate", "zz")


def test_detokenize_inverts_word_ids(small):
    u = small.utterances[1]
    toks, _ = cp.encode_targets(SPEC, u, "translate", "xa")
    assert SPEC.detokenize(toks) == SPEC.text("xa", u.translations["xa"])


# -- batching ------------------------------------------------------------------

def recs(durs, chars=None):
    chars = chars or [10] * len(durs)
    return [{"id": f"u{i}", "dur_s": d, "text": "x" * c} for i, (d, c) in enumerate(zip(durs, chars))]


def test_greedy_packing_example():
    plans, rep = cp.build_batches(recs([5, 3, 4]), 8, 6, 120, seed=0)
    assert sorted(sorted(p.ids) for p in plans) == [["u0"], ["u1", "u2"]]
    assert rep.filtered == 0 and rep.retained == 3


def test_filters_long_and_wordy():
    plans, rep = cp.build_batches(recs([20, 3, 4], [10, 400, 350]), 60, 15, 350, seed=0)
    assert rep.too_long == ["u0"] and rep.too_many_chars == ["u1"]
    assert [p.ids for p in plans] == [["u2"]]
    with pytest.raises(ValueError):
        cp.build_batches(recs([20]), 60, 15, 350)


def test_budget_smaller_than_max_len():
    with pytest.raises(ValueError):
        cp.build_batches(recs([1]), 5, 6, 120)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.5, 8.0), min_size=1, max_size=60), st.integers(0, 5))
def test_packing_invariants(durs, seed):
    assume(min(durs) <= 6.0)
    r = recs(durs)
    plans, rep = cp.build_batches(r, 10.0, 6.0, 120, seed=seed)
    assert rep.filtered + rep.retained == len(r)
    assert all(p.seconds <= 10.0 + 1e-9 for p in plans)
    ids = [i for p in plans for i in p.ids]
    assert len(ids) == len(set(ids)) == rep.retained
    other, _ = cp.build_batches(r, 10.0, 6.0, 120, seed=seed + 1)
    assert sorted(map(tuple, (p.ids for p in plans))) == sorted(map(tuple, (p.ids for p in other)))


def test_batch_loss_equals_sum_of_single_losses(small):
    cfg = ModelConfig(d_model=16, n_heads=2, n_enc_layers=1, n_dec_layers=1, d_ff=32,
                      vocab_size=SPEC.vocab_size, n_special=SPEC.n_special, max_source_positions=200)
    model = SpeechModel(cfg, seed=0).eval()
    utts = small.utterances[:4]
    tasks = [[("transcribe", None), ("translate", "xa")]] * 4
    rng = np.random.default_rng(0)

    def loss_of(batch):
        memory = model.encode_inputs(batch)
        memory = {"audio": memory["audio"][batch["rows"]], "audio_mask": memory["audio_mask"][batch["rows"]]}
        logits = decode_teacher_forcing(model, memory, batch["tokens"])
        return ops.cross_entropy(logits, batch["tokens"][:, 1:], batch["loss_mask"], reduction="sum").item()

    with no_grad():
        total = loss_of(cp.make_batch(SPEC, utts, tasks, rng))
        parts = sum(loss_of(cp.make_batch(SPEC, [u], tasks[:1], rng)) for u in utts)
    assert abs(total - parts) <= 1e-10


def test_make_batch_masks(small):
    utts = small.utterances[:3]
    b = cp.make_batch(SPEC, utts, [cp.all_tasks(SPEC)] * 3, np.random.default_rng(0), with_video=True)
    assert b["tokens"].shape[0] == 9
    assert b["rows"].tolist() == [0, 0, 0, 1, 1, 1, 2, 2, 2]
    assert b["mel_mask"].sum(1).tolist() == [sig.n_frames(len(u.audio)) for u in utts]
    assert b["video"].shape[2:] == (vid.CROP_SIZE, vid.CROP_SIZE)
    assert b["loss_mask"].sum() == sum(3 * (u.n_tokens + 1) for u in utts)


def test_noise_bank_kinds():
    bank = cp.NoiseBank(SPEC, seed=1, n_speakers=4, n_babble=3, track_seconds=1.92)
    rng = np.random.default_rng(0)
    for kind in sig.NOISE_KINDS:
        x = bank.sample(kind, 8000, rng)
        assert x.shape == (8000,) and sig.power(x) > 0
    with pytest.raises(ValueError):
        bank.sample("thunder", 10, rng)


def test_clean_condition_never_mixes(small):
    counter = cp.MixCounter()
    rng = np.random.default_rng(0)
    cp.make_batch(SPEC, small.utterances[:3], [[("transcribe", None)]] * 3, rng, None, None, counter=counter)
    assert counter.calls == 0


def test_noise_probability_mixes_that_share_of_utterances():
    spec = cp.SyntheticLanguageSpec()
    bank = cp.NoiseBank(spec, 3, 4, 3)
    audio = np.random.default_rng(0).normal(size=8000) * 0.1
    rng = np.random.default_rng(1)
    cond = cp.NoiseCondition(("babble",), (0.0,), prob=0.3)
    mixed = sum(not np.array_equal(cp.corrupt(audio, cond, bank, rng), audio) for _ in range(400))
    assert 0.22 < mixed / 400 < 0.38
    with pytest.raises(ValueError):
        cp.NoiseCondition(prob=1.5)
