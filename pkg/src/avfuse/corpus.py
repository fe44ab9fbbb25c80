"""Synthetic paired audio/video corpus with multitask text targets.

Every content token has three renderings: an audio "syllable" (a fixed
speech-like carrier plus a token-specific two-formant component), a 6x6
visual glyph, and one word per language. Translations are a per-language
bijective word substitution followed by block reversal, so they are exactly
invertible.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import signal as sig
from . import video as vid

# special token ids
SOT, EOT, TRANSCRIBE, TRANSLATE, NO_TIMESTAMPS, PAD = 0, 1, 2, 3, 4, 5
TASK_TOKENS = {"transcribe": TRANSCRIBE, "translate": TRANSLATE}
PROMPT_LEN = 4
AUDIO_GRID = np.arange(50.0, 7000.0, 25.0)


@dataclass
class SyntheticLanguageSpec:
    n_content: int = 40
    source_language: str = "en"
    target_languages: Tuple[str, ...] = ("xa", "xb")
    token_duration: float = 0.16
    info_fraction: float = 1.0
    formant_width: float = 0.2
    seed: int = 1234

    def __post_init__(self):
        self.target_languages = tuple(self.target_languages)
        if round(self.token_duration * vid.FPS, 9) % 1:
            raise ValueError("token duration must be a whole number of 25 fps frames")
        rng = np.random.default_rng(self.seed)
        nf2 = 5
        nf1 = int(np.ceil(self.n_content / nf2))
        f1 = np.geomspace(300, 900, nf1)
        f2 = np.geomspace(1100, 3000, nf2)
        grid = [(f1[i // nf2], f2[i % nf2]) for i in range(nf1 * nf2)]
        order = rng.permutation(len(grid))[: self.n_content]
        self.formants = np.array([grid[i] for i in order])
        self.glyphs = vid.make_glyphs(self.n_content, rng)
        self.permutations = {lang: rng.permutation(self.n_content) for lang in self.target_languages}
        self.block_sizes = {lang: 2 + i % 2 for i, lang in enumerate(self.target_languages)}

    # -- vocabulary --------------------------------------------------------
    @property
    def languages(self) -> Tuple[str, ...]:
        return (self.source_language,) + self.target_languages

    @property
    def n_special(self) -> int:
        return 6 + len(self.languages)

    @property
    def vocab_size(self) -> int:
        return self.n_special + self.n_content * len(self.languages)

    def lang_token(self, lang: str) -> int:
        if lang not in self.languages:
            raise KeyError(f"unknown language {lang!r}; known: {self.languages}")
        return 6 + self.languages.index(lang)

    def word_id(self, lang: str, content: int) -> int:
        return self.n_special + self.languages.index(lang) * self.n_content + int(content)

    def word(self, lang: str, content: int) -> str:
        return f"{lang}{int(content):02d}"

    def text(self, lang: str, content_ids) -> str:
        return " ".join(self.word(lang, c) for c in content_ids)

    def parse(self, text: str) -> Tuple[str, List[int]]:
        words = text.split()
        if not words:
            return self.source_language, []
        lang = words[0][:-2]
        return lang, [int(w[-2:]) for w in words]

    def token_to_word(self, tok: int) -> Optional[str]:
        k = tok - self.n_special
        if k < 0 or k >= self.n_content * len(self.languages):
            return None
        return self.word(self.languages[k // self.n_content], k % self.n_content)

    def detokenize(self, ids) -> str:
        words = [self.token_to_word(int(t)) for t in ids]
        return " ".join(w for w in words if w is not None)

    # -- translation rules -------------------------------------------------
    def translate(self, content_ids, lang: str) -> List[int]:
        if lang == self.source_language:
            return list(content_ids)
        perm, k = self.permutations[lang], self.block_sizes[lang]
        mapped = [int(perm[c]) for c in content_ids]
        return _block_reverse(mapped, k)

    def inverse_translate(self, content_ids, lang: str) -> List[int]:
        if lang == self.source_language:
            return list(content_ids)
        inv = np.argsort(self.permutations[lang])
        return [int(inv[c]) for c in _block_reverse(list(content_ids), self.block_sizes[lang])]

    def to_dict(self) -> dict:
        return {
            "n_content": self.n_content, "source_language": self.source_language,
            "target_languages": list(self.target_languages), "token_duration": self.token_duration,
            "info_fraction": self.info_fraction, "formant_width": self.formant_width, "seed": self.seed,
        }

    # -- rendering ---------------------------------------------------------
    def token_amplitudes(self, content: int, freqs: np.ndarray) -> np.ndarray:
        f1, f2 = self.formants[content]
        bw = self.formant_width
        info = np.exp(-0.5 * ((freqs - f1) / (bw * f1)) ** 2) + 0.7 * np.exp(-0.5 * ((freqs - f2) / (bw * f2)) ** 2)
        carrier = np.exp(-freqs / 1500.0)
        info /= np.sqrt((info ** 2).sum())
        carrier /= np.sqrt((carrier ** 2).sum())
        return np.sqrt(self.info_fraction) * info + np.sqrt(1.0 - self.info_fraction) * carrier

    def render_audio(self, content_ids, rng: np.random.Generator, level: float = 0.1) -> np.ndarray:
        """Per token: a windowed sum of jittered random-phase partials, built by inverse FFT."""
        n = int(round(self.token_duration * sig.SAMPLE_RATE))
        df = sig.SAMPLE_RATE / n
        grid_bins = np.round(AUDIO_GRID / df).astype(int)
        env = np.sqrt(np.sin(np.pi * np.arange(n) / n))
        segs = []
        for c in content_ids:
            bins = grid_bins + rng.integers(-2, 3, len(grid_bins))
            amp = self.token_amplitudes(int(c), bins * df)
            spec = np.zeros(n // 2 + 1, dtype=complex)
            spec[bins] = amp * np.exp(1j * rng.uniform(0.0, 2 * np.pi, len(bins))) * (n / 2)
            segs.append(np.fft.irfft(spec, n) * env * rng.uniform(0.8, 1.2))
        w = np.concatenate(segs)
        w *= level * rng.uniform(0.7, 1.3) / np.sqrt(sig.power(w))
        return quantize_audio(w)

    def render_video(self, content_ids, rng: np.random.Generator) -> np.ndarray:
        fpt = int(round(self.token_duration * vid.FPS))
        return quantize_video(vid.render_frames(content_ids, self.glyphs, fpt, rng))


def _block_reverse(seq: List[int], k: int) -> List[int]:
    out = []
    for i in range(0, len(seq), k):
        out.extend(reversed(seq[i:i + k]))
    return out


def quantize_audio(w: np.ndarray) -> np.ndarray:
    """Round to 16-bit PCM levels so a WAV round trip is lossless."""
    return np.clip(np.round(w * 32767.0), -32768, 32767) / 32767.0


def quantize_video(frames: np.ndarray) -> np.ndarray:
    return np.round(np.clip(frames, 0, 1) * 255.0) / 255.0


@dataclass
class Utterance:
    id: str
    audio: np.ndarray
    video: np.ndarray
    transcript: List[int]
    translations: Dict[str, List[int]]
    duration: float

    @property
    def n_tokens(self) -> int:
        return len(self.transcript)


@dataclass
class Corpus:
    spec: SyntheticLanguageSpec
    utterances: List[Utterance]
    seed: int

    def __len__(self) -> int:
        return len(self.utterances)

    def by_id(self) -> Dict[str, Utterance]:
        return {u.id: u for u in self.utterances}

    def manifest(self) -> List[dict]:
        return [manifest_record(self.spec, u) for u in self.utterances]

    def split(self, n_valid: int, n_test: int) -> Tuple["Corpus", "Corpus", "Corpus"]:
        u = self.utterances
        tr, va, te = u[: len(u) - n_valid - n_test], u[len(u) - n_valid - n_test: len(u) - n_test], u[len(u) - n_test:]
        return Corpus(self.spec, tr, self.seed), Corpus(self.spec, va, self.seed), Corpus(self.spec, te, self.seed)


def manifest_record(spec: SyntheticLanguageSpec, u: Utterance, wav: str = "", video: str = "") -> dict:
    return {
        "id": u.id,
        "wav": wav or f"wav/{u.id}.wav",
        "video": video or f"video/{u.id}.clip",
        "dur_s": round(u.duration, 6),
        "text": spec.text(spec.source_language, u.transcript),
        "translations": {lang: spec.text(lang, ids) for lang, ids in u.translations.items()},
    }


def generate_corpus(
    spec: SyntheticLanguageSpec,
    n_utts: int,
    duration_range: Tuple[float, float] = (1.0, 2.0),
    seed: int = 0,
    max_len_s: float = 6.0,
    prefix: str = "utt",
) -> Corpus:
    """Deterministically synthesise ``n_utts`` paired utterances."""
    if n_utts < 1:
        raise ValueError("n_utts must be >= 1")
    lo, hi = duration_range
    if lo < 1.0 or hi > max_len_s or lo > hi:
        raise ValueError(f"duration range {duration_range} must lie within [1.0, {max_len_s}] s")
    td = spec.token_duration
    kmin, kmax = int(np.ceil(lo / td - 1e-9)), int(np.floor(hi / td + 1e-9))
    if kmin > kmax:
        raise ValueError(f"no whole-token duration fits in {duration_range}")
    rng = np.random.default_rng(seed)
    utts = []
    for i in range(n_utts):
        k = int(rng.integers(kmin, kmax + 1))
        content = rng.integers(0, spec.n_content, k).tolist()
        urng = np.random.default_rng([seed, i])
        audio = spec.render_audio(content, urng)
        video = spec.render_video(content, urng)
        translations = {lang: spec.translate(content, lang) for lang in spec.target_languages}
        utts.append(Utterance(f"{prefix}{i:05d}", audio, video, content, translations, round(k * td, 6)))
    return Corpus(spec, utts, seed)


def write_corpus(corpus: Corpus, out_dir) -> List[Path]:
    """Write manifest.jsonl, spec.json, WAVs and clips; return written paths."""
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    (out / "video").mkdir(parents=True, exist_ok=True)
    written = []
    for u in corpus.utterances:
        rec = manifest_record(corpus.spec, u)
        sig.write_wav(out / rec["wav"], u.audio)
        vid.write_clip(out / rec["video"], u.video)
        written += [out / rec["wav"], out / rec["video"]]
    lines = [json.dumps(r, sort_keys=True, ensure_ascii=False) for r in corpus.manifest()]
    (out / "manifest.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out / "spec.json").write_text(json.dumps({"language": corpus.spec.to_dict(), "seed": corpus.seed}, sort_keys=True) + "\n")
    return written + [out / "manifest.jsonl", out / "spec.json"]


def read_manifest(path) -> List[dict]:
    records = []
    seen = set()
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if rec["id"] in seen:
            raise ValueError(f"duplicate utterance id {rec['id']}")
        seen.add(rec["id"])
        records.append(rec)
    return records


def load_corpus(out_dir) -> Corpus:
    out = Path(out_dir)
    meta = json.loads((out / "spec.json").read_text())
    spec = SyntheticLanguageSpec(**meta["language"])
    utts = []
    for rec in read_manifest(out / "manifest.jsonl"):
        for key in ("wav", "video"):
            if not (out / rec[key]).exists():
                raise FileNotFoundError(f"{rec['id']}: missing {rec[key]}")
        _, content = spec.parse(rec["text"])
        translations = {lang: spec.parse(text)[1] for lang, text in rec["translations"].items()}
        utts.append(Utterance(rec["id"], sig.read_wav(out / rec["wav"]), vid.read_clip(out / rec["video"]),
                              content, translations, rec["dur_s"]))
    return Corpus(spec, utts, meta["seed"])


def corpus_digest(out_dir) -> str:
    """SHA-256 over every file of a written corpus (sorted relative paths + bytes)."""
    out = Path(out_dir)
    h = hashlib.sha256()
    for p in sorted(q for q in out.rglob("*") if q.is_file()):
        h.update(str(p.relative_to(out)).encode())
        h.update(p.read_bytes())
    return h.hexdigest()


# -- targets ------------------------------------------------------------------

def encode_targets(spec: SyntheticLanguageSpec, u: Utterance, task: str = "transcribe", lang: Optional[str] = None):
    """Token sequence [SOT, LANG, TASK, NOTS, text..., EOT] and its label mask.

    The mask is aligned with ``tokens[1:]`` and covers text + EOT only.
    """
    if task == "transcribe":
        lang = spec.source_language
        content = u.transcript
    elif task == "translate":
        if lang not in u.translations:
            raise KeyError(f"utterance {u.id} has no translation into {lang!r}")
        content = u.translations[lang]
    else:
        raise ValueError(f"unknown task {task!r}")
    prompt = [SOT, spec.lang_token(lang), TASK_TOKENS[task], NO_TIMESTAMPS]
    tokens = np.array(prompt + [spec.word_id(lang, c) for c in content] + [EOT])
    mask = np.zeros(len(tokens) - 1, dtype=bool)
    mask[PROMPT_LEN - 1:] = True
    return tokens, mask


def prompt_tokens(spec: SyntheticLanguageSpec, task: str, lang: Optional[str] = None) -> List[int]:
    lang = spec.source_language if task == "transcribe" else lang
    return [SOT, spec.lang_token(lang), TASK_TOKENS[task], NO_TIMESTAMPS]


# -- batching -----------------------------------------------------------------

@dataclass
class BatchPlan:
    ids: List[str]
    seconds: float


@dataclass
class FilterReport:
    too_long: List[str] = field(default_factory=list)
    too_many_chars: List[str] = field(default_factory=list)
    retained: int = 0

    @property
    def filtered(self) -> int:
        return len(self.too_long) + len(self.too_many_chars)


def build_batches(records: Sequence[dict], seconds_budget: float, max_len_s: float, max_chars: int,
                  seed: int = 0) -> Tuple[List[BatchPlan], FilterReport]:
    """Length-sorted greedy packing under a per-batch seconds budget.

    ``records`` are manifest dicts (``id``, ``dur_s``, ``text``). Batch order is
    shuffled with ``seed``; the composition of each batch does not depend on it.
    """
    if seconds_budget < max_len_s:
        raise ValueError(f"seconds budget {seconds_budget} smaller than max length {max_len_s}")
    report = FilterReport()
    kept = []
    for r in records:
        if r["dur_s"] > max_len_s:
            report.too_long.append(r["id"])
        elif len(r["text"]) > max_chars:
            report.too_many_chars.append(r["id"])
        else:
            kept.append(r)
    report.retained = len(kept)
    if not kept:
        raise ValueError("no utterances left after length/character filtering")
    kept.sort(key=lambda r: (r["dur_s"], r["id"]))
    plans, cur, total = [], [], 0.0
    for r in kept:
        if cur and total + r["dur_s"] > seconds_budget + 1e-9:
            plans.append(BatchPlan(cur, total))
            cur, total = [], 0.0
        cur.append(r["id"])
        total += r["dur_s"]
    plans.append(BatchPlan(cur, total))
    order = np.random.default_rng(seed).permutation(len(plans))
    return [plans[i] for i in order], report


def records_for(corpus: Corpus) -> List[dict]:
    return [{"id": u.id, "dur_s": u.duration, "text": corpus.spec.text(corpus.spec.source_language, u.transcript)}
            for u in corpus.utterances]


def pad_stack(arrays: Sequence[np.ndarray], fill=0.0):
    """Stack along a new axis 0, zero-padding axis 0 of each; return (stacked, mask)."""
    n = max(len(a) for a in arrays)
    out = np.full((len(arrays), n) + arrays[0].shape[1:], fill, dtype=np.result_type(arrays[0], type(fill)))
    mask = np.zeros((len(arrays), n), dtype=bool)
    for i, a in enumerate(arrays):
        out[i, : len(a)] = a
        mask[i, : len(a)] = True
    return out, mask


# -- noise --------------------------------------------------------------------

class NoiseBank:
    """Noise sources for one split; train and test banks use disjoint speakers.

    Babble sums ``n_babble`` tracks from a pool of synthetic speakers rendered
    with their own seed, so test babble never contains training utterances.
    """

    def __init__(self, spec: SyntheticLanguageSpec, seed: int, n_speakers: int = 40, n_babble: int = 30,
                 track_seconds: float = 6.0):
        if n_babble > n_speakers:
            raise ValueError(f"babble of {n_babble} speakers needs at least that many sources")
        rng = np.random.default_rng([seed, 31])
        k = int(round(track_seconds / spec.token_duration))
        self.speakers = [spec.render_audio(rng.integers(0, spec.n_content, k), rng) for _ in range(n_speakers)]
        self.n_babble = n_babble
        self.seed = seed

    def sample(self, kind: str, n: int, rng: np.random.Generator) -> np.ndarray:
        if kind == "babble":
            return sig.fit_noise(sig.synth_babble(self.speakers, self.n_babble, rng), n, rng)
        if kind == "speech":
            return sig.fit_noise(self.speakers[int(rng.integers(len(self.speakers)))], n, rng)
        if kind == "music-like":
            return sig.music_like(n, rng)
        if kind == "natural-like":
            return sig.natural_like(n, rng)
        raise ValueError(f"unknown noise kind {kind!r}; expected one of {sig.NOISE_KINDS}")


@dataclass
class NoiseCondition:
    """Mix each utterance, with probability ``prob``, at one of ``snrs`` with a kind drawn from ``kinds``."""
    kinds: Tuple[str, ...] = ("babble",)
    snrs: Tuple[float, ...] = (0.0,)
    prob: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.prob <= 1.0:
            raise ValueError(f"noise probability must lie in [0, 1], got {self.prob}")

    @property
    def clean(self) -> bool:
        return all(np.isposinf(s) for s in self.snrs)

    def describe(self) -> str:
        if self.clean:
            return "clean"
        return "+".join(self.kinds) + "@" + ",".join(_fmt_snr(s) for s in self.snrs)


def _fmt_snr(s: float) -> str:
    return "inf" if np.isposinf(s) else f"{s:g}"


class MixCounter:
    """Counts mix_at_snr calls; the clean-training audit reads it."""

    def __init__(self):
        self.calls = 0


def corrupt(audio: np.ndarray, cond: Optional[NoiseCondition], bank: Optional[NoiseBank],
            rng: np.random.Generator, counter: Optional[MixCounter] = None) -> np.ndarray:
    if cond is None or cond.clean:
        return audio
    if bank is None:
        raise ValueError("noisy condition requires a noise bank")
    if cond.prob < 1.0 and rng.random() >= cond.prob:  # no draw at prob 1, so streams match
        return audio
    kind = cond.kinds[int(rng.integers(len(cond.kinds)))]
    snr = cond.snrs[int(rng.integers(len(cond.snrs)))]
    if np.isposinf(snr):
        return audio
    if counter is not None:
        counter.calls += 1
    return sig.mix_at_snr(audio, bank.sample(kind, len(audio), rng), snr)


# -- batch assembly -----------------------------------------------------------

def make_batch(
    spec: SyntheticLanguageSpec,
    utts: Sequence[Utterance],
    tasks: Sequence[Tuple[str, Optional[str]]],
    rng: np.random.Generator,
    noise: Optional[NoiseCondition] = None,
    bank: Optional[NoiseBank] = None,
    video_aug: Optional[vid.CropFlipAug] = None,
    with_video: bool = False,
    spec_aug: Optional[sig.SpecAugmentPolicy] = None,
    counter: Optional[MixCounter] = None,
) -> dict:
    """Padded model inputs plus one target row per (utterance, task).

    ``tasks`` is a list of ``(task, lang)`` pairs, one per utterance *per
    target*; ``rows`` maps each target row back to its utterance index so the
    encoder runs once per utterance.
    """
    mels = []
    for u in utts:
        m = sig.log_mel(corrupt(u.audio, noise, bank, rng, counter))
        if spec_aug is not None:
            m = sig.spec_augment(m, spec_aug, rng)
        mels.append(m)
    mel, mel_mask = pad_stack(mels)
    batch = {"mel": mel, "mel_mask": mel_mask, "ids": [u.id for u in utts]}
    if with_video:
        aug = video_aug or vid.CropFlipAug(mode="test")
        clips = [vid.augment(u.video, aug, rng) for u in utts]
        batch["video"], batch["video_mask"] = pad_stack(clips)
    rows, seqs, masks, tags = [], [], [], []
    for i, u in enumerate(utts):
        for task, lang in tasks[i]:
            toks, lm = encode_targets(spec, u, task, lang)
            rows.append(i)
            seqs.append(toks)
            masks.append(lm)
            tags.append((task, lang or spec.source_language))
    tokens, _ = pad_stack(seqs, fill=EOT)
    tokens = tokens.astype(np.int64)
    loss_mask = np.zeros((len(seqs), tokens.shape[1] - 1), dtype=bool)
    for r, lm in enumerate(masks):
        loss_mask[r, : len(lm)] = lm
    batch.update(rows=np.array(rows), tokens=tokens, loss_mask=loss_mask, tags=tags)
    return batch


def all_tasks(spec: SyntheticLanguageSpec) -> List[Tuple[str, Optional[str]]]:
    return [("transcribe", None)] + [("translate", lang) for lang in spec.target_languages]
