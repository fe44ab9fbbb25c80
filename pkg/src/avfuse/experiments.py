"""Experiment specs, cached training artifacts, and grid evaluation.

A run has shared artifacts (the corpus, the pretrained visual encoder and a
clean audio-only foundation model standing in for a pretrained speech model)
and per-seed ones (stage A, then stage B for each fusion mode, insertion
position or clean/noisy combination a table asks for). Each artifact
directory records a fingerprint of its inputs and is reused while that
fingerprint matches.
"""

from __future__ import annotations

import concurrent.futures as cf
import copy
import functools
import hashlib
import json
import logging
import shutil
import time
import zlib
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import corpus as cp
from . import decoding as dec
from . import metrics as mt
from . import training as tr
from . import video as vid
from .autodiff import no_grad
from .autodiff.tensor import precision
from .model import FusionMode, InsertionPosition, ModelConfig, SpeechModel, load_checkpoint, save_checkpoint
from .results import MEDIAN, ResultTable, fmt_snr, fmt_value, render_report

log = logging.getLogger(__name__)

OUT_ENV = "AVFUSE_OUT"
DEFAULT_OUT = "avfuse-out"
INF = float("inf")


class MissingArtifact(FileNotFoundError):
    pass


# -- spec ---------------------------------------------------------------------

@dataclass
class Phase:
    """One training run: step count, peak LR and how often to validate."""
    steps: int
    lr: float
    warmup_frac: float = 0.1
    n_evals: int = 4
    seconds_budget: float = 15.0
    noise_prob: float = 1.0  # share of noisy-phase samples that get noise

    def config(self, stage: str, noise: str, seed: int, **extra) -> tr.TrainConfig:
        return tr.TrainConfig(stage=stage, lr=self.lr, total_steps=self.steps,
                              warmup_steps=max(1, int(round(self.steps * self.warmup_frac))),
                              eval_interval=max(1, self.steps // self.n_evals),
                              seconds_budget=self.seconds_budget, noise=noise, seed=seed,
                              noise_prob=self.noise_prob, **extra)


@dataclass
class CorpusSection:
    n_utts: int = 700
    duration_range: Tuple[float, float] = (1.0, 2.0)
    n_valid: int = 60
    n_test: int = 100
    seed: int = 0
    formant_width: float = 0.2
    target_languages: Tuple[str, ...] = ("xa", "xb")

    def language(self) -> cp.SyntheticLanguageSpec:
        return cp.SyntheticLanguageSpec(formant_width=self.formant_width, target_languages=tuple(self.target_languages))


@dataclass
class NoiseSection:
    train_seed: int = 10_000
    test_seed: int = 20_000
    eval_seed: int = 5
    n_speakers: int = 40
    n_babble: int = 30


@dataclass
class VisualSection:
    d_visual: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 128
    temporal_kernel: int = 9
    dropout: float = 0.1
    pretrain_steps: int = 300
    pretrain_lr: float = 3e-3
    seed: int = 0

    def encoder_config(self) -> vid.VisualEncoderConfig:
        return vid.VisualEncoderConfig(d_visual=self.d_visual, n_heads=self.n_heads, n_layers=self.n_layers,
                                       d_ff=self.d_ff, dropout=self.dropout, temporal_kernel=self.temporal_kernel)


@dataclass
class ModelSection:
    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_ff: int = 256
    dropout: float = 0.0
    max_source_positions: int = 200
    max_target_positions: int = 48
    seed: int = 0

    def model_config(self, lang: cp.SyntheticLanguageSpec) -> ModelConfig:
        return ModelConfig(d_model=self.d_model, n_heads=self.n_heads, n_enc_layers=self.n_enc_layers,
                           n_dec_layers=self.n_dec_layers, d_ff=self.d_ff, dropout=self.dropout,
                           vocab_size=lang.vocab_size, n_special=lang.n_special,
                           max_source_positions=self.max_source_positions,
                           max_target_positions=self.max_target_positions)


def _default_stage_b() -> Dict[str, Phase]:
    return {"gated": Phase(2000, 2e-3, n_evals=5), "early": Phase(600, 5e-3, n_evals=3),
            "late": Phase(600, 5e-3, n_evals=3)}


@dataclass
class GridSection:
    fusion: bool = True
    fusion_beams: Tuple[int, ...] = (1,)
    translation: bool = True
    eval_noise: str = "babble"
    eval_snr: float = 0.0
    positions: Tuple[str, ...] = ()
    position_seeds: Tuple[int, ...] = (0,)
    snr_kinds: Tuple[str, ...] = ()
    snr_levels: Tuple[float, ...] = (-10.0, -5.0, 0.0, 5.0, 10.0, INF)
    snr_beams: Tuple[int, ...] = (1, 15)
    snr_seeds: Tuple[int, ...] = (0,)
    init_matrix: bool = False
    init_seeds: Tuple[int, ...] = (0,)
    eval_utts: int = 0  # 0 means the whole test split


@dataclass
class ExperimentSpec:
    name: str = "default"
    seeds: Tuple[int, ...] = (0, 1, 2)
    precision: str = "float32"
    workers: int = 1
    corpus: CorpusSection = field(default_factory=CorpusSection)
    noise: NoiseSection = field(default_factory=NoiseSection)
    visual: VisualSection = field(default_factory=VisualSection)
    model: ModelSection = field(default_factory=ModelSection)
    foundation_transcribe: Phase = field(default_factory=lambda: Phase(800, 2e-3, n_evals=2))
    foundation_multitask: Phase = field(default_factory=lambda: Phase(2000, 2e-3))
    stage_a: Phase = field(default_factory=lambda: Phase(2000, 2e-3))
    stage_b: Dict[str, Phase] = field(default_factory=_default_stage_b)
    grid: GridSection = field(default_factory=GridSection)

    def __post_init__(self):
        if self.corpus.duration_range[1] * 100 / 2 > self.model.max_source_positions:
            raise ValueError("longest utterance does not fit max_source_positions")
        unknown = set(self.stage_b) - {"gated", "early", "late"}
        if unknown:
            raise ValueError(f"unknown stage_b modes {sorted(unknown)}")
        for p in self.grid.positions:
            InsertionPosition(p)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return _fingerprint(self.to_dict())


_SECTIONS = {"corpus": CorpusSection, "noise": NoiseSection, "visual": VisualSection, "model": ModelSection,
             "grid": GridSection, "foundation_transcribe": Phase, "foundation_multitask": Phase, "stage_a": Phase}


def _build(cls, d: dict, where: str):
    names = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(names)
    if unknown:
        raise KeyError(f"{where}: unknown keys {sorted(unknown)}")
    kw = {}
    for k, v in d.items():
        if isinstance(v, list):
            v = tuple(float(x) if k == "snr_levels" else x for x in v)
        kw[k] = v
    return cls(**kw)


def spec_from_dict(d: dict) -> ExperimentSpec:
    d = copy.deepcopy(d)
    kw = {}
    for key, val in d.items():
        if key in _SECTIONS:
            kw[key] = _build(_SECTIONS[key], val, key)
        elif key == "stage_b":
            modes = _default_stage_b()
            for mode, phase in val.items():
                base = asdict(modes.get(mode, Phase(600, 5e-3)))
                base.update(phase)
                modes[mode] = _build(Phase, base, f"stage_b.{mode}")
            kw[key] = modes
        elif key in ("name", "seeds", "precision", "workers"):
            kw[key] = tuple(val) if isinstance(val, list) else val
        else:
            raise KeyError(f"unknown experiment key {key!r}")
    return ExperimentSpec(**kw)


def builtin_specs() -> List[str]:
    return sorted(p.name[:-5] for p in resources.files("avfuse.configs").iterdir() if p.name.endswith(".toml"))


def _read_toml(name_or_path: str) -> dict:
    p = Path(name_or_path)
    if p.suffix == ".toml" or p.exists():
        return tomllib.loads(p.read_text(encoding="utf-8"))
    if name_or_path in builtin_specs():
        return tomllib.loads(resources.files("avfuse.configs").joinpath(f"{name_or_path}.toml").read_text())
    raise FileNotFoundError(f"no spec file {name_or_path!r} and no built-in spec by that name ({builtin_specs()})")


def parse_override(item: str) -> Tuple[List[str], object]:
    """``a.b=value`` with the value read as a TOML literal (bare words stay strings)."""
    if "=" not in item:
        raise ValueError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    return key.strip().split("."), value


def load_spec(name_or_path: Optional[str] = None, overrides: Sequence[str] = ()) -> ExperimentSpec:
    d = _read_toml(name_or_path) if name_or_path else {}
    for item in overrides:
        path, value = parse_override(item)
        node = d
        for k in path[:-1]:
            node = node.setdefault(k, {})
        node[path[-1]] = value
    return spec_from_dict(d)


def out_root(explicit=None) -> Path:
    import os
    return Path(explicit or os.environ.get(OUT_ENV) or DEFAULT_OUT)


def _fingerprint(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


# -- corpus on disk -----------------------------------------------------------

def generation_record(section: CorpusSection, seed: Optional[int] = None) -> dict:
    d = asdict(section)
    if seed is not None:
        d["seed"] = seed
    d["duration_range"] = list(d["duration_range"])
    d["target_languages"] = list(d["target_languages"])
    return d


def gen_data(section: CorpusSection, out_dir, seed: Optional[int] = None, force: bool = False) -> str:
    """Write the corpus; "up-to-date" if the same one is already there, error if a different one is."""
    out = Path(out_dir)
    record = generation_record(section, seed)
    meta = out / "generation.json"
    if meta.exists():
        if json.loads(meta.read_text()) == record and (out / "manifest.jsonl").exists():
            return "up-to-date"
        if not force:
            raise FileExistsError(f"{out} holds a different corpus (see generation.json); pass --force to replace it")
    if out.exists() and any(out.iterdir()):
        if not force and not meta.exists():
            raise FileExistsError(f"{out} is not empty and is not a corpus directory; pass --force to replace it")
        shutil.rmtree(out)
    corpus = cp.generate_corpus(section.language(), section.n_utts, tuple(section.duration_range), record["seed"])
    cp.write_corpus(corpus, out)
    meta.write_text(json.dumps(record, sort_keys=True) + "\n")
    return "written"


# -- cells --------------------------------------------------------------------

@dataclass(frozen=True)
class ModelKey:
    """Which trained model a cell decodes with."""
    seed: int
    mode: str = FusionMode.AUDIO_ONLY.value
    position: str = InsertionPosition.DECODER_BEGINNING.value
    a_noise: str = "noisy"
    b_noise: str = "noisy"

    @property
    def fused(self) -> bool:
        return self.mode != FusionMode.AUDIO_ONLY.value

    def slug(self) -> str:
        if not self.fused:
            return f"seed{self.seed}/stageA-{self.a_noise}"
        return f"seed{self.seed}/stageB-{self.mode}-{self.position}-A{self.a_noise}-B{self.b_noise}"


@dataclass(frozen=True)
class Cell:
    table: str
    section: str
    model: str
    key: ModelKey
    task: str
    lang: str
    noise: str
    snr: float
    beam: object  # int, or "tf" for teacher-forced token accuracy
    metric: str

    def describe(self) -> str:
        return (f"{self.table}/{self.model}/seed{self.key.seed}/{self.task}-{self.lang}/"
                f"{self.noise}@{fmt_snr(self.snr)}/b{self.beam}/{self.metric}")


def _modality(key: ModelKey) -> str:
    return "AV" if key.fused else "A"


_MODE_SLUG = {FusionMode.EARLY.value: "early", FusionMode.LATE.value: "late", FusionMode.GATED.value: "gated"}


def grid_cells(spec: ExperimentSpec) -> List[Cell]:
    g = spec.grid
    src = spec.corpus.language().source_language
    noisy = (g.eval_noise, float(g.eval_snr))
    two = [("clean", INF), noisy]
    cells: List[Cell] = []

    def add(table, section, model, key, task, lang, conds, beams, metrics):
        for noise, snr in conds:
            for beam in beams:
                for metric in metrics:
                    cells.append(Cell(table, section, model, key, task, lang, noise, snr, beam, metric))

    if g.fusion:
        for s in spec.seeds:
            for mode in FusionMode:
                add("fusion", "", mode.value, ModelKey(s, mode.value), "transcribe", src, two, g.fusion_beams, ["WER"])
    if g.translation:
        for s in spec.seeds:
            for mode in (FusionMode.AUDIO_ONLY, FusionMode.GATED):
                key = ModelKey(s, mode.value)
                for lang in spec.corpus.target_languages:
                    add("translation", "", mode.value, key, "translate", lang, two, [1], ["BLEU", "WER"])
                    add("translation", "", mode.value, key, "translate", lang, two, ["tf"], ["token_acc"])
    for s in g.position_seeds if g.positions else ():
        for pos in g.positions:
            key = ModelKey(s, FusionMode.GATED.value, pos)
            add("positions", "", pos, key, "transcribe", src, two, [1], ["WER"])
    for s in g.snr_seeds if g.snr_kinds else ():
        for mode in (FusionMode.AUDIO_ONLY, FusionMode.GATED):
            for kind in g.snr_kinds:
                conds = [(kind, float(x)) for x in g.snr_levels]
                add("snr", kind, mode.value, ModelKey(s, mode.value), "transcribe", src, conds, g.snr_beams, ["WER"])
    for s in g.init_seeds if g.init_matrix else ():
        for a in ("clean", "noisy"):
            add("init", "", f"audio-only A={a}", ModelKey(s, a_noise=a), "transcribe", src, two, [1], ["WER"])
            for b in ("clean", "noisy"):
                key = ModelKey(s, FusionMode.GATED.value, a_noise=a, b_noise=b)
                add("init", "", f"gated A={a} B={b}", key, "transcribe", src, two, [1], ["WER"])
    return cells


# -- pipeline -----------------------------------------------------------------

def _scoped(method):
    """Run a pipeline method at the spec's precision, leaving the caller's untouched."""
    @functools.wraps(method)
    def wrapper(self, *args, **kwargs):
        with precision(self.spec.precision):
            return method(self, *args, **kwargs)
    return wrapper


class Pipeline:
    """Builds (or reuses) every artifact a set of cells depends on.

    Public methods run at the spec's precision; the global default is
    restored on return.
    """

    def __init__(self, spec: ExperimentSpec, root, allow_train: bool = True):
        self.spec = spec
        self.root = Path(root)
        self.allow_train = allow_train
        self.timings: Dict[str, float] = {}
        self._data = None
        self._banks = None
        self._visual = None

    # shared inputs
    @property
    def corpus_dir(self) -> Path:
        return self.root / "corpus"

    @_scoped
    def data(self) -> Tuple[cp.Corpus, cp.Corpus, cp.Corpus]:
        if self._data is None:
            t = time.perf_counter()
            status = gen_data(self.spec.corpus, self.corpus_dir)
            full = cp.load_corpus(self.corpus_dir)
            c = self.spec.corpus
            self._data = full.split(c.n_valid, c.n_test)
            self._corpus_digest = cp.corpus_digest(self.corpus_dir)
            self.timings["corpus"] = time.perf_counter() - t
            log.info("corpus %s (%d utterances)", status, len(full))
        return self._data

    def banks(self) -> Tuple[cp.NoiseBank, cp.NoiseBank]:
        if self._banks is None:
            lang, n = self.data()[0].spec, self.spec.noise
            self._banks = (cp.NoiseBank(lang, n.train_seed, n.n_speakers, n.n_babble),
                           cp.NoiseBank(lang, n.test_seed, n.n_speakers, n.n_babble))
        return self._banks

    def _artifact(self, rel: str, inputs: dict, build: Callable[[Path], Path]) -> Path:
        d = self.root / rel
        fp = _fingerprint(inputs)
        meta = d / "inputs.json"
        if meta.exists():
            rec = json.loads(meta.read_text())
            if rec["fingerprint"] == fp and (d / rec["checkpoint"]).exists():
                self.timings.setdefault(rel, rec.get("seconds", 0.0))
                return d / rec["checkpoint"]
        if not self.allow_train:
            raise MissingArtifact(f"{rel}: no checkpoint trained with the current inputs under {d}")
        shutil.rmtree(d, ignore_errors=True)
        d.mkdir(parents=True)
        t = time.perf_counter()
        path = build(d)
        secs = time.perf_counter() - t
        self.timings[rel] = secs
        meta.write_text(json.dumps({"fingerprint": fp, "checkpoint": path.name, "inputs": inputs,
                                    "seconds": round(secs, 1)}, sort_keys=True, indent=1) + "\n")
        log.info("trained %s in %.0f s", rel, secs)
        return path

    def _sha(self, path: Path) -> str:
        return load_checkpoint(path)[1]["sha256"]

    @_scoped
    def visual_path(self) -> Path:
        train = self.data()[0]
        v = self.spec.visual
        inputs = {"corpus": self._corpus_digest, "visual": asdict(v), "precision": self.spec.precision}

        def build(d: Path) -> Path:
            enc = vid.VisualEncoder(v.encoder_config(), seed=v.seed)
            losses = tr.pretrain_visual(enc, train, steps=v.pretrain_steps, lr=v.pretrain_lr, seed=v.seed)
            path = d / "visual.gfck"
            save_checkpoint(path, enc.state_dict(), {"stage": "V", "visual": asdict(enc.cfg),
                                                     "final_loss": float(np.mean(losses[-10:]))})
            return path

        return self._artifact("shared/visual", inputs, build)

    @_scoped
    def visual_encoder(self) -> vid.VisualEncoder:
        if self._visual is None:
            tensors, header = load_checkpoint(self.visual_path())
            enc = vid.VisualEncoder(vid.VisualEncoderConfig(**header["visual"]), seed=self.spec.visual.seed)
            enc.load_state_dict(tensors)
            self._visual = vid.freeze_with_live_stats(enc)
        return self._visual

    @_scoped
    def foundation_path(self) -> Path:
        train, valid, _ = self.data()
        s = self.spec
        lang = train.spec
        base = {"corpus": self._corpus_digest, "model": asdict(s.model), "precision": s.precision}

        def build1(d: Path) -> Path:
            cfg = s.foundation_transcribe.config("A", "clean", s.model.seed, translations_per_utt=0)
            model = SpeechModel(s.model.model_config(lang), seed=s.model.seed)
            return tr.train_stage_a(model, train, valid, cfg, d).best_path

        p1 = self._artifact("shared/foundation-transcribe", dict(base, phase=asdict(s.foundation_transcribe)), build1)

        def build2(d: Path) -> Path:
            cfg = s.foundation_multitask.config("A", "clean", s.model.seed)
            return tr.train_stage_a(tr.load_stage_a(p1), train, valid, cfg, d).best_path

        return self._artifact("shared/foundation-multitask",
                              dict(base, parent=self._sha(p1), phase=asdict(s.foundation_multitask)), build2)

    @_scoped
    def stage_a_path(self, seed: int, noise: str) -> Path:
        train, valid, _ = self.data()
        parent = self.foundation_path()
        bank = self.banks()[0]
        phase = self.spec.stage_a
        inputs = {"parent": self._sha(parent), "phase": asdict(phase), "noise": noise, "seed": seed,
                  "noise_seed": bank.seed, "noise_bank": asdict(self.spec.noise), "corpus": self._corpus_digest}

        def build(d: Path) -> Path:
            cfg = phase.config("A", noise, seed)
            return tr.train_stage_a(tr.load_stage_a(parent), train, valid, cfg, d, bank).best_path

        return self._artifact(ModelKey(seed, a_noise=noise).slug(), inputs, build)

    @_scoped
    def stage_b_path(self, key: ModelKey) -> Path:
        train, valid, _ = self.data()
        a_path = self.stage_a_path(key.seed, key.a_noise)
        enc_path = self.visual_path()
        bank = self.banks()[0]
        phase = self.spec.stage_b[_MODE_SLUG[key.mode]]
        inputs = {"stage_a": self._sha(a_path), "visual": self._sha(enc_path), "phase": asdict(phase),
                  "mode": key.mode, "position": key.position, "noise": key.b_noise, "seed": key.seed,
                  "noise_seed": bank.seed}

        def build(d: Path) -> Path:
            cfg = phase.config("B", key.b_noise, key.seed)
            res, _ = tr.train_stage_b(a_path, train, valid, cfg, d, self.visual_encoder(), key.mode,
                                      key.position, train_bank=bank)
            return res.best_path

        return self._artifact(key.slug(), inputs, build)

    @_scoped
    def checkpoint(self, key: ModelKey) -> Path:
        return self.stage_b_path(key) if key.fused else self.stage_a_path(key.seed, key.a_noise)

    @_scoped
    def load(self, key: ModelKey):
        if key.fused:
            return tr.load_stage_b(self.stage_b_path(key), self.stage_a_path(key.seed, key.a_noise),
                                   self.visual_encoder())
        return tr.load_stage_a(self.stage_a_path(key.seed, key.a_noise))


# -- evaluation ---------------------------------------------------------------

def _mix_rng(eval_seed: int, noise: str, snr: float, batch: int) -> np.random.Generator:
    # the same condition mixes identically for every model and task
    return np.random.default_rng([eval_seed, zlib.crc32(f"{noise}@{fmt_snr(snr)}".encode()), batch])


def _batches(utts, noise, snr, eval_seed, size=25):
    for b, i in enumerate(range(0, len(utts), size)):
        yield utts[i:i + size], _mix_rng(eval_seed, noise, snr, b)


def _condition(noise: str, snr: float) -> Optional[cp.NoiseCondition]:
    return None if noise == "clean" or np.isposinf(snr) else cp.NoiseCondition((noise,), (snr,))


def reference(lang_spec: cp.SyntheticLanguageSpec, u: cp.Utterance, task: str, lang: str) -> str:
    ids = u.transcript if task == "transcribe" else u.translations[lang]
    return lang_spec.text(lang, ids)


def decode(model, utts, lang_spec, task, lang, noise, snr, bank, beam: int, with_video: bool, eval_seed: int,
           max_len: int) -> List[Tuple[cp.Utterance, dec.Hypothesis]]:
    cond = _condition(noise, snr)
    tk = (task, None if task == "transcribe" else lang)
    prompt = cp.prompt_tokens(lang_spec, *tk)
    out = []
    for chunk, rng in _batches(utts, noise, snr, eval_seed):
        batch = cp.make_batch(lang_spec, chunk, [[tk]] * len(chunk), rng, cond, bank, with_video=with_video)
        if beam == 1:
            with no_grad():
                memory = model.encode_inputs(batch)
            hyps = dec.greedy_batch(model, memory, np.array([prompt] * len(chunk)), max_len=max_len)
        else:
            cfg = dec.BeamConfig(beam, max_len)
            hyps = [dec.beam_search(dec.model_scorer(model, dec.encode_one(model, batch, i)), prompt, cfg)
                    for i in range(len(chunk))]
        out += list(zip(chunk, hyps))
    return out


def teacher_forced_accuracy(model, utts, lang_spec, task, lang, noise, snr, bank, with_video, eval_seed) -> float:
    cond = _condition(noise, snr)
    tk = (task, None if task == "transcribe" else lang)
    correct = total = 0
    with no_grad():
        for chunk, rng in _batches(utts, noise, snr, eval_seed):
            batch = cp.make_batch(lang_spec, chunk, [[tk]] * len(chunk), rng, cond, bank, with_video=with_video)
            _, logits = tr.batch_loss(model, batch)
            m = batch["loss_mask"]
            correct += int(np.sum(logits.data.argmax(-1)[m] == batch["tokens"][:, 1:][m]))
            total += int(m.sum())
    return correct / total


@dataclass
class GroupResult:
    rows: List[dict]
    failures: List[str]
    hyps: Dict[str, List[str]]
    seconds: float


def evaluate_group(pipe: Pipeline, key: ModelKey, cells: Sequence[Cell]) -> GroupResult:
    """Decode every cell that uses one model; decodes are shared between metrics."""
    with precision(pipe.spec.precision):
        return _evaluate_group(pipe, key, cells)


def _evaluate_group(pipe: Pipeline, key: ModelKey, cells: Sequence[Cell]) -> GroupResult:
    t0 = time.perf_counter()
    rows, failures, hyps = [], [], {}
    try:
        model = pipe.load(key)
        ckpt = pipe._sha(pipe.checkpoint(key))
    except Exception as exc:  # a missing dependency fails every cell that needs it
        return GroupResult([], [f"{c.describe()}: {exc}" for c in cells], {}, time.perf_counter() - t0)
    model.eval()
    _, _, test = pipe.data()
    utts = test.utterances[: pipe.spec.grid.eval_utts or None]
    lang_spec = test.spec
    bank = pipe.banks()[1]
    seed_n = pipe.spec.noise
    max_len = pipe.spec.model.max_target_positions - cp.PROMPT_LEN
    decoded = {}
    for c in cells:
        try:
            eff_noise, eff_snr = ("clean", INF) if np.isposinf(c.snr) else (c.noise, c.snr)
            if c.metric == "token_acc":
                value = teacher_forced_accuracy(model, utts, lang_spec, c.task, c.lang, eff_noise, eff_snr, bank,
                                                key.fused, seed_n.eval_seed)
            else:
                dk = (c.task, c.lang, eff_noise, eff_snr, c.beam)
                if dk not in decoded:
                    decoded[dk] = decode(model, utts, lang_spec, c.task, c.lang, eff_noise, eff_snr, bank, c.beam,
                                         key.fused, seed_n.eval_seed, max_len)
                    name = f"{key.slug().replace('/', '_')}_{c.task}-{c.lang}_{eff_noise}@{fmt_snr(eff_snr)}_b{c.beam}"
                    hyps[name] = [dec.hypothesis_record(u.id, c.task, c.lang, lang_spec.detokenize(h.generated), h)
                                  for u, h in decoded[dk]]
                pairs = decoded[dk]
                refs = [reference(lang_spec, u, c.task, c.lang) for u, _ in pairs]
                outs = [lang_spec.detokenize(h.generated) for _, h in pairs]
                if c.metric == "WER":
                    value = mt.corpus_wer(refs, outs)
                elif c.metric == "BLEU":
                    value = mt.bleu(outs, refs).score
                else:
                    raise ValueError(f"unknown metric {c.metric!r}")
            rows.append(dict(table=c.table, section=c.section, model=c.model, modality=_modality(key),
                             seed=key.seed, task=c.task, lang=c.lang, noise=c.noise, snr_db=fmt_snr(c.snr),
                             beam=c.beam, metric=c.metric, value=fmt_value(c.metric, value), n_utts=len(utts),
                             checkpoint_sha256=ckpt, corpus_seed=pipe.spec.corpus.seed,
                             noise_seed=seed_n.test_seed))
        except Exception as exc:
            log.exception("cell %s failed", c.describe())
            failures.append(f"{c.describe()}: {exc}")
    return GroupResult(rows, failures, hyps, time.perf_counter() - t0)


_POOL_PIPE: Optional[Pipeline] = None


def _pool_eval(args):
    key, cells = args
    return evaluate_group(_POOL_PIPE, key, cells)


@dataclass
class GridRun:
    tables: Dict[str, ResultTable]
    failures: List[str]
    result_dir: Path
    timings: Dict[str, float]
    wall_seconds: float


def train_all(pipe: Pipeline, cells: Sequence[Cell]) -> None:
    """Train every dependency in a fixed order (shared first, then by model key)."""
    pipe.visual_path()
    pipe.foundation_path()
    for key in sorted({c.key for c in cells}, key=lambda k: (k.seed, k.fused, k.slug())):
        pipe.checkpoint(key)


def run_grid(spec: ExperimentSpec, root=None, allow_train: bool = True) -> GridRun:
    """Train what is missing, evaluate every cell once, and write the tables."""
    t0 = time.perf_counter()
    root = out_root(root)
    pipe = Pipeline(spec, root, allow_train)
    cells = grid_cells(spec)
    failures: List[str] = []
    try:
        train_all(pipe, cells)
    except MissingArtifact as exc:
        if allow_train:
            raise
        log.error("%s", exc)  # the affected cells report it below
    groups: Dict[ModelKey, List[Cell]] = {}
    for c in cells:
        groups.setdefault(c.key, []).append(c)
    jobs = list(groups.items())
    if spec.workers > 1 and len(jobs) > 1:
        global _POOL_PIPE
        _POOL_PIPE = pipe
        pipe.data(), pipe.banks()
        import multiprocessing as mp
        with cf.ProcessPoolExecutor(spec.workers, mp_context=mp.get_context("fork")) as pool:
            results = list(pool.map(_pool_eval, jobs))
    else:
        results = [evaluate_group(pipe, k, cs) for k, cs in jobs]
    result_dir = root / "results" / spec.name
    shutil.rmtree(result_dir, ignore_errors=True)
    (result_dir / "hyps").mkdir(parents=True)
    tables: Dict[str, ResultTable] = {}
    eval_seconds = 0.0
    for r in results:
        failures += r.failures
        eval_seconds += r.seconds
        for row in r.rows:
            tables.setdefault(row["table"], ResultTable(row["table"])).add(**row)
        for name, lines in r.hyps.items():
            (result_dir / "hyps" / f"{name}.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    tables = {n: t.with_medians() for n, t in sorted(tables.items())}
    for t in tables.values():
        t.write(result_dir)
    report, _ = render_report(tables) if tables else ("# avfuse results\n\nNo cells succeeded.\n", [])
    (result_dir / "report.md").write_text(report, encoding="utf-8")
    (result_dir / "spec.json").write_text(json.dumps(spec.to_dict(), sort_keys=True, indent=1, default=str) + "\n")
    wall = time.perf_counter() - t0
    timings = dict(pipe.timings, evaluation=eval_seconds)
    # runtimes vary run to run, so they live beside the tables rather than in them
    (result_dir.parent / f"{spec.name}.runtime.json").write_text(
        json.dumps({"wall_seconds": round(wall, 1), "artifacts": {k: round(v, 1) for k, v in sorted(timings.items())},
                    "failures": failures}, indent=1, sort_keys=True) + "\n")
    return GridRun(tables, failures, result_dir, timings, wall)


def median_value(table: ResultTable, **match) -> float:
    hits = [r for r in table.rows if r["seed"] == MEDIAN and all(r[k] == str(v) for k, v in match.items())]
    if len(hits) != 1:
        raise KeyError(f"{table.name}: {len(hits)} median rows match {match}")
    return float(hits[0]["value"])
