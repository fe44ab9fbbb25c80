"""Two-stage training: audio-only multitask fine-tuning, then frozen-base AV training.

Stage A updates every parameter of a :class:`SpeechModel` on transcription and
translation targets (optionally with every sample mixed at 0 dB). Stage B
freezes that model, wraps it with a fusion mechanism and trains only what the
fusion adds. Both select the checkpoint with the best teacher-forced
validation token accuracy.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import corpus as cp
from . import video as vid
from .autodiff import Module, Parameter, Tensor, no_grad, ops
from .autodiff.grad import backward
from .autodiff.tensor import NonFiniteError
from .metrics import token_accuracy  # noqa: F401  (re-exported)
from .model.checkpoint import load_checkpoint, save_checkpoint
from .model.fusion import FusedModel, FusionMode, InsertionPosition, wrap_model
from .model.transformer import ModelConfig, SpeechModel, decode_teacher_forcing

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


# -- optimizer ----------------------------------------------------------------

@dataclass
class AdamWState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8


def adamw_step(params: Dict[str, Parameter], grads: Dict[str, np.ndarray], state: AdamWState,
               lr: float, weight_decay: float) -> None:
    """theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta), in place.

    Frozen parameters are skipped and never get moment buffers.
    """
    live = {n: p for n, p in params.items() if p.trainable}
    for name in live:
        g = grads.get(name)
        if g is None:
            raise KeyError(f"adamw_step: no gradient for trainable parameter {name}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"adamw_step: non-finite gradient for {name}")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in live.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps) + weight_decay * p.data
        p.data -= lr * update


def clip_grad_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


@dataclass(frozen=True)
class LRSchedule:
    peak: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError(f"need 0 <= warmup ({self.warmup_steps}) < total ({self.total_steps})")


def lr_at(step: int, schedule: LRSchedule) -> float:
    """Linear warmup 0 -> peak, then linear decay to 0 at ``total_steps``."""
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    if step < schedule.warmup_steps:
        return schedule.peak * step / schedule.warmup_steps
    return schedule.peak * (schedule.total_steps - step) / (schedule.total_steps - schedule.warmup_steps)


# -- configuration ------------------------------------------------------------

@dataclass
class TrainConfig:
    stage: str = "A"
    lr: float = 2e-3
    warmup_steps: int = 50
    total_steps: int = 600
    seconds_budget: float = 60.0
    max_len_s: float = 6.0
    max_chars: int = 120
    noise: str = "clean"  # "clean" or "noisy"
    noise_kinds: Tuple[str, ...] = ("babble", "speech", "music-like", "natural-like")
    snrs: Tuple[float, ...] = (0.0,)
    noise_prob: float = 1.0
    eval_interval: int = 100
    seed: int = 0
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    translations_per_utt: int = 1
    val_condition: str = "match"  # "match", "clean" or "noisy"
    spec_augment: bool = False
    stage_a_ref: Optional[str] = None

    def __post_init__(self):
        if self.stage not in ("A", "B"):
            raise ValueError(f"stage must be 'A' or 'B', got {self.stage!r}")
        if self.noise not in ("clean", "noisy"):
            raise ValueError(f"noise policy must be 'clean' or 'noisy', got {self.noise!r}")
        if self.val_condition not in ("match", "clean", "noisy"):
            raise ValueError(f"unknown validation condition {self.val_condition!r}")
        LRSchedule(self.lr, self.warmup_steps, self.total_steps)
        self.noise_kinds = tuple(self.noise_kinds)
        self.snrs = tuple(float(s) for s in self.snrs)

    @property
    def schedule(self) -> LRSchedule:
        return LRSchedule(self.lr, self.warmup_steps, self.total_steps)

    def train_condition(self) -> Optional[cp.NoiseCondition]:
        if self.noise == "clean":
            return None
        return cp.NoiseCondition(self.noise_kinds, self.snrs, self.noise_prob)

    def val_noise(self) -> Optional[cp.NoiseCondition]:
        which = self.noise if self.val_condition == "match" else self.val_condition
        return None if which == "clean" else cp.NoiseCondition(self.noise_kinds, self.snrs)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True, default=str).encode()).hexdigest()[:16]


# -- checkpoint store ---------------------------------------------------------

class CheckpointStore:
    """Stage-tagged checkpoints in a directory with a ``best.json`` pointer and a JSONL log."""

    def __init__(self, root, stage: str):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.stage = stage
        self.best_acc = -np.inf
        self.best_path: Optional[Path] = None

    @property
    def log_path(self) -> Path:
        return self.root / f"stage{self.stage}.log.jsonl"

    def log(self, record: dict) -> None:
        with open(self.log_path, "a", encoding="utf-8") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")

    def offer(self, step: int, acc: float, tensors: Dict[str, np.ndarray], header: dict) -> bool:
        """Save a candidate; it becomes ``best`` only if strictly more accurate."""
        if acc <= self.best_acc:
            return False
        path = self.root / f"stage{self.stage}-best.gfck"
        header = dict(header, step=step, val_token_acc=acc, stage=self.stage)
        sha = save_checkpoint(path, tensors, header)
        self.best_acc, self.best_path = acc, path
        pointer = {"path": path.name, "step": step, "val_token_acc": acc, "sha256": sha}
        (self.root / f"stage{self.stage}-best.json").write_text(json.dumps(pointer, sort_keys=True) + "\n")
        return True

    def best(self) -> Path:
        if self.best_path is None:
            raise FileNotFoundError(f"no stage {self.stage} checkpoint has been saved in {self.root}")
        return self.best_path


# -- shared step machinery ----------------------------------------------------

def expand_memory(memory: dict, rows: np.ndarray) -> dict:
    """Repeat encoder memory so each target row sees its utterance's features."""
    if len(rows) == memory["audio"].shape[0] and np.array_equal(rows, np.arange(len(rows))):
        return memory
    out = {"audio": memory["audio"][rows], "audio_mask": memory["audio_mask"][rows]}
    if "video" in memory:
        out["video"] = memory["video"][rows]
        out["video_mask"] = memory["video_mask"][rows]
    return out


def batch_loss(model, batch: dict, reduction: str = "mean") -> Tuple[Tensor, Tensor]:
    memory = expand_memory(model.encode_inputs(batch), batch["rows"])
    tokens = batch["tokens"]
    logits = decode_teacher_forcing(model, memory, tokens)
    loss = ops.cross_entropy(logits, tokens[:, 1:], batch["loss_mask"], reduction=reduction)
    return loss, logits


def sample_tasks(spec: cp.SyntheticLanguageSpec, n: int, per_utt: int, rng: np.random.Generator):
    """One transcription target plus ``per_utt`` uniformly drawn translation targets per utterance."""
    tasks = []
    for _ in range(n):
        langs = rng.choice(len(spec.target_languages), size=per_utt, replace=False) if per_utt else []
        tasks.append([("transcribe", None)] + [("translate", spec.target_languages[int(i)]) for i in langs])
    return tasks


@dataclass
class ValidationSet:
    batches: List[dict]

    @classmethod
    def build(cls, corpus: cp.Corpus, noise: Optional[cp.NoiseCondition], bank: Optional[cp.NoiseBank],
              with_video: bool, seed: int, batch_size: int = 32) -> "ValidationSet":
        """Fixed (noise-frozen) validation batches covering every task."""
        rng = np.random.default_rng([seed, 991])
        tasks = cp.all_tasks(corpus.spec)
        utts = corpus.utterances
        batches = [
            cp.make_batch(corpus.spec, utts[i:i + batch_size], [tasks] * len(utts[i:i + batch_size]), rng,
                          noise, bank, with_video=with_video)
            for i in range(0, len(utts), batch_size)
        ]
        return cls(batches)

    def accuracy(self, model) -> float:
        correct = total = 0
        was = model.training
        model.eval()
        with no_grad():
            for b in self.batches:
                _, logits = batch_loss(model, b)
                m = b["loss_mask"]
                correct += int(np.sum(logits.data.argmax(-1)[m] == b["tokens"][:, 1:][m]))
                total += int(m.sum())
        model.train(was)
        if total == 0:
            raise ValueError("token_accuracy: no scored positions")
        return correct / total


@dataclass
class TrainResult:
    best_path: Path
    best_acc: float
    best_step: int
    losses: List[float]
    epoch_losses: List[float]
    val_history: List[Tuple[int, float]]
    mix_calls: int
    steps: int


def _run(model: Module, train: cp.Corpus, valset: ValidationSet, cfg: TrainConfig, store: CheckpointStore,
         with_video: bool, bank: Optional[cp.NoiseBank], header: dict, snapshot) -> TrainResult:
    spec = train.spec
    params = dict(model.named_parameters())
    state = AdamWState()
    counter = cp.MixCounter()
    rng = np.random.default_rng([cfg.seed, 17])
    model.rng = np.random.default_rng([cfg.seed, 23])
    model.train()
    records = cp.records_for(train)
    by_id = train.by_id()
    noise = cfg.train_condition()
    aug = vid.CropFlipAug(mode="train")
    spec_aug = None
    if cfg.spec_augment:
        from .signal import SpecAugmentPolicy
        spec_aug = SpecAugmentPolicy()
    losses, epoch_losses, history = [], [], []
    best_step = 0
    step, epoch = 0, 0
    while step < cfg.total_steps:
        plans, _ = cp.build_batches(records, cfg.seconds_budget, cfg.max_len_s, cfg.max_chars, seed=cfg.seed * 1000 + epoch)
        ep = []
        for plan in plans:
            if step >= cfg.total_steps:
                break
            utts = [by_id[i] for i in plan.ids]
            tasks = sample_tasks(spec, len(utts), cfg.translations_per_utt, rng)
            batch = cp.make_batch(spec, utts, tasks, rng, noise, bank, aug, with_video, spec_aug, counter)
            lr = lr_at(step, cfg.schedule)
            try:
                loss, _ = batch_loss(model, batch)
                value = loss.item()
                if not np.isfinite(value):
                    raise NonFiniteError("loss")
                grads = backward(loss, params.values())
            except (NonFiniteError, FloatingPointError) as exc:
                raise TrainingDiverged(
                    f"non-finite loss at step {step} (epoch {epoch}, batch {plan.ids[:3]}..., lr {lr:.3g}): {exc}"
                ) from exc
            clip_grad_norm(grads, cfg.clip_norm)
            adamw_step(params, grads, state, lr, cfg.weight_decay)
            step += 1
            losses.append(value)
            ep.append(value)
            if step % cfg.eval_interval == 0 or step == cfg.total_steps:
                acc = valset.accuracy(model)
                history.append((step, acc))
                if store.offer(step, acc, snapshot(), header):
                    best_step = step
                store.log({"step": step, "loss": value, "lr": lr, "val_token_acc": acc, "epoch": epoch})
                log.info("stage %s step %d loss %.4f val acc %.4f", cfg.stage, step, value, acc)
        epoch_losses.append(float(np.mean(ep)) if ep else float("nan"))
        epoch += 1
    return TrainResult(store.best(), store.best_acc, best_step, losses, epoch_losses, history, counter.calls, step)


# -- stage A ------------------------------------------------------------------

def train_stage_a(model: SpeechModel, train: cp.Corpus, valid: cp.Corpus, cfg: TrainConfig, out_dir,
                  train_bank: Optional[cp.NoiseBank] = None, val_bank: Optional[cp.NoiseBank] = None) -> TrainResult:
    """Full multitask fine-tune of an audio-only model; returns the best checkpoint."""
    if cfg.stage != "A":
        raise ValueError("train_stage_a needs a stage 'A' config")
    if cfg.noise == "noisy" and train_bank is None:
        raise ValueError("noisy stage A training needs a noise bank")
    model.unfreeze()
    valset = ValidationSet.build(valid, cfg.val_noise(), val_bank or train_bank, False, cfg.seed)
    store = CheckpointStore(out_dir, "A")
    header = {"model": model.cfg.to_dict(), "train": asdict(cfg), "language": train.spec.to_dict(),
              "corpus_seed": train.seed, "noise_seed": getattr(train_bank, "seed", None)}
    return _run(model, train, valset, cfg, store, False, train_bank, header, lambda: model.state_dict())


def load_stage_a(path) -> SpeechModel:
    tensors, header = load_checkpoint(path)
    if header.get("stage") != "A":
        raise ValueError(f"{path} is not a stage A checkpoint")
    model = SpeechModel(ModelConfig.from_dict(header["model"]))
    model.load_state_dict(tensors)
    model.eval()
    return model


# -- stage B ------------------------------------------------------------------

def stage_b_state(fused: FusedModel) -> Dict[str, np.ndarray]:
    """What a stage B checkpoint stores: new parameters, trainable base weights
    (non-gated modes), and the visual encoder's batch-norm statistics."""
    state = {n: p.data.copy() for n, p in fused.named_parameters() if p.trainable}
    state.update({n: b.copy() for n, b in fused.named_buffers() if n.startswith("visual_encoder.")})
    return state


def train_stage_b(stage_a_path, train: cp.Corpus, valid: cp.Corpus, cfg: TrainConfig, out_dir,
                  visual_encoder: vid.VisualEncoder, mode=FusionMode.GATED,
                  position=InsertionPosition.DECODER_BEGINNING, train_bank: Optional[cp.NoiseBank] = None,
                  val_bank: Optional[cp.NoiseBank] = None) -> Tuple[TrainResult, FusedModel]:
    """Wrap the stage A model and train on audio-visual batches.

    Gated mode trains only the gated layers and visual projection; early and
    late fusion also fine-tune the base (the ablation path). The visual encoder
    weights never change, but its dropout and batch-norm statistics stay live.
    """
    if cfg.stage != "B":
        raise ValueError("train_stage_b needs a stage 'B' config")
    if cfg.noise == "noisy" and train_bank is None:
        raise ValueError("noisy stage B training needs a noise bank")
    _, a_header = load_checkpoint(stage_a_path)
    base = load_stage_a(stage_a_path)
    enc = copy.deepcopy(visual_encoder)
    fused = wrap_model(base, mode, position, enc.cfg.d_visual, enc, seed=cfg.seed)
    valset = ValidationSet.build(valid, cfg.val_noise(), val_bank or train_bank, True, cfg.seed)
    store = CheckpointStore(out_dir, "B")
    header = {"stage_a_sha256": a_header["sha256"], "mode": fused.mode.value, "position": fused.position.value,
              "train": asdict(cfg), "visual": asdict(enc.cfg), "corpus_seed": train.seed,
              "noise_seed": getattr(train_bank, "seed", None)}
    result = _run(fused, train, valset, cfg, store, True, train_bank, header, lambda: stage_b_state(fused))
    return result, fused


def load_stage_b(path, stage_a_path, visual_encoder: vid.VisualEncoder) -> FusedModel:
    tensors, header = load_checkpoint(path)
    _, a_header = load_checkpoint(stage_a_path)
    if header.get("stage") != "B":
        raise ValueError(f"{path} is not a stage B checkpoint")
    if header["stage_a_sha256"] != a_header["sha256"]:
        raise ValueError(f"{path} was trained on a different stage A checkpoint")
    base = load_stage_a(stage_a_path)
    fused = wrap_model(base, header["mode"], header["position"], visual_encoder.cfg.d_visual,
                       copy.deepcopy(visual_encoder), seed=header["train"]["seed"])
    fused.load_state_dict(tensors, strict=False)
    fused.eval()
    return fused


# -- visual pretext -----------------------------------------------------------

def pretrain_visual(enc: vid.VisualEncoder, corpus: cp.Corpus, steps: int = 150, lr: float = 3e-3,
                    batch_size: int = 8, seed: int = 0, context=(-1, 0, 1)) -> List[float]:
    """Per-frame glyph classification so the frozen encoder yields token-bearing features.

    Each frame also predicts its neighbouring tokens (``context`` offsets), so a
    decoder can find "the token after the one I just emitted" by content.
    """
    spec = corpus.spec
    head = vid.GlyphClassifier(enc, spec.n_content, seed, context)
    params = dict(head.named_parameters())
    state = AdamWState()
    rng = np.random.default_rng([seed, 5])
    head.train()
    fpt = int(round(spec.token_duration * vid.FPS))
    sched = LRSchedule(lr, max(1, steps // 10), steps)
    losses = []
    aug = vid.CropFlipAug(mode="train")
    edge = spec.n_content
    for step in range(steps):
        pick = rng.choice(len(corpus), size=batch_size, replace=False)
        utts = [corpus.utterances[i] for i in pick]
        clips, mask = cp.pad_stack([vid.augment(u.video, aug, rng) for u in utts])
        labels = [np.zeros(mask.shape, dtype=np.int64) for _ in context]
        for i, u in enumerate(utts):
            ids = np.asarray(u.transcript)
            n = len(ids)
            for lab, off in zip(labels, context):
                j = np.arange(n) + off
                shifted = np.where((j >= 0) & (j < n), ids[np.clip(j, 0, n - 1)], edge)
                lab[i, : n * fpt] = np.repeat(shifted, fpt)
        loss = None
        for logits, lab in zip(head(clips, mask, rng), labels):
            term = ops.cross_entropy(logits, lab, mask)
            loss = term if loss is None else loss + term
        grads = backward(loss, params.values())
        clip_grad_norm(grads, 1.0)
        adamw_step(params, grads, state, lr_at(step, sched), 0.01)
        losses.append(loss.item() / len(context))
    enc.eval()
    return losses
