"""Greedy and beam-search decoding from a task prompt.

Both decoders score continuations with the same function, so a beam of one
reproduces greedy decoding token for token. No length penalty is applied.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .autodiff import Tensor, no_grad
from .corpus import EOT


@dataclass
class Hypothesis:
    tokens: List[int]
    logprob: float
    finished: bool
    prompt_len: int = 0
    warning: Optional[str] = None
    step_logprobs: List[float] = field(default_factory=list)

    @property
    def generated(self) -> List[int]:
        out = self.tokens[self.prompt_len:]
        return out[:-1] if out and out[-1] == EOT and self.finished else out


@dataclass(frozen=True)
class BeamConfig:
    beam_size: int = 1
    max_len: int = 48

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam size must be >= 1")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def _row(memory: dict, k: int) -> dict:
    """Repeat a single-utterance memory k times along the batch axis."""
    idx = np.zeros(k, dtype=np.int64)
    out = {}
    for key, val in memory.items():
        out[key] = val[idx] if val is not None else None
    return out


def model_scorer(model, memory: dict) -> Callable[[np.ndarray], np.ndarray]:
    """Next-token log-probabilities for each row of a [k, L] prefix matrix."""
    cache = {}

    def score(prefixes: np.ndarray) -> np.ndarray:
        k = prefixes.shape[0]
        if k not in cache:
            cache[k] = _row(memory, k)
        logits = model.decode_memory(prefixes, cache[k])
        return _log_softmax(np.asarray(logits.data[:, -1], dtype=np.float64))

    return score


def encode_one(model, batch: dict, i: int = 0) -> dict:
    """Encoder memory for utterance ``i`` of a batch, trimmed to its own length."""
    sub = {"mel": batch["mel"][i:i + 1, : int(batch["mel_mask"][i].sum())], "mel_mask": None}
    sub["mel_mask"] = np.ones(sub["mel"].shape[:2], dtype=bool)
    if "video" in batch:
        tv = int(batch["video_mask"][i].sum())
        sub["video"] = batch["video"][i:i + 1, :tv]
        sub["video_mask"] = np.ones((1, tv), dtype=bool)
    with no_grad():
        return model.encode_inputs(sub)


def greedy(score: Callable[[np.ndarray], np.ndarray], prompt: Sequence[int], max_len: int = 48) -> Hypothesis:
    tokens = list(prompt)
    total = 0.0
    steps = []
    for _ in range(max_len):
        lp = score(np.array([tokens]))[0]
        tok = int(np.argmax(lp))
        tokens.append(tok)
        total += float(lp[tok])
        steps.append(float(lp[tok]))
        if tok == EOT:
            return Hypothesis(tokens, total, True, len(prompt), step_logprobs=steps)
    return Hypothesis(tokens, total, False, len(prompt), "max length reached without EOT", steps)


def beam_search(score: Callable[[np.ndarray], np.ndarray], prompt: Sequence[int], cfg: BeamConfig) -> Hypothesis:
    """Plain beam search over summed log-probabilities.

    At each step the ``beam_size`` best expansions survive; those ending in EOT
    retire. The search stops once no live beam can still beat the best finished
    one (scores only decrease) or ``max_len`` is reached. Ties prefer the
    earlier finish, then the lexicographically smaller token sequence.
    """
    k = cfg.beam_size
    alive = [(0.0, list(prompt), [])]
    finished = []  # (score, finish_step, tokens, step logprobs)
    for step in range(cfg.max_len):
        lp = score(np.array([t for _, t, _ in alive]))
        cands = []
        for i, (s, toks, steps) in enumerate(alive):
            # only the k best continuations of each beam can survive the global cut
            top = np.argsort(-lp[i], kind="stable")[:k]
            for tok in top:
                cands.append((s + float(lp[i, tok]), toks + [int(tok)], steps + [float(lp[i, tok])]))
        cands.sort(key=lambda c: (-c[0], c[1]))
        alive = []
        for s, toks, steps in cands[:k]:
            if toks[-1] == EOT:
                finished.append((s, step, toks, steps))
            else:
                alive.append((s, toks, steps))
        if not alive:
            break
        if finished and max(f[0] for f in finished) >= alive[0][0]:
            break
    if finished:
        s, _, toks, steps = min(finished, key=lambda f: (-f[0], f[1], f[2]))
        return Hypothesis(toks, s, True, len(prompt), step_logprobs=steps)
    s, toks, steps = alive[0]
    return Hypothesis(toks, s, False, len(prompt), "no hypothesis finished within max length", steps)


def greedy_batch(model, memory: dict, prompts: np.ndarray, max_len: int = 48) -> List[Hypothesis]:
    """Greedy decoding of a whole batch at once (rows share the prompt length)."""
    prompts = np.asarray(prompts)
    b, p = prompts.shape
    tokens = prompts.copy()
    done = np.zeros(b, dtype=bool)
    totals = np.zeros(b)
    with no_grad():
        for _ in range(max_len):
            logits = model.decode_memory(tokens, memory)
            lp = _log_softmax(np.asarray(logits.data[:, -1], dtype=np.float64))
            nxt = lp.argmax(-1)
            nxt[done] = EOT
            totals += np.where(done, 0.0, lp[np.arange(b), nxt])
            tokens = np.concatenate([tokens, nxt[:, None]], axis=1)
            done |= nxt == EOT
            if done.all():
                break
    hyps = []
    for i in range(b):
        row = tokens[i].tolist()
        gen = row[p:]
        fin = EOT in gen
        if fin:
            row = row[: p + gen.index(EOT) + 1]
        hyps.append(Hypothesis(row, float(totals[i]), fin, p, None if fin else "max length reached without EOT"))
    return hyps


def hypothesis_record(utt_id: str, task: str, lang: str, text: str, hyp: Hypothesis) -> str:
    return json.dumps({"id": utt_id, "task": task, "lang": lang, "hyp_text": text,
                       "logprob": round(hyp.logprob, 10), "finished": hyp.finished}, sort_keys=True)


def exhaustive_best(score: Callable[[np.ndarray], np.ndarray], prompt: Sequence[int], depth: int):
    """Enumerate every continuation up to ``depth`` tokens (small vocabularies only)."""
    best = (-np.inf, None)
    frontier = [(0.0, list(prompt))]
    for d in range(depth):
        nxt = []
        for s, toks in frontier:
            lp = score(np.array([toks]))[0]
            for tok, v in enumerate(lp):
                cand = (s + float(v), toks + [tok])
                if tok == EOT or d == depth - 1:
                    if cand[0] > best[0]:
                        best = cand
                else:
                    nxt.append(cand)
        frontier = nxt
    return best
