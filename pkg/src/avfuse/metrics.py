"""Text normalisation, WER, corpus BLEU and token accuracy."""

from __future__ import annotations

import math
import re
import string
import unicodedata
from collections import Counter
from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np

_ASCII_PUNCT = set(string.punctuation)


def _is_punct(ch: str) -> bool:
    return ch in _ASCII_PUNCT or unicodedata.category(ch).startswith("P")


def normalize(text: str) -> str:
    """Lowercase, drop punctuation (Unicode P* plus ASCII symbols), collapse whitespace."""
    text = "".join(ch for ch in text.lower() if not _is_punct(ch))
    return " ".join(text.split())


@dataclass(frozen=True)
class WerResult:
    wer: float
    substitutions: int
    insertions: int
    deletions: int
    ref_len: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions


def wer(ref: str, hyp: str) -> WerResult:
    """Word-level Levenshtein alignment with unit costs; wer = (S + I + D) / len(ref)."""
    r, h = ref.split(), hyp.split()
    if not r:
        raise ValueError("wer: reference is empty")
    n, m = len(r), len(h)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        # row update: substitution/match and deletion vectorised, insertion is a running scan
        sub = d[i - 1, :-1] + (np.array(h, dtype=object) != r[i - 1]).astype(np.int64)
        row = np.minimum(d[i - 1, 1:] + 1, sub)
        prev = d[i, 0]
        for j in range(m):
            prev = min(row[j], prev + 1)
            d[i, j + 1] = prev
    s = ins = dele = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (r[i - 1] != h[j - 1]):
            s += r[i - 1] != h[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            dele += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return WerResult((s + ins + dele) / n, int(s), ins, dele, n)


def corpus_wer(refs: Sequence[str], hyps: Sequence[str]) -> float:
    """Total edits over total reference words, after normalisation."""
    if len(refs) != len(hyps) or not refs:
        raise ValueError("corpus_wer: need equal-length, nonempty lists")
    edits = words = 0
    for r, h in zip(refs, hyps):
        res = wer(normalize(r), normalize(h))
        edits += res.errors
        words += res.ref_len
    return edits / words


# 13a-style tokenisation (mteval-v13a punctuation splitting)
_13A_RULES = [
    (re.compile(r"([\{-\~\[-\` -\&\(-\+\:-\@\/])"), r" \1 "),
    (re.compile(r"([^0-9])([\.,])"), r"\1 \2 "),
    (re.compile(r"([\.,])([^0-9])"), r" \1 \2"),
    (re.compile(r"([0-9])(-)"), r"\1 \2 "),
]


def tokenize_13a(line: str) -> List[str]:
    line = line.replace("<skipped>", "").replace("-\n", "").replace("\n", " ")
    if "&" in line:
        line = line.replace("&quot;", '"').replace("&amp;", "&").replace("&lt;", "<").replace("&gt;", ">")
    line = f" {line} "
    for pattern, repl in _13A_RULES:
        line = pattern.sub(repl, line)
    return line.split()


def _ngrams(tokens: List[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


@dataclass(frozen=True)
class BleuResult:
    score: float
    precisions: tuple
    brevity_penalty: float
    hyp_len: int
    ref_len: int
    matches: tuple
    totals: tuple


def bleu(hyps: Sequence[str], refs: Sequence[str], max_n: int = 4) -> BleuResult:
    """Corpus BLEU (0-100): clipped n-gram precisions, geometric mean, brevity penalty, no smoothing."""
    if len(hyps) != len(refs):
        raise ValueError(f"bleu: {len(hyps)} hypotheses vs {len(refs)} references")
    if not refs:
        raise ValueError("bleu: empty corpus")
    matches, totals = [0] * max_n, [0] * max_n
    hyp_len = ref_len = 0
    for h, r in zip(hyps, refs):
        if not r.strip():
            raise ValueError("bleu: empty reference")
        ht, rt = tokenize_13a(h), tokenize_13a(r)
        hyp_len += len(ht)
        ref_len += len(rt)
        for n in range(1, max_n + 1):
            hn, rn = _ngrams(ht, n), _ngrams(rt, n)
            matches[n - 1] += sum(min(c, rn[g]) for g, c in hn.items())
            totals[n - 1] += max(len(ht) - n + 1, 0)
    precisions = tuple(m / t if t else 0.0 for m, t in zip(matches, totals))
    bp = 1.0 if hyp_len > ref_len else (math.exp(1.0 - ref_len / hyp_len) if hyp_len else 0.0)
    if min(matches) == 0:
        score = 0.0
    else:
        score = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / max_n)
    return BleuResult(score, precisions, bp, hyp_len, ref_len, tuple(matches), tuple(totals))


def token_accuracy(logits, targets, mask) -> float:
    """Fraction of scored positions where argmax(logits) equals the target."""
    data = getattr(logits, "data", logits)
    data = np.asarray(data)
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=bool)
    if data.shape[:-1] != targets.shape or mask.shape != targets.shape:
        raise ValueError(f"token_accuracy: shapes {data.shape}, {targets.shape}, {mask.shape} do not conform")
    if not mask.any():
        raise ValueError("token_accuracy: no scored positions")
    return float(np.mean(data.argmax(-1)[mask] == targets[mask]))
