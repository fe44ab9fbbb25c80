"""Result tables: CSV and markdown renderings, seed medians, and the consolidated report.

Every row is one evaluated cell with its provenance (checkpoint hash, corpus
seed, noise seed, beam). Values are formatted once, so the CSV and markdown
views show the same strings and reruns produce the same bytes.
"""

from __future__ import annotations

import csv
import io
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

SCHEMA = (
    "table", "section", "model", "modality", "seed", "task", "lang", "noise", "snr_db", "beam",
    "metric", "value", "n_utts", "checkpoint_sha256", "corpus_seed", "noise_seed",
)
MEDIAN = "median"
_DECIMALS = {"WER": 4, "BLEU": 2, "token_acc": 4}


class SchemaError(ValueError):
    pass


def fmt_value(metric: str, value: float) -> str:
    return f"{value:.{_DECIMALS.get(metric, 6)}f}"


def fmt_snr(snr: float) -> str:
    return "inf" if snr == float("inf") else f"{snr:g}"


def condition_label(row: dict) -> str:
    return "clean" if row["noise"] == "clean" else f"{row['noise']}@{row['snr_db']}"


def column_label(row: dict) -> str:
    parts = []
    if row["task"] == "translate":
        parts.append(row["lang"])
    parts += [condition_label(row), f"b{row['beam']}" if row["beam"] != "tf" else "tf", row["metric"]]
    return " ".join(parts)


@dataclass
class ResultTable:
    name: str
    rows: List[dict] = field(default_factory=list)

    def add(self, **cell) -> dict:
        missing = [k for k in SCHEMA if k not in cell and k != "table"]
        if missing:
            raise SchemaError(f"{self.name}: cell lacks {missing}")
        row = {k: str(cell[k]) if k != "table" else self.name for k in SCHEMA}
        self.rows.append(row)
        return row

    def with_medians(self) -> "ResultTable":
        """Append one median row per (model, condition) when more than one seed ran."""
        seeds = {r["seed"] for r in self.rows if r["seed"] != MEDIAN}
        out = ResultTable(self.name, [r for r in self.rows if r["seed"] != MEDIAN])
        if len(seeds) < 2:
            return out
        groups: Dict[tuple, List[dict]] = {}
        for r in out.rows:
            key = tuple(r[k] for k in SCHEMA if k not in ("seed", "value", "checkpoint_sha256"))
            groups.setdefault(key, []).append(r)
        for rows in groups.values():
            med = dict(rows[0])
            med["seed"] = MEDIAN
            med["checkpoint_sha256"] = "-"
            med["value"] = fmt_value(med["metric"], statistics.median(float(r["value"]) for r in rows))
            out.rows.append(med)
        return out

    # -- renderings ---------------------------------------------------------
    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=SCHEMA, lineterminator="\n")
        w.writeheader()
        w.writerows(self.rows)
        return buf.getvalue()

    def write(self, out_dir) -> Tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path, md_path = out / f"{self.name}.csv", out / f"{self.name}.md"
        csv_path.write_text(self.to_csv(), encoding="utf-8")
        md_path.write_text(self.to_markdown(), encoding="utf-8")
        return csv_path, md_path

    def to_markdown(self, flags: Optional[Dict[tuple, List[str]]] = None) -> str:
        """One pivot per section: rows are (model, modality, seed), columns are conditions."""
        flags = flags or {}
        lines = [f"## {self.name}", ""]
        for section in _ordered(r["section"] for r in self.rows):
            rows = [r for r in self.rows if r["section"] == section]
            cols = _ordered(column_label(r) for r in rows)
            keys = _ordered(row_key(r) for r in rows)
            cells = {(row_key(r), column_label(r)): r["value"] for r in rows}
            if section:
                lines += [f"### {section}", ""]
            lines.append("| model | modality | seed | " + " | ".join(cols) + " |")
            lines.append("|---|---|---|" + "---|" * len(cols))
            for key in keys:
                model, modality, seed = key
                mark = "".join(f" **BREACH:{c}**" for c in flags.get((self.name,) + key, []))
                vals = [cells.get((key, c), "") for c in cols]
                lines.append(f"| {model}{mark} | {modality} | {seed} | " + " | ".join(vals) + " |")
            lines.append("")
        return "\n".join(lines)


def row_key(r: dict) -> tuple:
    return r["model"], r["modality"], r["seed"]


def _ordered(items: Iterable) -> list:
    seen, out = set(), []
    for x in items:
        if x not in seen:
            seen.add(x)
            out.append(x)
    return out


def read_csv(path) -> ResultTable:
    text = Path(path).read_text(encoding="utf-8")
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != SCHEMA:
        raise SchemaError(f"{path}: header {reader.fieldnames} does not match the result schema")
    rows = list(reader)
    names = {r["table"] for r in rows}
    if len(names) > 1:
        raise SchemaError(f"{path}: mixes tables {sorted(names)}")
    return ResultTable(names.pop() if names else Path(path).stem, rows)


# -- acceptance checks --------------------------------------------------------

@dataclass
class Check:
    name: str
    passed: bool
    detail: str
    breaches: List[tuple] = field(default_factory=list)  # (table, model, modality, seed)


def _value(rows: Sequence[dict], **match) -> Optional[float]:
    hits = [r for r in rows if all(r[k] == v for k, v in match.items())]
    if len(hits) > 1:
        raise SchemaError(f"duplicate cell for {match}")
    return float(hits[0]["value"]) if hits else None


def _agg_seed(rows: Sequence[dict]) -> Optional[str]:
    seeds = _ordered(r["seed"] for r in rows)
    if MEDIAN in seeds:
        return MEDIAN
    return seeds[0] if len(seeds) == 1 else None


def acceptance_checks(tables: Dict[str, ResultTable]) -> List[Check]:
    """Qualitative claims checked on whatever tables are present."""
    checks: List[Check] = []
    fusion = tables.get("fusion")
    if fusion is not None:
        checks += _fusion_checks(fusion.rows)
    trans = tables.get("translation")
    if trans is not None:
        checks += _translation_checks(trans.rows)
    return checks


def _noisy_conditions(rows) -> List[Tuple[str, str]]:
    return _ordered((r["noise"], r["snr_db"]) for r in rows if r["noise"] != "clean")


def _fusion_checks(rows: List[dict]) -> List[Check]:
    rows = [r for r in rows if r["beam"] == "1" and r["metric"] == "WER" and r["task"] == "transcribe"]
    out = []
    noisy = _noisy_conditions(rows)
    if not noisy:
        return out
    noise, snr = noisy[0]
    seeds = sorted({r["seed"] for r in rows if r["seed"] != MEDIAN})
    bad, parts = [], []
    for s in seeds:
        av = _value(rows, model="GatedXAttn", seed=s, noise=noise, snr_db=snr)
        ao = _value(rows, model="AudioOnly", seed=s, noise=noise, snr_db=snr)
        if av is None or ao is None:
            continue
        parts.append(f"seed {s}: {av:.4f} vs {ao:.4f}")
        if not av < ao:
            bad.append(("fusion", "GatedXAttn", "AV", s))
    if parts:
        out.append(Check("gated-beats-audio-noisy", not bad,
                         f"{noise}@{snr} WER, GatedXAttn vs AudioOnly per seed: " + "; ".join(parts), bad))
    agg = _agg_seed(rows)
    if agg is None:
        return out
    av_n = _value(rows, model="GatedXAttn", seed=agg, noise=noise, snr_db=snr)
    ao_n = _value(rows, model="AudioOnly", seed=agg, noise=noise, snr_db=snr)
    av_c = _value(rows, model="GatedXAttn", seed=agg, noise="clean")
    ao_c = _value(rows, model="AudioOnly", seed=agg, noise="clean")
    if None not in (av_n, ao_n) and ao_n > 0:
        ok = av_n <= 0.5 * ao_n
        out.append(Check("noisy-wer-halved", ok, f"{agg} {noise}@{snr} WER {av_n:.4f} vs audio-only {ao_n:.4f} "
                         f"(ratio {av_n / ao_n:.3f}, need <= 0.5)", [] if ok else [("fusion", "GatedXAttn", "AV", agg)]))
    if None not in (av_c, ao_c) and ao_c > 0:
        ok = av_c <= 1.25 * ao_c
        out.append(Check("clean-wer-kept", ok, f"{agg} clean WER {av_c:.4f} vs audio-only {ao_c:.4f} "
                         f"(relative change {(av_c - ao_c) / ao_c:+.1%}, need <= +25%)",
                         [] if ok else [("fusion", "GatedXAttn", "AV", agg)]))
    fused = {m: _value(rows, model=m, seed=agg, noise=noise, snr_db=snr) for m in ("EarlyFusion", "LateFusion")}
    fused = {m: v for m, v in fused.items() if v is not None}
    if fused and av_n is not None:
        ok = all(av_n < v for v in fused.values())
        detail = ", ".join(f"{m} {v:.4f}" for m, v in fused.items())
        out.append(Check("gated-lowest-noisy", ok, f"{agg} {noise}@{snr} WER GatedXAttn {av_n:.4f}; {detail}",
                         [] if ok else [("fusion", "GatedXAttn", "AV", agg)]))
    return out


def _translation_checks(rows: List[dict]) -> List[Check]:
    out = []
    agg = _agg_seed(rows)
    if agg is None:
        return out
    langs = _ordered(r["lang"] for r in rows if r["task"] == "translate")
    accs = {lang: _value(rows, model="AudioOnly", seed=agg, lang=lang, noise="clean", metric="token_acc")
            for lang in langs}
    accs = {k: v for k, v in accs.items() if v is not None}
    if accs:
        ok = all(v >= 0.9 for v in accs.values())
        out.append(Check("translation-token-acc", ok, f"{agg} clean teacher-forced token accuracy, audio-only: "
                         + ", ".join(f"{k} {v:.4f}" for k, v in accs.items()) + " (need >= 0.90)",
                         [] if ok else [("translation", "AudioOnly", "A", agg)]))
    noisy = _noisy_conditions(rows)
    if noisy:
        noise, snr = noisy[0]
        parts, ok = [], True
        for lang in langs:
            av = _value(rows, model="GatedXAttn", seed=agg, lang=lang, noise=noise, snr_db=snr, metric="BLEU", beam="1")
            ao = _value(rows, model="AudioOnly", seed=agg, lang=lang, noise=noise, snr_db=snr, metric="BLEU", beam="1")
            if av is None or ao is None:
                continue
            parts.append(f"{lang} {av:.2f} vs {ao:.2f}")
            ok &= av > ao
        if parts:
            out.append(Check("translation-bleu-noisy", ok, f"{agg} {noise}@{snr} BLEU GatedXAttn vs AudioOnly: "
                             + ", ".join(parts), [] if ok else [("translation", "GatedXAttn", "AV", agg)]))
    return out


# -- report -------------------------------------------------------------------

def load_tables(result_dir) -> Dict[str, ResultTable]:
    d = Path(result_dir)
    if not d.is_dir():
        raise FileNotFoundError(f"{d}: no such result directory")
    paths = sorted(d.glob("*.csv"))
    if not paths:
        raise FileNotFoundError(f"{d}: no result tables (*.csv) to report on")
    tables: Dict[str, ResultTable] = {}
    for p in paths:
        t = read_csv(p)
        if t.name in tables:
            raise SchemaError(f"table {t.name!r} appears in more than one file")
        tables[t.name] = t
    return tables


def render_report(tables: Dict[str, ResultTable]) -> Tuple[str, List[Check]]:
    checks = acceptance_checks(tables)
    flags: Dict[tuple, List[str]] = {}
    for c in checks:
        for key in c.breaches:
            flags.setdefault(key, []).append(c.name)
    lines = ["# avfuse results", "", "## Checks", ""]
    if checks:
        lines += ["| check | status | detail |", "|---|---|---|"]
        lines += [f"| {c.name} | {'pass' if c.passed else 'FAIL'} | {c.detail} |" for c in checks]
    else:
        lines.append("No checkable tables present.")
    lines.append("")
    for name in sorted(tables):
        lines.append(tables[name].to_markdown(flags))
    lines += ["## Provenance", "", "| table | model | seed | checkpoint | corpus seed | noise seed |", "|---|---|---|---|---|---|"]
    seen = set()
    for name in sorted(tables):
        for r in tables[name].rows:
            key = (name, r["model"], r["seed"], r["checkpoint_sha256"], r["corpus_seed"], r["noise_seed"])
            if r["seed"] == MEDIAN or key in seen:
                continue
            seen.add(key)
            lines.append(f"| {name} | {r['model']} | {r['seed']} | {r['checkpoint_sha256'][:16]} | "
                         f"{r['corpus_seed']} | {r['noise_seed']} |")
    lines.append("")
    return "\n".join(lines), checks
