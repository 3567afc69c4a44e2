"""Corpus BLEU, ranking tables and teacher-assistant variance.

BLEU follows the ``case.mixed + numrefs.1 + smooth.exp + tok.none`` recipe:
corpus-level 4-gram statistics over already-tokenized sequences, a single
reference per hypothesis, and exponential smoothing for orders with zero
matches.
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Mapping, Sequence

import numpy as np

from .errors import SpecError

MAX_ORDER = 4


@dataclass(frozen=True)
class BleuScore:
    score: float
    precisions: tuple[float, ...]
    brevity_penalty: float
    sys_len: int
    ref_len: int
    counts: tuple[int, ...] = ()
    totals: tuple[int, ...] = ()


def _ngrams(seq: Sequence[Hashable], n: int) -> Counter:
    return Counter(tuple(seq[i : i + n]) for i in range(len(seq) - n + 1))


def bleu(hypotheses: Sequence[Sequence[Hashable]], references: Sequence[Sequence[Hashable]]) -> BleuScore:
    if len(hypotheses) != len(references):
        raise SpecError("hypotheses", f"{len(hypotheses)} hypotheses for {len(references)} references")
    if not hypotheses:
        raise SpecError("hypotheses", "need at least one sentence pair")
    correct = [0] * MAX_ORDER
    total = [0] * MAX_ORDER
    sys_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp, ref = list(hyp), list(ref)
        sys_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, MAX_ORDER + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            correct[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            total[n - 1] += max(0, len(hyp) - n + 1)

    precisions = [0.0] * MAX_ORDER
    smooth = 1.0
    for n in range(MAX_ORDER):
        if total[n] == 0:
            break
        if correct[n] == 0:
            smooth *= 2.0
            precisions[n] = 100.0 / (smooth * total[n])
        else:
            precisions[n] = 100.0 * correct[n] / total[n]

    if sys_len == 0:
        bp = 0.0
    elif sys_len < ref_len:
        bp = math.exp(1.0 - ref_len / sys_len)
    else:
        bp = 1.0
    if bp == 0.0 or min(precisions) == 0.0:
        score = 0.0
    else:
        # log/exp round-off can push a perfect match a few ulps above 100
        score = min(100.0, bp * math.exp(sum(math.log(p) for p in precisions) / MAX_ORDER))
    return BleuScore(score, tuple(precisions), bp, sys_len, ref_len, tuple(correct), tuple(total))


# ---------------------------------------------------------------------------
# rankings
# ---------------------------------------------------------------------------


@dataclass
class RankingTable:
    tiers: list[str]
    systems: list[str]
    top2_rate: dict[str, dict[str, float]]
    share: dict[str, dict[str, float]]
    n_langs: dict[str, int]


def _top2_credit(scores: Mapping[str, float]) -> tuple[dict[str, float], set[str]]:
    """Split one unit for 1st place and one for 2nd place among the systems.

    Tied systems share the places they jointly occupy evenly.  Also returns the
    set of systems whose competition rank (ties share the better rank) is <= 2.
    """
    ordered = sorted(scores.items(), key=lambda kv: -kv[1])
    credit = {s: 0.0 for s in scores}
    top2 = set()
    pos = 0
    while pos < len(ordered) and pos < 2:
        v = ordered[pos][1]
        group = [s for s, x in ordered if x == v]
        places = range(pos, pos + len(group))
        units = sum(1 for p in places if p < 2)
        for s in group:
            credit[s] += units / len(group)
            top2.add(s)
        pos += len(group)
    return credit, top2


def rank_systems(rows: Mapping[str, Mapping[str, float]], tiers: Mapping[str, str]) -> RankingTable:
    """``rows[lang][system] = bleu``; ``tiers[lang] = tier name``."""
    systems = sorted({s for r in rows.values() for s in r})
    if len(systems) < 2:
        raise SpecError("rows", "ranking needs at least two systems")
    tier_names = list(dict.fromkeys(tiers[l] for l in rows))
    rate = {t: {s: 0.0 for s in systems} for t in tier_names}
    share = {t: {s: 0.0 for s in systems} for t in tier_names}
    n_langs = {t: 0 for t in tier_names}
    for lang, scores in rows.items():
        t = tiers[lang]
        n_langs[t] += 1
        credit, top2 = _top2_credit(scores)
        for s in systems:
            share[t][s] += credit.get(s, 0.0)
            rate[t][s] += 1.0 if s in top2 else 0.0
    for t in tier_names:
        units = sum(share[t].values())
        for s in systems:
            rate[t][s] = 100.0 * rate[t][s] / n_langs[t]
            share[t][s] = 100.0 * share[t][s] / units if units else 0.0
    return RankingTable(tier_names, systems, rate, share, n_langs)


def ta_variance(scores: Mapping[str, Sequence[float]]) -> dict[str, float]:
    """Population variance of each language's teacher-assistant BLEU scores.

    Languages with fewer than two teacher-assistants are left out.
    """
    return {l: float(np.var(np.asarray(v, dtype=float))) for l, v in scores.items() if len(v) >= 2}


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------


def write_report_csv(path, records: Sequence[Mapping]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["system", "lang", "tier", "bleu"])
        for r in records:
            w.writerow([r["system"], r["lang"], r["tier"], f"{r['bleu']:.2f}"])


def read_report_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return [{**r, "bleu": float(r["bleu"])} for r in csv.DictReader(f)]


def _marks(values: Mapping[str, float]) -> dict[str, str]:
    distinct = sorted({round(v, 2) for v in values.values()}, reverse=True)
    out = {}
    for s, v in values.items():
        txt = f"{v:.2f}"
        if round(v, 2) == distinct[0]:
            txt = f"**{txt}**"
        elif len(distinct) > 1 and round(v, 2) == distinct[1]:
            txt = f"<u>{txt}</u>"
        out[s] = txt
    return out


def render_grid(records: Sequence[Mapping], lang_order: Sequence[str], systems: Sequence[str]) -> str:
    """Table with one row per language and one column per system; best in bold,
    second best underlined."""
    by_lang: dict[str, dict[str, float]] = {}
    tier = {}
    for r in records:
        by_lang.setdefault(r["lang"], {})[r["system"]] = r["bleu"]
        tier[r["lang"]] = r["tier"]
    lines = ["| tier | lang | " + " | ".join(systems) + " |", "|" + "---|" * (len(systems) + 2)]
    for lang in lang_order:
        vals = by_lang.get(lang, {})
        marked = _marks(vals) if vals else {}
        cells = [marked.get(s, "-") for s in systems]
        lines.append(f"| {tier.get(lang, '-')} | {lang} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def parse_grid(text: str) -> dict[tuple[str, str], float]:
    """Inverse of :func:`render_grid` (first table in ``text``)."""
    all_lines = text.splitlines()
    start = next(i for i, l in enumerate(all_lines) if l.startswith("|"))
    lines = []
    for l in all_lines[start:]:
        if not l.startswith("|"):
            break
        lines.append(l)
    header = [c.strip() for c in lines[0].strip("|").split("|")]
    systems = header[2:]
    out = {}
    for line in lines[2:]:
        if not line.startswith("| "):
            break
        cells = [c.strip() for c in line.strip("|").split("|")]
        if len(cells) != len(header):
            break
        for s, c in zip(systems, cells[2:]):
            c = c.replace("**", "").replace("<u>", "").replace("</u>", "")
            if c != "-":
                out[(s, cells[1])] = float(c)
    return out


def render_ranking(table: RankingTable) -> str:
    lines = ["| tier | #langs | " + " | ".join(table.systems) + " |", "|" + "---|" * (len(table.systems) + 2)]
    for t in table.tiers:
        cells = [f"{table.share[t][s]:.2f}%" for s in table.systems]
        lines.append(f"| {t} | {table.n_langs[t]} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def write_text(path, text: str) -> None:
    Path(path).write_text(text)
