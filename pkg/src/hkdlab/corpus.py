"""Parallel corpora: synthetic language families, file loading, vocabularies,
up-sampling and minibatching.

Synthetic languages are substitution ciphers of a shared toy "English".  Every
family draws one base cipher; each language in the family then re-maps a
random fraction (``noise``) of the cipher's images, so relatedness inside a
family is controlled by a single scalar.
"""

from __future__ import annotations

import json
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import AlignmentError, ConfigurationError, SpecError
from .seeds import rng_for

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<s>", "</s>", "<unk>")
SPLITS = ("train", "dev", "test")

Pair = tuple[tuple[int, ...], tuple[int, ...]]


def tag_symbol(lang: str) -> str:
    return f"<2{lang}>"


class Vocabulary:
    """Symbol table shared by every model in an experiment.

    The four special symbols always occupy ids 0-3.  ``mode`` decides how raw
    text is split into symbols: ``"char"`` (every character, including spaces)
    or ``"whitespace"``.
    """

    def __init__(self, symbols: Sequence[str], mode: str = "char"):
        if mode not in ("char", "whitespace"):
            raise SpecError("mode", f"unknown tokenization mode {mode!r}")
        symbols = list(symbols)
        if tuple(symbols[:4]) != SPECIALS:
            symbols = list(SPECIALS) + [s for s in symbols if s not in SPECIALS]
        self.symbols = symbols
        self.mode = mode
        self.index = {s: i for i, s in enumerate(symbols)}
        if len(self.index) != len(symbols):
            raise SpecError("symbols", "duplicate symbols in vocabulary")

    def __len__(self) -> int:
        return len(self.symbols)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Vocabulary)
            and self.symbols == other.symbols
            and self.mode == other.mode
        )

    def __repr__(self) -> str:
        return f"Vocabulary(size={len(self)}, mode={self.mode!r})"

    def tokenize(self, text: str) -> list[str]:
        return list(text) if self.mode == "char" else text.split()

    def encode(self, text: str) -> tuple[int, ...]:
        return tuple(self.index.get(tok, UNK) for tok in self.tokenize(text))

    def decode(self, ids: Iterable[int]) -> str:
        toks = [self.symbols[i] for i in ids if i not in (PAD, BOS, EOS)]
        return "".join(toks) if self.mode == "char" else " ".join(toks)

    def with_tags(self, langs: Iterable[str]) -> "Vocabulary":
        extra = [tag_symbol(l) for l in langs if tag_symbol(l) not in self.index]
        return Vocabulary(self.symbols + extra, self.mode)

    def tag_id(self, lang: str) -> int:
        try:
            return self.index[tag_symbol(lang)]
        except KeyError:
            raise ConfigurationError(
                f"language tag {tag_symbol(lang)!r} is not in the vocabulary"
            ) from None

    def to_dict(self) -> dict:
        return {"mode": self.mode, "symbols": self.symbols}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Vocabulary":
        return cls(d["symbols"], d["mode"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), ensure_ascii=False, indent=1))

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_dict(json.loads(Path(path).read_text()))


def build_vocab(corpora: Iterable[Iterable[str]], mode: str = "char") -> Vocabulary:
    """One shared vocabulary over every sentence of every corpus.

    Symbols are ordered by descending frequency, ties broken lexicographically.
    """
    probe = Vocabulary([], mode)
    counts: Counter[str] = Counter()
    n_sent = 0
    for corpus in corpora:
        for sentence in corpus:
            counts.update(probe.tokenize(sentence))
            n_sent += 1
    if n_sent == 0:
        raise SpecError("corpora", "cannot build a vocabulary from zero sentences")
    for s in SPECIALS:
        counts.pop(s, None)
    ordered = sorted(counts, key=lambda s: (-counts[s], s))
    return Vocabulary(list(SPECIALS) + ordered, mode)


@dataclass(frozen=True)
class ParallelCorpus:
    lang: str
    pairs: tuple[Pair, ...]
    split: str = "train"

    def __post_init__(self):
        if not self.lang:
            raise SpecError("lang", "language id must be nonempty")
        if self.split not in SPLITS:
            raise SpecError("split", f"unknown split {self.split!r}")
        for i, (x, y) in enumerate(self.pairs):
            if len(x) == 0 or len(y) == 0:
                raise SpecError("pairs", f"pair {i} of {self.lang}/{self.split} is empty")

    def __len__(self) -> int:
        return len(self.pairs)

    def check_vocab(self, vocab_size: int) -> None:
        for i, (x, y) in enumerate(self.pairs):
            if max(x) >= vocab_size or max(y) >= vocab_size or min(x) < 0 or min(y) < 0:
                raise SpecError("pairs", f"pair {i} of {self.lang} has ids outside the vocabulary")


def load_parallel(src_path, tgt_path, lang: str, vocab: Vocabulary, split: str = "train") -> ParallelCorpus:
    src_lines = _read_lines(src_path)
    tgt_lines = _read_lines(tgt_path)
    if len(src_lines) != len(tgt_lines):
        raise AlignmentError(len(src_lines), len(tgt_lines), src_path, tgt_path)
    pairs = tuple((vocab.encode(s), vocab.encode(t)) for s, t in zip(src_lines, tgt_lines))
    return ParallelCorpus(lang, pairs, split)


def _read_lines(path) -> list[str]:
    text = Path(path).read_text(encoding="utf-8")
    return text.splitlines()


def read_raw_dir(root, languages: Sequence[str] | None = None) -> dict[str, dict[str, list[tuple[str, str]]]]:
    """Read ``<root>/<split>/<lang>.src|.tgt`` text files without encoding them."""
    root = Path(root)
    if languages is None:
        languages = sorted(p.stem for p in (root / "train").glob("*.src"))
    out: dict[str, dict[str, list[tuple[str, str]]]] = {}
    for lang in languages:
        out[lang] = {}
        for split in SPLITS:
            src, tgt = root / split / f"{lang}.src", root / split / f"{lang}.tgt"
            if not src.exists():
                if split == "train":
                    raise ConfigurationError(f"missing training file {src}")
                out[lang][split] = []
                continue
            s, t = _read_lines(src), _read_lines(tgt)
            if len(s) != len(t):
                raise AlignmentError(len(s), len(t), src, tgt)
            out[lang][split] = list(zip(s, t))
    return out


def encode_raw(raw: Mapping[str, Mapping[str, Sequence[tuple[str, str]]]], vocab: Vocabulary):
    return {
        lang: {
            split: ParallelCorpus(lang, tuple((vocab.encode(s), vocab.encode(t)) for s, t in pairs), split)
            for split, pairs in by_split.items()
        }
        for lang, by_split in raw.items()
    }


def write_raw_dir(root, raw: Mapping[str, Mapping[str, Sequence[tuple[str, str]]]]) -> None:
    root = Path(root)
    for lang, by_split in raw.items():
        for split, pairs in by_split.items():
            d = root / split
            d.mkdir(parents=True, exist_ok=True)
            (d / f"{lang}.src").write_text("".join(s + "\n" for s, _ in pairs), encoding="utf-8")
            (d / f"{lang}.tgt").write_text("".join(t + "\n" for _, t in pairs), encoding="utf-8")


# ---------------------------------------------------------------------------
# synthetic families
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticFamilySpec:
    n_families: int = 3
    langs_per_family: int = 3
    noise: float = 0.15
    train_sentences: int = 400
    low_resource_sentences: int = 40
    low_resource_per_family: int = 1
    dev_sentences: int = 40
    test_sentences: int = 60
    min_words: int = 2
    max_words: int = 4
    alphabet_size: int = 12
    lexicon_size: int = 60
    token_noise: float = 0.0
    kb_dim: int = 12
    kb_view: str = "typology"
    kb_flip: float = 0.05

    def validate(self) -> None:
        def need(cond, name, msg):
            if not cond:
                raise SpecError(name, msg)

        need(self.n_families >= 1, "n_families", "must be >= 1")
        need(self.langs_per_family >= 1, "langs_per_family", "must be >= 1")
        need(0.0 <= self.noise < 0.5, "noise", "must lie in [0, 0.5)")
        need(0.0 <= self.token_noise < 0.5, "token_noise", "must lie in [0, 0.5)")
        need(self.train_sentences >= 1, "train_sentences", "must be >= 1")
        need(1 <= self.low_resource_per_family <= self.langs_per_family,
             "low_resource_per_family", "must be between 1 and langs_per_family")
        need(1 <= self.low_resource_sentences < self.train_sentences,
             "low_resource_sentences", "must be >= 1 and smaller than train_sentences")
        need(self.dev_sentences >= 1, "dev_sentences", "must be >= 1")
        need(self.test_sentences >= 1, "test_sentences", "must be >= 1")
        need(1 <= self.min_words <= self.max_words, "min_words", "need 1 <= min_words <= max_words")
        need(2 <= self.alphabet_size <= 26, "alphabet_size", "must be in [2, 26]")
        need(self.lexicon_size >= 1, "lexicon_size", "must be >= 1")
        need(self.kb_dim >= 1, "kb_dim", "must be >= 1")
        need(self.kb_view in ("typology", "family"), "kb_view", "must be 'typology' or 'family'")
        need(0.0 <= self.kb_flip < 0.5, "kb_flip", "must lie in [0, 0.5)")


@dataclass(frozen=True)
class SyntheticLanguage:
    code: str
    family: str
    low_resource: bool
    typology: int
    cipher: dict[str, str] = field(repr=False)

    def transform(self, english: str) -> str:
        return "".join(self.cipher.get(ch, ch) for ch in english)


@dataclass
class SyntheticDataset:
    spec: SyntheticFamilySpec
    languages: list[SyntheticLanguage]
    texts: dict[str, dict[str, list[tuple[str, str]]]]
    kb_features: np.ndarray

    @property
    def codes(self) -> list[str]:
        return [l.code for l in self.languages]

    def language(self, code: str) -> SyntheticLanguage:
        for l in self.languages:
            if l.code == code:
                return l
        raise KeyError(code)

    def vocabulary(self) -> Vocabulary:
        texts = [s for by_split in self.texts.values() for pairs in by_split.values() for p in pairs for s in p]
        return build_vocab([texts], "char").with_tags(self.codes)

    def corpora(self, vocab: Vocabulary | None = None) -> dict[str, dict[str, ParallelCorpus]]:
        return encode_raw(self.texts, vocab or self.vocabulary())

    def metadata(self) -> dict:
        return {
            "languages": [
                {"code": l.code, "family": l.family, "low_resource": l.low_resource, "typology": l.typology}
                for l in self.languages
            ]
        }

    def write(self, root) -> None:
        root = Path(root)
        write_raw_dir(root, self.texts)
        (root / "languages.json").write_text(json.dumps(self.metadata(), indent=1))
        write_kb_csv(root / "kb.csv", self.codes, self.kb_features)


def write_kb_csv(path, codes: Sequence[str], features: np.ndarray) -> None:
    header = "lang," + ",".join(f"f{i + 1}" for i in range(features.shape[1]))
    rows = [c + "," + ",".join(str(int(v)) for v in row) for c, row in zip(codes, features)]
    Path(path).write_text("\n".join([header] + rows) + "\n")


def _lexicon(spec: SyntheticFamilySpec, letters: str, rng: np.random.Generator) -> tuple[list[str], np.ndarray]:
    words: list[str] = []
    seen = set()
    attempts = 0
    while len(words) < spec.lexicon_size:
        n = int(rng.integers(2, 6))
        w = "".join(rng.choice(list(letters), size=n))
        attempts += 1
        if w in seen and attempts < 100 * spec.lexicon_size:
            continue
        seen.add(w)
        words.append(w)
    ranks = np.arange(1, len(words) + 1, dtype=float)
    weights = 1.0 / ranks
    return words, weights / weights.sum()


def _sentences(n: int, words, weights, spec, rng) -> list[str]:
    out = []
    for _ in range(n):
        k = int(rng.integers(spec.min_words, spec.max_words + 1))
        idx = rng.choice(len(words), size=k, p=weights)
        out.append(" ".join(words[i] for i in idx))
    return out


def _perturb(cipher: dict[str, str], rate: float, rng: np.random.Generator) -> dict[str, str]:
    keys = sorted(cipher)
    picked = [k for k in keys if rng.random() < rate]
    out = dict(cipher)
    if len(picked) >= 2:
        order = list(rng.permutation(picked))
        images = [cipher[k] for k in order]
        for k, img in zip(order, images[1:] + images[:1]):
            out[k] = img
    return out


def _corrupt(text: str, rate: float, letters: str, rng: np.random.Generator) -> str:
    if rate <= 0.0:
        return text
    chars = list(text)
    for i, ch in enumerate(chars):
        if ch != " " and rng.random() < rate:
            chars[i] = letters[int(rng.integers(len(letters)))]
    return "".join(chars)


def generate_synthetic(spec: SyntheticFamilySpec, seed: int) -> SyntheticDataset:
    """Generate ``n_families * langs_per_family`` languages translating into one shared target."""
    spec.validate()
    letters = string.ascii_lowercase[: spec.alphabet_size]
    words, weights = _lexicon(spec, letters, rng_for(seed, "lexicon"))

    languages: list[SyntheticLanguage] = []
    for f in range(spec.n_families):
        fam = string.ascii_lowercase[f]
        frng = rng_for(seed, "family", fam)
        base = dict(zip(letters, frng.permutation(list(letters))))
        for i in range(spec.langs_per_family):
            code = f"{fam}{i + 1}"
            cipher = _perturb(base, spec.noise, rng_for(seed, "perturb", code))
            low = i >= spec.langs_per_family - spec.low_resource_per_family
            languages.append(SyntheticLanguage(code, fam, low, i, cipher))

    texts: dict[str, dict[str, list[tuple[str, str]]]] = {}
    for lang in languages:
        texts[lang.code] = {}
        for split in SPLITS:
            n = {"train": spec.low_resource_sentences if lang.low_resource else spec.train_sentences,
                 "dev": spec.dev_sentences, "test": spec.test_sentences}[split]
            rng = rng_for(seed, "sentences", lang.code, split)
            targets = _sentences(n, words, weights, spec, rng)
            texts[lang.code][split] = [
                (_corrupt(lang.transform(t), spec.token_noise, letters, rng), t) for t in targets
            ]

    kb = _kb_features(spec, languages, seed)
    return SyntheticDataset(spec, languages, texts, kb)


def _kb_features(spec: SyntheticFamilySpec, languages: Sequence[SyntheticLanguage], seed: int) -> np.ndarray:
    """Binary typological vectors.

    With ``kb_view="typology"`` the prototypes are keyed by a language's position
    inside its family, so the KB view cuts across families; ``"family"`` keys
    them by family instead.
    """
    rows = []
    for lang in languages:
        key = lang.typology if spec.kb_view == "typology" else lang.family
        proto = rng_for(seed, "kb-proto", key).integers(0, 2, size=spec.kb_dim)
        flips = rng_for(seed, "kb-flip", lang.code).random(spec.kb_dim) < spec.kb_flip
        rows.append(np.where(flips, 1 - proto, proto))
    return np.array(rows, dtype=np.int64)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def upsample(corpora: Mapping[str, ParallelCorpus], seed: int = 0) -> dict[str, ParallelCorpus]:
    """Bring every corpus up to the size of the largest one.

    A corpus of size n facing a target of size m is repeated ``m // n`` times and
    the remaining ``m % n`` pairs are drawn without replacement; the result is
    then shuffled.
    """
    if not corpora:
        return {}
    for lang, c in corpora.items():
        if len(c) == 0:
            raise SpecError("corpora", f"corpus for {lang} is empty")
    target = max(len(c) for c in corpora.values())
    out = {}
    for lang, c in corpora.items():
        n = len(c)
        if n == target:
            out[lang] = c
            continue
        rng = rng_for(seed, "upsample", lang)
        idx = np.concatenate([np.tile(np.arange(n), target // n), rng.choice(n, size=target % n, replace=False)])
        idx = idx[rng.permutation(len(idx))]
        out[lang] = ParallelCorpus(lang, tuple(c.pairs[i] for i in idx), c.split)
    return out


def make_minibatches(corpus: ParallelCorpus, batch_size: int, seed: int) -> list[list[Pair]]:
    if batch_size < 1:
        raise SpecError("batch_size", "must be >= 1")
    order = np.random.default_rng(seed).permutation(len(corpus))
    pairs = [corpus.pairs[i] for i in order]
    return [pairs[i : i + batch_size] for i in range(0, len(pairs), batch_size)]


def edit_distance(a: Sequence, b: Sequence) -> int:
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]
