"""Comment corpus: records, CSV I/O, cleaning, transliteration, synthesis.

A corpus is an ordered, immutable collection of comment records belonging to
a train or test split. Train-split records always carry a binary label.
Text flows through three fields: raw_text as loaded, clean_text after markup
removal, translit_text after Latin-to-target-script rewriting.
"""

from __future__ import annotations

import csv
import re
import unicodedata
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np


class CorpusError(ValueError):
    """Base class for corpus construction and I/O failures."""


class MalformedRowError(CorpusError):
    pass


class DuplicateIdError(CorpusError):
    pass


class NegativeCountError(CorpusError):
    pass


class BadLabelError(CorpusError):
    pass


class BadMaxLenError(CorpusError):
    pass


class SplitMismatchError(CorpusError):
    pass


class IdMismatchError(CorpusError):
    pass


class BadProportionsError(CorpusError):
    pass


# Language codes the pipeline is prepared to see. Anything else folds into
# "other" so downstream per-language grouping stays closed over this set.
DEFAULT_LANGUAGES: tuple[str, ...] = (
    "hi", "ta", "te", "ml", "kn", "mr", "bn", "gu", "pa", "ur", "en", "other",
)
OTHER_LANGUAGE = "other"

TRAIN_SPLIT = "train"
TEST_SPLIT = "test"

CSV_HEADER = ("id", "text", "language", "like_count", "report_count", "label")


def normalize_language(code: str, registry: Sequence[str] = DEFAULT_LANGUAGES) -> str:
    """Map a raw language string onto the registry, defaulting to "other"."""
    code = code.strip().lower()
    return code if code in registry else OTHER_LANGUAGE


@dataclass(frozen=True)
class CommentRecord:
    """One comment with its metadata and optional binary label."""

    id: str
    raw_text: str
    language: str
    like_count: int
    report_count: int
    label: int | None = None
    clean_text: str = ""
    translit_text: str = ""

    def __post_init__(self) -> None:
        if not self.id:
            raise MalformedRowError("record id must be non-empty")
        if self.like_count < 0 or self.report_count < 0:
            raise NegativeCountError(
                f"record {self.id}: negative count "
                f"(likes={self.like_count}, reports={self.report_count})"
            )
        if self.label is not None and self.label not in (0, 1):
            raise BadLabelError(f"record {self.id}: label must be 0 or 1, got {self.label}")


@dataclass(frozen=True)
class Corpus:
    """Ordered record collection tied to a train or test split."""

    records: tuple[CommentRecord, ...]
    split: str

    def __post_init__(self) -> None:
        if self.split not in (TRAIN_SPLIT, TEST_SPLIT):
            raise CorpusError(f"split must be train or test, got {self.split!r}")
        seen: set[str] = set()
        for rec in self.records:
            if rec.id in seen:
                raise DuplicateIdError(f"duplicate record id {rec.id!r}")
            seen.add(rec.id)
        if self.split == TRAIN_SPLIT:
            for rec in self.records:
                if rec.label is None:
                    raise BadLabelError(f"train record {rec.id!r} is missing its label")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[CommentRecord]:
        return iter(self.records)

    def ids(self) -> list[str]:
        return [rec.id for rec in self.records]

    def languages(self) -> list[str]:
        return [rec.language for rec in self.records]

    def labels(self) -> np.ndarray:
        """Label vector; raises if any record is unlabeled."""
        out = np.empty(len(self.records), dtype=np.int64)
        for i, rec in enumerate(self.records):
            if rec.label is None:
                raise BadLabelError(f"record {rec.id!r} has no label")
            out[i] = rec.label
        return out

    def with_records(self, records: Iterable[CommentRecord]) -> "Corpus":
        return Corpus(records=tuple(records), split=self.split)


def strip_labels(corpus: Corpus) -> Corpus:
    """Return a test-split copy with labels removed (held-out evaluation)."""
    return Corpus(
        records=tuple(replace(rec, label=None) for rec in corpus.records),
        split=TEST_SPLIT,
    )


def relabel(corpus: Corpus, labels: Sequence[int]) -> Corpus:
    """Return a copy with the label column replaced, order preserved."""
    if len(labels) != len(corpus.records):
        raise BadLabelError(
            f"label vector length {len(labels)} != corpus size {len(corpus.records)}"
        )
    return corpus.with_records(
        replace(rec, label=int(lab)) for rec, lab in zip(corpus.records, labels)
    )


# ---------------------------------------------------------------------------
# CSV I/O
#
# Layout: header id,text,language,like_count,report_count,label then one row
# per record. Fields containing commas, quotes, or newlines are quoted with
# doubled-quote escaping. Label column is empty for unlabeled records.
# ---------------------------------------------------------------------------


def load_corpus(path: str, split: str) -> Corpus:
    records: list[CommentRecord] = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MalformedRowError(f"{path}: empty file, expected a header row")
        if tuple(header) != CSV_HEADER:
            raise MalformedRowError(
                f"{path}: bad header {header!r}, expected {','.join(CSV_HEADER)}"
            )
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(CSV_HEADER):
                raise MalformedRowError(
                    f"{path}:{lineno}: expected {len(CSV_HEADER)} fields, got {len(row)}"
                )
            rec_id, text, language, likes_s, reports_s, label_s = row
            try:
                likes = int(likes_s)
                reports = int(reports_s)
            except ValueError:
                raise MalformedRowError(
                    f"{path}:{lineno}: counts must be integers, "
                    f"got {likes_s!r}/{reports_s!r}"
                )
            if label_s == "":
                label: int | None = None
            elif label_s in ("0", "1"):
                label = int(label_s)
            else:
                raise BadLabelError(f"{path}:{lineno}: label must be 0, 1, or empty, got {label_s!r}")
            if split == TRAIN_SPLIT and label is None:
                raise BadLabelError(f"{path}:{lineno}: train split requires a label")
            records.append(
                CommentRecord(
                    id=rec_id,
                    raw_text=text,
                    language=normalize_language(language),
                    like_count=likes,
                    report_count=reports,
                    label=label,
                )
            )
    return Corpus(records=tuple(records), split=split)


def save_corpus(corpus: Corpus, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for rec in corpus.records:
            writer.writerow(
                [
                    rec.id,
                    rec.raw_text,
                    rec.language,
                    rec.like_count,
                    rec.report_count,
                    "" if rec.label is None else rec.label,
                ]
            )


# ---------------------------------------------------------------------------
# Text cleaning
# ---------------------------------------------------------------------------

_TAG_RE = re.compile(r"<[^>]*>")
_WS_RE = re.compile(r"\s+")

# Decoded in this order within a pass; &amp; last so "&amp;lt;" becomes
# "&lt;" rather than "<" in a single pass.
_ENTITIES = (
    ("&lt;", "<"),
    ("&gt;", ">"),
    ("&quot;", '"'),
    ("&apos;", "'"),
    ("&amp;", "&"),
)


def _clean_pass(text: str) -> str:
    text = _TAG_RE.sub("", text)
    for entity, char in _ENTITIES:
        text = text.replace(entity, char)
    return _WS_RE.sub(" ", text).strip()


def clean_text(raw: str) -> str:
    """Strip markup tags, decode the five named entities, collapse whitespace.

    Entity decoding can surface new tags (and vice versa), so the pass is
    iterated to a fixpoint; every changed pass strictly shrinks the string,
    so the loop terminates. The result is idempotent by construction.
    """
    text = raw
    while True:
        cleaned = _clean_pass(text)
        if cleaned == text:
            return cleaned
        text = cleaned


def clean_corpus(corpus: Corpus) -> Corpus:
    return corpus.with_records(
        replace(rec, clean_text=clean_text(rec.raw_text)) for rec in corpus.records
    )


# ---------------------------------------------------------------------------
# Transliteration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TransliterationTable:
    """Ordered longest-match rules from Latin substrings to a target script."""

    target: str
    rules: tuple[tuple[str, str], ...]

    def __post_init__(self) -> None:
        if not self.rules:
            raise CorpusError("transliteration table needs at least one rule")
        for src, _ in self.rules:
            if not src:
                raise CorpusError("transliteration rule with empty source")
        # Normalize to longest-source-first so a plain linear scan realizes
        # longest-match-then-rule-order semantics.
        ordered = sorted(
            enumerate(self.rules), key=lambda item: (-len(item[1][0]), item[0])
        )
        object.__setattr__(self, "rules", tuple(rule for _, rule in ordered))


def transliterate(text: str, table: TransliterationTable) -> str:
    """Rewrite Latin runs via the table; unmatched characters pass through.

    Matching is case-insensitive over the rule sources (stored lowercase);
    at each position the longest matching source wins, ties broken by rule
    order in the original table.
    """
    lowered = text.lower()
    out: list[str] = []
    i = 0
    n = len(text)
    while i < n:
        matched = False
        for src, dst in table.rules:
            if lowered.startswith(src, i):
                out.append(dst)
                i += len(src)
                matched = True
                break
        if not matched:
            out.append(text[i])
            i += 1
    return "".join(out)


# Latin-to-Devanagari table. Mechanical longest-match rules: common syllables
# first (so frequent words come out as natural conjuncts), then digraphs,
# then single letters. Output contains no Latin letters, which makes the
# mapping idempotent.
HINDI_TABLE = TransliterationTable(
    target="deva",
    rules=(
        # frequent whole syllables / clusters
        ("ste", "स्ते"), ("stha", "स्था"), ("sthi", "स्थि"), ("ksha", "क्ष"),
        ("gya", "ज्ञ"), ("tra", "त्र"), ("shri", "श्री"), ("pra", "प्र"),
        ("kya", "क्या"), ("hai", "है"), ("hain", "हैं"), ("nahi", "नही"),
        ("tum", "तुम"), ("aap", "आप"), ("kar", "कर"), ("yaar", "यार"),
        ("bha", "भा"), ("bhi", "भी"), ("bhe", "भे"), ("bho", "भो"),
        ("kha", "खा"), ("khi", "खि"), ("kho", "खो"), ("khu", "खु"),
        ("gha", "घा"), ("ghi", "घि"), ("cha", "चा"), ("chi", "चि"),
        ("chha", "छा"), ("jha", "झा"), ("tha", "था"), ("thi", "थि"),
        ("dha", "धा"), ("dhi", "धि"), ("pha", "फा"), ("sha", "शा"),
        ("shi", "शि"), ("na", "न"), ("ma", "म"),
        ("sa", "स"), ("ta", "त"), ("ka", "क"), ("ga", "ग"),
        ("ja", "ज"), ("da", "द"), ("pa", "प"), ("ba", "ब"),
        ("ra", "र"), ("la", "ल"), ("va", "व"), ("wa", "वा"),
        ("ha", "ह"), ("ya", "य"),
        ("ne", "ने"), ("me", "मे"), ("se", "से"), ("te", "ते"),
        ("ke", "के"), ("ge", "गे"), ("je", "जे"), ("de", "दे"),
        ("pe", "पे"), ("be", "बे"), ("re", "रे"), ("le", "ले"),
        ("ve", "वे"), ("he", "हे"), ("ye", "ये"),
        ("ni", "नि"), ("mi", "मि"), ("si", "सि"), ("ti", "ति"),
        ("ki", "कि"), ("gi", "गि"), ("ji", "जि"), ("di", "दि"),
        ("pi", "पि"), ("bi", "बि"), ("ri", "रि"), ("li", "लि"),
        ("vi", "वि"), ("hi", "हि"), ("yi", "यि"),
        ("no", "नो"), ("mo", "मो"), ("so", "सो"), ("to", "तो"),
        ("ko", "को"), ("go", "गो"), ("jo", "जो"), ("do", "दो"),
        ("po", "पो"), ("bo", "बो"), ("ro", "रो"), ("lo", "लो"),
        ("vo", "वो"), ("ho", "हो"), ("yo", "यो"),
        ("nu", "नु"), ("mu", "मु"), ("su", "सु"), ("tu", "तु"),
        ("ku", "कु"), ("gu", "गु"), ("ju", "जु"), ("du", "दु"),
        ("pu", "पु"), ("bu", "बु"), ("ru", "रु"), ("lu", "लु"),
        ("vu", "वु"), ("hu", "हु"), ("yu", "यु"),
        # digraph consonants and long vowels
        ("kh", "ख"), ("gh", "घ"), ("chh", "छ"), ("ch", "च"),
        ("jh", "झ"), ("th", "थ"), ("dh", "ध"), ("ph", "फ"),
        ("bh", "भ"), ("sh", "श"), ("aa", "आ"), ("ee", "ई"),
        ("ii", "ई"), ("oo", "ऊ"), ("uu", "ऊ"), ("ai", "ऐ"),
        ("au", "औ"), ("an", "अं"),
        # single letters
        ("a", "अ"), ("b", "ब"), ("c", "क"), ("d", "द"), ("e", "ए"),
        ("f", "फ"), ("g", "ग"), ("h", "ह"), ("i", "इ"), ("j", "ज"),
        ("k", "क"), ("l", "ल"), ("m", "म"), ("n", "न"), ("o", "ओ"),
        ("p", "प"), ("q", "क"), ("r", "र"), ("s", "स"), ("t", "त"),
        ("u", "उ"), ("v", "व"), ("w", "व"), ("x", "क्स"), ("y", "य"),
        ("z", "ज़"),
    ),
)

# Pass-through table: single identity rule keeps the scan well-formed while
# leaving every character unchanged.
IDENTITY_TABLE = TransliterationTable(target="latin", rules=((chr(0), chr(0)),))

TRANSLITERATORS: Mapping[str, TransliterationTable] = {
    "hindi": HINDI_TABLE,
    "identity": IDENTITY_TABLE,
}


def transliterate_corpus(corpus: Corpus, table: TransliterationTable) -> Corpus:
    return corpus.with_records(
        replace(rec, translit_text=transliterate(rec.clean_text, table))
        for rec in corpus.records
    )


# ---------------------------------------------------------------------------
# Model-text composition and oversampling
# ---------------------------------------------------------------------------


def compose_model_text(record: CommentRecord, max_len: int) -> str:
    """Join cleaned and transliterated text, truncated to max_len code points."""
    if max_len <= 0:
        raise BadMaxLenError(f"max_len must be positive, got {max_len}")
    parts = [p for p in (record.clean_text, record.translit_text) if p]
    return " ".join(parts)[:max_len]


def merge_oversample(original: Corpus, cleaned: Corpus) -> Corpus:
    """Concatenate two aligned views of the same records, doubling the corpus.

    Ids gain #raw / #clean suffixes so the merge stays collision-free.
    """
    if original.split != cleaned.split:
        raise SplitMismatchError(
            f"splits differ: {original.split} vs {cleaned.split}"
        )
    if sorted(original.ids()) != sorted(cleaned.ids()):
        raise IdMismatchError("the two corpora do not hold the same record ids")
    merged = [replace(rec, id=rec.id + "#raw") for rec in original.records]
    merged += [replace(rec, id=rec.id + "#clean") for rec in cleaned.records]
    return Corpus(records=tuple(merged), split=original.split)


def partition_by_language(corpus: Corpus) -> dict[str, Corpus]:
    """Split into per-language corpora, keys in order of first appearance."""
    groups: dict[str, list[CommentRecord]] = {}
    for rec in corpus.records:
        groups.setdefault(rec.language, []).append(rec)
    return {
        lang: Corpus(records=tuple(recs), split=corpus.split)
        for lang, recs in groups.items()
    }


# ---------------------------------------------------------------------------
# Synthetic corpora
#
# Each language has a private benign lexicon plus a window into a shared
# pool; words inside the window are that language's abusive vocabulary.
# Windows overlap across languages, so a word that marks abuse in one
# language shows up as harmless filler in another. That conflict is what
# makes per-language models beat a pooled one on this data.
# ---------------------------------------------------------------------------

_SHARED_POOL = tuple(f"zix{i}" for i in range(24))
_ABUSIVE_WINDOW = 8
_ABUSIVE_STRIDE = 6


def abusive_lexicon(language: str) -> frozenset[str]:
    """The set of words that make a synthetic comment abusive in a language."""
    rank = hash_rank(language)
    start = (rank * _ABUSIVE_STRIDE) % len(_SHARED_POOL)
    idx = [(start + j) % len(_SHARED_POOL) for j in range(_ABUSIVE_WINDOW)]
    return frozenset(_SHARED_POOL[j] for j in idx)


def hash_rank(language: str) -> int:
    """Stable small integer per language (registry position, else char sum)."""
    if language in DEFAULT_LANGUAGES:
        return DEFAULT_LANGUAGES.index(language)
    return sum(language.encode("utf-8")) % 97


def implied_label(record: CommentRecord, tokenizer) -> int:
    """Label the generating lexicon assigns to a record's raw text."""
    lex = abusive_lexicon(record.language)
    return int(any(tok in lex for tok in tokenizer(record.raw_text)))


def synthesize_corpus(
    n: int,
    languages: Sequence[tuple[str, float]],
    noise_rate: float,
    seed: int,
) -> tuple[Corpus, frozenset[str]]:
    """Generate a labeled corpus with exactly round(noise_rate*n) label flips.

    Returns the corpus and the set of flipped record ids. Stored labels match
    the lexicon-implied labels except on the flip set.
    """
    if n <= 0:
        raise CorpusError(f"n must be positive, got {n}")
    if not languages:
        raise BadProportionsError("need at least one language")
    props = np.array([p for _, p in languages], dtype=np.float64)
    if np.any(props < 0) or abs(props.sum() - 1.0) > 1e-9:
        raise BadProportionsError(
            f"proportions must be non-negative and sum to 1, got {props.tolist()}"
        )
    if not 0.0 <= noise_rate <= 1.0:
        raise CorpusError(f"noise_rate must be in [0, 1], got {noise_rate}")

    rng = np.random.default_rng(seed)
    codes = [normalize_language(code) for code, _ in languages]
    lang_idx = rng.choice(len(codes), size=n, p=props)

    benign_pools = {
        lang: tuple(f"{lang}w{i}" for i in range(12)) for lang in set(codes)
    }
    abusive_pools = {lang: tuple(sorted(abusive_lexicon(lang))) for lang in set(codes)}
    outside_pools = {
        lang: tuple(w for w in _SHARED_POOL if w not in abusive_lexicon(lang))
        for lang in set(codes)
    }

    records: list[CommentRecord] = []
    true_labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        lang = codes[int(lang_idx[i])]
        abusive = bool(rng.random() < 0.5)
        n_tokens = int(rng.integers(4, 11))
        benign = benign_pools[lang]
        tokens = [benign[int(j)] for j in rng.integers(0, len(benign), size=n_tokens)]
        # benign comments borrow other languages' abusive words as filler,
        # abusive ones draw 1-3 words from their own window
        if abusive:
            count = int(rng.integers(1, 4))
            pool = abusive_pools[lang]
            for j in rng.integers(0, len(pool), size=count):
                tokens[int(rng.integers(0, len(tokens)))] = pool[int(j)]
        elif rng.random() < 0.6:
            count = int(rng.integers(1, 3))
            pool = outside_pools[lang]
            for j in rng.integers(0, len(pool), size=count):
                tokens[int(rng.integers(0, len(tokens)))] = pool[int(j)]
        text = " ".join(tokens)
        decoration = rng.random()
        if decoration < 0.05:
            text = "<b>" + text + "</b>"
        elif decoration < 0.10:
            text = text + " &amp; more"
        true = int(abusive)
        true_labels[i] = true
        likes = int(rng.poisson(3.0))
        reports = int(rng.poisson(0.3 + 3.0 * true))
        records.append(
            CommentRecord(
                id=f"s{i:06d}",
                raw_text=text,
                language=lang,
                like_count=likes,
                report_count=reports,
                label=true,
            )
        )

    flip_count = int(round(noise_rate * n))
    flip_pos = rng.choice(n, size=flip_count, replace=False) if flip_count else np.array([], dtype=np.int64)
    flip_ids = frozenset(records[int(p)].id for p in flip_pos)
    for p in flip_pos:
        p = int(p)
        records[p] = replace(records[p], label=1 - true_labels[p])

    return Corpus(records=tuple(records), split=TRAIN_SPLIT), flip_ids
