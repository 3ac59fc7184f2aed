"""Vocabulary, tokenisation, corpus files and the synthetic style corpus.

Corpus files hold one JSON object per line: ``{"post": ..., "response": ...}``
for dialogue pairs and ``{"text": ...}`` for unpaired stylised texts.
"""

from __future__ import annotations

import json
import logging
import random
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

logger = logging.getLogger(__name__)

PAD, BOS, EOS, UNK, S0, S1 = 0, 1, 2, 3, 4, 5
SPECIALS = ["[PAD]", "[BOS]", "[EOS]", "[UNK]", "[S0]", "[S1]"]
STYLE_TOKENS = (S0, S1)

GRAMMAR_VERSION = "toy-dialogue-2"
MIN_SIZES = {"pairs": 2000, "unpaired": 1000, "test": 200}


class CorpusError(ValueError):
    """Malformed or empty corpus file."""


@dataclass(frozen=True)
class DialoguePair:
    post: str
    response: str


@dataclass(frozen=True)
class UnpairedText:
    text: str


class Vocab:
    """Token <-> id map with fixed special ids."""

    def __init__(self, tokens: Sequence[str], lowercase: bool = True):
        if list(tokens[: len(SPECIALS)]) != SPECIALS:
            raise ValueError("vocabulary must start with the special tokens")
        self.itos: list[str] = list(tokens)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")
        self.lowercase = lowercase

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos and self.lowercase == other.lowercase

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)


def _split(text: str, lowercase: bool) -> list[str]:
    return (text.lower() if lowercase else text).split()


def build_vocab(corpora: Iterable[str], cap: int = 8192, lowercase: bool = True) -> Vocab:
    """Frequency-ranked whitespace vocabulary; ties broken lexicographically."""
    counts: Counter[str] = Counter()
    n = 0
    for text in corpora:
        counts.update(_split(text, lowercase))
        n += 1
    if n == 0:
        raise CorpusError("build_vocab: no texts")
    for s in SPECIALS:
        counts.pop(s, None)
    ranked = sorted(counts, key=lambda t: (-counts[t], t))[:cap]
    return Vocab(SPECIALS + ranked, lowercase=lowercase)


def tokenize(text: str, vocab: Vocab) -> list[int]:
    return [BOS] + [vocab.id(t) for t in _split(text, vocab.lowercase)] + [EOS]


def detokenize(seq: Sequence[int], vocab: Vocab) -> str:
    """Inverse of :func:`tokenize`; stops at the first ``[EOS]``.

    Start tokens and padding are dropped, ``[UNK]`` is kept verbatim.
    """
    words = []
    for i in seq:
        i = int(i)
        if i == EOS:
            break
        if i in (PAD, BOS, S0, S1):
            continue
        words.append(vocab.itos[i])
    return " ".join(words)


# ---------------------------------------------------------------------------
# corpus files


def _read_records(path, required: tuple[str, ...]) -> list[dict]:
    path = Path(path)
    records = []
    blank = 0
    with open(path, encoding="utf-8", newline=None) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                blank += 1
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: invalid record ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise CorpusError(f"{path}:{lineno}: record is not an object")
            for key in required:
                value = obj.get(key)
                if not isinstance(value, str):
                    raise CorpusError(f"{path}:{lineno}: missing string field {key!r}")
                if not value.split():
                    raise CorpusError(f"{path}:{lineno}: field {key!r} is empty")
            records.append(obj)
    if blank:
        logger.info("%s: skipped %d blank lines", path, blank)
    if not records:
        raise CorpusError(f"{path}: no records")
    return records


def load_paired(path) -> list[DialoguePair]:
    return [DialoguePair(r["post"], r["response"]) for r in _read_records(path, ("post", "response"))]


def load_unpaired(path) -> list[UnpairedText]:
    return [UnpairedText(r["text"]) for r in _read_records(path, ("text",))]


def write_paired(path, pairs: Iterable[DialoguePair]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in pairs:
            fh.write(json.dumps({"post": p.post, "response": p.response}, ensure_ascii=False) + "\n")


def write_unpaired(path, texts: Iterable[UnpairedText]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in texts:
            fh.write(json.dumps({"text": t.text}, ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# synthetic corpus

NOUNS = (
    "apple river horse sword tea mountain garden letter lantern bridge "
    "village market song boat temple forest castle scroll window candle "
    "mirror cloud road flower wine stone bell drum feather map "
    "cat dog moon star door book coat ring bowl kite"
).split()
ADJECTIVES = (
    "red old quiet bright small famous green cold strange golden "
    "heavy gentle dark tall soft round silver hidden wild long"
).split()

# intent -> post templates; several posts can lead to the same response
POST_TEMPLATES = {
    "like": ["do you like the {a} {n} ?", "is the {a} {n} good ?", "how about the {a} {n} ?"],
    "seen": ["have you seen the {a} {n} today ?", "did you notice the {a} {n} ?"],
    "where": ["where is the {a} {n} ?", "can you find the {a} {n} ?"],
    "bought": ["i bought a {a} {n} yesterday", "look at my new {a} {n}"],
}
RESPONSE_TEMPLATES = {
    "like": ["yes i really like the {a} {n}", "no i do not like the {a} {n}"],
    "seen": ["yes i saw the {a} {n} this morning"],
    "where": ["the {a} {n} is near the {n2}"],
    "bought": ["wow the {a} {n} sounds great", "that {a} {n} is very nice"],
}

# function words of the plain style and their stylised replacements
STYLE_MAP = {
    "yes": "aye", "no": "nay", "i": "thy_servant", "really": "truly", "like": "fancy",
    "the": "yon", "do": "doth", "not": "nary", "saw": "beheld", "this": "ere",
    "morning": "morn", "is": "be", "near": "nigh", "wow": "lo", "sounds": "seemeth",
    "great": "grand", "that": "thine", "very": "most", "nice": "comely",
}
PREFIX_MARKERS = ("hark", "alas", "prithee")
SUFFIX_MARKERS = ("forsooth", "verily", "anon")


def stylize(response: str, rng: random.Random) -> str:
    """Render a plain response in the target style.

    Function words are swapped for their stylised counterparts and one marker
    is inserted at each end of the sentence.
    """
    words = [STYLE_MAP.get(w, w) for w in response.split()]
    return " ".join([rng.choice(PREFIX_MARKERS), *words, rng.choice(SUFFIX_MARKERS)])


def _sample_pair(rng: random.Random) -> DialoguePair:
    intent = rng.choice(sorted(POST_TEMPLATES))
    a, n = rng.choice(ADJECTIVES), rng.choice(NOUNS)
    n2 = rng.choice([x for x in NOUNS if x != n])
    post = rng.choice(POST_TEMPLATES[intent]).format(a=a, n=n)
    response = rng.choice(RESPONSE_TEMPLATES[intent]).format(a=a, n=n, n2=n2)
    return DialoguePair(post, response)


@dataclass
class SynthPaths:
    pairs: Path
    unpaired: Path
    test_s0: Path
    test_s1: Path
    manifest: Path


def synth_corpus(seed: int, out_dir, sizes: dict[str, int] | None = None) -> SynthPaths:
    """Write a synthetic two-style corpus to ``out_dir``.

    ``sizes`` has keys ``pairs`` (D_p), ``unpaired`` (D_s) and ``test``
    (D_t, split evenly between the two styles).
    """
    sizes = {"pairs": 5000, "unpaired": 2000, "test": 400, **(sizes or {})}
    for key, lo in MIN_SIZES.items():
        if sizes[key] < lo:
            raise ValueError(f"synth_corpus: {key} size {sizes[key]} below minimum {lo}")
    rng = random.Random(seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    pairs = [_sample_pair(rng) for _ in range(sizes["pairs"])]
    unpaired = [UnpairedText(stylize(_sample_pair(rng).response, rng)) for _ in range(sizes["unpaired"])]
    seen_s1 = {u.text for u in unpaired}

    n_s1 = sizes["test"] // 2
    test_s0 = [_sample_pair(rng) for _ in range(sizes["test"] - n_s1)]
    test_s1: list[DialoguePair] = []
    while len(test_s1) < n_s1:
        p = _sample_pair(rng)
        styled = stylize(p.response, rng)
        if styled in seen_s1:
            continue
        seen_s1.add(styled)
        test_s1.append(DialoguePair(p.post, styled))

    paths = SynthPaths(
        pairs=out / "pairs.jsonl",
        unpaired=out / "unpaired.jsonl",
        test_s0=out / "test_s0.jsonl",
        test_s1=out / "test_s1.jsonl",
        manifest=out / "manifest.txt",
    )
    write_paired(paths.pairs, pairs)
    write_unpaired(paths.unpaired, unpaired)
    write_paired(paths.test_s0, test_s0)
    write_paired(paths.test_s1, test_s1)
    with open(paths.manifest, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"seed={seed}\n")
        for key in ("pairs", "unpaired", "test"):
            fh.write(f"{key}={sizes[key]}\n")
        fh.write(f"grammar_version={GRAMMAR_VERSION}\n")
    return paths


def marker_vocab(style: int) -> set[str]:
    """Tokens that only occur in texts of the given synthetic style."""
    if style == 0:
        return set(STYLE_MAP) - set(STYLE_MAP.values())
    return set(STYLE_MAP.values()) | set(PREFIX_MARKERS) | set(SUFFIX_MARKERS)


def corpus_texts(*files) -> list[str]:
    """All string fields of every record in the given corpus files."""
    texts = []
    for f in files:
        with open(f, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    texts.extend(v for v in json.loads(line).values() if isinstance(v, str))
    return texts
