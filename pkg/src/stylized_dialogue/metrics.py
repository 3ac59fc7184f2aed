"""Automatic metrics: BLEU-1/2, Distinct-n, classifier style intensity, bootstrap test."""

from __future__ import annotations

import hashlib
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from sklearn.feature_extraction.text import CountVectorizer
from sklearn.linear_model import LogisticRegression

log = logging.getLogger(__name__)

Text = str | Sequence[str]


def _tokens(text: Text) -> list[str]:
    return text.split() if isinstance(text, str) else list(text)


def _ngrams(tokens: Sequence[str], n: int) -> list[tuple[str, ...]]:
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]


def bleu_stats(candidate: Text, reference: Text, n: int) -> tuple[list[int], list[int], int, int]:
    """Clipped matches and totals per order, plus candidate and reference lengths."""
    cand, ref = _tokens(candidate), _tokens(reference)
    matches, totals = [], []
    for k in range(1, n + 1):
        c, r = Counter(_ngrams(cand, k)), Counter(_ngrams(ref, k))
        matches.append(sum(min(cnt, r[g]) for g, cnt in c.items()))
        totals.append(max(len(cand) - k + 1, 0))
    return matches, totals, len(cand), len(ref)


def _bleu_from_stats(matches: Sequence[int], totals: Sequence[int], c_len: int, r_len: int) -> float:
    if c_len == 0 or matches[0] == 0:
        return 0.0
    log_p = math.log(matches[0] / totals[0])
    # add-one smoothing on orders above 1 so short outputs avoid hard zeros
    for m, t in zip(matches[1:], totals[1:]):
        log_p += math.log((m + 1) / (t + 1))
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return bp * math.exp(log_p / len(matches))


def bleu_n(candidates: Sequence[Text], references: Sequence[Text], n: int) -> float:
    """Corpus-level BLEU with uniform weights up to order ``n`` (1 or 2)."""
    if n not in (1, 2):
        raise ValueError(f"n must be 1 or 2, got {n}")
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates vs {len(references)} references")
    if not candidates:
        raise ValueError("bleu_n: empty corpus")
    matches, totals = [0] * n, [0] * n
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        m, t, c, r = bleu_stats(cand, ref, n)
        matches = [a + b for a, b in zip(matches, m)]
        totals = [a + b for a, b in zip(totals, t)]
        c_len += c
        r_len += r
    return _bleu_from_stats(matches, totals, c_len, r_len)


def sentence_bleu(candidate: Text, reference: Text, n: int) -> float:
    return _bleu_from_stats(*bleu_stats(candidate, reference, n))


def distinct_n(responses: Sequence[Text], n: int) -> float:
    """Unique n-grams over total n-grams, pooled across all responses."""
    if n < 1:
        raise ValueError("n must be >= 1")
    grams = [g for r in responses for g in _ngrams(_tokens(r), n)]
    if not grams:
        log.warning("distinct_n: no %d-grams in %d responses; returning 0", n, len(responses))
        return 0.0
    return len(set(grams)) / len(grams)


@dataclass
class StyleClassifier:
    """Logistic regression on binary 1-2 gram presence features."""

    vectorizer: CountVectorizer
    model: LogisticRegression
    n_s0: int
    n_s1: int
    heldout_accuracy: float
    seed: int = 0

    def base_rate(self, target: int) -> float:
        """Intensity the classifier assigns to a text with no known n-grams."""
        return float(self.model.predict(self.vectorizer.transform([""]))[0] == target)

    def predict(self, texts: Sequence[Text]) -> np.ndarray:
        docs = [" ".join(_tokens(t)) for t in texts]
        return self.model.predict(self.vectorizer.transform(docs)).astype(np.int64)

    def decision(self, texts: Sequence[Text]) -> np.ndarray:
        docs = [" ".join(_tokens(t)) for t in texts]
        return self.model.decision_function(self.vectorizer.transform(docs))


def _fit(s0: list[str], s1: list[str], seed: int) -> tuple[CountVectorizer, LogisticRegression]:
    vec = CountVectorizer(ngram_range=(1, 2), binary=True, token_pattern=r"\S+", lowercase=False)
    x = vec.fit_transform(s0 + s1)
    y = np.array([0] * len(s0) + [1] * len(s1))
    clf = LogisticRegression(class_weight="balanced", max_iter=1000, random_state=seed)
    clf.fit(x, y)
    return vec, clf


def train_style_classifier(
    texts_s0: Sequence[Text], texts_s1: Sequence[Text], holdout_frac: float = 0.1, seed: int = 0
) -> StyleClassifier:
    """Fit the classifier and record its accuracy on a seeded held-out split.

    Inputs are sorted first so the result does not depend on their order.
    The returned model is refit on all texts.
    """
    s0 = sorted(" ".join(_tokens(t)) for t in texts_s0)
    s1 = sorted(" ".join(_tokens(t)) for t in texts_s1)
    if not s0 or not s1:
        raise ValueError("train_style_classifier needs texts of both styles")
    if not 0.0 <= holdout_frac < 1.0:
        raise ValueError("holdout_frac must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    acc = float("nan")
    if holdout_frac > 0:
        split = []
        for texts in (s0, s1):
            idx = rng.permutation(len(texts))
            n_hold = int(round(holdout_frac * len(texts)))
            if n_hold == 0 or n_hold == len(texts):
                raise ValueError("holdout split leaves a class empty; use more data or another holdout_frac")
            split.append(([texts[i] for i in idx[n_hold:]], [texts[i] for i in idx[:n_hold]]))
        (tr0, ho0), (tr1, ho1) = split
        vec, clf = _fit(tr0, tr1, seed)
        pred = clf.predict(vec.transform(ho0 + ho1))
        acc = float((pred == np.array([0] * len(ho0) + [1] * len(ho1))).mean())
    vec, clf = _fit(s0, s1, seed)
    return StyleClassifier(vec, clf, len(s0), len(s1), acc, seed)


def style_intensity(clf: StyleClassifier, responses: Sequence[Text], target: int) -> float:
    """Fraction of ``responses`` the classifier assigns to style ``target``."""
    if target not in (0, 1):
        raise ValueError(f"target style must be 0 or 1, got {target!r}")
    if not responses:
        raise ValueError("style_intensity: no responses")
    return float((clf.predict(responses) == target).mean())


def bootstrap_test(scores_a: Sequence[float], scores_b: Sequence[float], resamples: int = 1000, seed: int = 0) -> float:
    """Two-sided paired bootstrap p-value for ``mean(a) - mean(b)``.

    Resampled mean differences are centred on the observed one to simulate
    the null; the p-value is the share at least as extreme as observed.
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired score lists differ in length: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("bootstrap_test: no items")
    if resamples < 1000:
        raise ValueError("resamples must be >= 1000")
    d = a - b
    observed = d.mean()
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, d.size, size=(resamples, d.size))
    means = d[idx].mean(axis=1)
    tol = 1e-12 * max(1.0, abs(observed))
    return float((np.abs(means - observed) >= abs(observed) - tol).mean())


# ---------------------------------------------------------------------------
# reports

COLUMNS = ("bleu1", "bleu2", "dist2", "clf", "clf2")
HEADERS = ("BLEU-1", "BLEU-2", "Dist.", "Clf.", "Clf.2")


@dataclass
class StyleScores:
    bleu1: float
    bleu2: float
    dist2: float
    clf: float
    clf2: float | None = None  # reserved for a second classifier
    n: int = 0


def score_style(
    responses: Sequence[Text], references: Sequence[Text], clf: StyleClassifier | None, target: int
) -> StyleScores:
    if len(responses) != len(references):
        raise ValueError(f"{len(responses)} responses vs {len(references)} references")
    return StyleScores(
        bleu1=bleu_n(responses, references, 1),
        bleu2=bleu_n(responses, references, 2),
        dist2=distinct_n(responses, 2),
        clf=style_intensity(clf, responses, target) if clf is not None else float("nan"),
        n=len(responses),
    )


def per_item_scores(
    responses: Sequence[Text], references: Sequence[Text], clf: StyleClassifier | None, target: int
) -> dict[str, np.ndarray]:
    """Item-level scores for paired significance tests."""
    out = {
        "bleu1": np.array([sentence_bleu(c, r, 1) for c, r in zip(responses, references)]),
        "bleu2": np.array([sentence_bleu(c, r, 2) for c, r in zip(responses, references)]),
        "dist2": np.array([distinct_n([c], 2) if len(_tokens(c)) >= 2 else 0.0 for c in responses]),
    }
    if clf is not None:
        out["clf"] = (clf.predict(responses) == target).astype(np.float64)
    return out


def config_hash(config: dict) -> str:
    text = "\n".join(f"{k}={config[k]}" for k in sorted(config))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _fmt(x: float | None) -> str:
    return "-" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.6f}"


@dataclass
class EvalReport:
    label: str
    styles: dict[str, StyleScores] = field(default_factory=dict)
    config_hash: str = ""
    extra: dict[str, str] = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"label={self.label}", f"config_hash={self.config_hash}"]
        for name in sorted(self.styles):
            s = self.styles[name]
            for col in COLUMNS:
                lines.append(f"{name}.{col}={_fmt(getattr(s, col))}")
            lines.append(f"{name}.n={s.n}")
        lines += [f"{k}={v}" for k, v in sorted(self.extra.items())]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        kv = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        rep = cls(kv.pop("label", ""), config_hash=kv.pop("config_hash", ""))
        names = sorted({k.split(".", 1)[0] for k in kv if k.endswith(".n")})
        for name in names:
            vals = {}
            for col in COLUMNS:
                raw = kv.pop(f"{name}.{col}", "-")
                vals[col] = None if raw == "-" else float(raw)
            if vals["clf"] is None:
                vals["clf"] = float("nan")
            rep.styles[name] = StyleScores(n=int(kv.pop(f"{name}.n")), **vals)
        rep.extra = kv
        return rep

    def table(self) -> str:
        """Scores x100 in the column order BLEU-1, BLEU-2, Dist., classifier."""
        head = f"{'':<16}" + "".join(f"{h:>9}" for h in HEADERS)
        rows = [head]
        for name in sorted(self.styles):
            s = self.styles[name]
            cells = []
            for col in COLUMNS:
                v = getattr(s, col)
                cells.append(f"{'-':>9}" if v is None or math.isnan(v) else f"{100 * v:>9.2f}")
            rows.append(f"{self.label + ':' + name:<16}" + "".join(cells))
        return "\n".join(rows)
