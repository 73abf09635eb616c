"""
Caption metrics over word tokens: BLEU-1..4, ROUGE-L, METEOR, plain CIDEr and
scene-graph semantic accuracy.

Public scores are scaled x100 (CIDEr's x10 cosine included, so a perfect CIDEr
reads 1000). Tokens are caption words with the sentence separator removed.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Sequence, Tuple

from .errors import DataError, InputError
from .recording import read_records, write_records
from .scenes import SEP, SYNONYM_CANON, SceneGraph

logger = logging.getLogger(__name__)

Tokens = Tuple[str, ...]
METRIC_SCHEMA = "rsmoe.metrics.v1"


def metric_tokens(text: str) -> Tokens:
    return tuple(w for w in text.lower().split() if w != SEP)


@dataclass(frozen=True)
class EvalCorpus:
    """Per image: one hypothesis and one or more references."""

    hypotheses: Tuple[Tokens, ...]
    references: Tuple[Tuple[Tokens, ...], ...]

    def __post_init__(self) -> None:
        if len(self.hypotheses) != len(self.references):
            raise InputError(f"{len(self.hypotheses)} hypotheses for {len(self.references)} reference sets")
        for i, refs in enumerate(self.references):
            if not refs:
                raise InputError(f"image {i} has no reference caption")

    def __len__(self) -> int:
        return len(self.hypotheses)

    @classmethod
    def from_texts(cls, hypotheses: Sequence[str], references: Sequence[Sequence[str]]) -> "EvalCorpus":
        return cls(
            hypotheses=tuple(metric_tokens(h) for h in hypotheses),
            references=tuple(tuple(metric_tokens(r) for r in refs) for refs in references),
        )


def _require(corpus: EvalCorpus) -> None:
    if len(corpus) == 0:
        raise InputError("empty evaluation corpus")


def ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


# --------------------------------------------------------------------------- BLEU


def bleu_counts(hyp: Sequence[str], refs: Sequence[Sequence[str]], n: int) -> Tuple[int, int]:
    """(clipped matches, hypothesis n-gram total) for one order n."""
    counts = ngram_counts(hyp, n)
    max_ref: Counter = Counter()
    for ref in refs:
        for gram, c in ngram_counts(ref, n).items():
            max_ref[gram] = max(max_ref[gram], c)
    return sum(min(c, max_ref[gram]) for gram, c in counts.items()), max(0, len(hyp) - n + 1)


def closest_ref_length(hyp_len: int, refs: Sequence[Sequence[str]]) -> int:
    return min((abs(len(r) - hyp_len), len(r)) for r in refs)[1]


def _bleu(corpus: EvalCorpus, n: int) -> float:
    matches = [0] * n
    totals = [0] * n
    hyp_len = ref_len = 0
    for hyp, refs in zip(corpus.hypotheses, corpus.references):
        hyp_len += len(hyp)
        ref_len += closest_ref_length(len(hyp), refs)
        for k in range(1, n + 1):
            m, t = bleu_counts(hyp, refs, k)
            matches[k - 1] += m
            totals[k - 1] += t
    if hyp_len == 0 or matches[0] == 0:
        return 0.0
    log_p = 0.0
    for k in range(n):
        if matches[k] == 0:
            log_p += math.log(1.0 / (totals[k] + 1))
        else:
            log_p += math.log(matches[k] / totals[k])
    bp = math.exp(min(0.0, 1.0 - ref_len / hyp_len))
    return bp * math.exp(log_p / n)


def bleu_n(corpus: EvalCorpus, n: int) -> float:
    if not 1 <= n <= 4:
        raise InputError(f"BLEU order must be in 1..4, got {n}")
    _require(corpus)
    return 100.0 * _bleu(corpus, n)


# --------------------------------------------------------------------------- ROUGE-L

ROUGE_BETA = 1.2


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_pair(hyp: Sequence[str], ref: Sequence[str], beta: float = ROUGE_BETA) -> float:
    if not hyp or not ref:
        return 0.0
    lcs = lcs_length(hyp, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(hyp), lcs / len(ref)
    return (1 + beta**2) * p * r / (r + beta**2 * p)


def rouge_l(corpus: EvalCorpus) -> float:
    _require(corpus)
    scores = [max(rouge_l_pair(h, r) for r in refs) for h, refs in zip(corpus.hypotheses, corpus.references)]
    return 100.0 * sum(scores) / len(scores)


# --------------------------------------------------------------------------- METEOR


def stem(word: str) -> str:
    if len(word) > 3 and word.endswith("s") and not word.endswith("ss"):
        return word[:-1]
    return word


def synonym_key(word: str) -> str:
    s = stem(word)
    return SYNONYM_CANON.get(word, SYNONYM_CANON.get(s, s))


_STAGES = (lambda w: w, stem, synonym_key)


def align(hyp: Sequence[str], ref: Sequence[str]) -> List[Tuple[int, int]]:
    """
    Staged greedy alignment (exact, stem, synonym). In each stage every
    unmatched hypothesis token, left to right, takes the first unmatched
    reference token with the same key.
    """
    hyp_free = [True] * len(hyp)
    ref_free = [True] * len(ref)
    pairs: List[Tuple[int, int]] = []
    for key in _STAGES:
        ref_keys = [key(w) for w in ref]
        for i, w in enumerate(hyp):
            if not hyp_free[i]:
                continue
            k = key(w)
            for j, rk in enumerate(ref_keys):
                if ref_free[j] and rk == k:
                    hyp_free[i] = ref_free[j] = False
                    pairs.append((i, j))
                    break
    return sorted(pairs)


def count_chunks(pairs: Sequence[Tuple[int, int]]) -> int:
    chunks = 0
    prev = None
    for i, j in pairs:
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def meteor_pair(hyp: Sequence[str], ref: Sequence[str]) -> float:
    pairs = align(hyp, ref)
    m = len(pairs)
    if m == 0:
        return 0.0
    p, r = m / len(hyp), m / len(ref)
    fmean = 10 * p * r / (r + 9 * p)
    penalty = 0.5 * (count_chunks(pairs) / m) ** 3
    return fmean * (1 - penalty)


def meteor(corpus: EvalCorpus) -> float:
    _require(corpus)
    scores = [max(meteor_pair(h, r) for r in refs) for h, refs in zip(corpus.hypotheses, corpus.references)]
    return 100.0 * sum(scores) / len(scores)


# --------------------------------------------------------------------------- CIDEr


def _cosine(a: Mapping[Tokens, float], b: Mapping[Tokens, float]) -> float:
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    if na == 0 or nb == 0:
        return 0.0
    return sum(v * b.get(g, 0.0) for g, v in a.items()) / (na * nb)


def cider_scores(corpus: EvalCorpus, max_n: int = 4) -> List[float]:
    """Per-image plain CIDEr on the x10 scale (no length damping, no clipping)."""
    _require(corpus)
    num_images = len(corpus)
    if num_images == 1:
        logger.warning("CIDEr on a single-image corpus: every idf is zero, score is 0")
    per_image = [0.0] * num_images
    for n in range(1, max_n + 1):
        df: Counter = Counter()
        for refs in corpus.references:
            df.update(set().union(*(ngram_counts(r, n).keys() for r in refs)))

        def vec(tokens: Sequence[str]) -> Dict[Tokens, float]:
            return {g: c * math.log(num_images / max(1, df[g])) for g, c in ngram_counts(tokens, n).items()}

        for i, (hyp, refs) in enumerate(zip(corpus.hypotheses, corpus.references)):
            vh = vec(hyp)
            per_image[i] += sum(10.0 * _cosine(vh, vec(r)) for r in refs) / len(refs) / max_n
    return per_image


def cider(corpus: EvalCorpus) -> float:
    scores = cider_scores(corpus)
    return 100.0 * sum(scores) / len(scores)


# --------------------------------------------------------------------------- reports


@dataclass(frozen=True)
class MetricReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    meteor: float
    rouge_l: float
    cider: float

    def as_record(self) -> Dict[str, float]:
        return {k: round(v, 6) for k, v in asdict(self).items()}


def evaluate_corpus(corpus: EvalCorpus) -> MetricReport:
    _require(corpus)
    return MetricReport(
        bleu1=bleu_n(corpus, 1),
        bleu2=bleu_n(corpus, 2),
        bleu3=bleu_n(corpus, 3),
        bleu4=bleu_n(corpus, 4),
        meteor=meteor(corpus),
        rouge_l=rouge_l(corpus),
        cider=cider(corpus),
    )


@dataclass(frozen=True)
class SemanticReport:
    theme_accuracy: float
    object_f1: float
    relation_f1: float

    def as_record(self) -> Dict[str, float]:
        return {k: round(v, 6) for k, v in asdict(self).items()}


def micro_f1(predicted: Sequence[Counter], truth: Sequence[Counter]) -> float:
    tp = sum(sum((p & t).values()) for p, t in zip(predicted, truth))
    n_pred = sum(sum(p.values()) for p in predicted)
    n_true = sum(sum(t.values()) for t in truth)
    if n_pred == 0 and n_true == 0:
        return 1.0
    if tp == 0:
        return 0.0
    precision, recall = tp / n_pred, tp / n_true
    return 2 * precision * recall / (precision + recall)


def semantic_accuracy(predicted: Sequence[SceneGraph], truth: Sequence[SceneGraph]) -> SemanticReport:
    """Theme accuracy and micro-F1 of (class, color, count) objects and canonical relations."""
    if len(predicted) != len(truth):
        raise InputError(f"{len(predicted)} predicted graphs for {len(truth)} ground-truth graphs")
    if not truth:
        raise InputError("empty evaluation corpus")
    pc = [g.canonical() for g in predicted]
    tc = [g.canonical() for g in truth]
    theme = sum(p[0] == t[0] for p, t in zip(pc, tc)) / len(tc)
    objects = micro_f1([Counter(p[1]) for p in pc], [Counter(t[1]) for t in tc])
    relations = micro_f1([Counter(p[2]) for p in pc], [Counter(t[2]) for t in tc])
    return SemanticReport(theme_accuracy=theme, object_f1=objects, relation_f1=relations)


def write_metric_report(path: str | Path, report: MetricReport, **header: object) -> Path:
    return write_records(path, {"schema": METRIC_SCHEMA, **header}, [report.as_record()])


def read_caption_file(path: str | Path) -> Dict[str, List[str]]:
    """`<image id>\\t<caption>` per line; an id may repeat (several references)."""
    p = Path(path)
    out: Dict[str, List[str]] = {}
    with p.open("r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            image_id, sep, caption = line.rstrip("\n").partition("\t")
            if not sep:
                raise DataError(f"{p}:{lineno}: expected '<image id><TAB><caption>'")
            out.setdefault(image_id.strip(), []).append(caption.strip())
    return out


def corpus_from_files(hyp_path: str | Path, ref_path: str | Path) -> Tuple[List[str], EvalCorpus]:
    hyps = read_caption_file(hyp_path)
    refs = read_caption_file(ref_path)
    missing = sorted(set(hyps) - set(refs))
    if missing:
        raise DataError(f"no references for image ids: {', '.join(missing[:5])}")
    ids = list(hyps)
    return ids, EvalCorpus.from_texts([hyps[i][0] for i in ids], [refs[i] for i in ids])


def read_metric_report(path: str | Path) -> MetricReport:
    _, records = read_records(path, schema=METRIC_SCHEMA)
    if len(records) != 1:
        raise DataError(f"{path}: expected one metric record, found {len(records)}")
    return MetricReport(**{k: float(v) for k, v in records[0].items()})
