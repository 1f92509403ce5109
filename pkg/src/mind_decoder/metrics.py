"""Captioning metrics: corpus BLEU, ROUGE-L, exact-match METEOR and CIDEr-D.

Every metric takes candidates as token lists (or raw text, tokenized with ``tokenize_for_metrics``)
and one list of references per candidate. Scores are reported on a x100 scale.
"""

import csv
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

from mind_decoder.dataset import Dataset
from mind_decoder.errors import ExportError, InvalidArgumentError, MissingArtifactError, SampleIdError
from mind_decoder.utils import tokenize_text, write_json

logger = logging.getLogger(__name__)

ROUGE_BETA = 1.2
CIDER_SIGMA = 6.0
CIDER_MAX_N = 4
METEOR_LABEL = "METEOR-ex"

Tokens = Sequence[str]
TextOrTokens = Union[str, Tokens]


def tokenize_for_metrics(text: str) -> List[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    return tokenize_text(text)


def _tokens(value: TextOrTokens) -> Tuple[str, ...]:
    return tuple(tokenize_for_metrics(value)) if isinstance(value, str) else tuple(value)


def _prepare(candidates: Sequence[TextOrTokens], references: Sequence[Sequence[TextOrTokens]]):
    if len(candidates) != len(references):
        raise InvalidArgumentError(f"{len(candidates)} candidates but {len(references)} reference sets")
    cands = [_tokens(c) for c in candidates]
    refs = [[_tokens(r) for r in rs] for rs in references]
    for index, rs in enumerate(refs):
        if not rs:
            raise InvalidArgumentError(f"candidate {index} has no reference")
    return cands, refs


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _mean(values: Sequence[float]) -> float:
    return math.fsum(values) / len(values) if values else 0.0


#######################################
# BLEU
#######################################

def _closest_ref_length(candidate_length: int, references: Sequence[Tokens]) -> int:
    # ties go to the shorter reference
    return min((abs(len(r) - candidate_length), len(r)) for r in references)[1]


def _bleu_statistics(candidate: Tokens, references: Sequence[Tokens], n_max: int):
    matches, totals = [], []
    for n in range(1, n_max + 1):
        counts = ngrams(candidate, n)
        max_ref: Counter = Counter()
        for ref in references:
            max_ref |= ngrams(ref, n)
        matches.append(sum(min(count, max_ref[gram]) for gram, count in counts.items()))
        totals.append(max(0, len(candidate) - n + 1))
    return matches, totals, len(candidate), _closest_ref_length(len(candidate), references)


def _bleu_from_statistics(matches: Sequence[int], totals: Sequence[int], c: int, r: int) -> float:
    if c == 0 or any(t == 0 or m == 0 for m, t in zip(matches, totals)):
        return 0.0
    log_precision = math.fsum(math.log(m / t) for m, t in zip(matches, totals)) / len(matches)
    brevity = 1.0 if c > r else math.exp(1.0 - r / c)
    return 100.0 * brevity * math.exp(log_precision)


def bleu(candidates: Sequence[TextOrTokens], references: Sequence[Sequence[TextOrTokens]], n_max: int = 4) -> float:
    """Corpus BLEU: clipped n-gram counts pooled over the corpus, closest-reference brevity penalty.

    A lone candidate shorter than ``n_max`` has no ``n_max``-grams and scores 0, even against itself.
    """
    if n_max < 1:
        raise InvalidArgumentError("n_max must be >= 1")
    cands, refs = _prepare(candidates, references)
    matches, totals = [0] * n_max, [0] * n_max
    c = r = 0
    for candidate, rs in zip(cands, refs):
        m, t, cl, rl = _bleu_statistics(candidate, rs, n_max)
        matches = [a + b for a, b in zip(matches, m)]
        totals = [a + b for a, b in zip(totals, t)]
        c += cl
        r += rl
    return _bleu_from_statistics(matches, totals, c, r)


def sentence_bleu(candidate: TextOrTokens, references: Sequence[TextOrTokens], n_max: int = 4) -> float:
    return bleu([candidate], [references], n_max)


#######################################
# ROUGE-L
#######################################

def lcs_length(a: Tokens, b: Tokens) -> int:
    previous = [0] * (len(b) + 1)
    for x in a:
        current = [0]
        for j, y in enumerate(b):
            current.append(previous[j] + 1 if x == y else max(previous[j + 1], current[j]))
        previous = current
    return previous[-1]


def rouge_l_pair(candidate: Tokens, reference: Tokens, beta: float = ROUGE_BETA) -> float:
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    precision = lcs / len(candidate)
    recall = lcs / len(reference)
    return (1 + beta ** 2) * precision * recall / (recall + beta ** 2 * precision)


def rouge_l_scores(candidates, references) -> List[float]:
    cands, refs = _prepare(candidates, references)
    return [100.0 * max(rouge_l_pair(c, r) for r in rs) for c, rs in zip(cands, refs)]


def rouge_l(candidates: Sequence[TextOrTokens], references: Sequence[Sequence[TextOrTokens]]) -> float:
    """Mean over candidates of the best LCS F-measure (beta 1.2) against any reference."""
    return _mean(rouge_l_scores(candidates, references))


#######################################
# METEOR (exact matching only)
#######################################

def align_exact(candidate: Tokens, reference: Tokens) -> Tuple[int, int]:
    """(matches, chunks) of the exact unigram alignment with most matches, then fewest chunks.

    A chunk is a maximal run of matches adjacent in both candidate and reference.
    """
    positions = {}
    for j, word in enumerate(reference):
        positions.setdefault(word, []).append(j)

    @lru_cache(maxsize=None)
    def best(i: int, used: int, last: int) -> Tuple[int, int]:
        # returns (matches, -chunks) for candidate[i:], ``last`` is the reference slot matched at i-1
        if i == len(candidate):
            return 0, 0
        result = best(i + 1, used, -1)
        for j in positions.get(candidate[i], ()):
            if used >> j & 1:
                continue
            matches, neg_chunks = best(i + 1, used | 1 << j, j)
            opens_chunk = last < 0 or j != last + 1
            option = (matches + 1, neg_chunks - (1 if opens_chunk else 0))
            if option > result:
                result = option
        return result

    matches, neg_chunks = best(0, 0, -1)
    return matches, -neg_chunks


def meteor_pair(candidate: Tokens, reference: Tokens) -> float:
    matches, chunks = align_exact(candidate, reference)
    if matches == 0:
        return 0.0
    precision = matches / len(candidate)
    recall = matches / len(reference)
    f_mean = 10 * precision * recall / (recall + 9 * precision)
    penalty = 0.5 * (chunks / matches) ** 3
    return f_mean * (1.0 - penalty)


def meteor_scores(candidates, references) -> List[float]:
    cands, refs = _prepare(candidates, references)
    return [100.0 * max(meteor_pair(c, r) for r in rs) for c, rs in zip(cands, refs)]


def meteor_simplified(candidates: Sequence[TextOrTokens], references: Sequence[Sequence[TextOrTokens]]) -> float:
    """METEOR without stemming or synonyms; reported as METEOR-ex."""
    return _mean(meteor_scores(candidates, references))


#######################################
# CIDEr-D
#######################################

def _tfidf(counts: Counter, idf: Mapping[tuple, float]) -> Dict[tuple, float]:
    return {gram: count * idf[gram] for gram, count in counts.items()}


def _norm(vector: Mapping[tuple, float]) -> float:
    return math.sqrt(math.fsum(v * v for v in vector.values()))


def cider_scores(
    candidates: Sequence[TextOrTokens],
    references: Sequence[Sequence[TextOrTokens]],
    sigma: float = CIDER_SIGMA,
) -> List[float]:
    """Per-image CIDEr-D (x10 scale); the document set is the corpus of reference sets."""
    cands, refs = _prepare(candidates, references)
    n_images = len(cands)
    if n_images == 1:
        logger.warning("CIDEr on a single-image corpus: IDF weights are degenerate")

    scores = [[0.0] * len(rs) for rs in refs]
    for n in range(1, CIDER_MAX_N + 1):
        ref_counts = [[ngrams(r, n) for r in rs] for rs in refs]
        document_frequency: Counter = Counter()
        for counts in ref_counts:
            document_frequency.update(set().union(*counts))

        def idf_of(gram: tuple) -> float:
            return math.log(n_images / (1.0 + document_frequency[gram]))

        for i, candidate in enumerate(cands):
            cand_counts = ngrams(candidate, n)
            idf = {gram: idf_of(gram) for gram in set(cand_counts).union(*ref_counts[i])}
            cand_vec = _tfidf(cand_counts, idf)
            cand_norm = _norm(cand_vec)
            for k, (reference, counts) in enumerate(zip(refs[i], ref_counts[i])):
                ref_vec = _tfidf(counts, idf)
                ref_norm = _norm(ref_vec)
                if cand_norm == 0.0 or ref_norm == 0.0:
                    continue
                # clip on raw counts; idf may be negative
                dot = math.fsum(
                    min(cand_counts[g], counts[g]) * idf[g] * ref_vec[g] for g in cand_counts if g in counts
                )
                delta = len(candidate) - len(reference)
                penalty = math.exp(-(delta ** 2) / (2 * sigma ** 2))
                scores[i][k] += penalty * dot / (cand_norm * ref_norm)
    return [10.0 * _mean(per_ref) / CIDER_MAX_N for per_ref in scores]


def cider(candidates: Sequence[TextOrTokens], references: Sequence[Sequence[TextOrTokens]]) -> float:
    """Corpus CIDEr-D, reported x100."""
    return 100.0 * _mean(cider_scores(candidates, references))


#######################################
# Reports and prediction files
#######################################

@dataclass
class SampleScores:
    sample_id: str
    candidate: str
    bleu1: float
    bleu4: float
    rouge_l: float
    meteor: float
    cider: float


@dataclass
class MetricReport:
    b1: float
    b4: float
    rouge_l: float
    meteor: float
    cider: float
    n_candidates: int
    references_per_candidate: List[int] = field(default_factory=list)
    per_sample: List[SampleScores] = field(default_factory=list)
    meteor_label: str = METEOR_LABEL

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: Mapping) -> "MetricReport":
        payload = dict(payload)
        payload["per_sample"] = [SampleScores(**row) for row in payload.get("per_sample", [])]
        return cls(**payload)

    def columns(self) -> Dict[str, float]:
        return {"B@1": self.b1, "B@4": self.b4, "ROUGE-L": self.rouge_l, self.meteor_label: self.meteor, "CIDEr": self.cider}


def write_predictions(rows: Sequence[Tuple[str, str]], path: Union[str, Path]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, delimiter="\t", lineterminator="\n", quoting=csv.QUOTE_NONE, escapechar="\\")
            for sample_id, text in rows:
                writer.writerow([sample_id, text])
    except OSError as e:
        raise ExportError(f"cannot write predictions to {path}: {e}") from e
    return path


def read_predictions(path: Union[str, Path]) -> List[Tuple[str, str]]:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(f"prediction file not found: {path}")
    rows = []
    with open(path, encoding="utf-8", newline="") as f:
        for line_number, row in enumerate(csv.reader(f, delimiter="\t", quoting=csv.QUOTE_NONE, escapechar="\\"), 1):
            if not row:
                continue
            if len(row) > 2:
                raise InvalidArgumentError(f"{path}:{line_number}: expected 'sample_id<TAB>caption'")
            rows.append((row[0], row[1] if len(row) == 2 else ""))
    return rows


def _reference_lookup(dataset: Dataset) -> Dict[str, Tuple[str, ...]]:
    lookup = {}
    for sample in dataset.samples:
        # averaged predictions are keyed by stimulus id
        lookup.setdefault(sample.stimulus_id, dataset.reference_texts(sample))
    for sample in dataset.samples:
        lookup[sample.sample_id] = dataset.reference_texts(sample)
    return lookup


def evaluate_corpus(
    predictions: Union[str, Path, Sequence[Tuple[str, str]]],
    dataset: Dataset,
    out_path: Optional[Union[str, Path]] = None,
) -> MetricReport:
    """Score predictions against every reference caption of their stimulus."""
    rows = read_predictions(predictions) if isinstance(predictions, (str, Path)) else list(predictions)
    counts = Counter(sample_id for sample_id, _ in rows)
    duplicates = sorted(sample_id for sample_id, count in counts.items() if count > 1)
    if duplicates:
        raise SampleIdError(f"duplicate sample ids in predictions: {duplicates}", {"sample_ids": duplicates})
    lookup = _reference_lookup(dataset)
    unknown = sorted(sample_id for sample_id in counts if sample_id not in lookup)
    if unknown:
        raise SampleIdError(f"unknown sample ids in predictions: {unknown}", {"sample_ids": unknown})

    rows.sort(key=lambda row: row[0])
    candidates = [tokenize_for_metrics(text) for _, text in rows]
    references = [[tokenize_for_metrics(r) for r in lookup[sample_id]] for sample_id, _ in rows]

    if not rows:
        report = MetricReport(0.0, 0.0, 0.0, 0.0, 0.0, 0)
    else:
        rouge = rouge_l_scores(candidates, references)
        meteor = meteor_scores(candidates, references)
        cider_per_image = cider_scores(candidates, references)
        per_sample = [
            SampleScores(
                sample_id=sample_id,
                candidate=" ".join(candidate),
                bleu1=sentence_bleu(candidate, refs, 1),
                bleu4=sentence_bleu(candidate, refs, 4),
                rouge_l=rouge[i],
                meteor=meteor[i],
                cider=100.0 * cider_per_image[i],
            )
            for i, ((sample_id, _), candidate, refs) in enumerate(zip(rows, candidates, references))
        ]
        report = MetricReport(
            b1=bleu(candidates, references, 1),
            b4=bleu(candidates, references, 4),
            rouge_l=_mean(rouge),
            meteor=_mean(meteor),
            cider=100.0 * _mean(cider_per_image),
            n_candidates=len(rows),
            references_per_candidate=[len(refs) for refs in references],
            per_sample=per_sample,
        )
    summary = ", ".join(f"{name}={value:.2f}" for name, value in report.columns().items())
    logger.info(f"Evaluated {report.n_candidates} predictions: {summary}")
    if out_path is not None:
        write_json(out_path, report.to_dict())
    return report
