"""Tests for BLEU, ROUGE-L, METEOR-ex, CIDEr-D and corpus evaluation.

Each metric is checked against a small independent reimplementation on random short sentences.
"""

import itertools
import json
import logging
import math
import random

import pytest

from mind_decoder.errors import InvalidArgumentError, MissingArtifactError, SampleIdError
from mind_decoder.metrics import (
    _bleu_statistics,
    MetricReport,
    align_exact,
    bleu,
    cider,
    cider_scores,
    evaluate_corpus,
    lcs_length,
    meteor_simplified,
    read_predictions,
    rouge_l,
    sentence_bleu,
    tokenize_for_metrics,
    write_predictions,
)

ALPHABET = "abcd"


def random_pairs(count, seed=0, max_len=6):
    rng = random.Random(seed)
    for _ in range(count):
        candidate = [rng.choice(ALPHABET) for _ in range(rng.randint(1, max_len))]
        references = [[rng.choice(ALPHABET) for _ in range(rng.randint(1, max_len))] for _ in range(rng.randint(1, 2))]
        yield candidate, references


#######################################
# Brute-force references
#######################################

def brute_bleu(candidate, references, n_max):
    log_sum = 0.0
    for n in range(1, n_max + 1):
        grams = [tuple(candidate[i:i + n]) for i in range(len(candidate) - n + 1)]
        clipped = 0
        for gram in set(grams):
            in_refs = max(sum(1 for i in range(len(r) - n + 1) if tuple(r[i:i + n]) == gram) for r in references)
            clipped += min(grams.count(gram), in_refs)
        if not grams or clipped == 0:
            return 0.0
        log_sum += math.log(clipped / len(grams))
    c = len(candidate)
    r = sorted(references, key=lambda ref: (abs(len(ref) - c), len(ref)))[0]
    brevity = 1.0 if c > len(r) else math.exp(1 - len(r) / c)
    return 100 * brevity * math.exp(log_sum / n_max)


def brute_lcs(a, b):
    best = 0
    for size in range(len(a) + 1):
        for picked in itertools.combinations(range(len(a)), size):
            words = iter(b)
            if all(any(a[i] == w for w in words) for i in picked):
                best = max(best, size)
    return best


def brute_alignment(candidate, reference):
    """Enumerate every injective exact-match alignment; most matches, then fewest chunks."""
    best = (0, 0)

    def chunks(pairs):
        count, previous = 0, None
        for i, j in pairs:
            if previous is None or (i, j) != (previous[0] + 1, previous[1] + 1):
                count += 1
            previous = (i, j)
        return count

    def walk(i, used, pairs):
        nonlocal best
        if i == len(candidate):
            option = (len(pairs), -chunks(pairs))
            if option > best:
                best = option
            return
        walk(i + 1, used, pairs)
        for j, word in enumerate(reference):
            if word == candidate[i] and j not in used:
                walk(i + 1, used | {j}, pairs + [(i, j)])

    walk(0, frozenset(), [])
    return best[0], -best[1]


def brute_cider(candidates, references, sigma=6.0):
    n_images = len(candidates)
    per_image = []
    for i, candidate in enumerate(candidates):
        total = 0.0
        for n in range(1, 5):
            df = {}
            for refs in references:
                seen = set()
                for r in refs:
                    seen.update(tuple(r[k:k + n]) for k in range(len(r) - n + 1))
                for gram in seen:
                    df[gram] = df.get(gram, 0) + 1

            def idf(gram):
                return math.log(n_images / (1.0 + df.get(gram, 0)))

            def counts(tokens):
                v = {}
                for k in range(len(tokens) - n + 1):
                    gram = tuple(tokens[k:k + n])
                    v[gram] = v.get(gram, 0) + 1
                return v

            def norm(v):
                return math.sqrt(sum((c * idf(g)) ** 2 for g, c in v.items()))

            cc = counts(candidate)
            similarities = []
            for r in references[i]:
                rc = counts(r)
                if norm(cc) == 0 or norm(rc) == 0:
                    similarities.append(0.0)
                    continue
                dot = sum(min(cc[g], rc[g]) * idf(g) * rc[g] * idf(g) for g in cc if g in rc)
                penalty = math.exp(-((len(candidate) - len(r)) ** 2) / (2 * sigma ** 2))
                similarities.append(penalty * dot / (norm(cc) * norm(rc)))
            total += sum(similarities) / len(similarities)
        per_image.append(10 * total / 4)
    return 100 * sum(per_image) / len(per_image)


def brute_corpus_bleu(candidates, references, n_max):
    log_sum = 0.0
    for n in range(1, n_max + 1):
        clipped = total = 0
        for candidate, refs in zip(candidates, references):
            grams = [tuple(candidate[i:i + n]) for i in range(len(candidate) - n + 1)]
            for gram in set(grams):
                in_refs = max(sum(1 for i in range(len(r) - n + 1) if tuple(r[i:i + n]) == gram) for r in refs)
                clipped += min(grams.count(gram), in_refs)
            total += len(grams)
        if total == 0 or clipped == 0:
            return 0.0
        log_sum += math.log(clipped / total)
    c = sum(len(candidate) for candidate in candidates)
    r = sum(len(min(refs, key=lambda ref: (abs(len(ref) - len(candidate)), len(ref))))
            for candidate, refs in zip(candidates, references))
    brevity = 1.0 if c > r else math.exp(1 - r / c)
    return 100 * brevity * math.exp(log_sum / n_max)


#######################################
# Oracles
#######################################

@pytest.mark.parametrize("n_max", [1, 2, 4])
def test_sentence_bleu_matches_brute_force(n_max):
    for candidate, references in random_pairs(300, seed=n_max):
        assert sentence_bleu(candidate, references, n_max) == pytest.approx(
            brute_bleu(candidate, references, n_max), abs=1e-9
        )


SHORT_CANDIDATE_CASES = {
    "unigram": (1, 100.0),
    "bigram": (2, 100.0),
    "trigram": (3, 0.0),
    "four_gram": (4, 0.0),
}


@pytest.mark.parametrize("n_max,expected", SHORT_CANDIDATE_CASES.values(), ids=SHORT_CANDIDATE_CASES.keys())
def test_candidate_shorter_than_n_max_scores_zero(n_max, expected):
    assert sentence_bleu("a dog", ["a dog"], n_max) == pytest.approx(expected)
    # pooled with a longer sentence the short one no longer zeroes the corpus
    assert bleu(["a dog", "a cat sits on a mat"], [["a dog"], ["a cat sits on a mat"]], n_max) == pytest.approx(100.0)


def test_lcs_matches_brute_force():
    for candidate, references in random_pairs(300, seed=11):
        assert lcs_length(candidate, references[0]) == brute_lcs(candidate, references[0])


def test_alignment_matches_exhaustive_search():
    for candidate, references in random_pairs(300, seed=12):
        assert align_exact(candidate, references[0]) == brute_alignment(candidate, references[0])


def test_cider_matches_brute_force():
    rng = random.Random(5)
    words = "a dog cat runs sits on the mat grass red".split()
    candidates = [[rng.choice(words) for _ in range(rng.randint(3, 9))] for _ in range(5)]
    references = [
        [[rng.choice(words) for _ in range(rng.randint(3, 9))] for _ in range(rng.randint(1, 3))] for _ in range(5)
    ]
    references[0].append(list(candidates[0]))
    assert cider(candidates, references) == pytest.approx(brute_cider(candidates, references), abs=1e-9)


def all_sequences(alphabet, max_len):
    for length in range(1, max_len + 1):
        yield from (list(s) for s in itertools.product(alphabet, repeat=length))


SHORT_SEQUENCES = list(all_sequences("abc", 4))


@pytest.mark.parametrize("n_max", [1, 2, 4])
def test_sentence_bleu_exhaustive(n_max):
    for candidate, reference in itertools.product(SHORT_SEQUENCES, repeat=2):
        assert sentence_bleu(candidate, [reference], n_max) == pytest.approx(
            brute_bleu(candidate, [reference], n_max), abs=1e-9
        )


def test_lcs_and_alignment_exhaustive():
    for candidate, reference in itertools.product(SHORT_SEQUENCES, repeat=2):
        assert lcs_length(candidate, reference) == brute_lcs(candidate, reference)
        assert align_exact(candidate, reference) == brute_alignment(candidate, reference)


def longer_pairs(count=50, seed=21):
    rng = random.Random(seed)
    for _ in range(count):
        candidate = [rng.choice("abcdef") for _ in range(rng.randint(7, 10))]
        references = [[rng.choice("abcdef") for _ in range(rng.randint(7, 10))] for _ in range(rng.randint(1, 3))]
        yield candidate, references


def test_longer_pairs_match_brute_force():
    for candidate, references in longer_pairs():
        for n_max in (1, 4):
            assert sentence_bleu(candidate, references, n_max) == pytest.approx(
                brute_bleu(candidate, references, n_max), abs=1e-9
            )
        assert lcs_length(candidate, references[0]) == brute_lcs(candidate, references[0])
        assert align_exact(candidate, references[0]) == brute_alignment(candidate, references[0])


@pytest.mark.parametrize("n_max", [1, 2, 4])
def test_corpus_bleu_matches_brute_force(n_max):
    pairs = list(longer_pairs(count=50, seed=n_max)) + list(random_pairs(50, seed=40 + n_max))
    for start in range(0, len(pairs), 5):
        chunk = pairs[start:start + 5]
        candidates = [c for c, _ in chunk]
        references = [r for _, r in chunk]
        assert bleu(candidates, references, n_max) == pytest.approx(
            brute_corpus_bleu(candidates, references, n_max), abs=1e-9
        )


def test_cider_longer_corpus_matches_brute_force():
    pairs = list(longer_pairs(count=10, seed=33))
    candidates = [c for c, _ in pairs]
    references = [r for _, r in pairs]
    assert cider(candidates, references) == pytest.approx(brute_cider(candidates, references), abs=1e-9)


def test_cider_clips_ngrams_shared_by_every_image():
    # "a" appears in every reference set, so its idf is negative
    references = [["a dog"], ["a cat"], ["a cow"], ["a pig"], ["a hen"]]
    candidates = ["a a a dog", "a cat", "a cow", "a pig", "a hen"]
    idf_a, idf_dog, idf_aa = math.log(5 / 6), math.log(5 / 2), math.log(5)
    unigram = (idf_a ** 2 + idf_dog ** 2) / (math.hypot(3 * idf_a, idf_dog) * math.hypot(idf_a, idf_dog))
    bigram = idf_dog ** 2 / (math.hypot(2 * idf_aa, idf_dog) * idf_dog)
    expected = 10 * math.exp(-4 / 72) * (unigram + bigram) / 4
    assert cider_scores(candidates, references)[0] == pytest.approx(expected, abs=1e-9)
    tokens = [c.split() for c in candidates]
    ref_tokens = [[r.split() for r in rs] for rs in references]
    assert cider(candidates, references) == pytest.approx(brute_cider(tokens, ref_tokens), abs=1e-9)


def test_reference_order_does_not_matter():
    pairs = list(longer_pairs(count=8, seed=50))
    candidates = [c for c, _ in pairs]
    references = [r for _, r in pairs]
    shuffled = [list(reversed(r)) for r in references]
    metrics = {
        "B@1": lambda c, r: bleu(c, r, 1),
        "B@4": lambda c, r: bleu(c, r, 4),
        "ROUGE-L": rouge_l,
        "METEOR-ex": meteor_simplified,
        "CIDEr": cider,
    }
    for name, metric in metrics.items():
        assert metric(candidates, shuffled) == pytest.approx(metric(candidates, references), abs=1e-9), name


#######################################
# Closed-form values
#######################################

def test_identical_corpus_reaches_maximum():
    captions = ["a dog runs on the grass", "the red car is parked outside", "two birds sit on a wire"]
    references = [[c] for c in captions]
    assert bleu(captions, references, 1) == pytest.approx(100.0)
    assert bleu(captions, references, 4) == pytest.approx(100.0)
    assert rouge_l(captions, references) == pytest.approx(100.0)


def test_identical_four_token_meteor():
    assert meteor_simplified(["a b c d"], [["a b c d"]]) == pytest.approx(99.21875)


def test_identical_distinct_corpus_cider_is_maximal():
    captions = ["w%d x%d y%d z%d" % (i, i, i, i) for i in range(5)]
    assert cider(captions, [[c] for c in captions]) == pytest.approx(1000.0)


BLEU_CASES = {
    "brevity_penalty": ("the cat", ["the cat sat on the mat"], 1, 100 * math.exp(-2)),
    "tie_prefers_shorter_reference": ("a b c d", ["a b c", "a b c d e"], 1, 100.0),
    "no_match": ("x y z", ["a b c"], 1, 0.0),
    "short_candidate_has_no_four_grams": ("a b c", ["a b c"], 4, 0.0),
    "clipped_repetition": ("the the the the", ["the cat"], 1, 100 * 0.25),
}


@pytest.mark.parametrize("candidate,references,n_max,expected", BLEU_CASES.values(), ids=BLEU_CASES.keys())
def test_bleu_closed_form(candidate, references, n_max, expected):
    assert sentence_bleu(candidate, references, n_max) == pytest.approx(expected, abs=1e-9)


def test_rouge_closed_form():
    precision, recall = 2 / 4, 2 / 3
    expected = 100 * 2.44 * precision * recall / (recall + 1.44 * precision)
    assert rouge_l(["a b c d"], [["a c e"]]) == pytest.approx(expected)


def test_rouge_takes_best_reference():
    assert rouge_l(["a b"], [["x y", "a b"]]) == pytest.approx(100.0)


def test_meteor_fragmentation_penalty():
    # two matches in two chunks
    precision = recall = 1.0
    expected = 100 * (1 - 0.5 * (2 / 2) ** 3) * 10 * precision * recall / (recall + 9 * precision)
    assert meteor_simplified(["b a"], [["a b"]]) == pytest.approx(expected)


def test_deleting_a_token_never_adds_clipped_matches():
    for candidate, references in random_pairs(100, seed=3):
        full, _, _, _ = _bleu_statistics(candidate, references, 1)
        for index in range(len(candidate)):
            shorter, _, _, _ = _bleu_statistics(candidate[:index] + candidate[index + 1:], references, 1)
            assert all(a <= b for a, b in zip(shorter, full))


def test_metric_ranges():
    for candidate, references in random_pairs(100, seed=9):
        for metric in (lambda c, r: bleu(c, r, 1), rouge_l, meteor_simplified):
            assert 0.0 <= metric([candidate], [references]) <= 100.0 + 1e-9


def test_single_image_cider_warns(caplog):
    with caplog.at_level(logging.WARNING, logger="mind_decoder.metrics"):
        cider(["a dog"], [["a dog"]])
    assert "single-image" in caplog.text


def test_metrics_need_matching_lengths():
    with pytest.raises(InvalidArgumentError):
        bleu(["a"], [["a"], ["b"]])
    with pytest.raises(InvalidArgumentError, match="no reference"):
        rouge_l(["a"], [[]])


def test_tokenizer_lowercases_and_strips_punctuation():
    assert tokenize_for_metrics("A Dog, runs!") == ["a", "dog", "runs"]


#######################################
# Corpus evaluation and prediction files
#######################################

def _perfect_predictions(dataset):
    return [(s.sample_id, dataset.caption_text(s)) for s in dataset.samples]


def test_perfect_predictions(synthetic):
    report = evaluate_corpus(_perfect_predictions(synthetic.test), synthetic.test)
    assert report.b1 == pytest.approx(100.0)
    assert report.b4 == pytest.approx(100.0)
    assert report.rouge_l == pytest.approx(100.0)
    assert report.n_candidates == len(synthetic.test.samples)
    assert list(report.columns()) == ["B@1", "B@4", "ROUGE-L", "METEOR-ex", "CIDEr"]


def test_prediction_order_does_not_matter(synthetic):
    rows = [(sid, text.split()[0] + " dog") for sid, text in _perfect_predictions(synthetic.test)]
    forward = evaluate_corpus(rows, synthetic.test)
    backward = evaluate_corpus(rows[::-1], synthetic.test)
    assert forward == backward


def test_duplicate_prediction_ids(synthetic):
    rows = _perfect_predictions(synthetic.test)
    with pytest.raises(SampleIdError) as info:
        evaluate_corpus(rows + rows[:1], synthetic.test)
    assert info.value.additional_info["sample_ids"] == [rows[0][0]]


def test_unknown_prediction_ids(synthetic):
    with pytest.raises(SampleIdError, match="unknown"):
        evaluate_corpus([("nope", "a dog")], synthetic.test)


def test_empty_predictions_score_zero(synthetic):
    report = evaluate_corpus([], synthetic.test)
    assert report.n_candidates == 0
    assert set(report.columns().values()) == {0.0}


def test_averaged_predictions_use_stimulus_ids(synthetic):
    rows = [(s.stimulus_id, synthetic.test.caption_text(s)) for s in synthetic.test.samples]
    rows = list(dict(rows).items())
    assert evaluate_corpus(rows, synthetic.test).b1 == pytest.approx(100.0)


def test_report_file(tmp_path, synthetic):
    report = evaluate_corpus(_perfect_predictions(synthetic.test), synthetic.test, out_path=tmp_path / "report.json")
    payload = json.loads((tmp_path / "report.json").read_text())
    assert payload["meteor_label"] == "METEOR-ex"
    assert MetricReport.from_dict(payload) == report


def test_prediction_file_escapes_separators(tmp_path):
    rows = [("s1", "a dog\truns"), ("s2", "back\\slash"), ("s3", "")]
    path = write_predictions(rows, tmp_path / "predictions.tsv")
    assert read_predictions(path) == rows


def test_evaluate_reads_prediction_file(tmp_path, synthetic):
    path = write_predictions(_perfect_predictions(synthetic.test), tmp_path / "predictions.tsv")
    assert evaluate_corpus(path, synthetic.test).b4 == pytest.approx(100.0)


def test_missing_prediction_file(tmp_path):
    with pytest.raises(MissingArtifactError):
        read_predictions(tmp_path / "missing.tsv")
