"""Tests for tokenization, seed streams, fingerprints and error responses."""

import string

import numpy as np
import pytest

from mind_decoder.errors import RoiCountError, SampleIdError
from mind_decoder.utils import (
    create_error_response,
    derive_seed,
    fingerprint_json,
    fingerprint_path,
    git_blob_fingerprint,
    stream_rng,
    tokenize_text,
)

TOKENIZE_CASES = {
    "punctuation": ("A Dog runs.", ["a", "dog", "runs"]),
    "empty": ("", []),
    "whitespace": ("  two\tspaces \n", ["two", "spaces"]),
    "underscore": ("snake_case word", ["snake", "case", "word"]),
}


@pytest.mark.parametrize("text,expected", TOKENIZE_CASES.values(), ids=TOKENIZE_CASES.keys())
def test_tokenize_text(text, expected):
    assert tokenize_text(text) == expected


def random_texts(count=200, seed=0):
    rng = np.random.default_rng(seed)
    alphabet = list(string.printable) + ["é", "Ü", "ß"]
    for _ in range(count):
        yield "".join(rng.choice(alphabet, size=int(rng.integers(0, 40))))


@pytest.mark.parametrize("text", list(random_texts()))
def test_tokenize_text_is_idempotent(text):
    tokens = tokenize_text(text)
    assert tokenize_text(" ".join(tokens)) == tokens
    assert all(token and token == token.lower() and not any(c.isspace() for c in token) for token in tokens)


def test_named_streams_are_independent_and_reproducible():
    assert derive_seed(3, "data") == derive_seed(3, "data")
    assert derive_seed(3, "data") != derive_seed(3, "init")
    assert derive_seed(3, "data") != derive_seed(4, "data")
    assert stream_rng(3, "tsne").random() == stream_rng(3, "tsne").random()


def test_git_blob_fingerprint_matches_git():
    # `printf 'hello\n' | git hash-object --stdin`
    assert git_blob_fingerprint(b"hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"


def test_fingerprint_path_tracks_directory_content(tmp_path):
    (tmp_path / "a.txt").write_text("one")
    first = fingerprint_path(tmp_path)
    (tmp_path / "a.txt").write_text("two")
    assert fingerprint_path(tmp_path) != first
    assert fingerprint_path(tmp_path / "missing") == "missing"


def test_fingerprint_json_ignores_key_order():
    assert fingerprint_json({"a": 1, "b": [1, 2]}) == fingerprint_json({"b": [1, 2], "a": 1})


def test_create_error_response_carries_error_type():
    error = SampleIdError("unknown ids", {"sample_ids": ["x"]})
    response = create_error_response(error.message, error.error_type, error.additional_info)
    assert response == {
        "error": "unknown ids",
        "error_type": "SampleIdMismatch",
        "success": False,
        "additional_info": {"sample_ids": ["x"]},
    }
    assert RoiCountError.error_type == "RoiCountMismatch"
    assert "additional_info" not in create_error_response("plain")
