import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from itmeval.text import NormalizationPolicy, char_ngram_profile, chrf, exact_match, normalize

import oracles

# frozen from oracles.chrf_bruteforce before the implementation existed
BLUE_BUS_BUG = 0.7970238095238097


def test_normalize_defaults():
    assert normalize("A  Red Car ") == "a red car"
    assert normalize("") == ""


def test_normalize_strip_punctuation_policy():
    pol = NormalizationPolicy(strip_punctuation=True)
    assert normalize("A red, shiny car!", pol) == "a red shiny car"


@settings(max_examples=300, deadline=None)
@given(st.text(max_size=30))
def test_normalize_idempotent(text):
    once = normalize(text)
    assert normalize(once) == once


@pytest.mark.parametrize(
    "a,b,want",
    [("Entity", "entity", 1), ("Entity", "Attribute", 0), ("two  dogs", "two dogs", 1)],
)
def test_exact_match(a, b, want):
    assert exact_match(a, b) == want


def test_char_profiles():
    assert dict(char_ngram_profile("cat", 2).counts) == {"ca": 1, "at": 1}
    assert char_ngram_profile("cat", 6).total == 0
    assert dict(char_ngram_profile("a cat", 2).counts) == {"ac": 1, "ca": 1, "at": 1}


def test_chrf_fixed_points():
    assert chrf("cat", "cat") == 1.0
    assert chrf("abc", "xyz") == 0.0
    assert chrf("", "") == 1.0
    assert chrf("", "abc") == 0.0 and chrf("abc", "") == 0.0
    assert chrf("a blue bus", "a blue bug") == pytest.approx(BLUE_BUS_BUG, abs=1e-12)


def test_chrf_beta_changes_weighting():
    # recall-heavy beta favours the candidate that covers the reference
    short = chrf("blue", "blue bus", beta=2.0)
    assert short != chrf("blue", "blue bus", beta=1.0)


def _rand_text(rng, alphabet="abcde fgh", hi=14):
    return "".join(rng.choice(alphabet) for _ in range(rng.randrange(hi)))


def test_chrf_matches_bruteforce_oracle():
    rng = random.Random(7)
    worst = 0.0
    for _ in range(300):
        a, b = _rand_text(rng), _rand_text(rng)
        worst = max(worst, abs(chrf(a, b) - oracles.chrf_bruteforce(a, b)))
    assert worst <= 1e-9


@settings(max_examples=300, deadline=None)
@given(st.text(alphabet="abcxyz ", max_size=12), st.text(alphabet="abcxyz ", max_size=12))
def test_chrf_symmetric_and_bounded(a, b):
    v = chrf(a, b)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(chrf(b, a), abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.text(min_size=1, max_size=20).filter(lambda s: "".join(normalize(s).split())))
def test_chrf_identity(x):
    assert chrf(x, x) == 1.0
