import itertools
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from spatialground.embed import (DEFAULT_CANONICALS, QueryContext, Vocabulary, cosine, embed_concept, make_context,
                                 mask_embedding)
from spatialground.parse import NOUNS

tokens = st.sampled_from(NOUNS + ("object", "things", "cup", "couch"))


@given(tokens, st.integers(0, 10**6))
def test_unit_norm_and_deterministic(tok, seed):
    v = Vocabulary(seed)
    a, b = embed_concept(v, tok), embed_concept(Vocabulary(seed), tok)
    assert abs(np.linalg.norm(a) - 1) < 1e-6
    assert a.tobytes() == b.tobytes()


def test_synonyms_resolve():
    v = Vocabulary()
    assert np.array_equal(embed_concept(v, "cup"), embed_concept(v, "mug"))
    assert np.array_equal(embed_concept(v, " Mug "), embed_concept(v, "mug"))


def test_unrelated_tokens_nearly_orthogonal():
    v = Vocabulary()
    words = [f"w{i}" for i in range(46)]
    pairs = list(itertools.combinations(words, 2))[:1000]
    cos = [abs(cosine(embed_concept(v, a), embed_concept(v, b))) for a, b in pairs]
    assert len(pairs) == 1000
    assert np.mean(cos) < 0.15 and max(cos) < 0.5


def test_empty_token_rejected():
    with pytest.raises(ValueError):
        embed_concept(Vocabulary(), "  ")


@given(tokens, st.integers(0, 50), st.floats(0.0, 0.5))
def test_mask_embedding_bound(tok, view, noise):
    v = Vocabulary()
    m = mask_embedding(v, tok, view, noise)
    assert abs(np.linalg.norm(m) - 1) < 1e-6
    # offset of norm noise tilts the unit vector by at most arcsin(noise)
    assert cosine(m, embed_concept(v, tok)) >= np.sqrt(1 - noise**2) - 1e-12
    if noise <= 0.3:
        assert cosine(m, embed_concept(v, tok)) >= 1 - noise**2 - 1e-12


def test_mask_embedding_views_differ():
    v = Vocabulary()
    assert np.array_equal(mask_embedding(v, "mug", 0, 0.0), embed_concept(v, "mug"))
    assert not np.allclose(mask_embedding(v, "mug", 0, 0.1), mask_embedding(v, "mug", 1, 0.1))
    with pytest.raises(ValueError):
        mask_embedding(v, "mug", 0, 0.6)


def test_cosine_cases():
    a = np.array([1.0, 0, 0])
    assert cosine(a, a) == 1 and cosine(a, -a) == -1 and cosine(a, np.array([0, 1.0, 0])) == 0


def test_context_and_vocab_json(tmp_path):
    ctx = make_context(Vocabulary(), "mug")
    assert len(ctx.canonicals) == len(DEFAULT_CANONICALS)
    with pytest.raises(ValueError):
        QueryContext(ctx.query, [])
    p = tmp_path / "v.json"
    p.write_text(json.dumps({"seed": 4, "dim": 32, "synonyms": {"cup": "mug"}}))
    v = Vocabulary.from_json(p)
    assert v.dim == 32 and embed_concept(v, "cup").shape == (32,)
    assert Vocabulary(**{k: v.to_json()[k] for k in ("seed", "dim", "synonyms")}) == v
