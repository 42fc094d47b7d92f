import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_kg
from vulnalign.features import (
    CoverageError,
    FeatureTable,
    hash_embed,
    init_features,
    load_vectors,
    save_vectors,
)
from vulnalign.kg import normalize_text


def test_hash_embed_deterministic():
    a = hash_embed("abc", 16, 3)
    b = hash_embed("abc", 16, 3)
    assert a.tobytes() == b.tobytes()


def test_hash_embed_empty_is_zero():
    v = hash_embed("", 12)
    assert v.shape == (12,) and not v.any()


def test_hash_embed_unit_norm_and_seed_dependence():
    a = hash_embed("siemens", 32, 0)
    assert np.isclose(np.linalg.norm(a), 1.0)
    assert not np.allclose(a, hash_embed("siemens", 32, 1))


def test_hash_embed_similar_texts_are_close():
    a, b, c = (hash_embed(t, 100) for t in ("sinema remote", "sinema remote connect", "rockwell"))
    assert a @ b > a @ c


@settings(max_examples=100, deadline=None)
@given(st.text(max_size=30))
def test_normalising_twice_changes_nothing(text):
    once = normalize_text(text)
    assert hash_embed(normalize_text(once), 8).tobytes() == hash_embed(once, 8).tobytes()


def test_init_features_table_covers_literals():
    kg = make_kg([("v", "hasVendor", "abb"), ("v", "hasProduct", "relion")])
    table = FeatureTable(3, {"abb": [1, 2, 3], "relion": [4, 5, 6]})
    out = init_features(kg, table)
    assert set(out.vectors) == {"v", "abb", "relion"}
    assert np.array_equal(out["abb"], [1, 2, 3])
    assert not out["v"].any()


def test_init_features_loads_vector_file_verbatim(tmp_path):
    kg = make_kg([("v", "hasVendor", "abb")])
    rng = np.random.default_rng(0)
    table = FeatureTable(100, {"abb": rng.normal(size=100)})
    save_vectors(table, tmp_path / "vec.txt")
    loaded = load_vectors(tmp_path / "vec.txt")
    assert loaded.dim == 100
    out = init_features(kg, loaded)
    assert out["abb"].tobytes() == table["abb"].tobytes()


def test_init_features_same_seed_same_table():
    kg = make_kg([("v", "hasVendor", "abb"), ("w", "hasCWE", "cwe-79")])
    a, b = init_features(kg, seed=4), init_features(kg, seed=4)
    for n in kg.nodes:
        assert a[n].tobytes() == b[n].tobytes()
        assert a[n].shape == (a.dim,)


def test_init_features_missing_literal_without_fallback():
    kg = make_kg([("v", "hasVendor", "abb"), ("v", "hasProduct", "relion")])
    with pytest.raises(CoverageError, match="relion"):
        init_features(kg, FeatureTable(2, {"abb": [1, 0]}), embed=False)


def test_init_features_scale():
    kg = make_kg([("v", "hasVendor", "abb")])
    assert np.allclose(init_features(kg, scale=10.0)["abb"], 10.0 * init_features(kg)["abb"])


def test_feature_table_rejects_wrong_length():
    with pytest.raises(ValueError):
        FeatureTable(3, {"a": [1.0, 2.0]})
