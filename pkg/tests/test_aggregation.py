import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracle
from conftest import make_pair
from vulnalign.aggregation import (
    EntityStack,
    MaskGate,
    RelationRepr,
    aggregate_entity,
    candidate_correspondence,
    importance_from_degrees,
    mask_gate,
    masked_entity_repr,
    mean_entity_repr,
    neighbor_importance,
    relation_repr,
)
from vulnalign.fixtures import random_fixture

floats = st.floats(-5, 5, allow_nan=False)


def rep(phi, present=True, r="r", e="i"):
    return RelationRepr(e, r, np.asarray(phi, dtype=float), present)


def test_importance_identical_degrees():
    pair = make_pair(
        [("i", "hasVendor", "abb"), ("i", "hasVendor", "ge")],
        [("x", "hasVendor", "abb"), ("x", "hasVendor", "ge")],
    )
    w = neighbor_importance(pair, "i", "hasVendor")
    assert w == pytest.approx({"abb": 0.5, "ge": 0.5}, abs=1e-12)


def test_importance_single_neighbour():
    pair = make_pair([("i", "hasVendor", "abb")], [("x", "hasVendor", "ge")])
    assert neighbor_importance(pair, "i", "hasVendor") == {"abb": 1.0}


def test_importance_hand_softmax():
    # ratios 0.5 and 0.75: exp(-0.5), exp(-0.75) normalised
    w = importance_from_degrees([(1, 1), (3, 1)])
    e = np.exp([-0.5, -0.75])
    assert np.allclose(w, e / e.sum(), atol=1e-12)
    assert np.allclose(w, [0.5622, 0.4378], atol=1e-4)


def test_importance_empty_neighbourhood():
    pair = make_pair([("i", "hasVendor", "abb")], [("x", "hasVendor", "ge")])
    assert neighbor_importance(pair, "i", "hasCWE") == {}


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 20), st.integers(0, 20)), min_size=1, max_size=8), st.randoms())
def test_importance_sums_to_one_and_is_equivariant(degrees, rnd):
    w = importance_from_degrees(degrees)
    assert abs(w.sum() - 1) <= 1e-9
    perm = list(range(len(degrees)))
    rnd.shuffle(perm)
    assert np.allclose(importance_from_degrees([degrees[k] for k in perm]), w[perm], atol=1e-15)


def test_relation_repr_identity_single_neighbour():
    pair = make_pair([("i", "hasVendor", "abb")], [("x", "hasVendor", "ge")])
    out = relation_repr(pair, "i", "hasVendor", np.eye(2), {"abb": np.array([3.0, -1.0])})
    assert out.present and np.array_equal(out.phi, [3.0, -1.0])


def test_relation_repr_absent():
    pair = make_pair([("i", "hasVendor", "abb")], [("x", "hasVendor", "ge")])
    out = relation_repr(pair, "i", "hasCWE", np.eye(2), {})
    assert not out.present and not out.phi.any()


def test_relation_repr_equal_weights_hand_sum():
    pair = make_pair(
        [("i", "hasVendor", "abb"), ("i", "hasVendor", "ge")],
        [("x", "hasVendor", "abb"), ("x", "hasVendor", "ge")],
    )
    out = relation_repr(pair, "i", "hasVendor", np.eye(2), {"abb": np.array([1.0, 0]), "ge": np.array([0, 1.0])})
    assert np.allclose(out.phi, [0.5, 0.5], atol=1e-12)


def test_relation_repr_shape_error():
    pair = make_pair([("i", "hasVendor", "abb")], [("x", "hasVendor", "ge")])
    with pytest.raises(ValueError):
        relation_repr(pair, "i", "hasVendor", np.eye(3), {"abb": np.ones(2)})


def stack(name, rows):
    return EntityStack(name, np.asarray(rows, dtype=float))


def test_correspondence_single():
    assert candidate_correspondence(stack("i", [[1, 2]]), [stack("a", [[0, 0]])]) == {"a": 1.0}


def test_correspondence_equal_distances():
    c = candidate_correspondence(stack("i", [[0, 0]]), [stack("a", [[1, 0]]), stack("b", [[0, -1]])])
    assert c == pytest.approx({"a": 0.5, "b": 0.5}, abs=1e-12)


def test_correspondence_hand_softmax():
    c = candidate_correspondence(stack("i", [[0, 0]]), [stack("a", [[0, 0]]), stack("b", [[1, 0]])])
    e = np.exp([0.0, -1.0])
    assert np.allclose([c["a"], c["b"]], e / e.sum(), atol=1e-12)
    assert np.allclose([c["a"], c["b"]], [0.7311, 0.2689], atol=1e-4)


def test_correspondence_empty():
    assert candidate_correspondence(stack("i", [[0, 0]]), []) == {}


@settings(max_examples=200, deadline=None)
@given(st.lists(st.lists(floats, min_size=4, max_size=4), min_size=1, max_size=6), st.lists(floats, min_size=4, max_size=4))
def test_correspondence_sums_to_one_nearest_wins(cands, me):
    stacks = [stack(f"c{k}", np.reshape(v, (2, 2))) for k, v in enumerate(cands)]
    c = candidate_correspondence(stack("i", np.reshape(me, (2, 2))), stacks)
    assert abs(sum(c.values()) - 1) <= 1e-9
    d = [np.linalg.norm(np.reshape(me, (2, 2)) - s.Phi) for s in stacks]
    if len(set(np.round(d, 6))) == len(d) and len(d) > 1:
        best = f"c{int(np.argmin(d))}"
        assert all(c[best] > v for k, v in c.items() if k != best)


def test_mask_identical_candidate():
    g = mask_gate(rep([1.0, 2.0]), [rep([1.0, 2.0], e="a")], {"a": 1.0})
    assert np.array_equal(g.diag, [1.0, 1.0])


def test_mask_hand_exp():
    g = mask_gate(rep([1.0, 0.0]), [rep([0.0, 0.0], e="a")], {"a": 1.0})
    assert np.allclose(g.diag, [np.exp(-1.0), 1.0], atol=1e-15)
    assert np.allclose(g.diag, [0.3679, 1.0], atol=1e-4)


def test_mask_without_candidates_is_identity():
    assert np.array_equal(mask_gate(rep([4.0, -2.0]), [], {}).diag, [1.0, 1.0])


@settings(max_examples=200, deadline=None)
@given(st.lists(floats, min_size=3, max_size=3), st.lists(floats, min_size=3, max_size=3),
       st.floats(0.01, 1.0), st.integers(0, 2), st.floats(0.0, 3.0))
def test_mask_in_unit_interval_and_monotone(me, other, c, t, grow):
    g = mask_gate(rep(me), [rep(other, e="a")], {"a": c}).diag
    assert np.all(g > 0) and np.all(g <= 1)
    sq = c * np.subtract(me, other) ** 2
    assert np.all(g[sq == 0] == 1)
    assert np.all(g[sq > 1e-12] < 1)
    widened = list(other)
    widened[t] = other[t] + np.sign(other[t] - me[t] or 1.0) * grow
    g2 = mask_gate(rep(me), [rep(widened, e="a")], {"a": c}).diag
    assert g2[t] <= g[t]


def test_mutual_sole_candidates_share_mask():
    a, b = rep([1.0, 3.0], e="i"), rep([0.0, 1.0], e="j")
    assert np.array_equal(mask_gate(a, [b], {"j": 1.0}).diag, mask_gate(b, [a], {"i": 1.0}).diag)


def test_masked_repr_pass_through():
    r = rep([2.0, -1.0])
    assert np.array_equal(masked_entity_repr([MaskGate("i", "r", np.ones(2))], [r]), [2.0, -1.0])


def test_masked_repr_hand_mean():
    reps = [rep([1, 1], r="a"), rep([0, 0], r="b")]
    gates = [MaskGate("i", "a", np.ones(2)), MaskGate("i", "b", np.ones(2))]
    assert np.allclose(masked_entity_repr(gates, reps), [0.5, 0.5])


def test_masked_repr_hand_product():
    assert np.allclose(masked_entity_repr([MaskGate("i", "r", np.array([0.5, 1.0]))], [rep([2, 2])]), [1.0, 2.0])


def test_masked_repr_skips_absent_unless_strict():
    reps = [rep([2, 2], r="a"), rep([0, 0], r="b", present=False)]
    assert np.allclose(mean_entity_repr(reps), [2, 2])
    assert np.allclose(mean_entity_repr(reps, strict=True), [1, 1])


def test_mean_repr_examples():
    assert np.allclose(mean_entity_repr([rep([1, 0], r="a"), rep([0, 1], r="b")]), [0.5, 0.5])
    assert not mean_entity_repr([rep([0, 0], present=False)]).any()


@pytest.mark.parametrize("seed", range(25))
def test_per_entity_path_matches_naive_transcription(seed):
    pair, schema, feats, _ = random_fixture(seed)
    rng = np.random.default_rng(seed)
    W = {r: rng.normal(size=(3, 4)) for r in schema.relations}
    params = {f"agg.W.{r}": w for r, w in W.items()}
    params["in.W"] = rng.normal(size=(3, 4))
    naive = oracle.layer0(pair, list(schema.relations), params, feats)
    for side, f, fo in (("s", feats[0], feats[1]), ("t", feats[1], feats[0])):
        for e in pair.graph(side).entities():
            got = aggregate_entity(pair, e, W, f, fo, schema.relations, side)
            assert np.allclose(got, naive[(side, e)], atol=1e-9, rtol=0)
