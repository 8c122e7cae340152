import io
import json
import random

import pytest
from hypothesis import given, strategies as st

from magekt.core import ConceptProfile, KcEdge, KcGraph, RelationType as R, SqGraph
from magekt.graphs import similarity_weight
from magekt.irt import fit_ability
from magekt.retrieval import (PredictionInstance, RetrievalError, Retriever, Subgraph, bfs_order,
                              condition_student, full_kc_view, full_sq_view, retrieve_kc_subgraph,
                              retrieve_sq_subgraph)

from conftest import (bfs_union_oracle, kc_adjacency, random_instance, random_kc_graph, random_sq_graph,
                      sq_adjacency, sq_induced_oracle)


@given(st.integers(0, 2**32 - 1), st.integers(0, 3))
def test_sq_retrieval_matches_oracle(seed, k):
    rng = random.Random(seed)
    g = random_sq_graph(rng, 80)
    inst = random_instance(rng, g)
    sub = retrieve_sq_subgraph(g, inst, k, budget=None)
    seeds = {("s", inst.student_id)} | {("q", q) for q, _ in inst.history}
    assert sub.node_set == bfs_union_oracle(sq_adjacency(g), seeds, k)
    assert {frozenset((u, v)) for u, v, _ in sub.edges} == sq_induced_oracle(g, sub.node_set)
    assert set(sub.seeds) == seeds and not sub.truncated
    bigger = retrieve_sq_subgraph(g, inst, k + 1, budget=None)
    assert sub.node_set <= bigger.node_set


@given(st.integers(0, 2**32 - 1), st.integers(0, 3))
def test_kc_retrieval_matches_oracle(seed, n):
    rng = random.Random(seed)
    g = random_kc_graph(rng, 80)
    targets = rng.sample(sorted(g.nodes), rng.randint(1, min(3, len(g.nodes))))
    sub = retrieve_kc_subgraph(g, targets, n, budget=None)
    assert sub.node_set == bfs_union_oracle(kc_adjacency(g), set(targets), n)
    assert set(sub.edges) == {e for e in g.edges if e.src in sub.node_set and e.dst in sub.node_set}
    assert sub.node_set <= retrieve_kc_subgraph(g, targets, n + 1, budget=None).node_set


def _star():
    theta = {"c": 0.0}
    b = {f"q{i}": 0.0 for i in range(5)}
    qs = tuple((f"q{i}", "c", 1) for i in range(5))
    return SqGraph(theta, b, qs, (), ())


def test_k0_returns_seeds_and_their_edges():
    g = _star()
    inst = PredictionInstance("c", (("q1", 1),), "q2", ("k",))
    sub = retrieve_sq_subgraph(g, inst, 0)
    assert sub.node_set == {("s", "c"), ("q", "q1")}
    assert [(u, v) for u, v, _ in sub.edges] == [(("q", "q1"), ("s", "c"))]


def test_star_center_k1_gets_all_leaves():
    g = _star()
    sub = retrieve_sq_subgraph(g, PredictionInstance("c", (("q0", 1),), "q1", ("k",)), 1)
    assert len(sub.nodes) == 6


def _chain():
    nodes = {k: ConceptProfile(k, k) for k in "ABCDX"}
    edges = tuple(KcEdge(a, c, R.PREDECESSOR_SUCCESSOR, 0.9) for a, c in ("AB", "BC", "CD"))
    return KcGraph(nodes, edges)


def test_chain_one_hop_ignores_direction():
    assert retrieve_kc_subgraph(_chain(), ["B"], 1).node_set == {"A", "B", "C"}


def test_kc_zero_hops_and_isolated():
    assert retrieve_kc_subgraph(_chain(), ["B", "C"], 0).node_set == {"B", "C"}
    assert retrieve_kc_subgraph(_chain(), ["X"], 3).node_set == {"X"}


def test_unknown_seeds():
    g = _star()
    with pytest.raises(RetrievalError):
        retrieve_sq_subgraph(g, PredictionInstance("nobody", (("qx", 1),), "q0", ("k",)), 2)
    sub = retrieve_sq_subgraph(g, PredictionInstance("nobody", (("q1", 1),), "q0", ("k",)), 0)
    assert ("s", "nobody") in sub.skipped
    with pytest.raises(RetrievalError):
        retrieve_kc_subgraph(_chain(), ["Z"], 1)


def test_budget_keeps_seeds_and_nearest():
    adj = {"a": {"b": 0.9, "c": 0.2}, "b": {"a": 0.9, "d": 1.0}, "c": {"a": 0.2}, "d": {"b": 1.0}}
    order, depth, truncated = bfs_order(lambda u: adj.get(u, {}), ["a"], 2, budget=2)
    assert order == ["a", "b"] and depth == [0, 1] and truncated
    order, _, _ = bfs_order(lambda u: adj.get(u, {}), ["a", "c", "d"], 2, budget=2)
    assert order == ["a", "c", "d"]


@given(st.integers(0, 2**32 - 1), st.integers(1, 30))
def test_budget_is_a_prefix_of_the_unbounded_order(seed, budget):
    rng = random.Random(seed)
    g = random_kc_graph(rng, 60)
    targets = [sorted(g.nodes)[0]]
    full = retrieve_kc_subgraph(g, targets, 3, budget=None)
    capped = retrieve_kc_subgraph(g, targets, 3, budget=budget)
    assert capped.nodes == full.nodes[:max(budget, 1)]
    assert capped.truncated == (len(full.nodes) > budget)


def test_retrieval_does_not_mutate_and_repeats():
    rng = random.Random(5)
    g = random_sq_graph(rng, 40)
    before = (g.qs_edges, g.qq_edges, g.ss_edges)
    inst = random_instance(rng, g)
    a = retrieve_sq_subgraph(g, inst, 2)
    b = retrieve_sq_subgraph(g, inst, 2)
    assert a == b and (g.qs_edges, g.qq_edges, g.ss_edges) == before


def test_subgraph_requires_seeds_inside():
    with pytest.raises(ValueError):
        Subgraph(("a",), (0,), (), ("b",))


def test_instance_requires_history():
    with pytest.raises(ValueError):
        PredictionInstance("s", (), "q", ("k",))


def _leak_graph():
    # s1 answered q1..q3 correctly in the graph; a new instance only has q1 wrong.
    theta = {"s1": 2.0, "s2": 0.5, "s3": -1.0}
    b = {"q1": 0.0, "q2": 0.3, "q3": -0.2}
    qs = (("q1", "s1", 1), ("q2", "s1", 1), ("q3", "s1", 1), ("q1", "s2", 0), ("q2", "s3", 1))
    ss = (("s1", "s2", 0.5), ("s2", "s1", 0.5))
    return SqGraph(theta, b, qs, (), ss, 1.0, 1.0)


def test_overlay_uses_history_only():
    g = _leak_graph()
    inst = PredictionInstance("s1", (("q1", 0),), "q2", ("k",))
    ov = condition_student(g, inst, topk_s=1)
    assert ov.theta == fit_ability([("q1", 0)], g.b)
    assert ov.links[("q", "q1")] == 1.0 and ("q", "q2") not in ov.links
    (s_link,) = [n for n in ov.links if n[0] == "s"]
    closest = min((s for s in g.theta if s != "s1"), key=lambda s: abs(g.theta[s] - ov.theta))
    assert s_link == ("s", closest)
    assert ov.links[s_link] == similarity_weight(ov.theta, g.theta[closest], g.sigma_s)

    sub = Retriever(g, None, k=1, topk_s=1).sq(inst)
    target_edges = {(u, v) for u, v, _ in sub.edges if ("s", "s1") in (u, v)}
    assert (("q", "q2"), ("s", "s1")) not in target_edges
    assert sub.attributes[("s", "s1")] == ov.theta


def test_retriever_cache_and_dump():
    g = _leak_graph()
    r = Retriever(g, _chain(), version="v1")
    inst = PredictionInstance("s2", (("q1", 0),), "q2", ("A",))
    assert r.sq(inst) is r.sq(inst)
    assert r.kc(["A"]) is r.kc(["A"])
    assert r.key(inst) != Retriever(g, None, version="v2").key(inst)
    buf = io.StringIO()
    r.dump_cache(buf)
    recs = [json.loads(line) for line in buf.getvalue().splitlines()]
    assert {rec["graph"] for rec in recs} == {"sq", "kc"}


def test_full_views_ignore_locality():
    g = _chain()
    sub = full_kc_view(g, ["D"], budget=3)
    assert sub.nodes == ("D", "A", "B") and sub.truncated
    sq = _star()
    view = full_sq_view(sq, PredictionInstance("c", (("q3", 1),), "q0", ("k",)), budget=4)
    assert view.nodes[:2] == (("s", "c"), ("q", "q3")) and len(view.nodes) == 4
