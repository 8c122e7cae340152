import os

from hypothesis import HealthCheck, settings

from magekt.core import Interaction, InteractionLog
from magekt.retrieval import PredictionInstance

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def make_log(rows):
    """Rows of (student, question, kcs, correct, timestamp); kcs may be a string."""
    out = []
    for s, q, kcs, r, t in rows:
        kcs = (kcs,) if isinstance(kcs, str) else tuple(kcs)
        out.append(Interaction(s, q, kcs, r, float(t)))
    return InteractionLog(tuple(out))


def planted_rasch_log(n_students=200, n_questions=100, seed=0):
    """Full response matrix sampled from Bernoulli(sigmoid(theta - b))."""
    import numpy as np

    rng = np.random.default_rng(seed)
    theta = rng.normal(0, 1, n_students)
    b = rng.normal(0, 1, n_questions)
    p = 1 / (1 + np.exp(-(theta[:, None] - b[None, :])))
    r = (rng.random(p.shape) < p).astype(int)
    rows = [(f"s{i:03d}", f"q{j:03d}", "k", int(r[i, j]), j) for i in range(n_students) for j in range(n_questions)]
    truth = ({f"s{i:03d}": theta[i] for i in range(n_students)}, {f"q{j:03d}": b[j] for j in range(n_questions)})
    return make_log(rows), truth


def random_sq_graph(rng, max_nodes=200):
    """SqGraph with random qs/qq/ss edges; rng is a random.Random."""
    from magekt.core import SqGraph

    n_s = rng.randint(1, max_nodes // 2)
    n_q = rng.randint(1, max_nodes - n_s)
    theta = {f"s{i}": rng.gauss(0, 1) for i in range(n_s)}
    b = {f"q{i}": rng.gauss(0, 1) for i in range(n_q)}
    qs = tuple((f"q{rng.randrange(n_q)}", f"s{rng.randrange(n_s)}", rng.randint(0, 1))
               for _ in range(rng.randint(0, 2 * (n_s + n_q))))

    def sym(prefix, n, count):
        out = set()
        for _ in range(count):
            a, c = rng.randrange(n), rng.randrange(n)
            if a != c:
                w = round(rng.uniform(0.05, 1.0), 3)
                out |= {(f"{prefix}{a}", f"{prefix}{c}", w), (f"{prefix}{c}", f"{prefix}{a}", w)}
        # one weight per unordered pair
        seen, edges = {}, []
        for a, c, w in sorted(out):
            key = frozenset((a, c))
            w = seen.setdefault(key, w)
            edges.append((a, c, w))
        return tuple(edges)

    return SqGraph(theta, b, qs, sym("q", n_q, rng.randint(0, n_q)), sym("s", n_s, rng.randint(0, n_s)))


def random_kc_graph(rng, max_nodes=200):
    from magekt.core import ConceptProfile, KcEdge, KcGraph, RelationType

    n = rng.randint(1, max_nodes)
    nodes = {f"k{i:03d}": ConceptProfile(f"k{i:03d}", f"k{i}") for i in range(n)}
    edges = set()
    for _ in range(rng.randint(0, 2 * n)):
        a, c = rng.randrange(n), rng.randrange(n)
        if a != c:
            t = rng.choice([t for t in RelationType if t is not RelationType.NONE])
            edges.add(KcEdge(f"k{a:03d}", f"k{c:03d}", t, round(rng.uniform(0.1, 1.0), 2)))
    return KcGraph(nodes, tuple(sorted(edges, key=lambda e: (e.src, e.dst, e.type.value))))


def bfs_union_oracle(adjacency, seeds, hops):
    """Nodes within ``hops`` undirected steps of any seed, by repeated set expansion."""
    reach = set(seeds)
    for _ in range(hops):
        reach = reach | {v for u in reach for v in adjacency.get(u, ())}
    return reach


def sq_adjacency(g):
    adj = {}
    for q, s, _ in g.qs_edges:
        adj.setdefault(("q", q), set()).add(("s", s))
        adj.setdefault(("s", s), set()).add(("q", q))
    for kind, edges in (("q", g.qq_edges), ("s", g.ss_edges)):
        for a, c, _ in edges:
            adj.setdefault((kind, a), set()).add((kind, c))
            adj.setdefault((kind, c), set()).add((kind, a))
    return adj


def sq_induced_oracle(g, nodes):
    pairs = set()
    for q, s, _ in g.qs_edges:
        if ("q", q) in nodes and ("s", s) in nodes:
            pairs.add(frozenset((("q", q), ("s", s))))
    for kind, edges in (("q", g.qq_edges), ("s", g.ss_edges)):
        for a, c, _ in edges:
            if (kind, a) in nodes and (kind, c) in nodes:
                pairs.add(frozenset(((kind, a), (kind, c))))
    return pairs


def kc_adjacency(g):
    adj = {}
    for e in g.edges:
        adj.setdefault(e.src, set()).add(e.dst)
        adj.setdefault(e.dst, set()).add(e.src)
    return adj


def random_instance(rng, g):
    students = sorted(g.theta)
    questions = sorted(g.b)
    hist = tuple((rng.choice(questions), rng.randint(0, 1)) for _ in range(rng.randint(1, 4)))
    return PredictionInstance(rng.choice(students), hist, rng.choice(questions), ("k",))


def pairwise_auc(labels, scores):
    """O(n^2) Mann-Whitney count with half credit for ties."""
    pos = [s for y, s in zip(labels, scores) if y == 1]
    neg = [s for y, s in zip(labels, scores) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def kt_setup(n_students=20, n_questions=10, length=60, seed=0, window=100, budget=512):
    """Synthetic KT log split 8:1:1 with IRT-backed S-Q graph, a small KC chain and a retriever."""
    from types import SimpleNamespace

    from magekt.core import ConceptProfile, KcEdge, KcGraph, RelationType
    from magekt.fusionnet import Vocab
    from magekt.graphs import build_sq_graph
    from magekt.ingest import SplitSpec, split_students, window_sequences
    from magekt.irt import fit_rasch
    from magekt.retrieval import Retriever
    from magekt.synthetic import generate_kt_log

    log, planted = generate_kt_log(n_students=n_students, n_questions=n_questions, length=length, seed=seed)
    tr, va, te = split_students(log, SplitSpec(0.8, 0.1, 0.1, seed=seed))
    sq = build_sq_graph(tr, fit_rasch(tr))
    kcs = sorted(log.kcs)
    edges = []
    for a, c in zip(kcs, kcs[1:]):
        edges.append(KcEdge(a, c, RelationType.PREDECESSOR_SUCCESSOR, 0.8))
    kc = KcGraph({k: ConceptProfile(k, k) for k in kcs}, tuple(edges))
    return SimpleNamespace(log=log, planted=planted, train=tr, val=va, test=te, sq=sq, kc=kc,
                           retriever=Retriever(sq, kc, budget=budget), vocab=Vocab.from_graphs(sq, kc),
                           train_windows=window_sequences(tr, window), val_windows=window_sequences(va, window),
                           test_windows=window_sequences(te, window))
