import itertools
import time

import numpy as np
import pytest

from fhkit import model as fm
from fhkit.ce import Stage, StagePlan, run_stage_plan
from fhkit.config import ce_hyper, encoder_config, fullsum_config, load_config
from fhkit.corpus import CorpusSpec, generate_corpus
from fhkit.decode import DecisionRuleConfig, estimate_priors_by_averaging, forced_align
from fhkit.fullsum import train_fullsum
from fhkit.graph import HMMGraph, Lexicon, Topology, build_training_graph
from fhkit.inventory import all_state_classes, build_inventory, factored_indices

# lines printed at the end of the run by the acceptance suite
ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(line)


@pytest.fixture
def inv2():
    return build_inventory(["a", "b"])


@pytest.fixture
def inv5():
    return build_inventory(["a", "e", "i", "o", "u"])


def random_graph(rng, inv, max_nodes=5, edge_prob=0.5):
    """Arbitrary small lattice with random weights (not necessarily normalized)."""
    n = int(rng.integers(1, max_nodes + 1))
    pool = list(all_state_classes(inv))
    classes = [pool[int(i)] for i in rng.integers(0, len(pool), size=n)]
    edges = []
    for s in range(n):
        for d in range(n):
            if rng.random() < edge_prob:
                edges.append((s, d, float(rng.normal(-1.0, 1.0)), None))
    init = np.where(rng.random(n) < 0.6, rng.normal(-0.5, 1.0, n), -np.inf)
    final = np.where(rng.random(n) < 0.6, rng.normal(-0.5, 1.0, n), -np.inf)
    init[int(rng.integers(0, n))] = float(rng.normal())
    final[int(rng.integers(0, n))] = float(rng.normal())
    return HMMGraph(classes, np.array([factored_indices(inv, c) for c in classes]).reshape(-1, 3),
                    edges, init, final, np.full(n, -np.inf), [None] * n)


def small_training_graph(rng, inv, silence=None):
    """A real training graph with at most five nodes."""
    silence = bool(rng.integers(0, 2)) if silence is None else silence
    phone = inv.phonemes[int(rng.integers(0, inv.num_phonemes))]
    lex = Lexicon({"w": [[phone]]}, inv)
    topo = Topology.from_loop_probs(float(rng.uniform(0.1, 0.9)), float(rng.uniform(0.1, 0.9)),
                                    allow_optional_silence=silence)
    return build_training_graph(lex, inv, ["w"], topo)


def enumerate_paths(graph, emissions):
    """All node sequences of length T with their total log scores."""
    T, N = emissions.shape
    paths = np.array(list(itertools.product(range(N), repeat=T)), dtype=np.int64).reshape(-1, T)
    trans = graph.transition_matrix()
    rows = np.arange(T)
    with np.errstate(invalid="ignore"):
        score = graph.initial_logprob[paths[:, 0]] + graph.final_logprob[paths[:, -1]]
        score = score + emissions[rows[None, :], paths].sum(axis=1)
        if T > 1:
            score = score + trans[paths[:, :-1], paths[:, 1:]].sum(axis=1)
    return paths, score


def brute_force_occupancies(graph, emissions):
    paths, score = enumerate_paths(graph, emissions)
    finite = np.isfinite(score)
    if not finite.any():
        return None, -np.inf
    m = score[finite].max()
    w = np.where(finite, np.exp(score - m), 0.0)
    ll = m + np.log(w.sum())
    w = w / w.sum()
    T, N = emissions.shape
    occ = np.zeros((T, N))
    for t in range(T):
        np.add.at(occ[t], paths[:, t], w)
    return occ, ll


def brute_force_viterbi(graph, emissions):
    paths, score = enumerate_paths(graph, emissions)
    best = int(np.argmax(score))
    return paths[best], score[best], score


def tiny_model(inv, order="mono", simplified=False, nonlinearity="tanh", seed=0, D=3, window=1, hidden=(5,)):
    enc = fm.EncoderConfig(D, window, hidden, nonlinearity, dropout=0.0)
    m = fm.init_model(inv, enc, order, simplified, seed=seed)
    rng = np.random.default_rng(seed + 100)
    # non-zero biases so every tensor sees a generic point
    for k, v in m.params.items():
        m.params[k] = v + 0.1 * rng.standard_normal(v.shape)
    return m


def finite_difference_errors(params, loss_fn, grads, step=1e-5):
    """Relative error per tensor between ``grads`` and central differences of ``loss_fn``."""
    errors = {}
    for name, value in params.items():
        fd = np.zeros_like(value)
        flat = value.reshape(-1)
        out = fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn()
            flat[i] = orig - step
            down = loss_fn()
            flat[i] = orig
            out[i] = (up - down) / (2 * step)
        g = grads[name]
        scale = max(np.linalg.norm(g), np.linalg.norm(fd), 1e-8)
        errors[name] = float(np.linalg.norm(g - fd) / scale)
    return errors


# -- trained pipelines shared across modules (slow) ------------------------------

# silence-free corpus used for the flat-start criterion
PLAIN_SPEC = dict(num_utterances=300, num_test_utterances=50, successors_per_word=4, seed=1)
# noisier corpus where neighbouring phones shift each frame's features, so context matters
COART_SPEC = dict(num_utterances=300, num_test_utterances=50, variance=1.0, context_shift=0.5, seed=1)


def _flat_start(spec_kw):
    """Train the flat-start monophone on a generated corpus and force-align its training split."""
    start = time.perf_counter()
    c = generate_corpus(CorpusSpec(**spec_kw))
    cfg = load_config(overrides={"seed": 0})
    fs = fullsum_config(cfg)
    train = c.splits["train"]
    model = fm.init_model(c.inventory, encoder_config(cfg, train[0].features.shape[1], flat_start=True),
                          "mono", simplified_heads=True, seed=0)
    fm.set_feature_normalization(model, [u.features for u in train])
    model, _, history = train_fullsum(model, train, fs)
    priors = estimate_priors_by_averaging(model, [(u.features, None) for u in train[:30]])
    dcfg = DecisionRuleConfig("mono")
    aligns = {u.id: forced_align(model, u.features, u.graph, priors, dcfg, utt_id=u.id,
                                 provenance="fs-falign")[0] for u in train}
    return {"corpus": c, "model": model, "priors": priors, "alignments": aligns, "history": history,
            "epochs": fs.epochs, "seconds": time.perf_counter() - start}


@pytest.fixture(scope="session")
def plain_fs():
    return _flat_start(PLAIN_SPEC)


@pytest.fixture(scope="session")
def coart_fs():
    return _flat_start(COART_SPEC)


@pytest.fixture(scope="session")
def staged(coart_fs):
    start = time.perf_counter()
    c = coart_fs["corpus"]
    cfg = load_config()
    train = c.splits["train"]
    plan = StagePlan([Stage("mono", 5), Stage("di", 5), Stage("tri", 5)])
    res = run_stage_plan(plan, train, coart_fs["alignments"], c.inventory,
                         encoder_config(cfg, train[0].features.shape[1]), ce_hyper(cfg), seed=0)
    return {"result": res, "seconds": time.perf_counter() - start}
