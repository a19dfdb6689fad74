"""Acceptance criteria, one test each.

Every test appends a PASS/FAIL line to ``conftest.ACCEPTANCE_RESULTS``; the
lines are printed in the terminal summary.
"""

import json
import subprocess
import sys
import time
from contextlib import contextmanager

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import conftest
from conftest import (brute_force_occupancies, brute_force_viterbi, finite_difference_errors, random_graph,
                      small_training_graph, tiny_model)
from fhkit import model as fm
from fhkit.alignment import frame_accuracy
from fhkit.ce import CEHyper, Stage, StagePlan, ce_step, run_stage_plan
from fhkit.config import DEFAULT_CONFIG, ce_hyper, decision_config, dump_config, encoder_config, load_config
from fhkit.decode import corpus_wer, decode, estimate_priors_by_averaging, viterbi
from fhkit.errors import DataError, NumericalError
from fhkit.fullsum import (PriorState, Scales, forward_backward, fullsum_utterance,
                           marginalize_occupancies, update_prior_online)
from fhkit.graph import HMMGraph, build_decoding_graph
from fhkit.inventory import StateClass, build_inventory, factored_indices

GOLDEN = conftest.__file__.replace("conftest.py", "golden/default_config.json")

@contextmanager
def criterion(name, limit=None):
    """Time the block and record one PASS/FAIL line, also when it raises."""
    info = {}
    start = time.perf_counter()
    ok = False
    try:
        yield info
        ok = True
    finally:
        elapsed = time.perf_counter() - start + info.get("extra_seconds", 0.0)
        if limit is not None and elapsed >= limit:
            ok = False
            info["detail"] = f"{info.get('detail', '')} runtime {elapsed:.1f}s over {limit}s".strip()
        status = "PASS" if ok else "FAIL"
        conftest.ACCEPTANCE_RESULTS.append(f"{status}  {name}  ({elapsed:.1f}s)  {info.get('detail', '')}")
    if limit is not None:
        assert elapsed < limit, f"{name}: {elapsed:.1f}s >= {limit}s"


def _test_wer(corpus, model, priors, order):
    dgraph = build_decoding_graph(corpus.lexicon, corpus.inventory, corpus.lm, corpus.topology)
    cfg = decision_config(load_config(), order)
    return corpus_wer([(decode(model, u.features, dgraph, priors, cfg).words, u.transcript)
                       for u in corpus.splits["test"]])


# -- lattice algorithms ----------------------------------------------------------------

def _instances(seed):
    """Random lattices and small training graphs, alternating, with T in 1..8."""
    rng = np.random.default_rng(seed)
    inv = build_inventory(["a", "b"])
    k = 0
    while True:
        g = random_graph(rng, inv) if k % 2 == 0 else small_training_graph(rng, inv)
        T = int(rng.integers(1, 9))
        yield g, rng.normal(size=(T, g.num_nodes))
        k += 1


def test_oracle_equivalence():
    with criterion("oracle equivalence: forward-backward vs path enumeration", limit=10.0) as info:
        checked = infeasible = 0
        worst_gamma = worst_ll = 0.0
        for g, em in _instances(11):
            if checked >= 250:
                break
            assert g.num_nodes <= 5 and len(em) <= 8
            ref_occ, ref_ll = brute_force_occupancies(g, em)
            if ref_occ is None:
                with pytest.raises((DataError, NumericalError)):
                    forward_backward(g, em)
                infeasible += 1
                continue
            occ, ll = forward_backward(g, em)
            worst_gamma = max(worst_gamma, float(np.max(np.abs(occ - ref_occ))))
            worst_ll = max(worst_ll, abs(ll - ref_ll))
            checked += 1
        info["detail"] = (f"{checked} instances (+{infeasible} infeasible), max |dgamma| {worst_gamma:.1e}, "
                          f"max |dlogL| {worst_ll:.1e}")
        assert checked >= 200
        assert worst_gamma < 1e-10 and worst_ll < 1e-10


def _tie_graphs(inv):
    H = np.log(0.5)
    out = []
    # A A B vs A B B on a two-state chain
    classes = [StateClass("#", "a", i, "#") for i in range(2)]
    idx = np.array([factored_indices(inv, c) for c in classes])
    g = HMMGraph(classes, idx, [(0, 0, H, None), (0, 1, H, None), (1, 1, H, None)],
                 np.array([0.0, -np.inf]), np.array([-np.inf, 0.0]), np.full(2, -np.inf), [None] * 2)
    out.append((g, np.zeros((3, 2)), [0, 0, 1]))
    # diamond: two equal routes through nodes 1 and 2
    classes = [StateClass("#", "a", i, "#") for i in range(3)] + [StateClass("#", "b", 0, "#")]
    idx = np.array([factored_indices(inv, c) for c in classes])
    g = HMMGraph(classes, idx, [(0, 1, H, None), (0, 2, H, None), (1, 3, 0.0, None), (2, 3, 0.0, None)],
                 np.array([0.0, -np.inf, -np.inf, -np.inf]), np.array([-np.inf, -np.inf, -np.inf, 0.0]),
                 np.full(4, -np.inf), [None] * 4)
    out.append((g, np.zeros((3, 4)), [0, 1, 3]))
    # two isolated equal final nodes
    classes = [StateClass("#", "a", i, "#") for i in range(2)]
    idx = np.array([factored_indices(inv, c) for c in classes])
    g = HMMGraph(classes, idx, [], np.zeros(2), np.zeros(2), np.full(2, -np.inf), [None] * 2)
    out.append((g, np.zeros((1, 2)), [0]))
    return out


def test_viterbi_correctness():
    with criterion("viterbi: brute-force argmax and tie-breaking", limit=10.0) as info:
        checked = 0
        worst = 0.0
        for g, em in _instances(12):
            if checked >= 250:
                break
            best_path, best_score, _ = brute_force_viterbi(g, em)
            if not np.isfinite(best_score):
                with pytest.raises((DataError, NumericalError)):
                    viterbi(g, em)
                continue
            path, score = viterbi(g, em)
            assert path.tolist() == best_path.tolist()
            worst = max(worst, abs(score - best_score))
            checked += 1
        assert worst < 1e-10
        inv = build_inventory(["a", "b"])
        ties = _tie_graphs(inv)
        for g, em, expect in ties:
            for _ in range(3):
                assert viterbi(g, em)[0].tolist() == expect
        info["detail"] = f"{checked} instances, max |dscore| {worst:.1e}, {len(ties)} constructed ties"
        assert checked >= 200


def test_gradient_integrity():
    with criterion("gradients: full-sum (frozen gamma) and focal CE vs central differences", limit=60.0) as info:
        inv = build_inventory(["a", "b"])
        errors = {}
        for nl in ("relu", "tanh"):
            m = tiny_model(inv, "mono", simplified=True, nonlinearity=nl, window=1, hidden=(4,))
            rng = np.random.default_rng(3)
            g = small_training_graph(rng, inv, silence=True)
            x = rng.normal(size=(6, 3))
            scales = Scales(0.3, 0.3, 0.7, 0.4)
            pri = PriorState(rng.random(3), rng.random(7), rng.random(3))
            _, grads, _, occ, _ = fullsum_utterance(m, x, g, pri, scales)

            def frozen(m=m, x=x, occ=occ, a=scales.am):
                post, _ = fm.forward(m, x)
                return -a * sum(float(np.sum(occ.head(n) * post.head(n))) for n in fm.HEADS)

            for k, v in finite_difference_errors(m.params, frozen, grads).items():
                errors[f"fs/{nl}/{k}"] = v
        for order in fm.ORDERS:
            m = tiny_model(inv, order, window=1, hidden=(4,))
            rng = np.random.default_rng(4)
            batch = []
            for T in (3, 2):
                lab = np.stack([rng.integers(0, 3, T), rng.integers(0, 7, T), rng.integers(0, 3, T)], axis=1)
                batch.append((rng.normal(size=(T, 3)), lab))
            hyper = CEHyper(l2=0.01, focal_gamma=2.0)
            _, grads = ce_step(m, batch, hyper)
            for k, v in finite_difference_errors(m.params, lambda: ce_step(m, batch, hyper)[0], grads).items():
                errors[f"ce/{order}/{k}"] = v
        worst = max(errors, key=errors.get)
        info["detail"] = f"{len(errors)} tensors, worst {worst} rel err {errors[worst]:.1e}"
        assert errors[worst] < 1e-4


def test_normalization_suite():
    counts = {"heads": 0, "gamma": 0, "priors": 0}

    @settings(max_examples=400, deadline=None, database=None)
    @given(st.integers(1, 4), st.integers(1, 6), st.sampled_from(fm.ORDERS), st.integers(0, 2 ** 16),
           st.floats(0.1, 30.0))
    def heads(n_phones, T, order, seed, scale):
        inv = build_inventory([f"p{i}" for i in range(n_phones)])
        m = fm.init_model(inv, fm.EncoderConfig(2, 1, (3,)), order, seed=seed)
        rng = np.random.default_rng(seed)
        x = scale * rng.normal(size=(T, 2))
        ctx = (rng.integers(0, inv.num_contexts, T), rng.integers(0, inv.num_center_states, T))
        post, _ = fm.forward(m, x, ctx)
        for name in fm.HEADS:
            assert np.max(np.abs(np.exp(post.head(name)).sum(axis=1) - 1.0)) < 1e-6
        counts["heads"] += 1

    # infeasible lattices are drawn but not counted
    @settings(max_examples=600, deadline=None, database=None)
    @given(st.integers(0, 2 ** 31), st.integers(1, 8))
    def gamma(seed, T):
        inv = build_inventory(["a", "b"])
        rng = np.random.default_rng(seed)
        g = random_graph(rng, inv) if seed % 2 else small_training_graph(rng, inv)
        em = 3.0 * rng.normal(size=(T, g.num_nodes))
        try:
            occ, _ = forward_backward(g, em)
        except (DataError, NumericalError):
            return
        assert np.max(np.abs(occ.sum(axis=1) - 1.0)) < 1e-10
        gm = marginalize_occupancies(g, occ, inv)
        for name in fm.HEADS:
            assert np.max(np.abs(gm.head(name).sum(axis=1) - 1.0)) < 1e-8
        counts["gamma"] += 1

    @settings(max_examples=300, deadline=None, database=None)
    @given(st.integers(0, 2 ** 31), st.floats(0.0, 1.0), st.integers(1, 5))
    def priors(seed, decay, T):
        rng = np.random.default_rng(seed)
        pri = PriorState(rng.random(4) + 1e-9, rng.random(9) + 1e-9, rng.random(4) + 1e-9, decay)
        post = fm.PosteriorBatch(*(fm.log_softmax(5 * rng.normal(size=(T, k))) for k in (4, 9, 4)))
        inv = build_inventory(["a"])
        m = fm.init_model(inv, fm.EncoderConfig(2, 0, (3,)), "mono", seed=seed % 1000)
        avg = estimate_priors_by_averaging(m, [(rng.normal(size=(T, 2)), None)])
        for p in (pri, update_prior_online(pri, post), avg):
            for name in fm.HEADS:
                v = p.head(name)
                assert abs(v.sum() - 1.0) < 1e-8 and np.all(v > 0)
        counts["priors"] += 1

    with criterion("normalization: head rows, gamma rows, prior vectors") as info:
        heads()
        gamma()
        priors()
        total = sum(counts.values())
        info["detail"] = f"{total} cases {counts}"
        assert total >= 1000


# -- end-to-end -------------------------------------------------------------------------

def test_flat_start_end_to_end(plain_fs):
    with criterion("flat-start end-to-end: F-align frame accuracy >= 90%", limit=15 * 60) as info:
        info["extra_seconds"] = plain_fs["seconds"]
        c = plain_fs["corpus"]
        assert c.inventory.num_phonemes == 5 and c.means.shape[1] == 8 and len(c.lexicon.words) == 30
        assert len(c.splits["train"]) == 300 and len(c.splits["test"]) == 50
        assert plain_fs["epochs"] == 30
        # silence-free generation
        sil = c.inventory.silence_idx
        assert all(not np.any(e.factored(c.inventory)[:, 1] == sil) for e in c.alignments["train"])
        ref = c.alignments["train"]
        acc = frame_accuracy([plain_fs["alignments"][e.id] for e in ref], ref)
        info["detail"] = f"frame accuracy {100 * acc:.2f}%"
        assert acc >= 0.90


def test_staged_pipeline(coart_fs, staged):
    with criterion("staged pipeline: tri WER <= 5% and below flat-start WER", limit=30 * 60) as info:
        info["extra_seconds"] = coart_fs["seconds"] + staged["seconds"]
        c = coart_fs["corpus"]
        res = staged["result"]
        assert [s["context_order"] for s in res.lineage] == ["mono", "di", "tri"]
        assert all(s["alignment"] == "fs-falign" for s in res.lineage)
        fs_wer = _test_wer(c, coart_fs["model"], coart_fs["priors"], "mono")
        tri_wer = _test_wer(c, res.model, res.priors, "tri")
        info["detail"] = f"tri WER {tri_wer.wer:.2f}%, flat-start WER {fs_wer.wer:.2f}%"
        assert not tri_wer.degenerate
        assert tri_wer.wer <= 5.0
        assert tri_wer.wer < fs_wer.wer


def test_multi_stage_benefit(coart_fs):
    with criterion("multi-stage: diphone from monophone >= scratch diphone - 0.5 points") as info:
        c = coart_fs["corpus"]
        cfg = load_config()
        train = c.splits["train"]
        enc = encoder_config(cfg, train[0].features.shape[1])
        hyper = ce_hyper(cfg)
        # same seed, so both runs use the same held-out utterances
        grown = run_stage_plan(StagePlan([Stage("mono", 5), Stage("di", 5)]), train, coart_fs["alignments"],
                               c.inventory, enc, hyper, seed=0)
        scratch = run_stage_plan(StagePlan([Stage("di", 5)]), train, coart_fs["alignments"],
                                 c.inventory, enc, hyper, seed=0)
        a = 100 * grown.histories[-1][-1]["heldout_frame_accuracy"]
        b = 100 * scratch.histories[-1][-1]["heldout_frame_accuracy"]
        info["detail"] = f"held-out accuracy: from mono {a:.2f}%, scratch {b:.2f}%"
        assert a >= b - 0.5


# -- configuration and reproducibility ----------------------------------------------------

def test_hyperparameter_fidelity(monkeypatch):
    monkeypatch.delenv("FHKIT_SEED", raising=False)
    with criterion("hyperparameter fidelity: emitted config equals golden file") as info:
        emitted = subprocess.run([sys.executable, "-m", "fhkit.cli", "show-config"], capture_output=True,
                                 text=True, check=True).stdout
        with open(GOLDEN) as f:
            golden = f.read()
        assert emitted == golden
        assert dump_config(DEFAULT_CONFIG) == golden
        info["detail"] = f"{len(golden.splitlines())} lines identical"


def _pipeline(root):
    spec = {"num_words": 6, "num_utterances": 16, "num_test_utterances": 4, "words_per_utterance": [1, 2],
            "feature_dim": 4, "variance": 0.3, "context_shift": 0.2, "seed": 5}
    cfg = {"model": {"hidden": [12]}, "fs": {"epochs": 2}, "ce": {"epochs": 1}}
    plan = {"stages": [{"context_order": "mono", "epochs": 1}, {"context_order": "di", "epochs": 1},
                       {"context_order": "tri", "epochs": 1, "realign_after": True}]}
    root.mkdir()
    (root / "spec.json").write_text(json.dumps(spec))
    (root / "cfg.json").write_text(json.dumps(cfg))
    (root / "plan.json").write_text(json.dumps(plan))
    base = [sys.executable, "-m", "fhkit.cli", "--workdir", str(root), "--config", "cfg.json"]
    steps = [
        ["corpus-gen", "--spec", "spec.json", "--out", "corpus"],
        ["train-fs", "--corpus", "corpus", "--out", "fs.ckpt", "--log", "fs.log"],
        ["align", "--model", "fs.ckpt", "--corpus", "corpus", "--out", "fs.align"],
        ["run-plan", "--plan", "plan.json", "--corpus", "corpus", "--alignment", "fs.align", "--init", "fs.ckpt",
         "--out", "tri.ckpt"],
        ["estimate-priors", "--model", "tri.ckpt", "--corpus", "corpus", "--alignment", "fs.align",
         "--out", "tri_p.ckpt"],
        ["decode", "--model", "tri_p.ckpt", "--corpus", "corpus", "--out", "hyp.txt"],
    ]
    for s in steps:
        subprocess.run(base + s, check=True, capture_output=True)
    return root


def test_determinism(tmp_path, monkeypatch):
    monkeypatch.delenv("FHKIT_SEED", raising=False)
    with criterion("determinism: rerun gives bit-identical checkpoints and hypotheses") as info:
        a = _pipeline(tmp_path / "a")
        b = _pipeline(tmp_path / "b")
        names = ["fs.ckpt", "fs.align", "tri.ckpt", "tri_p.ckpt", "hyp.txt", "fs.log"]
        same = [n for n in names if (a / n).read_bytes() == (b / n).read_bytes()]
        info["detail"] = f"{len(same)}/{len(names)} files identical"
        assert same == names
