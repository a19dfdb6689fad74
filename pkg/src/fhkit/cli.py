"""``fhkit`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import functools
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import __version__, io
from . import model as fm
from .alignment import alignment_stats, frame_accuracy, linear_align
from .ce import Stage, StagePlan, run_stage_plan
from .config import (ce_hyper, decision_config, dump_config, encoder_config, fullsum_config,
                     load_config)
from .corpus import CorpusSpec, generate_corpus, load_split, write_corpus
from .decode import corpus_wer, decode, estimate_priors_by_averaging, forced_align, _check_order
from .errors import DataError, NumericalError
from .fullsum import PriorState, train_fullsum
from .graph import Topology, build_decoding_graph, compile_lexicon, load_lm
from .inventory import PhonemeInventory, load_inventory

log = logging.getLogger("fhkit")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- helpers ------------------------------------------------------------------

def _path(args, p):
    if p is None or os.path.isabs(p):
        return p
    return os.path.join(args.workdir, p)


def _header(cfg, inv, **extra):
    h = {"seed": cfg["seed"], "config_hash": io.config_hash(cfg), "inventory_hash": inv.hash(),
         "fhkit_version": __version__}
    h.update(extra)
    return h


class Corpus:
    """Shared resources of a corpus directory written by ``corpus-gen``."""

    def __init__(self, root):
        self.root = root
        if not os.path.isdir(root):
            raise DataError(f"corpus directory not found: {root}")
        self.inventory = load_inventory(os.path.join(root, "inventory.json"))
        self.lexicon = compile_lexicon(os.path.join(root, "lexicon.json"), self.inventory)
        topo_path = os.path.join(root, "topology.json")
        if os.path.exists(topo_path):
            with open(topo_path) as f:
                self.topology = Topology.from_dict(json.load(f))
        else:
            self.topology = Topology()
        lm_path = os.path.join(root, "lm.json")
        self.lm_path = lm_path if os.path.exists(lm_path) else None

    def split(self, name):
        manifest = os.path.join(self.root, name, "manifest.jsonl")
        if not os.path.exists(manifest):
            raise DataError(f"no manifest for split {name!r} in {self.root}")
        return load_split(manifest, self.lexicon, self.inventory, self.topology)

    def ground_truth(self, name):
        return os.path.join(self.root, name, "ground_truth.align")


def _parallel_map(fn, items, jobs):
    """Order-preserving map over utterances; results do not depend on ``jobs``."""
    items = list(items)
    if jobs <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    chunk = max(1, len(items) // (4 * jobs))
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items, chunksize=chunk))


def _load_model(args, path):
    model, meta = io.read_checkpoint(_path(args, path))
    priors = PriorState.from_dict(meta["priors"]) if meta.get("priors") else None
    return model, meta, priors


def _alignment_map(args, path, inv):
    entries, _ = io.read_alignment(_path(args, path), inv)
    return {e.id: e for e in entries}


def _write_log(path, records):
    if path:
        with open(path, "w") as f:
            for r in records:
                f.write(io.canonical_json(r) + "\n")


def _align_one(model, priors, cfg, provenance, utt):
    entry, _ = forced_align(model, utt.features, utt.graph, priors, cfg, utt_id=utt.id,
                            provenance=provenance)
    return entry


def _decode_one(model, priors, cfg, dgraph, beam, utt):
    res = decode(model, utt.features, dgraph, priors, cfg, beam=beam)
    return utt.id, res.words, res.score


# -- subcommands ----------------------------------------------------------------

def cmd_corpus_gen(args, cfg):
    with open(_path(args, args.spec)) as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as e:
            raise DataError(f"{args.spec}: invalid JSON: {e}") from None
    if os.environ.get("FHKIT_SEED") is not None:
        raw["seed"] = cfg["seed"]
    spec = CorpusSpec.from_dict(raw)
    corpus = generate_corpus(spec)
    out = _path(args, args.out)
    header = {"seed": spec.seed, "config_hash": io.config_hash(raw),
              "inventory_hash": corpus.inventory.hash(), "fhkit_version": __version__}
    write_corpus(corpus, out, header)
    with open(os.path.join(out, "meta.json"), "w") as f:
        json.dump({"header": header, "spec": raw}, f, indent=1, sort_keys=True)
        f.write("\n")
    n = {k: len(v) for k, v in corpus.splits.items()}
    print(f"wrote corpus to {out}: {n}")


def cmd_train_fs(args, cfg):
    corpus = Corpus(_path(args, args.corpus))
    utts = corpus.split(args.split)
    if not utts:
        raise DataError("training split is empty")
    fs_cfg = fullsum_config(cfg)
    if args.epochs is not None:
        fs_cfg.epochs = args.epochs
    enc = encoder_config(cfg, utts[0].features.shape[1], flat_start=True)
    model = fm.init_model(corpus.inventory, enc, "mono", simplified_heads=True, seed=cfg["seed"])
    fm.set_feature_normalization(model, [u.features for u in utts])
    model, priors, history = train_fullsum(model, utts, fs_cfg)
    header = _header(cfg, corpus.inventory)
    io.write_checkpoint(_path(args, args.out), model, {
        "header": header, "stage": "fs", "epoch": fs_cfg.epochs, "optimizer": "nadam",
        "lr": history[-1]["lr"] if history else fs_cfg.lr, "priors": priors.to_dict(),
        "lineage": [{"stage": "fs", "context_order": "mono", "epochs": fs_cfg.epochs}],
        "history": history,
    })
    _write_log(_path(args, args.log), [header] + history)
    print(f"wrote {args.out}")


def cmd_align(args, cfg):
    corpus = Corpus(_path(args, args.corpus))
    utts = corpus.split(args.split)
    inv = corpus.inventory
    if args.linear:
        entries = [linear_align(u.graph, len(u.features), inv, u.id) for u in utts]
        header = _header(cfg, inv, source="linear")
    else:
        if not args.model:
            raise UsageError("align needs --model unless --linear is given")
        model, meta, priors = _load_model(args, args.model)
        if model.inventory.hash() != inv.hash():
            raise DataError("inventory-hash mismatch (corpus vs model)")
        if priors is None:
            raise DataError("checkpoint has no priors; run estimate-priors first")
        order = args.order or model.context_order
        dcfg = decision_config(cfg, order)
        _check_order(model, dcfg)
        provenance = "fs-falign" if meta.get("stage") == "fs" else f"{order}-falign"
        fn = functools.partial(_align_one, model, priors, dcfg, provenance)
        entries = _parallel_map(fn, utts, args.jobs)
        header = _header(cfg, inv, source=os.path.basename(args.model), model_header=meta.get("header"))
    io.write_alignment(_path(args, args.out), entries, inv, {"header": header})
    print(f"wrote {len(entries)} alignments to {args.out}")


def _run_plan(args, cfg, plan, corpus_dir, alignment, init, out, log_path):
    corpus = Corpus(_path(args, corpus_dir))
    utts = corpus.split(args.split)
    if not utts:
        raise DataError("training split is empty")
    inv = corpus.inventory
    aligns = _alignment_map(args, alignment, inv)
    model = None
    lineage = []
    if init:
        model, meta, _ = _load_model(args, init)
        if model.inventory.hash() != inv.hash():
            raise DataError("inventory-hash mismatch (corpus vs model)")
        lineage = list(meta.get("lineage", []))
    records = []
    res = run_stage_plan(plan, utts, aligns, inv, encoder_config(cfg, utts[0].features.shape[1]), ce_hyper(cfg),
                         decision_config(cfg, "mono"), seed=cfg["seed"], model=model,
                         prior_fraction=cfg["decode"]["prior_subset_fraction"],
                         on_epoch=records.append)
    header = _header(cfg, inv)
    io.write_checkpoint(_path(args, out), res.model, {
        "header": header, "stage": "ce", "optimizer": "nadam", "priors": res.priors.to_dict(),
        "epoch": plan.stages[-1].epochs, "lineage": lineage + res.lineage,
        "plan": plan.to_dict(), "history": res.histories,
    })
    _write_log(_path(args, log_path), [header] + records)
    print(f"wrote {out}")


def cmd_train_ce(args, cfg):
    plan = StagePlan([Stage(args.order, args.epochs if args.epochs is not None else cfg["ce"]["epochs"])])
    _run_plan(args, cfg, plan, args.corpus, args.alignment, args.init, args.out, args.log)


def cmd_run_plan(args, cfg):
    with open(_path(args, args.plan)) as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as e:
            raise DataError(f"{args.plan}: invalid JSON: {e}") from None
    if not isinstance(raw, dict):
        raw = {"stages": raw}
    plan = StagePlan.from_dict(raw)
    pick = {k: getattr(args, k) or raw.get(k) for k in ("corpus", "alignment", "init", "out", "log")}
    for k in ("corpus", "alignment", "out"):
        if not pick[k]:
            raise UsageError(f"run-plan needs --{k} (or a '{k}' key in the plan file)")
    _run_plan(args, cfg, plan, pick["corpus"], pick["alignment"], pick["init"], pick["out"], pick["log"])


def cmd_estimate_priors(args, cfg):
    model, meta, _ = _load_model(args, args.model)
    corpus = Corpus(_path(args, args.corpus))
    utts = corpus.split(args.split)
    inv = corpus.inventory
    if model.inventory.hash() != inv.hash():
        raise DataError("inventory-hash mismatch (corpus vs model)")
    aligns = _alignment_map(args, args.alignment, inv) if args.alignment else None
    if model.needs_context and aligns is None:
        raise DataError("context-dependent models need --alignment for prior estimation")
    fraction = args.fraction if args.fraction is not None else cfg["decode"]["prior_subset_fraction"]
    n = max(1, int(round(fraction * len(utts))))
    rng = np.random.default_rng(cfg["seed"])
    idx = sorted(rng.choice(len(utts), size=min(n, len(utts)), replace=False))
    subset = [(utts[i].features, aligns[utts[i].id].factored(inv) if aligns else None) for i in idx]
    priors = estimate_priors_by_averaging(model, subset)
    meta = {k: v for k, v in meta.items() if k not in ("inventory", "inventory_hash", "model", "arrays")}
    meta["priors"] = priors.to_dict()
    meta["priors_source"] = {"method": "average", "utterances": len(subset)}
    io.write_checkpoint(_path(args, args.out or args.model), model, meta)
    print(f"wrote priors from {len(subset)} utterances")


def cmd_decode(args, cfg):
    model, meta, priors = _load_model(args, args.model)
    corpus = Corpus(_path(args, args.corpus))
    inv = corpus.inventory
    if model.inventory.hash() != inv.hash():
        raise DataError("inventory-hash mismatch (corpus vs model)")
    if priors is None:
        raise DataError("checkpoint has no priors; run estimate-priors first")
    dcfg = decision_config(cfg, args.order or model.context_order)
    if args.prior_scales:
        dcfg.prior_left, dcfg.prior_center, dcfg.prior_right = args.prior_scales
    if args.lm_scale is not None:
        dcfg.lm_scale = args.lm_scale
    _check_order(model, dcfg)
    lm_path = _path(args, args.lm) if args.lm else corpus.lm_path
    if lm_path is None:
        raise DataError("no language model: pass --lm or add lm.json to the corpus")
    lm = load_lm(lm_path)
    dgraph = build_decoding_graph(corpus.lexicon, inv, lm, corpus.topology, lm_scale=dcfg.lm_scale)
    utts = corpus.split(args.split)
    beam = args.beam if args.beam is not None else cfg["decode"]["beam"]
    fn = functools.partial(_decode_one, model, priors, dcfg, dgraph, beam)
    results = _parallel_map(fn, utts, args.jobs)
    header = _header(cfg, inv, model_header=meta.get("header"), decision_rule=dcfg.context_order,
                     prior_scales=[dcfg.prior_left, dcfg.prior_center, dcfg.prior_right],
                     lm_scale=dcfg.lm_scale)
    lines = ["# " + io.canonical_json(header)]
    lines += [f"{uid}\t{score!r}\t{' '.join(words)}" for uid, words, score in results]
    with open(_path(args, args.out), "w") as f:
        f.write("\n".join(lines) + "\n")
    print(f"wrote {len(results)} hypotheses to {args.out}")


def read_hypotheses(path) -> dict:
    hyps = {}
    with open(path) as f:
        for ln in f:
            ln = ln.rstrip("\n")
            if not ln or ln.startswith("#"):
                continue
            parts = ln.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}: malformed hypothesis line {ln!r}")
            hyps[parts[0]] = parts[2].split()
    return hyps


def cmd_score_wer(args, cfg):
    hyps = read_hypotheses(_path(args, args.hyp))
    if args.ref:
        refs = {r["id"]: r["transcript"] for r in io.read_manifest(_path(args, args.ref))}
    elif args.corpus:
        refs = {r["id"]: r["transcript"]
                for r in io.read_manifest(os.path.join(_path(args, args.corpus), args.split, "manifest.jsonl"))}
    else:
        raise UsageError("score-wer needs --ref or --corpus")
    missing = sorted(set(refs) - set(hyps))
    if missing:
        raise DataError(f"no hypothesis for {len(missing)} utterances, e.g. {missing[0]}")
    res = corpus_wer((hyps[uid], refs[uid]) for uid in sorted(refs))
    out = {"wer": res.wer, "substitutions": res.substitutions, "deletions": res.deletions,
           "insertions": res.insertions, "ref_words": res.ref_words, "utterances": len(refs)}
    print(json.dumps(out, sort_keys=True))


def cmd_align_stats(args, cfg):
    entries, header = io.read_alignment(_path(args, args.alignment))
    inv = PhonemeInventory.from_dict(header["inventory"])
    stats = alignment_stats(entries, inv)
    if args.ref:
        ref, _ = io.read_alignment(_path(args, args.ref), inv)
        stats["frame_accuracy"] = frame_accuracy(entries, ref)
    text = json.dumps(stats, indent=1, sort_keys=True)
    if args.out:
        with open(_path(args, args.out), "w") as f:
            f.write(text + "\n")
    print(text)


def cmd_show_config(args, cfg):
    sys.stdout.write(dump_config(cfg))


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fhkit", description="Factored hybrid HMM toolkit.")
    p.add_argument("--version", action="version", version=f"fhkit {__version__}")
    p.add_argument("--workdir", default=".", help="base directory for relative paths")
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="worker processes")
    p.add_argument("--config", help="JSON file overriding the default configuration")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("corpus-gen", help="generate a synthetic corpus")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_corpus_gen)

    s = sub.add_parser("train-fs", help="flat-start full-sum training")
    s.add_argument("--corpus", required=True)
    s.add_argument("--split", default="train")
    s.add_argument("--epochs", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--log")
    s.set_defaults(func=cmd_train_fs)

    s = sub.add_parser("align", help="forced or linear alignment")
    s.add_argument("--model")
    s.add_argument("--corpus", required=True)
    s.add_argument("--split", default="train")
    s.add_argument("--order", choices=fm.ORDERS)
    s.add_argument("--linear", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_align)

    s = sub.add_parser("train-ce", help="one CE stage from a fixed alignment")
    s.add_argument("--corpus", required=True)
    s.add_argument("--split", default="train")
    s.add_argument("--alignment", required=True)
    s.add_argument("--order", choices=fm.ORDERS, default="mono")
    s.add_argument("--epochs", type=int)
    s.add_argument("--init", help="checkpoint of the previous stage")
    s.add_argument("--out", required=True)
    s.add_argument("--log")
    s.set_defaults(func=cmd_train_ce)

    s = sub.add_parser("run-plan", help="multi-stage CE training")
    s.add_argument("--plan", required=True)
    s.add_argument("--corpus")
    s.add_argument("--split", default="train")
    s.add_argument("--alignment")
    s.add_argument("--init")
    s.add_argument("--out")
    s.add_argument("--log")
    s.set_defaults(func=cmd_run_plan)

    s = sub.add_parser("estimate-priors", help="average head posteriors into checkpoint priors")
    s.add_argument("--model", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--split", default="train")
    s.add_argument("--alignment")
    s.add_argument("--fraction", type=float)
    s.add_argument("--out", help="output checkpoint (default: overwrite --model)")
    s.set_defaults(func=cmd_estimate_priors)

    s = sub.add_parser("decode", help="recognize with a bigram word loop")
    s.add_argument("--model", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--order", choices=fm.ORDERS, help="decision rule (default: model order)")
    s.add_argument("--prior-scales", type=float, nargs=3, metavar=("LEFT", "CENTER", "RIGHT"))
    s.add_argument("--lm")
    s.add_argument("--lm-scale", type=float)
    s.add_argument("--beam", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("score-wer", help="word error rate of a hypothesis file")
    s.add_argument("--hyp", required=True)
    s.add_argument("--ref", help="reference manifest")
    s.add_argument("--corpus")
    s.add_argument("--split", default="test")
    s.set_defaults(func=cmd_score_wer)

    s = sub.add_parser("align-stats", help="alignment statistics")
    s.add_argument("--alignment", required=True)
    s.add_argument("--ref", help="reference alignment for frame accuracy")
    s.add_argument("--out")
    s.set_defaults(func=cmd_align_stats)

    s = sub.add_parser("show-config", help="print the effective configuration")
    s.set_defaults(func=cmd_show_config)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
    except UsageError as e:
        print(f"fhkit: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(_path(args, args.config))
        args.func(args, cfg)
    except UsageError as e:
        print(f"fhkit: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as e:
        print(f"fhkit: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, OSError) as e:
        print(f"fhkit: error: {e}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as e:
        print(f"fhkit: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
