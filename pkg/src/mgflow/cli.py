"""Command-line entry point: ``mgflow {synth,train,transform,diagnose,score,eval}``.

Exit codes: 0 success, 2 usage error, 3 training divergence, 4 data error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import data as D
from .flow import DnfModel, FlowModel, load_checkpoint, save_checkpoint
from .metrics import gauss_report, variation_report, write_json
from .objectives import ObjectiveSpec, parse_variant, variant_name
from .scoring import PldaModel, TrialList, cosine_score, eer, plda_score, plda_train, read_scores, write_scores
from .training import TrainConfig, train

log = logging.getLogger("mgflow")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_DATA = 0, 2, 3, 4


class UsageError(Exception):
    pass


# -- run configs -------------------------------------------------------------------

_TOP_KEYS = {"output", "data", "model", "variants", "objective", "train", "seeds"}
_DATA_KEYS = {"path", "synth", "subsample", "eval_classes"}
_MODEL_KEYS = {"blocks", "hidden"}


@dataclass
class RunConfig:
    output: str
    variants: list
    train: TrainConfig
    objective: dict = field(default_factory=dict)
    data_path: str | None = None
    synth: D.SynthSpec | None = None
    subsample: int | None = None
    blocks: int = 10
    hidden: int | None = None
    seeds: list | None = None
    eval_classes: int = 0

    @classmethod
    def from_dict(cls, cfg: dict, base_dir=".") -> "RunConfig":
        def check(section, allowed, where):
            unknown = set(section) - allowed
            if unknown:
                raise UsageError(f"unknown keys in {where}: {sorted(unknown)}")

        check(cfg, _TOP_KEYS, "config")
        data = cfg.get("data") or {}
        check(data, _DATA_KEYS, "data")
        model = cfg.get("model") or {}
        check(model, _MODEL_KEYS, "model")
        if ("path" in data) == ("synth" in data):
            raise UsageError("data needs exactly one of 'path' or 'synth'")
        variants = cfg.get("variants")
        if not variants:
            raise UsageError("config names no variants")
        objective = cfg.get("objective") or {}
        for v in variants:
            try:
                parse_variant(v, **objective)
            except (ValueError, TypeError) as e:
                raise UsageError(str(e)) from None
        try:
            train_cfg = TrainConfig.from_dict(cfg.get("train") or {})
            synth = D.SynthSpec(**data["synth"]) if "synth" in data else None
        except (ValueError, TypeError) as e:
            raise UsageError(str(e)) from None
        path = data.get("path")
        if path is not None and not Path(path).is_absolute():
            path = str(Path(base_dir) / path)
        out = cfg.get("output", "runs")
        if not Path(out).is_absolute():
            out = str(Path(base_dir) / out)
        return cls(out, list(variants), train_cfg, objective, path, synth, data.get("subsample"),
                   model.get("blocks", 10), model.get("hidden"), cfg.get("seeds"), data.get("eval_classes", 0))

    @classmethod
    def load(cls, path, output: str | None = None) -> "RunConfig":
        with open(path) as fh:
            cfg = yaml.safe_load(fh) or {}
        if output is not None:
            cfg["output"] = output
        # relative paths resolve against the working directory, like every other CLI path
        return cls.from_dict(cfg, base_dir=".")


@dataclass
class RunResult:
    variant: str
    seed: int
    model: object
    log: object
    directory: Path
    train_store: D.VectorStore = None
    eval_store: D.VectorStore | None = None


def load_datasets(cfg: RunConfig, seed: int):
    """``(train, eval)`` stores; eval holds the last ``eval_classes`` classes, or is None."""
    if cfg.synth is not None:
        store = D.synth_gmm(cfg.synth) if cfg.synth.kind == "gmm" else D.synth_warped_speakers(cfg.synth)
    else:
        store = D.load(cfg.data_path)
    heldout = None
    if cfg.eval_classes:
        classes = store.classes()
        if cfg.eval_classes >= len(classes):
            raise ValueError(f"cannot hold out {cfg.eval_classes} of {len(classes)} classes")
        mask = np.isin(store.labels, classes[len(classes) - cfg.eval_classes:])
        heldout = store.subset(np.flatnonzero(mask))
        store = store.subset(np.flatnonzero(~mask))
    if cfg.subsample is not None and cfg.subsample < len(store):
        pick = np.random.default_rng(seed).choice(len(store), cfg.subsample, replace=False)
        store = store.subset(np.sort(pick))
    return store, heldout


def run_config(cfg: RunConfig, progress=None) -> list[RunResult]:
    """Train every (seed, variant) pair of ``cfg`` and write checkpoints and logs."""
    seeds = cfg.seeds if cfg.seeds is not None else [cfg.train.seed]
    results = []
    for seed in seeds:
        store, heldout = load_datasets(cfg, seed)
        for name in cfg.variants:
            spec = parse_variant(name, **cfg.objective)
            tc = TrainConfig.from_dict({**cfg.train.to_dict(), "seed": seed})
            flow = FlowModel(store.dim, cfg.blocks, cfg.hidden, seed=seed)
            model = DnfModel(flow, store.classes()) if spec.model == "dnf" else flow
            outdir = Path(cfg.output) / variant_name(spec)
            if cfg.seeds is not None:
                outdir = outdir / f"seed{seed}"
            outdir.mkdir(parents=True, exist_ok=True)
            model, trainlog = train(model, store, spec, tc, checkpoint_path=outdir / "checkpoint.npz")
            save_checkpoint(outdir / "checkpoint.npz", model, spec.to_dict(),
                            {"train": tc.to_dict(), "diverged": trainlog.diverged})
            trainlog.to_csv(outdir / "trainlog.csv")
            if progress:
                progress(f"{variant_name(spec)} seed={seed}: {trainlog.final.step} steps, "
                         f"objective {trainlog.final.objective:.4g}, diverged={trainlog.diverged}")
            results.append(RunResult(variant_name(spec), seed, model, trainlog, outdir, store, heldout))
    return results


# -- commands ------------------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.spec_file:
        with open(args.spec_file) as fh:
            spec = D.SynthSpec(**yaml.safe_load(fh))
    else:
        if args.seed is None:
            raise UsageError("--seed is required (synthetic data must be reproducible)")
        if None in (args.kind, args.classes, args.dim, args.n):
            raise UsageError("--kind, --classes, --dim and --n are required without --spec-file")
        extra = {} if args.warp_depth is None else {"warp_depth": args.warp_depth}
        spec = D.SynthSpec(args.kind, args.dim, args.classes, args.n, args.seed, **extra)
    if spec.kind == "gmm":
        store = D.synth_gmm(spec)
    else:
        store, _, warp = D.synth_warped_speakers(spec, return_parts=True)
        np.savez(str(args.out) + ".warp.npz", **warp.to_arrays())
    D.save(store, args.out, binary=args.binary)
    print(f"wrote {len(store)} vectors (dim {store.dim}, {len(store.classes())} classes) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config, args.output)
    results = run_config(cfg, progress=print)
    diverged = [r for r in results if r.log.diverged]
    for r in diverged:
        print(f"DIVERGED: {r.variant} seed={r.seed} at step {r.log.final.step} "
              f"(objective {r.log.trip_value!r})", file=sys.stderr)
    return EXIT_DIVERGED if diverged else EXIT_OK


def cmd_transform(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    store = D.load(args.input)
    if store.dim != ck.model.dim:
        raise ValueError(f"store dimension {store.dim} does not match model dimension {ck.model.dim}")
    model = ck.model
    if args.generate:
        out = model.generate(store.vectors).value
    else:
        out = model.normalize(store.vectors)[0].value
    D.save(store.with_vectors(out), args.output, binary=args.binary)
    print(f"wrote {len(store)} vectors to {args.output}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    store = D.load(args.store)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    g = gauss_report(store.vectors, store.labels, xi=args.xi)
    v = variation_report(store.vectors, store.labels)
    g.to_csv(out / "gauss_report.csv")
    v.to_csv(out / "between_variation.csv", out / "within_variation.csv")
    write_json(out / "summary.json", g, v)
    print(json.dumps(g.summary(), indent=2))
    return EXIT_OK


def cmd_score(args) -> int:
    trials = TrialList.read(args.trials)
    if args.store:
        enroll_store = test_store = D.load(args.store)
    elif args.enroll and args.test:
        enroll_store, test_store = D.load(args.enroll), D.load(args.test)
    else:
        raise UsageError("give --store or both --enroll and --test")
    e = enroll_store.lookup(trials.enroll)
    t = test_store.lookup(trials.test)
    if args.backend == "cosine":
        scores = cosine_score(e, t)
    else:
        if args.plda_model:
            model = PldaModel.load(args.plda_model)
        elif args.plda_train:
            ts = D.load(args.plda_train)
            model = plda_train(ts.vectors, ts.labels)
            if args.plda_save:
                model.save(args.plda_save)
        else:
            raise UsageError("plda backend needs --plda-model or --plda-train")
        scores = plda_score(model, e, t)
    write_scores(args.out, trials, np.atleast_1d(scores))
    print(f"wrote {len(trials)} scores to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    trials = TrialList.read(args.trials)
    table = read_scores(args.scores)
    try:
        s = np.array([table[(a, b)] for a, b in zip(trials.enroll, trials.test)])
    except KeyError as k:
        raise ValueError(f"no score for trial {k.args[0]}") from None
    rate, thr = eer(s, trials.target)
    report = {"eer_percent": rate, "threshold": thr, "n_target": int(trials.target.sum()),
              "n_nontarget": int((~trials.target).sum())}
    print(json.dumps(report, indent=2))
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2) + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mgflow", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic vector store")
    s.add_argument("--spec-file")
    s.add_argument("--kind", choices=["gmm", "warped-speakers"])
    s.add_argument("--classes", type=int)
    s.add_argument("--dim", type=int)
    s.add_argument("--n", type=int, help="samples per class")
    s.add_argument("--seed", type=int)
    s.add_argument("--warp-depth", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--binary", action="store_true")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train the variants named in a run config")
    s.add_argument("config")
    s.add_argument("--output", help="override the config's output directory")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("transform", help="map vectors through a trained flow")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--generate", action="store_true", help="apply f (latent -> observation) instead")
    s.add_argument("--binary", action="store_true")
    s.set_defaults(func=cmd_transform)

    s = sub.add_parser("diagnose", help="Gaussianality and variation reports")
    s.add_argument("store")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--xi", type=float)
    s.set_defaults(func=cmd_diagnose)

    s = sub.add_parser("score", help="score a trial list")
    s.add_argument("--backend", choices=["cosine", "plda"], required=True)
    s.add_argument("--trials", required=True)
    s.add_argument("--store")
    s.add_argument("--enroll")
    s.add_argument("--test")
    s.add_argument("--plda-model")
    s.add_argument("--plda-train")
    s.add_argument("--plda-save")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("eval", help="equal error rate of a score file")
    s.add_argument("--scores", required=True)
    s.add_argument("--trials", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"mgflow: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (D.ParseError, ValueError, KeyError, OSError) as e:
        print(f"mgflow: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
