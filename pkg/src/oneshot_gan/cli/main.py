"""``oneshot-gan`` command line.

Every command reads a TOML pipeline config, works inside one run directory
(``paths.output_root``, overridable with ``$ONESHOT_OUTPUT_ROOT`` or
``--output``) and finishes by printing a JSON summary, which is also kept
under ``logs/``. Exit code 0 means success; failures print a diagnostic to
stderr and exit nonzero.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from filelock import FileLock, Timeout

from ..adapt import AdaptationResult, adapt_one_shot
from ..corpus import DatasetManifest
from ..detector import DetectorModel, evaluate, train_detector
from ..errors import ConfigError, InputError, OptimizationError, PersistenceError, TrainingError
from ..experiments import protocols
from ..experiments.bench import Workbench
from ..imaging import file_sha256
from ..mixing import MixConfig, generate_dataset
from ..seeding import derive_seed
from .config import OUTPUT_ROOT_ENV, PipelineConfig, load_config
from .ingest import FULL_FRAME, IngestSpec, ingest

log = logging.getLogger("oneshot_gan.cli")

EXPERIMENTS = ("table1", "table2", "table3", "table4_5", "fig4", "fig7")
EXIT_CONFIG, EXIT_INPUT, EXIT_RUNTIME, EXIT_BUSY = 2, 3, 4, 5


class RunDir:
    """The run directory layout plus its writer lock."""

    def __init__(self, root):
        self.root = Path(root)

    def prepare(self, cfg: PipelineConfig):
        for sub in ("checkpoints", "datasets", "reports", "logs"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)
        cfg.save(self.root / "config.snapshot")

    def lock(self) -> FileLock:
        self.root.mkdir(parents=True, exist_ok=True)
        return FileLock(str(self.root / ".lock"), timeout=0)

    @property
    def logs(self) -> Path:
        return self.root / "logs"


def _workbench(cfg: PipelineConfig, root: Path) -> Workbench:
    return Workbench(root, cfg.bench_config(), base_checkpoint=cfg.paths.base_checkpoint or None)


def _parse_box(text: str):
    if text == FULL_FRAME:
        return FULL_FRAME
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise InputError(f"--box must be x,y,w,h or {FULL_FRAME}, got {text!r}") from None
    if len(vals) != 4:
        raise InputError(f"--box needs four comma-separated numbers, got {text!r}")
    return vals


def _manifest(path) -> DatasetManifest:
    m = DatasetManifest.load(path)
    m.verify()
    return m


# -- commands ------------------------------------------------------------------------

def cmd_train_base(args, cfg, root):
    bench = _workbench(cfg, root)
    model = bench.base_model()
    return {"model_version": model.version, "weights_hash": model.weights_hash(),
            "checkpoint": str(bench.base_checkpoint or bench.checkpoints / f"base-{bench.cfg.base_key()}" / "final"),
            "loss_trace_tail": list(getattr(model, "loss_trace", []))[-5:]}


def cmd_adapt(args, cfg, root):
    bench = _workbench(cfg, root)
    target = ingest(IngestSpec(args.target, _parse_box(args.box), args.scale, cfg.resolution))
    out = root / "adapt" / args.name
    result = adapt_one_shot(bench.base_model(), target, bench.distance(), cfg.projection, cfg.shift,
                            seed=derive_seed(cfg.seed, "adapt"))
    path = result.save(out)
    p, s = result.projection_loss_trace, result.shift_loss_trace
    return {"adaptation": str(out), "adaptation_sha256": file_sha256(path),
            "projection_loss": [p[0], min(p)], "shift_loss": [s[0], min(s)],
            "shifted_model_hash": result.shifted_model.weights_hash()}


def cmd_generate(args, cfg, root):
    bench = _workbench(cfg, root)
    mix = MixConfig(k=cfg.mix.k if args.k is None else args.k, n=args.n or cfg.mix.n,
                    seed=derive_seed(cfg.seed, "dataset", args.name))
    if args.adaptation:
        result = AdaptationResult.load(args.adaptation)
        model = result.shifted_model if not args.no_shift else bench.base_model()
        s_I = None if args.no_mix else result.s_I
    else:
        model, s_I = bench.base_model(), None
    out = root / "datasets" / args.name
    manifest = generate_dataset(model, out, mix, s_I, label=args.label)
    manifest.verify()
    return {"dataset": str(out), "n": len(manifest), "k": mix.k if s_I is not None else 0,
            "manifest_sha256": file_sha256(out / "manifest.jsonl"),
            "styles_sha256": file_sha256(out / "styles.npy")}


def cmd_train_detector(args, cfg, root):
    bench = _workbench(cfg, root)
    real, fake = _manifest(args.real), _manifest(args.fake)
    det = train_detector(real.load_images(), fake.load_images(), bench.detector_config())
    out = root / "checkpoints" / f"detector-{args.name}"
    det.save(out)
    return {"detector": str(out), "val_score": det.val_score}


def cmd_evaluate(args, cfg, root):
    det = DetectorModel.load(args.detector)
    metrics = evaluate(det, _manifest(args.real).load_images(), _manifest(args.fake).load_images())
    out = root / "reports" / f"eval-{args.name}"
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(metrics.to_dict(), indent=1, sort_keys=True))
    return {"metrics": metrics.to_dict(), "report": str(out / "metrics.json")}


def cmd_experiment(args, cfg, root):
    if args.fixture:
        cfg = replace(cfg, fixture=args.fixture)
    bench = _workbench(cfg, root)
    bench.check_splits_disjoint()
    exp = args.id
    if exp == "table1":
        models = protocols.train_ladder(bench, args.ladder_steps or cfg.training.steps)
        report = protocols.run_capacity_experiment(bench, models)
    elif exp == "table2":
        report = protocols.run_detection_experiment(bench)
    elif exp == "table3":
        report = protocols.run_ablation(bench)
    elif exp == "table4_5":
        report = protocols.run_fewshot_comparison(bench)
    elif exp == "fig4":
        report = protocols.run_embedding_experiment(bench)
    else:
        report = protocols.run_loss_ablation(bench)
    report.verify()
    return {"experiment": exp, "fixture": cfg.fixture, "report": str(bench.reports / exp / "report.json"),
            "checks": report.checks, "rows": report.rows}


def cmd_embed(args, cfg, root):
    det = DetectorModel.load(args.detector)
    sets = {}
    for item in args.set:
        label, _, path = item.partition("=")
        if not path:
            raise InputError(f"--set expects label=dataset_dir, got {item!r}")
        sets[label] = _manifest(path)
    pairs = [tuple(p.split(",")) for p in args.pair]
    for a, b in pairs:
        if a not in sets or b not in sets:
            raise InputError(f"pair {a},{b} names an unknown set")
    out = root / "reports" / f"embed-{args.name}"
    res = protocols.export_embeddings(sets, det, out, pairs=pairs, seed=derive_seed(cfg.seed, "tsne"))
    return {"embeddings": str(res.tsv_path), "n_points": len(res.labels), "separation": res.separation}


COMMANDS = {
    "train-base": cmd_train_base, "adapt": cmd_adapt, "generate": cmd_generate,
    "train-detector": cmd_train_detector, "evaluate": cmd_evaluate, "experiment": cmd_experiment,
    "embed": cmd_embed,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oneshot-gan", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="pipeline TOML file")
        p.add_argument("--output", help=f"run directory (overrides paths.output_root and ${OUTPUT_ROOT_ENV})")
        p.add_argument("--seed", type=int, help="master seed override")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    add("train-base", "train the base generator on the procedural corpus")
    p = add("adapt", "project a one-shot target and shift the generator toward it")
    p.add_argument("--target", required=True, help="target image file")
    p.add_argument("--box", default=FULL_FRAME, help=f"face box x,y,w,h in pixels, or {FULL_FRAME}")
    p.add_argument("--scale", type=float, default=1.3, help="crop scale about the box center")
    p.add_argument("--name", default="default")
    p = add("generate", "synthesize a dataset (mixed with the target style when --adaptation is given)")
    p.add_argument("--n", type=int)
    p.add_argument("--k", type=int, help="number of final style layers taken from the target")
    p.add_argument("--adaptation", help="directory written by `adapt`")
    p.add_argument("--no-shift", action="store_true", help="use the original model with mixing")
    p.add_argument("--no-mix", action="store_true", help="use the shifted model without mixing")
    p.add_argument("--label", default="fake")
    p.add_argument("--name", default="generated")
    p = add("train-detector", "train a real-vs-fake detector")
    p.add_argument("--real", required=True)
    p.add_argument("--fake", required=True)
    p.add_argument("--name", default="default")
    p = add("evaluate", "AP and accuracy of a detector on a real/fake test pair")
    p.add_argument("--detector", required=True)
    p.add_argument("--real", required=True)
    p.add_argument("--fake", required=True)
    p.add_argument("--name", default="default")
    p = add("experiment", "run one experiment protocol")
    p.add_argument("id", choices=EXPERIMENTS)
    p.add_argument("--fixture")
    p.add_argument("--ladder-steps", type=int, help="training steps per capacity-ladder model (table1)")
    p = add("embed", "t-SNE of detector features for labeled datasets")
    p.add_argument("--detector", required=True)
    p.add_argument("--set", action="append", required=True, help="label=dataset_dir (repeatable)")
    p.add_argument("--pair", action="append", default=[], help="a,b label pair to score (repeatable)")
    p.add_argument("--name", default="default")
    return parser


def _resolve(args) -> tuple[PipelineConfig, Path]:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "fixture", None):
        from ..corpus import FIXTURES

        if args.fixture not in FIXTURES:
            raise ConfigError([f"fixture: unknown fixture {args.fixture!r}"])
    root = Path(args.output) if args.output else cfg.output_root
    problems = []
    if cfg.paths.base_checkpoint and not (Path(cfg.paths.base_checkpoint) / "metadata.json").exists():
        problems.append(f"paths.base_checkpoint: no checkpoint at {cfg.paths.base_checkpoint}")
    for attr in ("target", "adaptation", "detector", "real", "fake"):
        val = getattr(args, attr, None)
        if val and not Path(val).exists():
            problems.append(f"--{attr}: {val} does not exist")
    if problems:
        raise ConfigError(problems)
    return cfg, root


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg, root = _resolve(args)
        run = RunDir(root)
        with run.lock():
            run.prepare(cfg)
            handler = logging.FileHandler(run.logs / f"{args.command}.log")
            handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
            logging.getLogger("oneshot_gan").addHandler(handler)
            logging.getLogger("oneshot_gan").setLevel(logging.INFO)
            try:
                t0 = time.perf_counter()
                summary = COMMANDS[args.command](args, cfg, root)
                summary = {"command": args.command, "status": "ok", "seed": cfg.seed, **summary}
                (run.logs / f"{args.command}-result.json").write_text(
                    json.dumps(summary, indent=1, sort_keys=True, default=str))
                log.info("%s finished in %.1fs", args.command, time.perf_counter() - t0)
            finally:
                logging.getLogger("oneshot_gan").removeHandler(handler)
                handler.close()
    except ConfigError as exc:
        print("config error:", file=sys.stderr)
        for p in exc.problems:
            print(f"  - {p}", file=sys.stderr)
        return EXIT_CONFIG
    except Timeout:
        print(f"error: another process holds the lock on {root}", file=sys.stderr)
        return EXIT_BUSY
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (TrainingError, OptimizationError, PersistenceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps(summary, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
