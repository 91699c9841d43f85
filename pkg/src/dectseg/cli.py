"""Command-line entry point: ``dectseg <subcommand> ...``.

Experiments are described by a JSON config (see :mod:`dectseg.config`);
flags only name paths or override single values.  Every training,
prediction or evaluation run writes into ``<runs>/<subcommand>-<hash>-<seed>``.

Exit codes: 0 success, 1 invalid arguments or configuration, 2 failure
while computing.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import warnings
from pathlib import Path

from . import __version__
from .cascade import check_cascade, fit_cascade, predict_stage1, predict_stage2, prepare_case
from .config import ConfigError, RunConfig
from .evaluation import (
    ExperimentSettings,
    MetricsReport,
    emit_report,
    make_folds,
    organ_dice,
    read_records_csv,
    records_csv,
    run_alpha_study,
    run_crossval,
)
from .phantom import DatasetManifest, generate_dataset, sect_like_dataset
from .preprocessing import MixConfig, mix
from .unet import FORMAT_VERSION, CheckpointError, load_checkpoint, save_checkpoint
from .volume import DectPair, MetaImageError, read_metaimage, write_metaimage

log = logging.getLogger("dectseg")

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2


class UsageError(Exception):
    """Bad arguments detected before any computation."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


# -- shared plumbing ---------------------------------------------------------------

def _load_config(args):
    cfg = RunConfig.read(args.config) if args.config else RunConfig.default()
    for item in args.set or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        cfg = cfg.override(key, value)
    if args.seed is not None:
        cfg = cfg.override("seed", args.seed)
    return cfg


def _set_path(cfg, key, value):
    if value is None:
        return cfg
    return cfg.override(f"paths.{key}", str(Path(value).resolve()))


class RunDir:
    """``<root>/<subcommand>-<hash>-<seed>`` with config snapshot, logs, checkpoints and reports."""

    def __init__(self, root, subcommand, digest, seed):
        self.path = Path(root) / f"{subcommand}-{digest}-{seed}"
        self.checkpoints = self.path / "checkpoints"
        self.logs = self.path / "logs"
        self.reports = self.path / "reports"
        self._handler = None

    def open(self, snapshot):
        for d in (self.path, self.checkpoints, self.logs, self.reports):
            d.mkdir(parents=True, exist_ok=True)
        (self.path / "config.json").write_text(snapshot, encoding="utf-8")
        self._handler = logging.FileHandler(self.logs / "run.log", mode="w", encoding="utf-8")
        self._handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        logging.getLogger().addHandler(self._handler)
        return self

    def close(self):
        if self._handler:
            logging.getLogger().removeHandler(self._handler)
            self._handler.close()


def _run_dir(cfg, args, subcommand, extra=""):
    root = Path(args.runs) if args.runs else (cfg.path("runs") or Path("runs"))
    digest = cfg.digest()
    if extra:
        digest = hashlib.sha256((digest + extra).encode()).hexdigest()[:10]
    return RunDir(root, subcommand, digest, cfg.seed)


def _manifest(cfg, key):
    path = cfg.path(key)
    if path is None:
        raise UsageError(f"no {key.replace('_', ' ')} given (flag or paths.{key} in the config)")
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise UsageError(f"{path} does not exist")
    return DatasetManifest.read(path)


def _pretrained(path):
    if path is None:
        return (None, None)
    path = Path(path)
    if path.is_dir() and (path / "checkpoints").is_dir():
        path = path / "checkpoints"
    files = (path / "stage1.ckpt", path / "stage2.ckpt")
    missing = [str(f) for f in files if not f.exists()]
    if missing:
        raise UsageError(f"pretrained checkpoints not found: {', '.join(missing)}")
    ckpts = tuple(load_checkpoint(f) for f in files)
    check_cascade(*ckpts)
    return ckpts


def _settings(cfg, plans, pretrained, checkpoint_dir):
    plan1, plan2 = plans
    if pretrained[0] is not None and pretrained[0].config != cfg.unet:
        raise CheckpointError(f"pretrained config {pretrained[0].config} != configured {cfg.unet}")
    return ExperimentSettings(
        plan1, plan2, cfg.unet, cfg.seed, pretrained,
        float(cfg.data["skin_threshold_hu"]), bool(cfg.data["folds"]["use_validation"]), checkpoint_dir,
    )


# -- subcommands -----------------------------------------------------------------------
# each ``prepare_*`` validates everything and returns a zero-argument job

def prepare_phantom(args):
    cfg = _load_config(args)
    spec = cfg.phantom_spec()
    ph = cfg.data["phantom"]
    n = ph["n_dect"] if args.n is None else args.n
    n_sect = ph["n_sect"] if args.sect is None else args.sect
    if n < 1 or n_sect < 0:
        raise UsageError("--n must be >= 1 and --sect >= 0")
    out = Path(args.out)
    if out.exists() and not out.is_dir():
        raise UsageError(f"{out} exists and is not a directory")

    def job():
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise UsageError(f"cannot create {out}: {exc}") from None
        m = generate_dataset(n, ph["dect_seed"], out / "dect", spec)
        print(m.root / "manifest.json")
        if n_sect:
            s = sect_like_dataset(n_sect, ph["sect_seed"], out / "sect", spec)
            print(s.root / "manifest.json")

    return job


def prepare_mix(args):
    try:
        cfg = MixConfig(args.alpha)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    low, high = read_metaimage(args.low), read_metaimage(args.high)
    pair = DectPair(low, high, Path(args.low).stem)

    def job():
        path = write_metaimage(mix(pair, cfg), args.out)
        print(path)

    return job


def _training_job(args, subcommand, plan_set, manifest_key, pretrained_from):
    cfg = _load_config(args)
    cfg = _set_path(cfg, manifest_key, args.manifest)
    manifest = _manifest(cfg, manifest_key)
    pretrained = _pretrained(pretrained_from(cfg)) if pretrained_from else (None, None)
    plans = cfg.plans(plan_set)
    for plan in plans:
        plan.check(cfg.unet)
    settings = _settings(cfg, plans, pretrained, None)
    alpha = float(cfg.data["alpha"]["train"])
    run = _run_dir(cfg, args, subcommand, extra=str(manifest.root.resolve()))

    def job():
        run.open(cfg.to_json())
        try:
            cases = []
            for cid in manifest.ids:
                pair, labels = manifest.load(cid)
                cases.append(prepare_case(pair, alpha, labels, settings.threshold_hu))
            ckpt1, ckpt2, _ = fit_cascade(
                cases, settings.plan1, settings.plan2, cfg.seed, cfg.unet, init=pretrained, log_dir=run.logs
            )
            save_checkpoint(ckpt1, run.checkpoints / "stage1.ckpt")
            save_checkpoint(ckpt2, run.checkpoints / "stage2.ckpt")
            print(run.checkpoints)
        finally:
            run.close()

    return job


def prepare_pretrain(args):
    return _training_job(args, "pretrain", "pretrain", "sect_manifest", None)


def prepare_train(args):
    return _training_job(args, "train", "train", "dect_manifest", None)


def prepare_finetune(args):
    if args.init is None:
        raise UsageError("finetune needs --init <pretrain run dir or checkpoint dir>")
    return _training_job(args, "finetune", "finetune", "dect_manifest", lambda cfg: args.init)


def _cascade_checkpoints(args):
    ckpt1, ckpt2 = load_checkpoint(args.stage1), load_checkpoint(args.stage2)
    check_cascade(ckpt1, ckpt2)
    if ckpt1.config != ckpt2.config:
        raise CheckpointError(f"checkpoint configs differ: {ckpt1.config} vs {ckpt2.config}")
    digest = hashlib.sha256(Path(args.stage1).read_bytes() + Path(args.stage2).read_bytes()).hexdigest()
    return ckpt1, ckpt2, digest


def prepare_predict(args):
    cfg = _load_config(args)
    ckpt1, ckpt2, digest = _cascade_checkpoints(args)
    if args.manifest:
        manifest = DatasetManifest.read(Path(args.manifest))
        inputs = [(cid, None) for cid in manifest.ids]
    elif args.low and args.high:
        manifest = None
        inputs = [(Path(args.low).stem.removesuffix("_low"), (args.low, args.high))]
    else:
        raise UsageError("predict needs --manifest or both --low and --high")
    alpha = float(cfg.data["alpha"]["test"] if args.alpha is None else args.alpha)
    MixConfig(alpha)
    threshold = float(cfg.data["skin_threshold_hu"])
    run = _run_dir(cfg, args, "predict", extra=digest + repr(alpha) + repr(inputs))

    def job():
        run.open(cfg.to_json())
        try:
            net1, net2 = ckpt1.network(), ckpt2.network()
            for cid, files in inputs:
                if manifest is not None:
                    pair, _ = manifest.load(cid)
                else:
                    pair = DectPair(read_metaimage(files[0]), read_metaimage(files[1]), cid)
                case = prepare_case(pair, alpha, threshold_hu=threshold)
                labels = predict_stage2(case, predict_stage1(case, ckpt1, net=net1), ckpt2, net=net2)
                print(write_metaimage(labels, run.path / "labels" / f"{cid}_pred.mhd"))
        finally:
            run.close()

    return job


def prepare_evaluate(args):
    cfg = _load_config(args)
    ckpt1, ckpt2, digest = _cascade_checkpoints(args)
    cfg = _set_path(cfg, "dect_manifest", args.manifest)
    manifest = _manifest(cfg, "dect_manifest")
    ids = args.ids.split(",") if args.ids else manifest.ids
    unknown = sorted(set(ids) - set(manifest.ids))
    if unknown:
        raise UsageError(f"unknown case ids {unknown}")
    alpha = float(cfg.data["alpha"]["test"] if args.alpha is None else args.alpha)
    MixConfig(alpha)
    threshold = float(cfg.data["skin_threshold_hu"])
    run = _run_dir(cfg, args, "evaluate", extra=digest + repr(alpha) + ",".join(ids))

    def job():
        run.open(cfg.to_json())
        try:
            report = MetricsReport()
            net1, net2 = ckpt1.network(), ckpt2.network()
            for cid in ids:
                pair, labels = manifest.load(cid)
                case = prepare_case(pair, alpha, threshold_hu=threshold)
                pred = predict_stage2(case, predict_stage1(case, ckpt1, net=net1), ckpt2, net=net2)
                report.add(cid, -1, ckpt2.metadata.get("alpha_training", float("nan")), alpha, organ_dice(pred, labels))
            for path in emit_report(report, run.reports, "evaluate").values():
                print(path)
        finally:
            run.close()

    return job


def _experiment(args, subcommand):
    cfg = _load_config(args)
    cfg = _set_path(cfg, "dect_manifest", args.manifest)
    cfg = _set_path(cfg, "pretrained", args.pretrained)
    manifest = _manifest(cfg, "dect_manifest")
    pretrained = _pretrained(cfg.path("pretrained"))
    plan_set = "finetune" if pretrained[0] is not None else "train"
    plans = cfg.plans(plan_set)
    for plan in plans:
        plan.check(cfg.unet)
    folds = cfg.data["folds"]
    with warnings.catch_warnings(record=True):
        warnings.simplefilter("always")
        plan = make_folds(manifest.ids, folds["k"], folds["seed"])
    extra = str(manifest.root.resolve()) + str(cfg.path("pretrained"))
    run = _run_dir(cfg, args, subcommand, extra=extra)
    settings = _settings(cfg, plans, pretrained, run.checkpoints)
    if plan.overlap:
        log.warning(plan.describe_overlap())
    return cfg, manifest, plan, settings, run


def prepare_crossval(args):
    cfg, manifest, plan, settings, run = _experiment(args, "crossval")
    alpha = cfg.data["alpha"]

    def job():
        run.open(cfg.to_json())
        try:
            (run.path / "folds.json").write_text(json.dumps(plan.to_dict(), indent=2) + "\n", encoding="utf-8")
            try:
                report = run_crossval(
                    manifest, plan, settings, float(alpha["train"]), float(alpha["test"]), jobs=args.jobs
                )
            except Exception as exc:
                partial = getattr(exc, "partial_report", None)
                if partial is not None and partial.records:
                    (run.reports / "crossval_partial_records.csv").write_text(records_csv(partial), encoding="utf-8")
                raise
            for path in emit_report(report, run.reports, "crossval").values():
                print(path)
        finally:
            run.close()

    return job


def prepare_alpha_study(args):
    cfg, manifest, plan, settings, run = _experiment(args, "alpha-study")
    alpha = cfg.data["alpha"]
    if alpha["study_fold"] >= len(plan.folds):
        raise UsageError(f"alpha.study_fold {alpha['study_fold']} out of range")

    def job():
        run.open(cfg.to_json())
        try:
            grid = run_alpha_study(
                manifest, plan, alpha["study_fold"], alpha["study_train"], alpha["study_test"], settings, jobs=args.jobs
            )
            for path in emit_report(grid.report, run.reports, "alpha_study", grid=grid).values():
                print(path)
        finally:
            run.close()

    return job


def prepare_report(args):
    path = Path(args.records)
    if not path.exists():
        raise UsageError(f"{path} does not exist")
    report = read_records_csv(path)
    if not report.records:
        raise UsageError(f"{path} holds no records")
    out = Path(args.out) if args.out else path.parent
    run_id = args.run_id or path.stem.removesuffix("_records")

    def job():
        for p in emit_report(report, out, run_id).values():
            print(p)

    return job


# -- parser ------------------------------------------------------------------------------

def build_parser():
    parser = _Parser(prog="dectseg", description="Dual-energy CT organ segmentation toolkit.")
    parser.add_argument(
        "--version", action="version",
        version=f"dectseg {__version__} (checkpoint format {FORMAT_VERSION})",
    )
    parser.add_argument("--jobs", type=int, default=1, help="worker processes for folds / grid cells (default 1)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_text, config=True):
        p = sub.add_parser(name, help=help_text, description=help_text)
        if config:
            p.add_argument("--config", help="JSON run configuration (defaults used when omitted)")
            p.add_argument("--seed", type=int, help="override the config seed")
            p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config value")
            p.add_argument("--runs", help="root directory for run directories")
        p.set_defaults(prepare=fn)
        return p

    p = add("phantom", prepare_phantom, "generate DECT and SECT-like phantom datasets")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, help="number of DECT cases")
    p.add_argument("--sect", type=int, help="number of SECT-like cases (0 to skip)")

    p = add("mix", prepare_mix, "blend a low/high-kV pair into one image", config=False)
    p.add_argument("--low", required=True)
    p.add_argument("--high", required=True)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--out", required=True)

    for name, fn, text in (
        ("pretrain", prepare_pretrain, "train both stages on the SECT-like corpus"),
        ("train", prepare_train, "train both stages from scratch on a DECT dataset"),
        ("finetune", prepare_finetune, "fine-tune pretrained stages on a DECT dataset"),
    ):
        p = add(name, fn, text)
        p.add_argument("--manifest", help="dataset manifest (or its directory)")
        if name == "finetune":
            p.add_argument("--init", help="pretrain run dir or directory with stage1.ckpt / stage2.ckpt")

    for name, fn, text in (
        ("predict", prepare_predict, "segment cases with a trained cascade"),
        ("evaluate", prepare_evaluate, "Dice of a trained cascade on labelled cases"),
    ):
        p = add(name, fn, text)
        p.add_argument("--stage1", required=True)
        p.add_argument("--stage2", required=True)
        p.add_argument("--manifest")
        p.add_argument("--alpha", type=float)
        if name == "predict":
            p.add_argument("--low")
            p.add_argument("--high")
        else:
            p.add_argument("--ids", help="comma-separated case ids (default: all)")

    for name, fn, text in (
        ("crossval", prepare_crossval, "k-fold cross-validation at fixed alpha"),
        ("alpha-study", prepare_alpha_study, "alpha_train x alpha_test grid on one fold"),
    ):
        p = add(name, fn, text)
        p.add_argument("--manifest")
        p.add_argument("--pretrained", help="pretrain run dir; switches to the fine-tuning plans")

    p = add("report", prepare_report, "re-emit tables and plot from a records CSV", config=False)
    p.add_argument("--records", required=True)
    p.add_argument("--out")
    p.add_argument("--run-id")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    console = logging.StreamHandler()
    console.setLevel(logging.INFO if args.verbose else logging.WARNING)
    console.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.addHandler(console)
    root.setLevel(logging.INFO)
    if args.jobs < 1:
        parser.error("--jobs must be >= 1")
    try:
        job = args.prepare(args)
    except (UsageError, ConfigError, CheckpointError, MetaImageError, ValueError, TypeError, OSError) as exc:
        print(f"dectseg {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        job()
    except UsageError as exc:
        print(f"dectseg {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - any compute failure maps to one exit code
        log.debug("failure", exc_info=True)
        print(f"dectseg {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILED
    finally:
        root.removeHandler(console)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
