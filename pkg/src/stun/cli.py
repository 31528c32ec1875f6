"""``stun`` command line: generate data, train, evaluate, plot and compare.

Every command writes its outputs atomically into ``--out`` together with a
``run.json`` manifest listing the config, dataset hash, and artifacts.
Relative ``--out`` paths resolve under ``$STUN_OUTPUT_ROOT`` when it is set.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from . import __version__
from .baselines import compare, dumps_report, evaluate_method, experiment_split, method_embeddings
from .core import ConfigError, ExperimentConfig
from .model import load_checkpoint, save_checkpoint
from .synthdata import ManifestError, PlaceDataset, SynthSpec, generate, read_manifest, write_manifest
from .train import DataError, DivergenceError, train_mc_dropout, train_pfe, train_student, train_teacher

log = logging.getLogger("stun")

OUTPUT_ROOT_ENV = "STUN_OUTPUT_ROOT"

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_DIVERGENCE = 5
EXIT_HASH_MISMATCH = 6

EXIT_HELP = f"""\
exit codes:
  {EXIT_OK}  success
  {EXIT_USAGE}  bad command line
  {EXIT_CONFIG}  invalid config file (unknown key, bad value, wrong schema_version)
  {EXIT_DATA}  missing or malformed data, manifest or checkpoint
  {EXIT_DIVERGENCE}  training loss became non-finite
  {EXIT_HASH_MISMATCH}  checkpoint config hash or dataset hash differs from the inputs

environment:
  {OUTPUT_ROOT_ENV}  root directory for relative --out paths
"""

# checkpoint kind -> method name used in reports and tables
METHOD_OF_KIND = {"teacher": "standard", "student": "stun", "mc-dropout": "mc-dropout", "pfe": "pfe"}


class HashMismatch(RuntimeError):
    pass


@dataclass
class RunManifest:
    command: str
    tool_version: str
    seed: int | None
    config: dict
    config_hash: str
    dataset: str
    checkpoints: list[str] = field(default_factory=list)
    metrics: str | None = None
    artifacts: list[str] = field(default_factory=list)

    def write(self, out: Path) -> Path:
        path = out / "run.json"
        self.artifacts = sorted(set(self.artifacts) | {"run.json"})
        _atomic_write(path, json.dumps(asdict(self), sort_keys=True, indent=1) + "\n")
        return path


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def resolve_out(out: str) -> Path:
    p = Path(out)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    p.mkdir(parents=True, exist_ok=True)
    return p


def _read_yaml(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: not valid YAML ({exc})") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: top level must be a mapping")
    return data


def load_config(path: str | None, seed: int | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig.from_dict(_read_yaml(path))
    return cfg if seed is None else cfg.replace(seed=seed)


def load_data(path: str | None, cfg: ExperimentConfig | None = None) -> PlaceDataset:
    if path is None:
        raise ManifestError("--data is required")
    data = read_manifest(path)
    if cfg is not None:
        shapes = {tuple(s.image.shape) for s in data.samples}
        if shapes != {cfg.image_shape}:
            raise DataError(f"image shapes {sorted(shapes)} differ from config image_shape {cfg.image_shape}")
    return data


def _load_ckpt(path: str | None):
    if path is None:
        raise ManifestError("--ckpt is required")
    if not Path(path).exists():
        raise ManifestError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def check_hashes(meta: dict, cfg: ExperimentConfig, data: PlaceDataset, path: str) -> None:
    if meta.get("config_hash") != cfg.config_hash():
        raise HashMismatch(
            f"{path}: checkpoint config hash {meta.get('config_hash', '')[:12]} "
            f"differs from the config in use {cfg.config_hash()[:12]}"
        )
    fp = meta.get("extra", {}).get("dataset")
    if fp is not None and fp != data.fingerprint():
        raise HashMismatch(f"{path}: checkpoint was trained on dataset {fp[:12]}, got {data.fingerprint()[:12]}")


def _save(out: Path, name: str, net, kind: str, cfg: ExperimentConfig, state, data: PlaceDataset) -> str:
    save_checkpoint(
        out / name, net, kind, config=cfg.to_dict(), config_hash=cfg.config_hash(),
        step=state.step, epoch=state.epoch,
        extra={"dataset": data.fingerprint(), "epoch_losses": list(state.epoch_losses)},
    )
    return name


def _manifest(args, cfg: ExperimentConfig | None, data: PlaceDataset | None) -> RunManifest:
    return RunManifest(
        command=args.command,
        tool_version=__version__,
        seed=None if cfg is None else cfg.seed,
        config={} if cfg is None else cfg.to_dict(),
        config_hash="" if cfg is None else cfg.config_hash(),
        dataset="" if data is None else data.fingerprint(),
    )


# -- commands ---------------------------------------------------------------

def cmd_generate(args) -> int:
    raw = _read_yaml(args.config)
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        spec = SynthSpec.from_dict(raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    out = resolve_out(args.out)
    data = generate(spec)
    manifest = write_manifest(data, out)
    run = _manifest(args, None, data)
    run.seed = spec.seed
    run.config = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(spec).items()}
    run.artifacts = [manifest.name, "images/"]
    run.write(out)
    print(f"wrote {len(data)} samples to {manifest}")
    return EXIT_OK


def _train_phase(args, name: str, kind: str, fn) -> int:
    cfg = load_config(args.config, args.seed)
    data = load_data(args.data, cfg)
    out = resolve_out(args.out)
    # query samples are held out of every training phase
    net, state = fn(cfg, data, experiment_split(data, cfg).database, out)
    ckpt = _save(out, name, net, kind, cfg, state, data)
    run = _manifest(args, cfg, data)
    run.checkpoints = [ckpt]
    run.artifacts = [ckpt, f"{kind}_log.jsonl"]
    run.write(out)
    print(f"{kind}: {state.epoch} epochs, {state.step} steps, final epoch loss "
          f"{state.epoch_losses[-1] if state.epoch_losses else float('nan'):.6g} -> {out / ckpt}")
    return EXIT_OK


def _teacher_from(args, cfg: ExperimentConfig, data: PlaceDataset):
    teacher, meta = _load_ckpt(args.ckpt)
    if meta["kind"] != "teacher":
        raise ManifestError(f"{args.ckpt}: expected a teacher checkpoint, got {meta['kind']!r}")
    check_hashes(meta, cfg, data, args.ckpt)
    return teacher


def cmd_train_teacher(args) -> int:
    return _train_phase(args, "teacher.pt", "teacher",
                        lambda cfg, data, train, out: train_teacher(train, cfg, log_path=out / "teacher_log.jsonl"))


def cmd_train_student(args) -> int:
    def run(cfg, data, train, out):
        teacher = _teacher_from(args, cfg, data)
        return train_student(teacher, train, cfg, log_path=out / "student_log.jsonl")

    return _train_phase(args, "student.pt", "student", run)


def cmd_train_baseline(args) -> int:
    if args.baseline == "mc-dropout":
        def run_mc(cfg, data, train, out):
            return train_mc_dropout(train, cfg, log_path=out / "mc-dropout_log.jsonl")

        return _train_phase(args, "mc-dropout.pt", "mc-dropout", run_mc)

    def run(cfg, data, train, out):
        teacher = _teacher_from(args, cfg, data)
        return train_pfe(teacher, train, cfg, log_path=out / "pfe_log.jsonl")

    return _train_phase(args, "pfe.pt", "pfe", run)


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config, args.seed)
    data = load_data(args.data, cfg)
    net, meta = _load_ckpt(args.ckpt)
    check_hashes(meta, cfg, data, args.ckpt)
    kind = meta["kind"]
    if args.mls_match and kind not in ("student", "pfe"):
        raise ConfigError(f"--mls-match needs a checkpoint with a variance head, got {kind!r}")
    name = METHOD_OF_KIND[kind] + ("-mls" if args.mls_match and kind == "pfe" else "")
    split = experiment_split(data, cfg)
    emb = method_embeddings(name, net, kind, split, cfg)
    emb.mls = bool(args.mls_match)
    report = evaluate_method(emb, split, cfg, bins=args.bins, topk=args.topk,
                             config_hash=cfg.config_hash(), dataset=data.fingerprint())
    out = resolve_out(args.out)
    _atomic_write(out / "metrics.json", dumps_report(report))
    run = _manifest(args, cfg, data)
    run.checkpoints = [str(Path(args.ckpt).resolve())]
    run.metrics = "metrics.json"
    run.artifacts = ["metrics.json"]
    run.write(out)
    rec = report["recall"]
    print(f"{report['label']}: " + " ".join(f"r@{n}={v:.3f}" for n, v in rec.items()) + f" ap={report['ap']:.3f}")
    if report["ece"]:
        print(f"ece(ap)={report['ece']['ap']['ece']:.3f}")
    return EXIT_OK


def cmd_plot(args) -> int:
    from .plots import plot_report

    path = Path(args.report)
    if not path.exists():
        raise ManifestError(f"metrics report not found: {path}")
    try:
        report = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: not a metrics report ({exc})") from exc
    out = resolve_out(args.out)
    drawn = plot_report(report, out, metric=args.metric)
    run = RunManifest(args.command, __version__, None, {}, report.get("config_hash", ""),
                      report.get("dataset", ""), metrics=str(path.resolve()), artifacts=sorted(drawn))
    run.write(out)
    for name in sorted(drawn):
        print(out / name)
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = load_config(args.config, args.seed)
    data = load_data(args.data, cfg)
    if not args.ckpt:
        raise ManifestError("compare needs at least one --ckpt")
    methods = []
    for path in args.ckpt:
        net, meta = _load_ckpt(path)
        check_hashes(meta, cfg, data, path)
        kind = meta["kind"]
        methods.append((METHOD_OF_KIND[kind], net, kind))
        if kind == "student" and args.random_control:
            methods.append(("random-variance", net, kind))
        if kind == "pfe" and args.mls_match:
            methods.append(("pfe-mls", net, kind))
    table = compare(methods, data, cfg, bins=args.bins, topk=args.topk)
    out = resolve_out(args.out)
    _atomic_write(out / "table.json", json.dumps(table.to_dict(), sort_keys=True, indent=1) + "\n")
    _atomic_write(out / "table.txt", table.render())
    run = _manifest(args, cfg, data)
    run.checkpoints = [str(Path(p).resolve()) for p in args.ckpt]
    run.metrics = "table.json"
    run.artifacts = ["table.json", "table.txt"]
    run.write(out)
    sys.stdout.write(table.render())
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="stun",
        description="Self-teaching uncertainty estimation for place recognition.",
        epilog=EXIT_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, fn, help_, *, config=True, data=True, ckpt=None):
        sp = sub.add_parser(name, help=help_, description=help_, epilog=EXIT_HELP,
                            formatter_class=argparse.RawDescriptionHelpFormatter)
        sp.set_defaults(fn=fn)
        if config:
            sp.add_argument("--config", help="YAML config file (defaults when omitted)")
        if data:
            sp.add_argument("--data", required=True, help="dataset directory or manifest.jsonl")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, help="override the config seed")
        if ckpt == "one":
            sp.add_argument("--ckpt", help="checkpoint to read")
        elif ckpt == "many":
            sp.add_argument("--ckpt", action="append", default=[], help="checkpoint to include (repeatable)")
        return sp

    add("generate", cmd_generate, "write a seeded synthetic dataset", data=False)
    add("train-teacher", cmd_train_teacher, "train the metric-learning teacher")
    add("train-student", cmd_train_student, "train the student from a teacher checkpoint", ckpt="one")
    sp = add("train-baseline", cmd_train_baseline, "train the MC Dropout or PFE baseline", ckpt="one")
    sp.add_argument("--baseline", required=True, choices=("mc-dropout", "pfe"),
                    help="pfe also needs the teacher --ckpt")

    for name, fn, help_, ckpt in (
        ("evaluate", cmd_evaluate, "retrieval and calibration metrics for one checkpoint", "one"),
        ("compare", cmd_compare, "comparison table over several checkpoints", "many"),
    ):
        sp = add(name, fn, help_, ckpt=ckpt)
        sp.add_argument("--mls-match", action="store_true", help="rank PFE candidates by mutual likelihood score")
        sp.add_argument("--bins", type=int, metavar="M", help="calibration bins (default: config bins)")
        sp.add_argument("--topk", type=int, help="retrieval depth (default: config topk)")
        if name == "compare":
            sp.add_argument("--random-control", action="store_true",
                            help="add a row with the student means and uniformly random variances")

    sp = sub.add_parser("plot", help="render figures from a metrics report",
                        description="render figures from a metrics report", epilog=EXIT_HELP,
                        formatter_class=argparse.RawDescriptionHelpFormatter)
    sp.set_defaults(fn=cmd_plot)
    sp.add_argument("report", help="metrics.json written by evaluate")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--metric", default="ap", help="metric for the reliability diagram (default: ap)")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        code, msg = EXIT_CONFIG, f"config error: {exc}"
    except (ManifestError, DataError, FileNotFoundError) as exc:
        code, msg = EXIT_DATA, f"data error: {exc}"
    except DivergenceError as exc:
        code, msg = EXIT_DIVERGENCE, f"training diverged: {exc}"
    except HashMismatch as exc:
        code, msg = EXIT_HASH_MISMATCH, f"hash mismatch: {exc}"
    print(f"stun: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
