"""Command-line entry point: ``aranet <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import dosimetry, phantom, trainer
from .arch import ArchConfig
from .dosimetry import MaskVolume, Volume
from .losses import LossWeights
from .persist import FormatError, read_mask, read_volume, write_volume

logger = logging.getLogger("aranet")

REPORT_METRICS = (("D95", "d95"), ("D50", "d50"), ("Dmean", "d_mean"), ("V50", "v_x"), ("CI", "ci"), ("HI", "hi"))


class UsageError(Exception):
    pass


def _positive_int(text: str) -> int:
    try:
        val = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if val < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {val}")
    return val


def _int_triple(text: str) -> tuple[int, int, int]:
    parts = text.replace("x", ",").split(",")
    try:
        vals = tuple(int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three comma-separated integers, got {text!r}") from None
    if len(vals) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated integers, got {text!r}")
    return vals


def _existing_dir(path: Path, what: str) -> Path:
    if not path.is_dir():
        raise UsageError(f"{what} directory not found: {path}")
    return path


def _existing_file(path: Path, what: str) -> Path:
    if not path.is_file():
        raise UsageError(f"{what} file not found: {path}")
    return path


def read_config_file(path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; dashes in keys become underscores."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


# ---------------------------------------------------------------- phantom


def cmd_phantom_gen(args) -> int:
    try:
        manifest = phantom.make_dataset(args.n, args.seed, args.out, split=args.split,
                                        grid=args.grid, prescription_gy=args.prescription)
    except (ValueError, phantom.PhantomError) as exc:
        raise UsageError(str(exc)) from None
    counts = {s: len(manifest.split(s)) for s in ("train", "val", "test")}
    print(f"wrote {len(manifest.entries)} phantoms to {args.out} "
          f"(train={counts['train']} val={counts['val']} test={counts['test']})")
    return 0


# ---------------------------------------------------------------- train


def _train_config(args, input_size: int) -> trainer.TrainConfig:
    arch = ArchConfig(base_channels=args.base_channels, depth=args.depth, input_size=input_size)
    weights = LossWeights(lambda1=args.lambda1, lambda2=args.lambda2, lambda3=args.lambda3, delta=args.delta)
    if args.paper_scale:
        cfg = trainer.TrainConfig.paper_scale(weights=weights, ablation=args.arm, seed=args.seed)
        return replace(cfg, arch=replace(cfg.arch, input_size=input_size), steps=args.steps)
    return trainer.TrainConfig(arch=arch, weights=weights, ablation=args.arm, lr=args.lr,
                               batch_size=args.batch_size, steps=args.steps, epochs=args.epochs,
                               seed=args.seed)


def _load_training_data(data: Path, split: str = "train"):
    _existing_dir(data, "data")
    try:
        samples, prescription = phantom.load_split(data, split)
    except FileNotFoundError as exc:
        raise UsageError(f"cannot read dataset {data}: {exc}") from None
    if not samples:
        raise UsageError(f"{data}: the {split!r} split is empty")
    return samples, prescription


def run_training(samples, prescription: float, out: Path, cfg: trainer.TrainConfig, log_path: Path | None,
                 resume: bool = False, checkpoint_every: int = 0, stop_at: int | None = None):
    x, y = trainer.build_slices(samples, prescription, cfg.arch.in_channels)
    if resume and out.exists():
        state, arch, _ = trainer.load_state(out, cfg)
        cfg = replace(cfg, arch=arch)
        logger.info("resumed %s at step %d", out, state.step)
    else:
        state = trainer.init_state(cfg)
        resume = False
    arch = cfg.resolved_arch()
    log = trainer.LossLog(log_path, append=resume) if log_path is not None else None

    def checkpoint(s):
        trainer.save_state(out, s, arch, prescription)

    trainer.fit(state, cfg, x, y, log=log, checkpoint=checkpoint,
                checkpoint_every=checkpoint_every, stop_at=stop_at)
    return state, cfg, prescription


def cmd_train(args) -> int:
    data = Path(args.data)
    samples, prescription = _load_training_data(data)
    cfg = _train_config(args, samples[0].ct.shape[1])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = Path(args.log) if args.log else out.with_suffix(".csv")
    state, _, _ = run_training(samples, prescription, out, cfg, log_path, resume=args.resume,
                               checkpoint_every=args.checkpoint_every, stop_at=args.stop_at)
    last = state.history[-1] if state.history else None
    print(f"step {state.step}; checkpoint {out}; log {log_path}")
    if last is not None:
        print(f"final total={last.total:.6f} l_final={last.l_final:.6f}")
    return 0


# ---------------------------------------------------------------- predict / eval


def _read_sample_dir(sample_dir: Path) -> phantom.Sample:
    _existing_dir(sample_dir, "sample")
    ct = read_volume(_existing_file(sample_dir / "ct.dvol", "CT"))
    masks = [read_mask(p) for p in sorted(sample_dir.glob("*.dmask"))]
    order = {label: i for i, label in enumerate(phantom.STRUCTURE_LABELS)}
    masks.sort(key=lambda m: order.get(m.label, len(order)))
    dose_path = sample_dir / "dose.dvol"
    dose = read_volume(dose_path) if dose_path.is_file() else Volume(np.zeros(ct.shape, np.float32), ct.spacing_mm)
    return phantom.Sample(sample_dir.name, "", ct, masks, dose)


def cmd_predict(args) -> int:
    ckpt = _existing_file(Path(args.ckpt), "checkpoint")
    sample = _read_sample_dir(Path(args.sample))
    gen, arch, prescription = trainer.load_generator(ckpt)
    prescription = args.prescription or prescription
    if prescription is None:
        raise UsageError("checkpoint has no prescription dose; pass --prescription")
    pred = trainer.predict_volume(gen, arch, sample, prescription)
    write_volume(args.out, pred)
    print(f"wrote {args.out} (max {float(pred.values.max()):.3f} Gy)")
    return 0


def _metric_value(report: dosimetry.MetricReport, structure: str, attr: str) -> float:
    sm = report.structures.get(structure)
    val = getattr(sm, attr) if sm is not None else None
    return float("nan") if val is None else float(val)


def report_table(names, truth_reports, pred_reports, structure: str = "ptv"):
    """Rows of (name, [(truth, pred, |delta|) per metric]) plus the column-average footer."""
    rows = []
    for name, t, p in zip(names, truth_reports, pred_reports):
        cells = []
        for _, attr in REPORT_METRICS:
            tv, pv = _metric_value(t, structure, attr), _metric_value(p, structure, attr)
            cells.append((tv, pv, abs(tv - pv)))
        rows.append((name, cells))
    footer = []
    for j in range(len(REPORT_METRICS)):
        footer.append(tuple(sum(r[1][j][k] for r in rows) / len(rows) for k in range(3)))
    return rows, footer


def write_report_csv(path, rows, footer) -> None:
    header = ["patient"]
    for name, _ in REPORT_METRICS:
        header += [name, f"{name}_pred", f"{name}_delta"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for name, cells in rows + [("Avg", footer)]:
            w.writerow([name] + [repr(v) for cell in cells for v in cell])


def write_ape_csv(path, columns: dict[str, dict[str, tuple[float, float]]]) -> str:
    """Rows D95/D50/Dmean, one ``ape`` and ``std`` column pair per arm; returns the text printed."""
    arms = list(columns)
    lines = [",".join(["metric"] + [f"{a}_ape,{a}_std" for a in arms])]
    for metric, _ in trainer.APE_METRICS:
        cells = [f"{columns[a][metric][0]:.3f},{columns[a][metric][1]:.3f}" for a in arms]
        lines.append(",".join([metric] + cells))
    text = "\n".join(lines) + "\n"
    Path(path).write_text(text, encoding="utf-8")
    return text


def cmd_eval(args) -> int:
    if len(args.pred) != len(args.truth) or len(args.masks) != len(args.truth):
        raise UsageError("--pred, --truth and --masks need the same number of entries")
    names, truth_reports, pred_reports = [], [], []
    for pred_path, truth_path, mask_dir in zip(args.pred, args.truth, args.masks):
        pred = read_volume(_existing_file(Path(pred_path), "prediction"))
        truth = read_volume(_existing_file(Path(truth_path), "truth"))
        masks: list[MaskVolume] = [read_mask(p) for p in sorted(_existing_dir(Path(mask_dir), "mask").glob("*.dmask"))]
        if not any(m.label == args.target for m in masks):
            raise UsageError(f"{mask_dir}: no {args.target!r} mask")
        name = Path(mask_dir).name or Path(truth_path).stem
        names.append(name)
        truth_reports.append(dosimetry.evaluate_structures(truth, masks, args.prescription, args.vx,
                                                           target_label=args.target, sample=name))
        pred_reports.append(dosimetry.evaluate_structures(pred, masks, args.prescription, args.vx,
                                                          target_label=args.target, sample=name))
    rows, footer = report_table(names, truth_reports, pred_reports, args.target)
    out = Path(args.out)
    write_report_csv(out, rows, footer)
    ape = trainer.cohort_ape(truth_reports, pred_reports, args.target)
    text = write_ape_csv(out.with_name(out.stem + "_ape.csv"), {"pred": ape})
    sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------- diffmap


def diff_image(pred: np.ndarray, truth: np.ndarray) -> tuple[np.ndarray, float]:
    """|pred - truth| slices tiled left to right, scaled so the volume maximum maps to 255."""
    if pred.shape != truth.shape:
        raise UsageError(f"shape mismatch: prediction {pred.shape} vs truth {truth.shape}")
    diff = np.abs(pred.astype(np.float64) - truth.astype(np.float64))
    peak = float(diff.max())
    scaled = np.zeros_like(diff) if peak == 0 else diff / peak * 255.0
    img = np.rint(scaled).astype(np.uint8)
    d, h, w = img.shape
    return img.transpose(1, 0, 2).reshape(h, d * w), peak


def write_pgm(path, img: np.ndarray) -> None:
    h, w = img.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(img, np.uint8).tobytes())


def cmd_diffmap(args) -> int:
    pred = read_volume(_existing_file(Path(args.pred), "prediction"))
    truth = read_volume(_existing_file(Path(args.truth), "truth"))
    img, peak = diff_image(pred.values, truth.values)
    write_pgm(args.out, img)
    print(f"max_abs_diff_gy={peak!r} gy_per_level={peak / 255.0!r}")
    return 0


# ---------------------------------------------------------------- ablation


def cmd_ablation(args) -> int:
    data = Path(args.data)
    samples, prescription = _load_training_data(data)
    test, _ = phantom.load_split(data, args.split)
    if not test:
        raise UsageError(f"{data}: the {args.split!r} split is empty")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    columns = {}
    for arm in args.arms:
        cfg = trainer.TrainConfig(arch=ArchConfig(base_channels=args.base_channels, depth=args.depth,
                                                  input_size=samples[0].ct.shape[1]),
                                  ablation=arm, lr=args.lr, batch_size=args.batch_size,
                                  steps=args.steps, seed=args.seed)
        state, cfg, _ = run_training(samples, prescription, out_dir / f"{arm}.ackpt", cfg, out_dir / f"{arm}.csv")
        ev = trainer.evaluate(state.gen, cfg.resolved_arch(), test, prescription)
        columns[arm] = ev.ape
        logger.info("arm %s done", arm)
    text = write_ape_csv(out_dir / "ape_table.csv", columns)
    sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------- parser

ARMS = [a.value for a in trainer.Arm]


def _add_train_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="dataset directory holding manifest.txt (required)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=_positive_int, default=2)
    p.add_argument("--base-channels", type=_positive_int, default=16)
    p.add_argument("--depth", type=_positive_int, default=4)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aranet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phantom", help="synthetic phantom datasets")
    phsub = ph.add_subparsers(dest="phantom_command", required=True)
    gen = phsub.add_parser("gen", help="write a phantom dataset and manifest")
    gen.add_argument("--n", type=_positive_int, required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.add_argument("--grid", type=_int_triple, default=(8, 64, 64), help="D,H,W voxels")
    gen.add_argument("--split", type=_int_triple, default=phantom.COHORT_SPLIT, help="train,val,test counts")
    gen.add_argument("--prescription", type=float, default=45.0)
    gen.set_defaults(func=cmd_phantom_gen)

    tr = sub.add_parser("train", help="train one ablation arm")
    _add_train_options(tr)
    tr.add_argument("--config", help="key=value file; command-line flags take precedence")
    tr.add_argument("--arm", choices=ARMS, default="full")
    tr.add_argument("--out", help="checkpoint path (required)")
    tr.add_argument("--steps", type=_positive_int)
    tr.add_argument("--epochs", type=_positive_int)
    tr.add_argument("--stop-at", type=_positive_int, help="halt after this global step")
    tr.add_argument("--log", help="CSV loss log (default: checkpoint path with .csv)")
    tr.add_argument("--resume", action="store_true", help="continue from --out if it exists")
    tr.add_argument("--checkpoint-every", type=int, default=0)
    tr.add_argument("--paper-scale", action="store_true", help="lr 1e-5, batch 16, 100 epochs")
    tr.add_argument("--lambda1", type=float, default=2.0)
    tr.add_argument("--lambda2", type=float, default=1.0)
    tr.add_argument("--lambda3", type=float, default=0.5)
    tr.add_argument("--delta", type=float, default=1.0)
    tr.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="predict a dose volume for one sample directory")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--sample", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--prescription", type=float)
    pr.set_defaults(func=cmd_predict)

    ev = sub.add_parser("eval", help="dosimetric report of predictions against truth")
    ev.add_argument("--pred", nargs="+", required=True)
    ev.add_argument("--truth", nargs="+", required=True)
    ev.add_argument("--masks", nargs="+", required=True, help="directories of .dmask files")
    ev.add_argument("--prescription", type=float, required=True)
    ev.add_argument("--vx", type=float, default=50.0, help="dose level in Gy for the V column")
    ev.add_argument("--target", default="ptv")
    ev.add_argument("--out", required=True)
    ev.set_defaults(func=cmd_eval)

    dm = sub.add_parser("diffmap", help="absolute difference map as an 8-bit PGM")
    dm.add_argument("--pred", required=True)
    dm.add_argument("--truth", required=True)
    dm.add_argument("--out", required=True)
    dm.set_defaults(func=cmd_diffmap)

    ab = sub.add_parser("ablation", help="train every arm and tabulate APE")
    _add_train_options(ab)
    ab.add_argument("--steps", type=_positive_int, default=200)
    ab.add_argument("--arms", nargs="+", choices=ARMS, default=ARMS)
    ab.add_argument("--split", default="test", choices=("train", "val", "test"))
    ab.add_argument("--out", required=True)
    ab.set_defaults(func=cmd_ablation)
    return parser


def parse_args(argv, parser: argparse.ArgumentParser | None = None) -> argparse.Namespace:
    parser = parser or build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        cfg_path = Path(args.config)
        if not cfg_path.is_file():
            parser.error(f"config file not found: {cfg_path}")
        values = read_config_file(cfg_path)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(values) - known)
        if unknown:
            parser.error(f"{cfg_path}: unknown keys {', '.join(unknown)}")
        # file values become defaults, so explicit flags still win
        defaults = {}
        for action in sub._actions:
            if action.dest in values:
                text = values[action.dest]
                if isinstance(action, argparse._StoreTrueAction):
                    defaults[action.dest] = text.lower() in ("1", "true", "yes", "on")
                else:
                    defaults[action.dest] = action.type(text) if action.type else text
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    for name in ("data", "out"):
        if hasattr(args, name) and getattr(args, name) is None:
            parser.error(f"the following arguments are required: --{name}")
    return args


def main(argv=None) -> int:
    parser = build_parser()
    args = parse_args(sys.argv[1:] if argv is None else argv, parser)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"aranet: error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, trainer.TrainingDivergedError, dosimetry.EmptyStructureError,
            ValueError, OSError, KeyError) as exc:
        print(f"aranet: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
