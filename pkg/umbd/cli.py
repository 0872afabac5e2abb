"""
Command-line interface.

    umbd gen-data --out data --seed 0
    umbd train --data data --run runs/toy --stage all
    umbd refine --run runs/toy --input img.png --coarse coarse.png --out refined.png
    umbd eval --run runs/toy --data data --seeds 5
    umbd ablate-steps --run runs/toy --data data --steps 1..10
    umbd ablate-uncertainty --run runs/toy --data data
    umbd report --run runs/toy

Exit codes: 0 success, 2 usage or configuration error, 3 data or checkpoint
error, 4 numerical failure.
"""

import argparse
import logging
import sys
from typing import List, Optional, Sequence

import torch

from . import __version__
from .config import RunLayout, env_log_level, load_environment, load_run_config, with_seed
from .datagen import load_dataset, load_manifest, read_image, read_mask, write_dataset, write_mask
from .exceptions import ConfigurationError, NumericalError, UMBDError
from .models import CorruptionSpec, DatasetManifest, SamplerType, UncertaintySource
from .pipeline import STAGES, RefinementPipeline
from .reporting import (
    EVAL_FIELDS,
    SAMPLE_FIELDS,
    STEP_FIELDS,
    UNCERTAINTY_FIELDS,
    eval_rows,
    plot_loss_curves,
    plot_metric_deltas,
    plot_step_ablation,
    read_csv,
    save_trace,
    write_csv,
)

logger = logging.getLogger(__name__)


def parse_steps(text: str) -> List[int]:
    """'1..10' or '1,3,10' -> list of ints."""
    try:
        if ".." in text:
            low, high = text.split("..", 1)
            steps = list(range(int(low), int(high) + 1))
        else:
            steps = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"invalid step list '{text}'") from e
    if not steps or min(steps) < 1:
        raise argparse.ArgumentTypeError(f"step list must hold positive integers, got '{text}'")
    return steps


def configure_logging(level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(levelname)s: %(message)s",
        handlers=[logging.StreamHandler()],
        force=True,
    )
    for noisy in ("matplotlib", "PIL"):
        logging.getLogger(noisy).setLevel(logging.WARNING)


def _inference(pipeline: RefinementPipeline, args: argparse.Namespace):
    icfg = pipeline.config.inference
    changes = {}
    if getattr(args, "steps", None) is not None:
        changes["T_infer"] = args.steps
    if getattr(args, "sampler", None):
        changes["sampler"] = SamplerType(args.sampler)
    if getattr(args, "uncertainty", None):
        changes["uncertainty_source"] = UncertaintySource(args.uncertainty)
    if getattr(args, "trace", None):
        changes["trace"] = True
    return icfg.replace(**changes) if changes else icfg


# Commands

def cmd_gen_data(args: argparse.Namespace) -> int:
    manifest = DatasetManifest(seed=args.seed, train_count=args.train, test_count=args.test,
                               image_size=args.size, strength=args.strength, corruption=CorruptionSpec())
    root = write_dataset(manifest, args.out)
    print(f"Wrote {args.train} train / {args.test} test samples to {root}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    stages = list(STAGES) if args.stage == "all" else [args.stage]
    layout = RunLayout.at(args.run)
    # a single stage on an existing run keeps the run's own config unless one is given
    stored = layout.config if args.stage != "all" and layout.config.is_file() else None
    config = load_run_config(args.config or stored)
    if args.seed is not None:
        config = with_seed(config, args.seed)
    if args.device:
        config = config.replace(device=args.device)
    config = config.replace(data_dir=str(args.data))

    train = load_dataset(args.data, "train")
    test = load_dataset(args.data, "test")
    manifest = load_manifest(args.data)

    if args.stage == "all" or not layout.prior_checkpoint.is_file():
        pipeline = RefinementPipeline(config, run_dir=layout.root)
    else:
        needed = {"1": ("prior",), "2": ("prior", "huqnet"), "3": ("prior", "huqnet", "denoiser")}[args.stage]
        pipeline = RefinementPipeline.from_run(layout.root, args.data, config, require=needed)
    pipeline.fit(train, stages, extra=test, corruption=manifest.corruption)
    print(f"Trained stage(s) {', '.join(stages)} into {layout.root}")
    return 0


def cmd_refine(args: argparse.Namespace) -> int:
    pipeline = RefinementPipeline.from_run(args.run, args.data, _device_config(args))
    icfg = _inference(pipeline, args)
    image = torch.from_numpy(read_image(args.input))
    coarse = torch.from_numpy(read_mask(args.coarse, binarize=False)) if args.coarse else None
    record = pipeline.refine(image, coarse, inference=icfg, sample_id=str(args.input))
    write_mask(record.refined.squeeze().numpy(), args.out)
    if args.trace:
        save_trace(record.trace, record.uncertainty, args.trace, record.timesteps)
    print(f"Refined mask written to {args.out}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    pipeline = RefinementPipeline.from_run(args.run, args.data, _device_config(args))
    icfg = _inference(pipeline, args)
    test = load_dataset(args.data, "test")
    coarse, refined, samples = pipeline.evaluate_corpus(test, icfg, seeds=args.seeds)
    rows = eval_rows(pipeline.prior.kind.value, icfg.T_infer, coarse, refined)
    write_csv(pipeline.layout.eval, EVAL_FIELDS, rows)
    write_csv(pipeline.layout.eval_samples, SAMPLE_FIELDS, samples)
    print(f"{'':10s}{'MAE':>8s}{'Fw':>8s}{'Ephi':>8s}{'Salpha':>8s}")
    for label, row in (("coarse", coarse), ("refined", refined)):
        print(f"{label:10s}{row.mae:8.4f}{row.f_beta_w:8.4f}{row.e_phi:8.4f}{row.s_alpha:8.4f}")
    return 0


def cmd_ablate_steps(args: argparse.Namespace) -> int:
    pipeline = RefinementPipeline.from_run(args.run, args.data, _device_config(args))
    test = load_dataset(args.data, "test")
    rows = pipeline.ablate_steps(test, args.steps, pipeline.config.inference)
    write_csv(pipeline.layout.ablate_steps, STEP_FIELDS, rows)
    for row in rows:
        print(f"T={row['T_infer']:<4d} MAE={row['mae']:.4f}  t={row['seconds_per_image']:.4f} s/img")
    return 0


def cmd_ablate_uncertainty(args: argparse.Namespace) -> int:
    pipeline = RefinementPipeline.from_run(args.run, args.data, _device_config(args))
    test = load_dataset(args.data, "test")
    rows = pipeline.ablate_uncertainty(test, _inference(pipeline, args))
    write_csv(pipeline.layout.ablate_uncertainty, UNCERTAINTY_FIELDS, rows)
    for row in rows:
        print(f"{row['source']:10s} MAE={row['mae']:.4f}  |U-U_GT|={row['uncertainty_error']:.4f}")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    layout = RunLayout.at(args.run)
    written = [plot_metric_deltas(read_csv(layout.eval), layout.figures / "metric_deltas.png")]
    if layout.logs.is_file():
        written.append(plot_loss_curves(read_csv(layout.logs), layout.figures / "loss_curves.png"))
    if layout.ablate_steps.is_file():
        written.append(plot_step_ablation(read_csv(layout.ablate_steps), layout.figures / "step_ablation.png"))
    for path in written:
        print(path)
    return 0


def _device_config(args: argparse.Namespace):
    """Stored run config with the --device flag applied, or None to use the stored one as is."""
    if not args.device:
        return None
    layout = RunLayout.at(args.run)
    config = load_run_config(layout.config if layout.config.is_file() else None)
    return config.replace(device=args.device)


# Parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="umbd", description="Uncertainty-masked Bernoulli diffusion mask refinement")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR (default: $UMBD_LOG_LEVEL or INFO)")
    parser.add_argument("--device", default=None, help="torch device, e.g. cpu or cuda (default: config / $UMBD_DEVICE)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic camouflage corpus")
    p.add_argument("--out", required=True, help="dataset root")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train", type=int, default=500)
    p.add_argument("--test", type=int, default=100)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--strength", type=float, default=0.4)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run training stages")
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--run", required=True, help="run directory or name")
    p.add_argument("--stage", choices=[*STAGES, "all"], default="all")
    p.add_argument("--config", default=None, help="JSON run config")
    p.add_argument("--seed", type=int, default=None, help="root seed override")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("refine", help="refine one coarse mask")
    p.add_argument("--run", required=True)
    p.add_argument("--input", required=True, help="RGB image PNG")
    p.add_argument("--coarse", default=None, help="coarse mask PNG (default: the run's prior)")
    p.add_argument("--out", required=True, help="refined mask PNG")
    p.add_argument("--data", default=None, help="dataset root the oracle prior was built on")
    p.add_argument("--trace", default=None, help="directory for per-step latents")
    p.add_argument("--steps", type=int, default=None, help="T_infer")
    p.add_argument("--sampler", choices=[s.value for s in SamplerType], default=None)
    p.add_argument("--uncertainty", choices=[u.value for u in UncertaintySource], default=None)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("eval", help="coarse vs refined metrics on the test split")
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--seeds", type=int, default=1, help="number of inference seeds to average")
    p.add_argument("--steps", type=int, default=None, help="T_infer")
    p.add_argument("--sampler", choices=[s.value for s in SamplerType], default=None)
    p.add_argument("--uncertainty", choices=[u.value for u in UncertaintySource], default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate-steps", help="metrics and timing per sampling-step count")
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=parse_steps, default=parse_steps("1..10"), help="'1..10' or '1,3,10'")
    p.set_defaults(func=cmd_ablate_steps)

    p = sub.add_parser("ablate-uncertainty", help="metrics per uncertainty source")
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_ablate_uncertainty)

    p = sub.add_parser("report", help="figures from a run's CSV files")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    load_environment()
    configure_logging(args.log_level or env_log_level())

    try:
        return args.func(args)
    except UMBDError as e:
        logger.error(str(e))
        return e.exit_code
    except ValueError as e:
        logger.error(str(e))
        return ConfigurationError.exit_code
    except RuntimeError as e:
        logger.error(f"Unexpected failure: {e}")
        return NumericalError.exit_code


if __name__ == "__main__":
    sys.exit(main())
