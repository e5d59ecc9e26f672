"""Command-line entry point: ``gabortex <subcommand> ...``.

Subcommands: gen-data, train, eval, gradcheck, synth-filter, export-maps.
Usage errors exit with 2, runtime errors and failed checks with 1.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .checks import DEFAULT_H, DEFAULT_TOL, SUITES, run_suites
from .data import default_classes, gen_dataset, read_manifest, write_tensor
from .gabor import GaborFilterSpec, default_kernel_size, synthesize, valid_ranges
from .gate import format_selection
from .network import ModelConfig, TextureNet, evaluate, load_checkpoint, train
from .oracle import dft2

log = logging.getLogger("gabortex")

PATH_KEYS = ("dataset", "out", "checkpoint")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Flat ``key = value`` run file: every ModelConfig field plus the paths below."""
    dataset: str
    out: str = "run"
    checkpoint: str | None = None          # continue from this checkpoint instead of a fresh model
    model: ModelConfig = field(default_factory=ModelConfig)


def _parse_bool(text: str) -> bool:
    t = text.lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _coerce(name: str, annotation: str, default, text: str):
    optional = "None" in annotation
    if optional and text.lower() == "none":
        return None
    base = annotation.replace("| None", "").strip()
    if base == "bool":
        return _parse_bool(text)
    if base == "int":
        return int(text)
    if base == "float":
        return float(text)
    if base == "str":
        return text
    if base == "tuple":
        elem = float if any(isinstance(x, float) for x in default) else int
        return tuple(elem(p) for p in text.split(",") if p.strip())
    raise ConfigError(f"no parser for {name} ({annotation})")


def parse_run_config(text: str, source: str = "<config>") -> RunConfig:
    model_fields = {f.name: f for f in fields(ModelConfig)}
    values: dict[str, object] = {}
    paths: dict[str, str | None] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in values or key in paths:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        if key in PATH_KEYS:
            paths[key] = None if value.lower() == "none" else value
        elif key in model_fields:
            f = model_fields[key]
            try:
                values[key] = _coerce(key, str(f.type), f.default, value)
            except ValueError as exc:
                raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
        else:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
    if not paths.get("dataset"):
        raise ConfigError(f"{source}: missing required key 'dataset'")
    try:
        model = ModelConfig(**values)
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return RunConfig(dataset=paths["dataset"], out=paths.get("out") or "run",
                     checkpoint=paths.get("checkpoint"), model=model)


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    cfg = parse_run_config(text, str(path))
    # a relative dataset path is taken relative to the config file
    ds = Path(cfg.dataset)
    if not ds.is_absolute() and not ds.exists() and (path.parent / ds).exists():
        cfg.dataset = str(path.parent / ds)
    return cfg


def _config_help() -> str:
    lines = ["config keys (key = value, '#' starts a comment):",
             "  dataset = <dir or manifest.json>   (required)",
             "  out = run", "  checkpoint = none"]
    for f in fields(ModelConfig):
        d = f.default
        shown = ",".join(str(x) for x in d) if isinstance(d, tuple) else ("none" if d is None else d)
        lines.append(f"  {f.name} = {shown}")
    return "\n".join(lines)


# subcommands ---------------------------------------------------------------

def cmd_gen_data(args) -> int:
    specs = default_classes()
    if not 1 <= args.classes <= len(specs):
        raise ValueError(f"--classes must be in 1..{len(specs)}")
    if args.per_class < 1:
        raise ValueError("--per-class must be >= 1")
    m = gen_dataset(specs[:args.classes], args.per_class, args.split, args.out, args.seed, args.size)
    n_train = len(m.split("train"))
    print(f"wrote {len(m.samples)} samples ({n_train} train / {len(m.samples) - n_train} test) to {args.out}")
    return 0


def cmd_train(args) -> int:
    rc = load_run_config(args.config)
    if args.seed is not None:
        rc.model.seed = args.seed
    out = Path(args.out or rc.out)
    manifest = read_manifest(rc.dataset)
    model = load_checkpoint(rc.checkpoint) if rc.checkpoint else None
    if model is not None:
        model.cfg = rc.model
    _, history = train(rc.model, manifest, out_dir=out, model=model)
    if history:
        last = history[-1]
        print(f"step {last['step']} loss {last['loss']:.4f} acc {last['acc']:.3f} "
              f"mean_regions {last['mean_regions']:.2f}")
    print(f"metrics: {out / 'metrics.csv'}")
    print(f"checkpoint: {out / 'checkpoint'}")
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    images, labels = read_manifest(args.dataset).load(args.split)
    res = evaluate(model, images, labels)
    print(f"accuracy {res['acc']:.4f}")
    print(f"mean_regions {res['mean_regions']:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    reports = run_suites(args.suite or None, seed=args.seed, h=args.h, tol=args.tol)
    for r in reports:
        print(r)
    failed = sum(not r.passed for r in reports)
    print(f"{len(reports) - failed}/{len(reports)} passed")
    return 1 if failed else 0


def cmd_synth_filter(args) -> int:
    vr = valid_ranges(args.region_size)
    w_hi = vr.w_full[1]
    checks = [("theta", args.theta, *vr.theta), ("sigma_y", args.sigma_y, *vr.sigma_y),
              ("w", args.w, *vr.w_full), ("sigma_x", args.sigma_x, *vr.sigma_x(min(args.w, w_hi)))]
    for name, v, lo, hi in checks:
        if not lo <= v <= hi:
            raise ValueError(f"{name}={v} outside valid range [{lo:.6g}, {hi:.6g}] "
                             f"for region size {args.region_size}")
    k = args.kernel_size or default_kernel_size(args.region_size)
    if k < 1 or k % 2 == 0:
        raise ValueError(f"--kernel-size must be a positive odd number, got {k}")
    kernel = synthesize(GaborFilterSpec(args.sigma_x, args.sigma_y, args.theta, args.w, kernel_size=k))
    mag, peak = dft2(kernel[0])      # real plane; its spectrum peaks at +-(W, theta)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_tensor(out / "kernel.tnsr", kernel)
    write_tensor(out / "dft_magnitude.tnsr", mag)
    print(f"kernel {k}x{k} -> {out / 'kernel.tnsr'}")
    print(f"real-plane dft peak (u, v) = ({peak[0] + 0.0:.6f}, {peak[1] + 0.0:.6f}) cycles/pixel -> {out / 'dft_magnitude.tnsr'}")
    return 0


def cmd_export_maps(args) -> int:
    model = load_checkpoint(args.checkpoint)
    if not model.cfg.texture:
        raise ValueError("checkpoint has no texture branch")
    manifest = read_manifest(args.dataset)
    entries = manifest.split(args.split)[:args.limit]
    images, _ = manifest.load(args.split)
    images = images[:len(entries)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for entry, image in zip(entries, images):
        image_id = Path(entry.path).stem
        pred = model.forward(image, train=False)
        lines += format_selection(image_id, model.proposals, pred.decisions[0])
        picks = [(0, k) for k in pred.selected[0]]
        if not picks:
            continue
        _export_regions(model, image, picks, out / image_id)
    (out / "selection.txt").write_text("".join(line + "\n" for line in lines))
    for line in lines:
        print(line)
    print(f"{len(lines)} selected regions over {len(entries)} images -> {out}")
    return 0


def _export_regions(model: TextureNet, image: np.ndarray, picks, dest: Path) -> None:
    from . import autodiff as ad
    from .network import standardize, zoom_regions
    from .gabor import apply_bank

    dest.mkdir(parents=True, exist_ok=True)
    with ad.no_tape():
        regions = zoom_regions(ad.Tensor(image[None]), [(b, model.proposals[k]) for b, k in picks],
                               model.cfg.region_size)
        if model.cfg.standardize_regions:
            regions = standardize(regions)
        maps = apply_bank(model.bank, regions)
        model.lho(maps)
        counts = model.lho.last.counts
    for i, (_, k) in enumerate(picks):
        write_tensor(dest / f"region{k}_maps.tnsr", maps.data[i])        # (N, S, S)
        write_tensor(dest / f"region{k}_counts.tnsr", counts.data[i])    # (N, M)


# argument parsing ----------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    """argparse that reports usage errors through :class:`UsageError` instead of exiting."""

    def error(self, message):
        raise UsageError(self.format_usage() + f"{self.prog}: error: {message}")


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = _Parser(prog="gabortex", description="Learnable Gabor texture classifier toolkit.",
                formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    p.add_argument("--threads", type=int, default=1, help="BLAS thread limit")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-data", help="write a synthetic texture dataset", formatter_class=fmt)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--classes", type=int, default=4, help="number of default classes to use")
    g.add_argument("--per-class", type=int, default=75, help="samples per class")
    g.add_argument("--size", type=int, default=32, help="image side in pixels")
    g.add_argument("--split", type=float, default=0.75, help="fraction of samples in the train split")
    g.add_argument("--seed", type=int, default=0, help="master seed")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model from a run config",
                       formatter_class=argparse.RawDescriptionHelpFormatter, epilog=_config_help())
    t.add_argument("--config", required=True, help="key = value run file")
    t.add_argument("--seed", type=int, default=None, help="override the config seed (default: from config)")
    t.add_argument("--out", default=None, help="override the config out dir (default: from config)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="accuracy and mean selected regions of a checkpoint",
                       formatter_class=fmt)
    e.add_argument("--checkpoint", required=True, help="checkpoint directory")
    e.add_argument("--dataset", required=True, help="dataset directory or manifest")
    e.add_argument("--split", default="test", choices=("train", "test"), help="which split")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="compare tape gradients with central differences",
                       formatter_class=fmt)
    c.add_argument("--tol", type=float, default=DEFAULT_TOL, help="max relative error")
    c.add_argument("--h", type=float, default=DEFAULT_H, help="finite-difference step")
    c.add_argument("--suite", action="append", choices=list(SUITES),
                   help="suite to run, repeatable (default: all)")
    c.add_argument("--seed", type=int, default=0, help="seed for the probe instances")
    c.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth-filter", help="dump one Gabor kernel and its DFT magnitude",
                       formatter_class=fmt)
    s.add_argument("--sigma-x", type=float, default=4.0, help="envelope scale along the carrier, pixels")
    s.add_argument("--sigma-y", type=float, default=4.0, help="envelope scale across the carrier, pixels")
    s.add_argument("--theta", type=float, default=0.0, help="orientation, radians")
    s.add_argument("--w", type=float, default=0.25, help="radial frequency, cycles/pixel")
    s.add_argument("--region-size", type=int, default=32, help="region size that sets the valid ranges")
    s.add_argument("--kernel-size", type=int, default=None,
                   help="odd kernel side (default: derived from the region size)")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_synth_filter)

    x = sub.add_parser("export-maps", help="dump intensity maps, counts and region selections",
                       formatter_class=fmt)
    x.add_argument("--checkpoint", required=True, help="checkpoint directory")
    x.add_argument("--dataset", required=True, help="dataset directory or manifest")
    x.add_argument("--split", default="test", choices=("train", "test"), help="which split")
    x.add_argument("--limit", type=int, default=8, help="number of images")
    x.add_argument("--out", required=True, help="output directory")
    x.set_defaults(func=cmd_export_maps)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.threads < 1:
        print("gabortex: error: --threads must be >= 1", file=sys.stderr)
        return 2
    with threadpool_limits(limits=args.threads):
        try:
            return args.func(args)
        except ConfigError as exc:
            print(f"gabortex: config error: {exc}", file=sys.stderr)
            return 2
        except (OSError, ValueError, KeyError) as exc:
            print(f"gabortex: error: {exc}", file=sys.stderr)
            return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
