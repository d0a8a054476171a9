"""``fdnm`` command line: synth, decompose, recompose, swap, train, eval, gradcheck, sweep."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import fourier
from .data import load_image, read_dataset, save_image, generate, write_dataset
from .evaluation import evaluate, summary_line, write_reports
from .gradsuite import DEFAULT_SEEDS, run_suite
from .numerics.params import read_checkpoint, write_checkpoint
from .numerics.tensor import Tensor
from .training import build_model, sweep, train

log = logging.getLogger("fdnm")

CONFIG_ECHO = "config.txt"


class CliError(Exception):
    pass


@contextmanager
def _thread_cap():
    """Cap BLAS threads at FDNM_THREADS (default 1, which keeps runs bitwise stable)."""
    from threadpoolctl import threadpool_limits

    raw = os.environ.get("FDNM_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise CliError(f"FDNM_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise CliError(f"FDNM_THREADS must be positive, got {n}")
    with threadpool_limits(limits=n):
        yield


def _load_config(args) -> cfgmod.Config:
    base = cfgmod.Config.desk() if getattr(args, "desk", False) else cfgmod.Config()
    cfg = cfgmod.load(args.config, base) if getattr(args, "config", None) else base
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_values({"seed": args.seed})
    return cfg


def _announce_seed(cfg: cfgmod.Config) -> None:
    # stderr, so stdout of `eval` is exactly the summary row
    print(f"seed {cfg.seed}", file=sys.stderr)


# -- synth -------------------------------------------------------------------------
def cmd_synth(args) -> int:
    cfg = _load_config(args)
    _announce_seed(cfg)
    print(f"wrote {write_dataset(generate(cfg.synth), args.out)}")
    return 0


# -- decompose / recompose --------------------------------------------------------------
def _log_scaled(amp: np.ndarray) -> np.ndarray:
    v = np.log1p(amp)
    top = v.max()
    return v / top if top > 0 else v


def _centered(plane: np.ndarray) -> np.ndarray:
    """Roll the DC bin to the middle of the plane for viewing."""
    h, w = plane.shape
    return np.roll(plane, (h // 2, w // 2), axis=(0, 1))


def cmd_decompose(args) -> int:
    img = load_image(args.image)
    spec = fourier.fft2(Tensor(img))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for c in range(img.shape[0]):
        amp, pha = spec.amp.data[c], spec.pha.data[c]
        write_checkpoint(out / f"amp_c{c}.f32", {f"amp_c{c}": amp})
        write_checkpoint(out / f"pha_c{c}.f32", {f"pha_c{c}": pha})
        # DC moved to the center for viewing; the raw planes keep the FFT layout
        save_image(_centered(_log_scaled(amp))[None], out / f"amp_c{c}.pgm")
        save_image(_centered((pha + np.pi) / (2 * np.pi))[None], out / f"pha_c{c}.pgm")
    print(f"wrote {img.shape[0]} channel(s) to {out}")
    return 0


def _plane(path: Path, key: str) -> np.ndarray:
    arrays = read_checkpoint(path)
    if key not in arrays:
        raise CliError(f"{path}: missing plane {key!r}")
    return np.asarray(arrays[key], dtype=np.float64)


def _clamp(img: np.ndarray) -> tuple[np.ndarray, int]:
    bad = int(np.count_nonzero((img < 0) | (img > 1)))
    return np.clip(img, 0.0, 1.0), bad


def cmd_recompose(args) -> int:
    src = Path(args.dir)
    channels = []
    c = 0
    while (src / f"amp_c{c}.f32").exists():
        amp = Tensor(_plane(src / f"amp_c{c}.f32", f"amp_c{c}"))
        pha = Tensor(_plane(src / f"pha_c{c}.f32", f"pha_c{c}"))
        channels.append(fourier.ifft2(fourier.recombine(amp, pha), force_real=True).data)
        c += 1
    if not channels:
        raise CliError(f"{src}: no amp_c0.f32 found")
    img, clamped = _clamp(np.stack(channels))
    save_image(img, args.out)
    print(f"wrote {args.out} clamped={clamped}")
    return 0


# -- swap --------------------------------------------------------------------------
def _minmax(img: np.ndarray) -> np.ndarray:
    lo = img.min(axis=(-2, -1), keepdims=True)
    span = img.max(axis=(-2, -1), keepdims=True) - lo
    return np.divide(img - lo, span, out=np.zeros_like(img), where=span > 0)


def _ext(img: np.ndarray) -> str:
    return ".ppm" if img.shape[0] == 3 else ".pgm"


def cmd_swap(args) -> int:
    a, b = load_image(args.image_a), load_image(args.image_b)
    if a.shape != b.shape:
        raise CliError(f"image sizes differ: {a.shape} vs {b.shape}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    first, second = fourier.swap_components(Tensor(a), Tensor(b))
    total = 0
    for name, img in (("pha_a_amp_b", first.data), ("pha_b_amp_a", second.data)):
        img, clamped = _clamp(img)
        total += clamped
        save_image(img, out / f"{name}{_ext(img)}")
        print(f"{name}{_ext(img)} clamped={clamped}")
    # single-component reconstructions live on their own scale; stretch each channel
    for tag, img in (("a", a), ("b", b)):
        for which in ("phase", "amplitude"):
            rec = fourier.component_only(Tensor(img), which).data
            save_image(_minmax(rec), out / f"{which}_only_{tag}{_ext(rec)}")
    print(f"clamped_total={total}")
    return 0


# -- train / eval / sweep ------------------------------------------------------------------
def cmd_train(args) -> int:
    cfg = _load_config(args)
    _announce_seed(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_ECHO).write_text(cfgmod.dump(cfg), encoding="utf-8")
    data = generate(cfg.synth)
    result = train(cfg.train, cfg.backbone, data, out, resume=args.resume)
    report = evaluate(result.model, data.test, cfg.metric, cfg.camera_filter)
    write_reports(report, out)
    print(f"rank1={report.result.rank(1):.6f} mAP={report.result.mAP:.6f} "
          f"gap={report.stats.gap:.6f}")
    return 0


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    cfg_path = Path(args.config) if args.config else ckpt.parent / CONFIG_ECHO
    if not cfg_path.exists():
        raise CliError(f"no config given and {cfg_path} does not exist")
    args.config = str(cfg_path)
    cfg = _load_config(args)
    _announce_seed(cfg)
    dataset = read_dataset(args.data, "test") if args.data else generate(cfg.synth).test
    model = build_model(cfg.backbone, cfg.train, cfg.synth.num_identities)
    model.load_state_arrays(read_checkpoint(ckpt))
    report = evaluate(model, dataset, cfg.metric, cfg.camera_filter)
    if args.out:
        write_reports(report, args.out)
    print(summary_line(report.result))
    return 0


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    _announce_seed(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_ECHO).write_text(cfgmod.dump(cfg), encoding="utf-8")
    rows = sweep(cfg.train, cfg.backbone, generate(cfg.synth), args.lambda2, args.margins, out)
    for r in rows:
        print(f"lambda2={r['lambda2']:g} margin_cnm={r['margin_cnm']:g} "
              f"rank1={r['rank1']:.6f} mAP={r['mAP']:.6f}")
    return 0


def cmd_gradcheck(args) -> int:
    report = run_suite(range(args.seeds))
    for case, err in report.worst().items():
        print(f"{case:16s} max_rel_err={err:.3e}")
    bad = [r.name for r in report.results if not r.ok]
    print(f"{len(report.results)} checks in {report.seconds:.1f}s, {len(bad)} failed")
    if bad:
        raise CliError(f"gradient check failed: {', '.join(bad[:5])}")
    return 0


def cmd_config(args) -> int:
    sys.stdout.write(cfgmod.dump(_load_config(args)))
    return 0


# -- parser ----------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fdnm", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--desk", action="store_true", help="start from the 30-epoch desk preset")
        sp.add_argument("--seed", type=int, help="override the config seed")

    sp = sub.add_parser("synth", help="write the synthetic dataset as PNM files")
    with_config(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("decompose", help="amplitude/phase planes of one image")
    sp.add_argument("image")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_decompose)

    sp = sub.add_parser("recompose", help="rebuild an image from decompose output")
    sp.add_argument("dir")
    sp.add_argument("--out", required=True, help="output .ppm/.pgm path")
    sp.set_defaults(func=cmd_recompose)

    sp = sub.add_parser("swap", help="exchange amplitude and phase between two images")
    sp.add_argument("image_a")
    sp.add_argument("image_b")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_swap)

    sp = sub.add_parser("train", help="train on the synthetic set")
    with_config(sp)
    sp.add_argument("--out", required=True, help="run directory")
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint, print the summary row")
    sp.add_argument("checkpoint")
    sp.add_argument("--config", help="defaults to config.txt beside the checkpoint")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--data", help="dataset root written by `fdnm synth` (uses its test split)")
    sp.add_argument("--out", help="directory for cmc.csv, summary.csv, dist_hist.csv")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    sp.add_argument("--seeds", type=int, default=len(DEFAULT_SEEDS))
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("sweep", help="grid over lambda2 and margin_cnm")
    with_config(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--lambda2", type=_floats, default=(0.0, 0.25, 0.5, 1.0))
    sp.add_argument("--margins", type=_floats, default=(0.0, 0.2, 0.5))
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("config", help="print the resolved configuration")
    with_config(sp)
    sp.set_defaults(func=cmd_config)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        with _thread_cap():
            return args.func(args)
    except (CliError, OSError, ValueError, KeyError, RuntimeError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
