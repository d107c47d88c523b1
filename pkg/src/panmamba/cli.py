"""Command-line entry point: ``panmamba <command> [flags]``.

Exit codes: 0 ok, 1 usage/config, 2 data/format, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
import tracemalloc
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError, NumericError, PanMambaError, UsageError

log = logging.getLogger("panmamba")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _apply_threads() -> None:
    raw = os.environ.get("PANSHARP_THREADS")
    if not raw:
        return
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"PANSHARP_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("PANSHARP_THREADS must be >= 1")
    import numba

    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _list_images(d: Path) -> dict[str, Path]:
    if not d.is_dir():
        raise FormatError(f"{d}: not a directory")
    return {p.stem: p for p in sorted(d.iterdir()) if p.suffix.lower() in (".raw", ".png")}


def _load_image(path: Path) -> np.ndarray:
    from .data import load_png, load_raw

    arr = load_png(path) if path.suffix.lower() == ".png" else load_raw(path)
    if arr.ndim == 2:
        arr = arr[None]
    return arr


# -- commands ---------------------------------------------------------------------
def cmd_degrade(args) -> int:
    from .data import save_triple, wald_degrade

    hrms = _list_images(Path(args.hrms))
    pans = _list_images(Path(args.pan))
    failures = 0
    for name in sorted(set(hrms) | set(pans)):
        if name not in hrms or name not in pans:
            where = "pan" if name not in pans else "hrms"
            print(f"error: {name}: no matching {where} file", file=sys.stderr)
            failures += 1
            continue
        try:
            triple = wald_degrade(_load_image(hrms[name]), _load_image(pans[name]), args.scale)
            save_triple(args.out, name, triple)
            print(f"{name}: pan {triple.pan.shape} lrms {triple.lrms.shape} gt {triple.gt.shape}")
        except PanMambaError as e:
            print(f"error: {name}: {e}", file=sys.stderr)
            failures += 1
    if failures:
        print(f"{failures} file(s) failed", file=sys.stderr)
        return 2
    return 0


def cmd_train(args) -> int:
    from .config import load_config_file
    from .data import load_dataset_dir
    from .model import NetworkConfig, build_model, load_checkpoint, save_checkpoint
    from .train import TrainConfig, train

    net_cfg, train_cfg = load_config_file(args.config, NetworkConfig, TrainConfig)
    dataset = load_dataset_dir(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        model = load_checkpoint(args.resume)
        if model.config != net_cfg:
            raise FormatError(f"{args.resume}: checkpoint config differs from {args.config}")
    else:
        model = build_model(net_cfg, seed=train_cfg.seed)
    every = args.save_every

    def on_epoch(epoch, m, tlog):
        if every and (epoch + 1) % every == 0:
            save_checkpoint(m, out / f"epoch_{epoch + 1:04d}.ckpt")

    _, tlog = train(model, dataset, train_cfg, on_epoch=on_epoch)
    save_checkpoint(model, out / "final.ckpt")
    tlog.write_csv(out / "epochs.csv")
    tlog.write_steps_csv(out / "steps.csv")
    print(f"trained {len(tlog.step_loss)} steps; final loss {tlog.step_loss[-1]:.6g}; "
          f"wrote {out / 'final.ckpt'}")
    return 0


def cmd_infer(args) -> int:
    from .data import save_png, save_raw
    from .model import forward, load_checkpoint
    from .tensor import no_grad

    model = load_checkpoint(args.ckpt)
    pan = _load_image(Path(args.pan))
    lrms = _load_image(Path(args.lrms))
    if lrms.shape[0] != model.config.ms_bands:
        raise FormatError(f"{args.lrms}: {lrms.shape[0]} bands but checkpoint expects {model.config.ms_bands}")
    if pan.shape[1] != model.config.ratio * lrms.shape[1] or pan.shape[2] != model.config.ratio * lrms.shape[2]:
        raise DimensionError(f"pan {pan.shape} and lrms {lrms.shape} inconsistent with ratio {model.config.ratio}")
    with no_grad():
        fused = forward(model, pan, lrms).data[0]
    fused = np.clip(fused, 0.0, 1.0)
    save_raw(args.out, fused)
    print(f"wrote {args.out} {fused.shape}")
    if args.png:
        png = Path(args.out).with_suffix(".png")
        save_png(png, fused[:3] if fused.shape[0] >= 3 else fused[:1], bits=16)
        print(f"wrote {png}")
    return 0


def cmd_eval(args) -> int:
    from .metrics import full_resolution_report, reduced_resolution_report

    pred = _load_image(Path(args.pred))
    if args.full_res:
        if not (args.pan and args.lrms):
            raise UsageError("--full-res needs --pan and --lrms")
        lrms = _load_image(Path(args.lrms))
        ratio = pred.shape[1] // lrms.shape[1]
        rep = full_resolution_report(pred, lrms, _load_image(Path(args.pan)), ratio)
    else:
        if not args.gt:
            raise UsageError("reduced-resolution eval needs --gt")
        rep = reduced_resolution_report(pred, _load_image(Path(args.gt)), args.ratio)
    sys.stdout.write(rep.to_csv() if args.csv else rep.to_kv())
    return 0


def cmd_grad_check(args) -> int:
    from .gradsuite import run_suite

    dtype = np.float64 if args.double else np.float32
    tol = args.tol if args.tol is not None else (1e-5 if args.double else 1e-3)
    results = run_suite(dtype=dtype, seed=args.seed, corrupt=args.inject_error)
    worst = 0.0
    ok = True
    for name, err in results:
        status = "ok" if err < tol else "FAIL"
        ok &= err < tol
        worst = max(worst, err)
        print(f"{name:<16} max_rel_err={err:.3e} {status}")
    print(f"max relative error {worst:.3e} (tol {tol:g}): {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 3


def cmd_bench(args) -> int:
    from .model import NetworkConfig, build_model, count_flops, forward
    from .tensor import no_grad

    try:
        sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--sizes must be comma-separated integers, got {args.sizes!r}") from None
    cfg = NetworkConfig()
    for s in sizes:
        if s < cfg.ratio or s % cfg.ratio:
            raise UsageError(f"size {s} must be a positive multiple of {cfg.ratio}")
    model = build_model(cfg, seed=args.seed)
    rng = np.random.default_rng(args.seed)
    rows = []
    for s in sizes:
        flops = count_flops(cfg, s, s)
        row = {"size": s, "pixels": s * s, "flops": flops, "seconds": "", "peak_mb": ""}
        if not args.flops_only:
            pan = rng.random((1, 1, s, s), dtype=np.float32)
            lrms = rng.random((1, cfg.ms_bands, s // cfg.ratio, s // cfg.ratio), dtype=np.float32)
            with no_grad():
                forward(model, pan[..., :cfg.ratio * 4, :cfg.ratio * 4],
                        lrms[..., :4, :4])  # warm-up compiles the kernels
                tracemalloc.start()
                t0 = time.perf_counter()
                forward(model, pan, lrms)
                row["seconds"] = f"{time.perf_counter() - t0:.4f}"
                row["peak_mb"] = f"{tracemalloc.get_traced_memory()[1] / 2**20:.1f}"
                tracemalloc.stop()
        rows.append(row)
        print(f"size {s:5d}  flops {flops / 1e9:8.3f}G  time {row['seconds'] or '-':>8}s  "
              f"peak {row['peak_mb'] or '-':>8}MB", flush=True)
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
        print(f"wrote {args.csv}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="panmamba", description="Pan-sharpening with selective state-space blocks.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    d = sub.add_parser("degrade", help="synthesize reduced-resolution triples")
    d.add_argument("--hrms", required=True, help="directory of multispectral images (.raw or .png)")
    d.add_argument("--pan", required=True, help="directory of PAN images with matching basenames")
    d.add_argument("--scale", type=int, default=4)
    d.add_argument("--out", required=True)
    d.set_defaults(fn=cmd_degrade)

    t = sub.add_parser("train", help="train on a {pan,lrms,gt}/ dataset directory")
    t.add_argument("--config", required=True, help="key=value file with network and training fields")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="start from this checkpoint")
    t.add_argument("--save-every", type=int, default=0, help="checkpoint every N epochs")
    t.set_defaults(fn=cmd_train)

    i = sub.add_parser("infer", help="fuse one PAN/LRMS pair")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--pan", required=True)
    i.add_argument("--lrms", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--png", action="store_true", help="also write a 16-bit PNG of the first 3 bands")
    i.set_defaults(fn=cmd_infer)

    e = sub.add_parser("eval", help="quality metrics")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt")
    e.add_argument("--full-res", action="store_true")
    e.add_argument("--pan")
    e.add_argument("--lrms")
    e.add_argument("--ratio", type=int, default=4)
    e.add_argument("--csv", action="store_true", help="print a CSV row instead of key=value lines")
    e.set_defaults(fn=cmd_eval)

    g = sub.add_parser("grad-check", help="finite-difference check of every block and the full net")
    g.add_argument("--double", action="store_true")
    g.add_argument("--tol", type=float)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--inject-error", action="store_true", help=argparse.SUPPRESS)
    g.set_defaults(fn=cmd_grad_check)

    b = sub.add_parser("bench", help="forward-pass timing and analytic FLOPs")
    b.add_argument("--sizes", default="128,256,512,1024")
    b.add_argument("--csv")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--flops-only", action="store_true")
    b.set_defaults(fn=cmd_bench)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        _apply_threads()
        return args.fn(args)
    except PanMambaError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except FileNotFoundError as e:
        print(f"error: {e.filename}: no such file", file=sys.stderr)
        return FormatError.exit_code
    except FloatingPointError as e:
        print(f"error: {e}", file=sys.stderr)
        return NumericError.exit_code


if __name__ == "__main__":
    sys.exit(main())
