"""``segkit`` command line: train, eval, bench, gradcheck, params, synth.

Exit codes: 0 success, 1 configuration error, 2 numerical divergence or
failed gradient check, 3 artifact mismatch.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import backbone as bb
from . import bench as BE
from . import config as CF
from . import data as D
from . import decoder as dec
from . import gradcheck as GC
from . import metrics as M
from . import retention as R
from . import tensor as T
from . import trainer as TR
from .model import SegRet

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_MISMATCH = 0, 1, 2, 3
CHECKPOINT_NAME = "checkpoint.segkit"

log = logging.getLogger("segkit")


def _out_dir(args, cfg: Optional[CF.RunConfig] = None) -> Path:
    out = Path(args.output_dir or (cfg.output_dir if cfg else "runs/default"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_run_config(args) -> CF.RunConfig:
    cfg = CF.load_config(args.config) if args.config else CF.RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if args.output_dir:
        cfg.output_dir = args.output_dir
    return cfg


def _emit(rows: List[List], header: List[str], stream=None) -> None:
    wr = csv.writer(stream or sys.stdout, lineterminator="\n")
    wr.writerow(header)
    wr.writerows(rows)


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    dcfg = cfg.decoder
    if args.no_zir:
        dcfg = replace(dcfg, zir_enabled=False)
    if args.decoder_c is not None:
        dcfg = replace(dcfg, C=args.decoder_c)
    if args.decoder_variant:
        dcfg = replace(dcfg, variant=args.decoder_variant)
    tcfg = cfg.train if args.iters is None else replace(cfg.train, iterations=args.iters)
    cfg = replace(cfg, decoder=dcfg, train=tcfg)
    out = _out_dir(args, cfg)
    CF.write_resolved(cfg, out)

    dataset = D.load_dataset(cfg.data)
    if args.resume:
        ck = TR.checkpoint_load(args.resume, cfg.backbone, cfg.decoder)
        model, state = ck.model, ck.state
        log.info("resumed from %s at iteration %d", args.resume, state.iteration)
    else:
        model = SegRet.create(cfg.backbone, cfg.decoder, seed=cfg.seed, dtype=tcfg.dtype)
        state = TR.new_state(tcfg, cfg.seed)

    def progress(rec):
        if rec["iter"] % max(1, tcfg.iterations // 10) == 0:
            log.info("iter %d loss %.4f acc %.3f lr %.2e", rec["iter"], rec["loss"], rec["pixel_acc_estimate"], rec["lr"])

    try:
        state = TR.train_loop(
            model, dataset, tcfg, state=state, seed=cfg.seed, ignore_index=cfg.data.ignore_index,
            mean=cfg.data.mean, std=cfg.data.std, on_record=progress,
        )
    except TR.DivergenceError as exc:
        log.error("%s", exc)
        TR.write_loss_csv(state.log if state else [], out / "loss.csv")
        return EXIT_DIVERGED

    TR.checkpoint_save(model, state, out / CHECKPOINT_NAME, extra={"seed": cfg.seed})
    TR.write_loss_csv(state.log, out / "loss.csv")
    summary = {
        "iterations": state.iteration,
        "final_loss": state.log[-1]["loss"] if state.log else None,
        "final_pixel_acc": state.log[-1]["pixel_acc_estimate"] if state.log else None,
        "accuracy_gate": tcfg.accuracy_gate,
        "gate_iteration": state.gate_iteration,
        "config_digest": model.digest,
    }
    (out / "train.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if state.log and not args.no_plots:
        from . import plotting

        plotting.plot_loss(state.log, out / "loss.png", tcfg.accuracy_gate)
    _emit([[k, "" if v is None else v] for k, v in summary.items()], ["field", "value"])
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(args) -> int:
    cfg = _load_run_config(args)
    try:
        if args.config:
            ck = TR.checkpoint_load(args.checkpoint, cfg.backbone, cfg.decoder)
        else:
            ck = TR.checkpoint_load(args.checkpoint)
    except TR.CheckpointMismatch as exc:
        log.error("%s", exc)
        return EXIT_MISMATCH
    model = ck.model
    multi = args.ms or args.scales is not None or cfg.eval.multi_scale
    scales = args.scales if args.scales is not None else cfg.eval.scales
    flip = cfg.eval.flip and not args.no_flip
    data_spec = cfg.data
    if model.decoder.n_cls != data_spec.n_cls:
        log.error("checkpoint predicts %d classes but the dataset has %d", model.decoder.n_cls, data_spec.n_cls)
        return EXIT_MISMATCH
    samples = D.load_dataset(data_spec)
    mean, std = data_spec.mean, data_spec.std
    report = M.evaluate(
        lambda img: model.predict_logits(img), samples, data_spec.n_cls, data_spec.ignore_index,
        multi_scale=multi, scales=scales, flip=flip, preprocess=lambda im: D.normalize(im, mean, std),
    )
    report["config_digest"] = model.digest
    out = _out_dir(args, cfg)
    CF.write_resolved(cfg, out)
    M.write_report(report, out / "eval.json")
    M.write_iou_csv(report, out / "iou.csv")
    if not args.no_plots:
        from . import plotting

        plotting.plot_iou(report["per_class_iou"], out / "iou.png")
    rows = [[k, "" if v is None else v] for k, v in report.items() if k != "per_class_iou"]
    rows += [[f"iou_{i}", "" if v is None else v] for i, v in enumerate(report["per_class_iou"])]
    _emit(rows, ["metric", "value"])
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

def _dump_mask(args) -> None:
    kind = args.mask_kind
    if kind == "causal":
        m = R.build_causal_decay(args.gamma, args.mask_n)
    elif kind == "bidirectional":
        m = R.build_bidirectional_decay(args.gamma, args.mask_n)
    else:
        m = R.build_2d_decay(args.gamma, args.mask_h, args.mask_w)
    m.to_csv(args.dump_mask)
    log.info("wrote %s decay mask (%d x %d) to %s", kind, m.size, m.size, args.dump_mask)


def cmd_bench(args) -> int:
    if args.dump_mask:
        _dump_mask(args)
        if args.mask_only:
            return EXIT_OK
    out = _out_dir(args)
    records = []
    trend = []
    if args.kind in ("attention", "all"):
        sizes = [(s, s) for s in args.sizes]
        att = BE.run_attention_sweep(sizes, d=args.d, heads=args.heads, trials=args.trials, seed=args.seed)
        records += att
        trend = BE.attention_ratio_trend(att)
    if args.kind in ("paradigms", "all"):
        records += BE.run_paradigm_sweep(args.lengths, d=args.d, heads=args.heads, trials=args.trials, seed=args.seed)
    BE.write_csv(records, out / "bench.csv")
    BE.write_gnuplot(records, out / "bench.dat")
    if not args.no_plots and records:
        from . import plotting

        plotting.plot_bench(records, out / "bench.png")
    _emit([[getattr(r, c) for c in BE.CSV_COLUMNS] for r in records], list(BE.CSV_COLUMNS))
    for row in trend:
        g = f" growth measured {row['measured_growth']:.2f} analytic {row['analytic_growth']:.2f}" if "measured_growth" in row else ""
        log.info("H=%d full/decomposed measured %.2f analytic %.2f%s", row["H"], row["measured"], row["analytic"], g)
    for r in records:
        if r.note:
            log.info("%s %dx%d: %s", r.kernel, r.H, r.W, r.note)
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck / params / synth
# ---------------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    results = GC.run_all(args.dtype, args.seed)
    _emit(
        [[r.name, r.dtype, f"{r.max_rel_error:.3e}", f"{r.tolerance:.0e}", r.n_coords, "pass" if r.passed else "FAIL"] for r in results],
        ["op", "dtype", "rel_err", "tolerance", "coords", "status"],
    )
    bad = [r.name for r in results if not r.passed]
    if bad:
        log.error("gradient check failed for: %s", ", ".join(bad))
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_params(args) -> int:
    cfg = _load_run_config(args)
    bcfg = cfg.backbone if args.backbone is None else bb.named_config(args.backbone)
    dcfg = cfg.decoder
    if args.decoder_c is not None:
        dcfg = replace(dcfg, C=args.decoder_c)
    if args.no_zir:
        dcfg = replace(dcfg, zir_enabled=False)
    if args.decoder_variant:
        dcfg = replace(dcfg, variant=args.decoder_variant)
    if args.n_cls is not None:
        dcfg = replace(dcfg, n_cls=args.n_cls)
    chans = list(args.channels) if args.channels else bcfg.stage_channels
    shapes = dec.param_shapes(dcfg, chans)

    def enumerated(prefix):
        return sum(int(np.prod(s)) for k, s in shapes.items() if k.startswith(prefix))

    rows = [
        ["decoder.linear", enumerated("lin")],
        ["decoder.zero_conv", enumerated("zir")],
        ["decoder.classifier", enumerated("cls")],
        ["decoder.total", dec.count_params(dcfg, chans)],
    ]
    if sum(r[1] for r in rows[:3]) != rows[3][1]:
        log.error("closed-form decoder count disagrees with enumeration")
        return EXIT_MISMATCH
    if not args.decoder_only:
        b = bb.count_params(bcfg)
        rows = [["backbone", b]] + rows + [["total", b + rows[-1][1]]]
    _emit(rows, ["module", "params"])
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = D.DatasetSpec(n_cls=args.n_cls, seed=args.seed, n_images=args.n, size=(args.size, args.size))
    samples = D.generate_synthetic(spec)
    root = Path(args.output_dir or "synth")
    D.write_folder(samples, root, spec.n_cls, spec.ignore_index)
    _emit([[s.name, *s.size] for s in samples], ["name", "height", "width"])
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _floats(text: str) -> List[float]:
    return [float(v) for v in text.replace(",", " ").split()]


def _ints(text: str) -> List[int]:
    return [int(v) for v in text.replace(",", " ").split()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="segkit", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="TOML or JSON run configuration")
        sp.add_argument("--output-dir", help="directory for outputs (default: config output_dir)")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--no-plots", action="store_true", help="skip PNG figures")

    def decoder_axes(sp):
        sp.add_argument("--no-zir", action="store_true", help="drop the zero-initialized residual convs")
        sp.add_argument("--decoder-c", type=int, help="decoder embedding width C")
        sp.add_argument("--decoder-variant", choices=dec.VARIANTS)

    sp = sub.add_parser("train", help="train a model; writes checkpoint, loss.csv, resolved.toml")
    common(sp)
    decoder_axes(sp)
    sp.add_argument("--iters", type=int, help="override train.iterations")
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint; writes eval.json")
    common(sp)
    sp.add_argument("checkpoint")
    sp.add_argument("--ms", action="store_true", help="multi-scale (+flip) inference")
    sp.add_argument("--scales", type=_floats, help="comma-separated scales; implies --ms")
    sp.add_argument("--no-flip", action="store_true")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bench", help="attention and paradigm timing sweeps; writes bench.csv")
    common(sp, config=False)
    sp.set_defaults(seed=0)
    sp.add_argument("--kind", choices=("attention", "paradigms", "all"), default="all")
    sp.add_argument("--sizes", type=_ints, default=[16, 32, 64], help="square grid sides")
    sp.add_argument("--lengths", type=_ints, default=[64, 256, 1024], help="sequence lengths")
    sp.add_argument("--d", type=int, default=32)
    sp.add_argument("--heads", type=int, default=1)
    sp.add_argument("--trials", type=int, default=BE.MIN_TRIALS)
    sp.add_argument("--dump-mask", metavar="PATH", help="also write a decay mask as CSV")
    sp.add_argument("--mask-kind", choices=("causal", "bidirectional", "2d"), default="2d")
    sp.add_argument("--gamma", type=float, default=0.9)
    sp.add_argument("--mask-n", type=int, default=8)
    sp.add_argument("--mask-h", type=int, default=4)
    sp.add_argument("--mask-w", type=int, default=4)
    sp.add_argument("--mask-only", action="store_true", help="write the mask and skip timing")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every op and a micro model")
    sp.add_argument("--dtype", choices=("f64", "f32"), default="f64")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_gradcheck, output_dir=None)

    sp = sub.add_parser("params", help="parameter counts per module")
    common(sp)
    decoder_axes(sp)
    sp.add_argument("--decoder-only", action="store_true")
    sp.add_argument("--backbone", choices=sorted(bb.NAMED_CONFIGS))
    sp.add_argument("--channels", type=_ints, help="override the encoder channel list fed to the decoder")
    sp.add_argument("--n-cls", type=int, help="override the class count")
    sp.set_defaults(func=cmd_params)

    sp = sub.add_parser("synth", help="write a synthetic PNG dataset folder")
    sp.add_argument("--output-dir", default=None)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--n", type=int, default=8)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--n-cls", type=int, default=5)
    sp.set_defaults(func=cmd_synth)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except CF.ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except TR.CheckpointMismatch as exc:
        log.error("%s", exc)
        return EXIT_MISMATCH
    except T.NonFiniteError as exc:
        log.error("%s", exc)
        return EXIT_DIVERGED
    except (ValueError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
