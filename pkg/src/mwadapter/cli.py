"""``mwa`` command line: train, sweep, ablate, driftcheck, gradcheck, count, gen-data.

Exit status: 0 success, 1 usage or config error, 2 failed check or run.
"""
from __future__ import annotations

import argparse
import os
import sys
import time

from . import checkpoint
from . import config as C
from . import data as D
from . import experiments as E
from . import report as R
from .retrieval import TrainingDiverged

EXIT_OK, EXIT_USAGE, EXIT_FAIL = 0, 1, 2

REFERENCE_TRAIN = ("Reference at full scale (Base, MSCOCO 5k): full FT IR@1 61.4 / TR@1 79.0; "
                   "MWA IR@1 60.7 / TR@1 78.3")
REFERENCE_ABLATION = ("Reference at full scale (IR@1 / TR@1): full 61.40/79.00; KE only 57.32/73.92; "
                      "AE only 57.88/74.61; KE + AE 60.72/78.26")
REFERENCE_DRIFT = "Reference at full scale (Large, Flickr30k zero-shot IR@1 / TR@1): full FT 85.99/95.48; MWA 86.26/95.51"
REFERENCE_COUNT = "Reference at full scale: Base MWA 7.13 M tunable (3.21%), Large MWA 17.40 M (2.58%)"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _mids(text):
    try:
        mids = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--mids expects comma-separated integers, got {text!r}") from None
    if not mids or any(m < 0 for m in mids):
        raise argparse.ArgumentTypeError("--mids needs at least one non-negative integer")
    return mids


def build_parser():
    p = _Parser(prog="mwa", description="MultiWay adapter experiments on a synthetic retrieval task.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", metavar="PATH", help="TOML experiment config")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", metavar="DIR", help="output directory (default: config out_dir)")
        return sp

    common(sub.add_parser("train", help="fine-tune one model")).add_argument(
        "--mode", choices=["full", "mwa"], default="mwa")
    common(sub.add_parser("sweep", help="MWA runs over adapter widths")).add_argument(
        "--mids", type=_mids, default=list(E.DEFAULT_MIDS))
    common(sub.add_parser("ablate", help="full / KE only / AE only / KE + AE"))
    common(sub.add_parser("driftcheck", help="held-out embedding drift, full FT vs MWA"))
    gc = sub.add_parser("gradcheck", help="finite-difference check of the micro adapted model")
    gc.add_argument("--seed", type=int, default=0)
    common(sub.add_parser("count", help="parameter accounting")).add_argument(
        "--mode", choices=["full", "mwa"], default="mwa")
    common(sub.add_parser("gen-data", help="write the dataset as an MWADATA1 file"))
    return p


def _load_config(args):
    cfg = C.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _out_dir(args, cfg):
    out = args.out or cfg.out_dir
    os.makedirs(out, exist_ok=True)
    return out


def _write(out, name, text):
    path = os.path.join(out, name)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(text)
    return path


def _metrics_table(outcome):
    rows = []
    for rec in outcome.result.history:
        for split, m in rec.metrics.items():
            rows.append([rec.epoch, split] + [f"{v:.4f}" for v in m.row()])
    return R.table(R.METRICS_HEADER, rows)


def _count_line(pc):
    return f"params: total {pc.total:,}  trainable {pc.trainable:,}  fraction {pc.fraction:.4%}"


def cmd_train(args):
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    split = E.dataset(cfg)
    t0 = time.perf_counter()
    outcome = E.run_training(cfg, args.mode, split)
    base = E.backbone(cfg)
    from .retrieval import embedding_drift

    drift = embedding_drift(outcome.model, base, split.heldout) if split.heldout else 0.0
    final = outcome.result.final("eval")
    print(_count_line(outcome.count))
    print(f"eval IR@1 {final.ir[1]:.4f}  TR@1 {final.tr[1]:.4f}")
    _write(out, "metrics.csv", R.metrics_csv(outcome.result.history))
    checkpoint.save(outcome.model, os.path.join(out, "checkpoint.mwck"))
    sections = [
        ("Config", C.dumps(cfg)),
        ("Parameters", _count_line(outcome.count) + "\n" + "\n".join(
            f"  {k}: {v:,}" for k, v in outcome.components.items())),
        ("Per-epoch metrics", _metrics_table(outcome)),
        ("Final (eval)", f"IR@1 {final.ir[1]:.4f}  TR@1 {final.tr[1]:.4f}  loss {final.loss:.4f}"),
        ("Held-out concepts", f"drift vs backbone {drift:.6f}"),
        ("Context", REFERENCE_TRAIN),
    ]
    _write(out, "report.txt", R.report_text(f"train ({args.mode})", sections, time.perf_counter() - t0))
    return EXIT_OK


def cmd_sweep(args):
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    t0 = time.perf_counter()

    def show(p):
        ir = "-" if p["ir1"] is None else f"{p['ir1']:.4f}"
        print(f"mid {p['mid']:>3}  IR@1 {ir}  params {p['trainable_params']}  {p['status']}")

    points = E.run_sweep(cfg, args.mids, on_point=show)
    _write(out, "sweep.csv", R.sweep_csv(points))
    _write(out, "sweep.svg", R.line_chart_svg(
        [p["mid"] for p in points],
        {"IR@1": [p["ir1"] for p in points], "TR@1": [p["tr1"] for p in points]},
        "Recall@1 vs adapter mid-dimension", "mid-dimension", "recall@1"))
    rows = [[p["mid"], R._fmt(p["ir1"]), R._fmt(p["tr1"]), p["trainable_params"], p["status"]] for p in points]
    _write(out, "report.txt", R.report_text("sweep", [
        ("Config", C.dumps(cfg)), ("Sweep (eval split)", R.table(R.SWEEP_HEADER, rows))],
        time.perf_counter() - t0))
    return EXIT_OK if all(p["status"] == "ok" for p in points) else EXIT_FAIL


def cmd_ablate(args):
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    t0 = time.perf_counter()
    rows = E.run_ablation(cfg)
    table_rows = []
    for label in E.ABLATION_ROWS:
        o = rows[label]
        f = o.result.final("eval")
        table_rows.append([label, f"{f.ir[1]:.4f}", f"{f.tr[1]:.4f}", f"{o.count.trainable:,}"])
    body = R.table(["configuration", "IR@1", "TR@1", "trainable"], table_rows)
    print(body)
    _write(out, "report.txt", R.report_text("ablation", [
        ("Config", C.dumps(cfg)), ("Ablation (eval split)", body), ("Context", REFERENCE_ABLATION)],
        time.perf_counter() - t0))
    return EXIT_OK


def drift_body(res):
    rows = [["backbone (zero-shot)", "0.000000", f"{res.zero_shot.ir[1]:.4f}", f"{res.zero_shot.tr[1]:.4f}"]]
    for m in ("full", "mwa"):
        h = res.heldout[m]
        rows.append([m, f"{res.drift[m]:.6f}", f"{h.ir[1]:.4f}", f"{h.tr[1]:.4f}"])
    return R.table(["model", "drift", "heldout IR@1", "heldout TR@1"], rows)


def cmd_driftcheck(args):
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    t0 = time.perf_counter()
    res = E.run_drift(cfg)
    body = drift_body(res)
    print(body)
    _write(out, "report.txt", R.report_text("drift check", [
        ("Config", C.dumps(cfg)), ("Held-out concepts", body), ("Context", REFERENCE_DRIFT)],
        time.perf_counter() - t0))
    return EXIT_OK


def cmd_gradcheck(args):
    res = E.run_gradcheck(seed=args.seed)
    status = "PASS" if res.passed else "FAIL"
    print(f"gradcheck {status}: max relative error {res.max_rel_error:.3e} over {res.checked} coordinates "
          f"of {len(res.checked_names)} trainable tensors ({res.seconds:.1f} s)")
    if not res.passed:
        print(f"worst: {res.worst_param} at {res.worst_index}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_count(args):
    cfg = _load_config(args)
    pc, comps = E.check_count(cfg)
    if args.mode == "full":
        model, _ = E.build_model(cfg, "full")
        from .adapters import count_params

        pc = count_params(model)
        comps = {"backbone": pc.total, "ke": 0, "ae": 0}
    rows = [[k, f"{v:,}"] for k, v in comps.items()]
    print(R.table(["component", "params"], rows))
    print(_count_line(pc))
    print(REFERENCE_COUNT)
    return EXIT_OK


def cmd_gen_data(args):
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    split = E.dataset(cfg)
    path = os.path.join(out, "dataset.mwad")
    D.save(split, path)
    print(f"wrote {path}: train {len(split.train)}, eval {len(split.eval)}, heldout {len(split.heldout)}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train, "sweep": cmd_sweep, "ablate": cmd_ablate, "driftcheck": cmd_driftcheck,
    "gradcheck": cmd_gradcheck, "count": cmd_count, "gen-data": cmd_gen_data,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except (C.ConfigError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (E.ConsistencyError, TrainingDiverged, AssertionError) as e:
        print(f"failed: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
