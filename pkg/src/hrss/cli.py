"""Command-line front end.

Subcommands::

    hrss gradcheck   [--module all|core|sscan|dcn|blocks|net] [--seed S]
    hrss scan-bench  --L 3072 --C 64 --N 16 --chunks 1,16,64,256 [--plot bench.png]
    hrss contrib-map --config probe.json --query-row R --query-col C --out map.pgm
    hrss forward     --variant S|B --input-shape N,3,H,W [--config cfg.json] [--ablation NAME]

Delimited results go to stdout (or the named files), verdicts and progress
to stderr.  BLAS is pinned to one thread so every result is reproducible.
"""

from __future__ import annotations

import argparse
import json
import statistics
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__

BENCH_HEADER = "variant,B,L,C,N,chunk,wall_time_ns,checksum"


def _ints(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("expected at least one integer")
    return values


def _positive(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args) -> int:
    from .gradcheck import CSV_HEADER
    from .suite import run

    reports = run(args.module, args.seed)
    print(CSV_HEADER)
    for r in reports:
        print(r.csv_row())
    failed = sum(not r.passed for r in reports)
    print(f"gradcheck: {len(reports) - failed}/{len(reports)} passed", file=sys.stderr)
    return 0 if failed == 0 else 1


# ---------------------------------------------------------------------------
# scan-bench


def _bench_instance(b: int, l: int, c: int, n: int, seed: int):
    from .rng import stream
    from .sscan import ScanParams, s6_parameterize
    from .tensor import Tensor

    params = ScanParams(c, n, rng=stream(seed, "bench.params"))
    x = Tensor(stream(seed, "bench.input").standard_normal((b, l, c)))
    return s6_parameterize(x, params), x


def _median_ns(fn, runs: int) -> int:
    times = []
    for _ in range(runs):
        t0 = time.perf_counter_ns()
        fn()
        times.append(time.perf_counter_ns() - t0)
    return int(statistics.median(times))


def bench_rows(b: int, l: int, c: int, n: int, chunks: list[int], runs: int, seed: int) -> list[dict]:
    from .sscan import scan_chunked, scan_naive

    step, x = _bench_instance(b, l, c, n, seed)
    variants = [("naive", l, lambda: scan_naive(step, x))]
    variants += [("chunked", k, lambda k=k: scan_chunked(step, x, k)) for k in chunks]
    rows = []
    for name, chunk, fn in variants:
        y = fn().data
        rows.append({
            "variant": name, "B": b, "L": l, "C": c, "N": n, "chunk": chunk,
            "wall_time_ns": _median_ns(fn, runs),
            "checksum": f"{float(np.sum(y)):.9e}",
        })
    return rows


def cmd_scan_bench(args) -> int:
    rows = bench_rows(args.B, args.L, args.C, args.N, args.chunks, args.runs, args.seed)
    print(BENCH_HEADER)
    for r in rows:
        print(",".join(str(r[k]) for k in BENCH_HEADER.split(",")))
    sums = {r["checksum"] for r in rows}
    agree = len(sums) == 1
    print(f"checksums {'agree' if agree else 'DIFFER'}: {sorted(sums)}", file=sys.stderr)
    if args.plot:
        from .plotting import bench_figure

        labels = [f"{r['variant']} (chunk {r['chunk']})" for r in rows]
        bench_figure(labels, [r["wall_time_ns"] for r in rows], args.plot,
                     title=f"B={args.B} L={args.L} C={args.C} N={args.N}")
    return 0 if agree else 1


# ---------------------------------------------------------------------------
# contrib-map

PROBE_DEFAULTS = {
    "height": 8,
    "width": 8,
    "channels": 4,
    "state_dim": 4,
    "seed": 0,
    "input": "random",
    "positive_projections": False,
}


def load_probe(path: str | Path) -> dict:
    """Probe model description (JSON object); missing keys take defaults."""
    cfg = dict(PROBE_DEFAULTS)
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict):
        raise ValueError("probe config must be a JSON object")
    unknown = sorted(set(data) - set(cfg))
    if unknown:
        raise ValueError(f"unknown probe config keys: {unknown}")
    cfg.update(data)
    for key in ("height", "width", "channels", "state_dim"):
        if int(cfg[key]) < 1:
            raise ValueError(f"probe {key} must be >= 1")
    if cfg["input"] not in ("random", "constant"):
        raise ValueError("probe input must be 'random' or 'constant'")
    return cfg


def contribution_maps(cfg: dict, row: int, col: int) -> dict[str, np.ndarray]:
    """Per-direction normalized |contribution| of every token to the query, (H, W)."""
    from .blocks import DIRECTIONS, cross_scan, direction_orders
    from .rng import stream
    from .sscan import ScanParams, contribution_map, normalize_map, s6_parameterize
    from .tensor import Tensor

    h, w, c, n = (int(cfg[k]) for k in ("height", "width", "channels", "state_dim"))
    seed = int(cfg["seed"])
    if cfg["input"] == "constant":
        x = np.ones((1, c, h, w))
    else:
        x = stream(seed, "contrib.input").standard_normal((1, c, h, w))
    seqs = cross_scan(Tensor(x)).data
    query = row * w + col
    maps = {}
    for d, (name, order) in enumerate(zip(DIRECTIONS, direction_orders(h, w))):
        p = ScanParams(c, n, rng=stream(seed, f"contrib.{name}"))
        if cfg["positive_projections"]:
            for t in (p.w_b, p.w_c):
                t.data = np.abs(t.data)
        step = s6_parameterize(Tensor(seqs[:, d].transpose(0, 2, 1)), p)
        pos = int(np.flatnonzero(order == query)[0]) + 1
        vals = normalize_map(contribution_map(step, pos))
        grid = np.zeros(h * w)
        grid[order] = vals
        maps[name] = grid.reshape(h, w)
    return maps


def write_pgm(path: str | Path, values: np.ndarray) -> None:
    """Plain (P2) 8-bit graymap of values in [0, 1]."""
    h, w = values.shape
    levels = np.rint(np.clip(values, 0.0, 1.0) * 255).astype(int)
    lines = ["P2", f"{w} {h}", "255"] + [" ".join(str(v) for v in row) for row in levels]
    Path(path).write_text("\n".join(lines) + "\n")


def write_grid_csv(path: str | Path, values: np.ndarray) -> None:
    Path(path).write_text("".join(",".join(f"{v:.9e}" for v in row) + "\n" for row in values))


def cmd_contrib_map(args, parser) -> int:
    try:
        cfg = load_probe(args.config)
    except (OSError, ValueError) as exc:
        parser.error(f"--config: {exc}")
    h, w = int(cfg["height"]), int(cfg["width"])
    if not (0 <= args.query_row < h and 0 <= args.query_col < w):
        parser.error(f"query ({args.query_row}, {args.query_col}) outside the {h}x{w} token grid")
    from .plotting import contrib_figure

    maps = contribution_maps(cfg, args.query_row, args.query_col)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    stem = out.with_suffix("")
    written = []
    for name, grid in maps.items():
        pgm = stem.parent / f"{stem.name}_{name}.pgm"
        csv = stem.parent / f"{stem.name}_{name}.csv"
        write_pgm(pgm, grid)
        write_grid_csv(csv, grid)
        written += [pgm, csv]
    combined = sum(maps.values()) / len(maps)
    write_pgm(out, combined)
    figure = stem.parent / f"{stem.name}.png"
    contrib_figure(maps, (args.query_row, args.query_col), figure)
    for path in [out, *written, figure]:
        print(path)
    return 0


# ---------------------------------------------------------------------------
# forward


def _input_shape(text: str) -> tuple[int, int, int, int]:
    values = _ints(text)
    if len(values) != 4:
        raise argparse.ArgumentTypeError(f"input shape needs N,3,H,W, got {text!r}")
    n, c, h, w = values
    if n < 1 or c != 3 or h < 1 or w < 1:
        raise argparse.ArgumentTypeError(f"input shape must be N,3,H,W with positive sizes, got {text!r}")
    if h % 32 or w % 32:
        raise argparse.ArgumentTypeError(f"input height and width must be multiples of 32, got {h}x{w}")
    return n, c, h, w


def cmd_forward(args, parser) -> int:
    from . import net

    if args.config is None and args.variant is None:
        parser.error("forward needs --variant or --config")
    try:
        cfg = net.ModelConfig.load(args.config) if args.config else net.preset(args.variant)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        parser.error(f"--config: {exc}")
    if args.variant is not None and args.config is not None and cfg.variant != args.variant:
        parser.error(f"--variant {args.variant} conflicts with config variant {cfg.variant}")
    if args.ablation:
        cfg = cfg.with_ablation(args.ablation)
    n, _, h, w = args.input_shape

    print(f"variant,{cfg.variant}")
    print(f"ablation,{args.ablation or 'none'}")
    print(f"input,{n}x3x{h}x{w}")
    if args.no_run:
        shapes = [(n, cfg.channels[b], *cfg.branch_resolution(b, h, w)) for b in range(4)]
    else:
        from .rng import stream
        from .tensor import Tensor, no_grad

        model = net.HRVMamba(cfg, rng=stream(args.seed, "forward.weights"))
        x = Tensor(stream(args.seed, "forward.input").standard_normal((n, 3, h, w)))
        with no_grad():
            ys = model(x)
        shapes = [y.shape for y in ys]
        for b, y in enumerate(ys):
            print(f"checksum,{b},{float(np.sum(y.data)):.9e}")
    for b, s in enumerate(shapes):
        print(f"branch,{b},{'x'.join(str(v) for v in s)}")
    print(f"params_backbone,{net.count_params(cfg, classifier=False)}")
    print(f"params_classifier,{net.count_params(cfg)}")
    print(f"flops_backbone,{n * net.count_flops(cfg, h, w, classifier=False)}")
    print(f"flops_classifier,{n * net.count_flops(cfg, h, w)}")
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    from .blocks import ABLATIONS
    from .suite import MODULES

    parser = argparse.ArgumentParser(prog="hrss", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks (CSV)")
    p.add_argument("--module", default="all", choices=("all",) + MODULES)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("scan-bench", help="time scan variants on one instance (CSV)")
    p.add_argument("--L", type=_positive, default=3072)
    p.add_argument("--C", type=_positive, default=64)
    p.add_argument("--N", type=_positive, default=16)
    p.add_argument("--B", type=_positive, default=1)
    p.add_argument("--chunks", type=_ints, default=[1, 16, 64, 256])
    p.add_argument("--runs", type=_positive, default=20, help="timed repetitions per variant (median reported)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--plot", help="also write a timing bar chart (PNG) here")

    p = sub.add_parser("contrib-map", help="token contribution maps for a query token")
    p.add_argument("--config", required=True, help="probe model JSON")
    p.add_argument("--query-row", type=int, required=True)
    p.add_argument("--query-col", type=int, required=True)
    p.add_argument("--out", required=True, help="combined PGM path; per-direction files go alongside")

    p = sub.add_parser("forward", help="branch shapes, parameter and FLOP counts")
    p.add_argument("--variant", choices=("S", "B"))
    p.add_argument("--config", help="model config JSON")
    p.add_argument("--input-shape", type=_input_shape, required=True, metavar="N,3,H,W")
    p.add_argument("--ablation", choices=sorted(ABLATIONS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-run", action="store_true", help="report analytic shapes without running the model")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "scan-bench" and any(k < 1 for k in args.chunks):
        parser.error("--chunks values must be >= 1")
    with threadpool_limits(limits=1):
        if args.command == "gradcheck":
            return cmd_gradcheck(args)
        if args.command == "scan-bench":
            return cmd_scan_bench(args)
        if args.command == "contrib-map":
            return cmd_contrib_map(args, parser)
        return cmd_forward(args, parser)


if __name__ == "__main__":
    sys.exit(main())
