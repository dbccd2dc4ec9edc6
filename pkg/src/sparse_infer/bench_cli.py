"""Benchmark harness: density/batch/worker sweeps and density-evolution studies.

Two subcommands share one flag set:

* ``bench``          - timed sweeps over densities x batches x workers, with
                       the engine's dense baseline always run alongside for
                       comparison; emits a timing CSV, a density CSV, and a
                       console summary of median/min seconds per grid point.
* ``density-study``  - per-layer density evolution for a network and its
                       activation/batch-norm ablation twin (sparse_input
                       variant only); emits one density CSV per network.

The harness itself is single-threaded; parallelism lives inside the forward
pass and is controlled by --workers.  Timing wraps the forward call only:
weight loading, pruning, and node-format conversion are never on the clock.
"""

from __future__ import annotations

import argparse
import csv
import os
import statistics
import sys
from dataclasses import dataclass, field

from . import network as nw
from .layers import ForwardStrategy, StrategyKind
from .sparse_core import AxisOrder3, prune_random, sparsify_tensor3

DENSITY_CSV_COLUMNS = ("input_density", "layer_index", "layer_kind", "output_density")
TIMING_CSV_COLUMNS = ("variant", "density", "batch", "workers", "strategy", "rep", "seconds")

ABLATION_TWIN = {"vgg16_desk": "vgg16_desk_noact", "yolo_desk": "yolo_desk_nobn"}


@dataclass
class BenchConfig:
    net_kind: str = "vgg16_desk"
    scale: float = 0.25
    variant: str = nw.VARIANT_SPARSE_FILTER
    densities: list[float] = field(default_factory=lambda: [0.01, 0.05, 0.1, 0.2, 0.5, 1.0])
    batches: list[int] = field(default_factory=lambda: [1])
    workers: list[int] = field(default_factory=lambda: [1])
    strategy: ForwardStrategy = ForwardStrategy()
    reps: int = 3
    warmup: int = 1
    seed: int = 0
    weights_path: str | None = None
    timing_csv: str | None = "timing.csv"
    density_csv: str | None = "density.csv"
    full_scale: bool = False

    def validate(self) -> None:
        if self.reps < 3:
            raise ValueError("reps must be at least 3")
        if self.warmup < 1:
            raise ValueError("warmup must be at least 1")
        if not self.densities or any(not 0 < d <= 1 for d in self.densities):
            raise ValueError("densities must lie in (0, 1]")
        if not self.batches or any(b < 1 for b in self.batches):
            raise ValueError("batch sizes must be positive")
        if not self.workers or any(w < 1 for w in self.workers):
            raise ValueError("worker counts must be positive")
        if self.net_kind not in nw.BENCH_KINDS:
            raise ValueError(f"unknown net kind {self.net_kind!r}")
        if self.variant not in nw.VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")

    @property
    def input_hw(self) -> int:
        return 224 if self.full_scale else 32


@dataclass
class TimingRow:
    variant: str
    density: float
    batch: int
    workers: int
    strategy: str
    rep: int
    seconds: float


def _build_net(cfg: BenchConfig) -> nw.NetworkSpec:
    return nw.build_benchmark_net(cfg.net_kind, cfg.scale, input_hw=cfg.input_hw)


def _base_weights(cfg: BenchConfig, net: nw.NetworkSpec) -> nw.NetworkWeights:
    if cfg.weights_path:
        return nw.load_weights(cfg.weights_path, net)
    return nw.random_weights(net, cfg.seed)


def _make_batch(cfg: BenchConfig, net: nw.NetworkSpec, batch_size: int) -> list:
    return [nw.random_input(net.input_dims, cfg.seed + 1000 + i) for i in range(batch_size)]


@dataclass
class _GridPoint:
    variant: str
    density: float
    batch_size: int
    workers: int
    prepared: nw.PreparedNet
    batch: list
    rows: list = field(default_factory=list)

    def label(self) -> str:
        return (
            f"variant={self.variant} density={self.density:g}"
            f" batch={self.batch_size} workers={self.workers}"
        )


def run_bench(cfg: BenchConfig) -> tuple[list[TimingRow], list[nw.DensityRecord]]:
    """Timed sweep over the configured grid, baseline always included.

    Repetitions are collected in whole-grid passes: rep r of every grid
    point is measured before rep r+1, so a slow host window spreads over
    all points instead of biasing whichever one it lands on.  All warmup
    passes run before the first timed pass.
    """
    cfg.validate()
    net = _build_net(cfg)
    base = _base_weights(cfg, net)
    variants = [cfg.variant] if cfg.variant == nw.VARIANT_DENSE else [cfg.variant, nw.VARIANT_DENSE]
    density_rows: list[nw.DensityRecord] = []

    grid: list[_GridPoint] = []
    for d in cfg.densities:
        if cfg.variant == nw.VARIANT_SPARSE_INPUT:
            weights_for = {v: base for v in variants}
        else:
            pruned = nw.prune_weights(base, d, cfg.seed)
            weights_for = {v: pruned for v in variants}
        prepared = {v: nw.prepare(net.with_variant(v), weights_for[v]) for v in variants}
        for batch_size in cfg.batches:
            dense_batch = _make_batch(cfg, net, batch_size)
            if cfg.variant == nw.VARIANT_SPARSE_INPUT:
                dense_batch = [prune_random(t, d, cfg.seed + i) for i, t in enumerate(dense_batch)]
                sparse_batch = [sparsify_tensor3(t, AxisOrder3.CHW) for t in dense_batch]
            for workers in cfg.workers:
                for variant in variants:
                    batch = sparse_batch if variant == nw.VARIANT_SPARSE_INPUT else dense_batch
                    grid.append(_GridPoint(variant, d, batch_size, workers, prepared[variant], batch))

    def run_point(point: _GridPoint) -> nw.ForwardResult:
        try:
            return nw.forward(
                point.prepared, point.batch, workers=point.workers, strategy=cfg.strategy
            )
        except Exception as e:
            raise RuntimeError(f"benchmark failed at grid point [{point.label()}]: {e}") from e

    densities_probed = set()
    for warmup_pass in range(cfg.warmup):
        for point in grid:
            run_point(point)
            if (
                warmup_pass == 0
                and point.variant == cfg.variant
                and point.density not in densities_probed
            ):
                densities_probed.add(point.density)
                probe = nw.forward(
                    point.prepared,
                    point.batch[:1],
                    workers=point.workers,
                    strategy=cfg.strategy,
                    record_density=True,
                )
                for li, layer in enumerate(net.layers):
                    density_rows.append(
                        nw.DensityRecord(
                            point.density, li + 1, layer.kind, probe.report.layer_densities[li]
                        )
                    )

    for rep in range(cfg.reps):
        for point in grid:
            res = run_point(point)
            point.rows.append(
                TimingRow(
                    variant=point.variant,
                    density=point.density,
                    batch=point.batch_size,
                    workers=point.workers,
                    strategy=res.report.strategy,
                    rep=rep,
                    seconds=res.report.seconds,
                )
            )

    timing: list[TimingRow] = []
    for point in grid:
        timing.extend(point.rows)
    return timing, density_rows


def run_density_study(cfg: BenchConfig) -> dict[str, list[nw.DensityRecord]]:
    """Density evolution for the configured net and its ablation twin."""
    cfg.validate()
    if cfg.variant != nw.VARIANT_SPARSE_INPUT:
        raise ValueError("density study requires --variant sparse_input")
    kinds = [cfg.net_kind]
    twin = ABLATION_TWIN.get(cfg.net_kind)
    if twin:
        kinds.append(twin)
    out: dict[str, list[nw.DensityRecord]] = {}
    for kind in kinds:
        net = nw.build_benchmark_net(
            kind, cfg.scale, input_hw=cfg.input_hw, variant=nw.VARIANT_SPARSE_INPUT
        )
        out[kind] = nw.density_evolution(net, cfg.densities, cfg.seed)
    return out


# -- CSV and console output ----------------------------------------------------


def write_timing_csv(path, rows: list[TimingRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TIMING_CSV_COLUMNS)
        for r in rows:
            w.writerow([r.variant, f"{r.density:g}", r.batch, r.workers, r.strategy, r.rep, f"{r.seconds:.6f}"])


def write_density_csv(path, rows: list[nw.DensityRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DENSITY_CSV_COLUMNS)
        for r in rows:
            w.writerow([f"{r.input_density:g}", r.layer_index, r.layer_kind, f"{r.output_density:.6f}"])


def summarize(rows: list[TimingRow]) -> list[tuple]:
    """(variant, density, batch, workers, strategy, median, min) per grid point."""
    grids: dict[tuple, list[float]] = {}
    strategies: dict[tuple, str] = {}
    for r in rows:
        key = (r.variant, r.density, r.batch, r.workers)
        grids.setdefault(key, []).append(r.seconds)
        strategies[key] = r.strategy
    table = []
    for key in grids:
        times = grids[key]
        table.append(key + (strategies[key], statistics.median(times), min(times)))
    return table


def print_summary(rows: list[TimingRow]) -> None:
    print(f"{'variant':>16} {'density':>8} {'batch':>6} {'workers':>8} {'strategy':>12} "
          f"{'median_s':>10} {'min_s':>10}")
    for variant, dens, batch, workers, strat, med, mn in summarize(rows):
        print(f"{variant:>16} {dens:>8g} {batch:>6d} {workers:>8d} {strat:>12} "
              f"{med:>10.4f} {mn:>10.4f}")


# -- argument parsing -----------------------------------------------------------


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x]


def _density_list(text: str) -> list[float]:
    return [float(x) / 100.0 for x in text.split(",") if x]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparse-infer-bench",
        description="Sparse CNN inference benchmarks: density/batch/worker sweeps.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("bench", "timed density/batch/worker sweep with dense baseline"),
        ("density-study", "per-layer density evolution incl. ablation twin"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--net", default="vgg16_desk", choices=nw.BENCH_KINDS)
        p.add_argument("--scale", type=float, default=None,
                       help="channel width multiplier (default 0.25; 1.0 with --full-scale)")
        p.add_argument("--variant", default=nw.VARIANT_SPARSE_FILTER, choices=nw.VARIANTS)
        p.add_argument("--density", type=_density_list, default=[0.01, 0.05, 0.1, 0.2, 0.5, 1.0],
                       metavar="PCT[,PCT...]", help="densities in percent, e.g. 1,5,10,20,50,100")
        p.add_argument("--batch", type=_int_list, default=[1], metavar="N[,N...]")
        p.add_argument("--workers", type=_int_list,
                       default=_int_list(os.environ.get("SPARSE_INFER_WORKERS", "1")),
                       metavar="N[,N...]")
        p.add_argument("--strategy", choices=["auto", "1", "2"], default="auto")
        p.add_argument("--threshold", type=int, default=4,
                       help="auto-switch batch size threshold")
        p.add_argument("--reps", type=int, default=3)
        p.add_argument("--warmup", type=int, default=1)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--weights", default=None, metavar="PATH",
                       help="optional FSNW weight file (random weights otherwise)")
        p.add_argument("--timing-csv", default="timing.csv", metavar="PATH")
        p.add_argument("--density-csv", default="density.csv", metavar="PATH")
        p.add_argument("--full-scale", action="store_true",
                       help="224x224 input and scale 1.0 unless --scale is given")
    return parser


def config_from_args(args) -> BenchConfig:
    scale = args.scale if args.scale is not None else (1.0 if args.full_scale else 0.25)
    return BenchConfig(
        net_kind=args.net,
        scale=scale,
        variant=args.variant,
        densities=args.density,
        batches=args.batch,
        workers=args.workers,
        strategy=ForwardStrategy(kind=StrategyKind(args.strategy), threshold=args.threshold),
        reps=args.reps,
        warmup=args.warmup,
        seed=args.seed,
        weights_path=args.weights,
        timing_csv=args.timing_csv,
        density_csv=args.density_csv,
        full_scale=args.full_scale,
    )


def _twin_path(path: str, kind: str) -> str:
    stem, ext = os.path.splitext(path)
    return f"{stem}_{kind}{ext or '.csv'}"


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = config_from_args(args)
        cfg.validate()
    except ValueError as e:
        parser.error(str(e))  # exits with code 2
    try:
        if args.command == "bench":
            timing, density_rows = run_bench(cfg)
            if cfg.timing_csv:
                write_timing_csv(cfg.timing_csv, timing)
                print(f"wrote {cfg.timing_csv} ({len(timing)} rows)")
            if cfg.density_csv:
                write_density_csv(cfg.density_csv, density_rows)
                print(f"wrote {cfg.density_csv} ({len(density_rows)} rows)")
            print_summary(timing)
        else:
            studies = run_density_study(cfg)
            for kind, rows in studies.items():
                path = _twin_path(cfg.density_csv or "density.csv", kind)
                write_density_csv(path, rows)
                print(f"wrote {path} ({len(rows)} rows)")
    except ValueError as e:
        parser.error(str(e))
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
