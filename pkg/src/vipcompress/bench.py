"""Single-layer wall-clock benchmark and the closed-form cost model.

The sweep times one vanilla layer (full self-attention, quadratic in n,
capped at n <= 16384) and one compressed layer (fixed compressed row count
regardless of n) per sequence length, single-threaded, and writes one CSV
row per (length, kind). Timing columns vary run to run; every other column
is a pure function of the seed and so must be byte-identical across runs.
"""

from __future__ import annotations

import argparse
import csv
import statistics
import sys
import time
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .components import SelectionBudget
from .dense import Rng
from .layer import LayerConfig, LayerWeights, layer_forward
from .layout import padded_length, reorder
from .model import ConfigError, ModelConfig, compressed_layer_forward
from .tree import build_tree

__all__ = [
    "BenchRecord",
    "BenchConfig",
    "CostModel",
    "VANILLA_CAP",
    "predict_cost",
    "run_sweep",
    "emit_csv",
    "main",
]

VANILLA_CAP = 16384
CSV_COLUMNS = ("n", "n_p", "r", "d", "k", "h", "kind", "ms_median", "ms_min",
               "writes", "retrievals", "trials", "seed")


@dataclass(frozen=True)
class BenchRecord:
    """One timed configuration; kind is vanilla, vcc, or initial."""

    n: int
    n_p: int
    r: int
    d: int
    k: int
    h: int
    kind: str
    ms_median: float
    ms_min: float
    writes: int
    retrievals: int
    trials: int
    seed: int

    def row(self) -> list:
        return [self.n, self.n_p, self.r, self.d, self.k, self.h, self.kind,
                f"{self.ms_median:.3f}", f"{self.ms_min:.3f}",
                self.writes, self.retrievals, self.trials, self.seed]


@dataclass(frozen=True)
class CostModel:
    """Per-phase work estimates for l compressed layers (flop-ish units).

    ffn_term        l * r * d^2      projections and feed-forward
    attention_term  l * r^2 * d      attention over compressed rows
    tree_term       l * r * log_k(n_c) * d   tree retrievals
    scoring_term    l * r * n_p * d  selection scoring
    io_term         n * d            one pass over the sequence
    """

    ffn_term: int
    attention_term: int
    tree_term: int
    scoring_term: int
    io_term: int

    def total(self) -> int:
        return (self.ffn_term + self.attention_term + self.tree_term
                + self.scoring_term + self.io_term)


def predict_cost(l: int, r: int, d: int, n: int, n_p: int, k: int = 2) -> CostModel:
    """Evaluate the cost model for a configuration.

    n_c is the padded block length; its log is the retrieval path length.
    """
    n_c = padded_length(n - n_p, k)
    depth = 0
    s = 1
    while s < n_c:
        s *= k
        depth += 1
    return CostModel(
        ffn_term=l * r * d * d,
        attention_term=l * r * r * d,
        tree_term=l * r * depth * d,
        scoring_term=l * r * n_p * d,
        io_term=n * d,
    )


@dataclass(frozen=True)
class BenchConfig:
    seq_lens: tuple[int, ...] = (8192,)
    dim: int = 64
    heads: int = 4
    layers: int = 1
    init_layers: int = 0
    vip_count: int = 32
    k: int = 2
    h: int = 511
    mode: str = "both"
    seed: int = 0
    trials: int = 5
    out: str | None = "bench.csv"

    def __post_init__(self):
        if self.mode not in ("vanilla", "vcc", "both"):
            raise ValueError(f"mode must be vanilla, vcc, or both, got {self.mode!r}")
        if self.trials < 5:
            raise ValueError("records report medians over at least 5 trials")
        if min(self.seq_lens) <= self.vip_count:
            raise ValueError("seq-len must exceed vip-count")


_WARMUPS = 2


def _timed(fn, trials: int) -> tuple[float, float]:
    for _ in range(_WARMUPS):
        fn()
    times = []
    for _ in range(trials):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times), min(times)


def run_sweep(cfg: BenchConfig) -> list[BenchRecord]:
    """Time each requested (length, kind) pair; single-threaded, seeded."""
    layer_cfg = LayerConfig(dim=cfg.dim, heads=cfg.heads, ffn_dim=4 * cfg.dim)
    wrng = Rng(cfg.seed)
    weights = LayerWeights.random(layer_cfg, wrng, scale=0.1)
    records: list[BenchRecord] = []
    with threadpool_limits(limits=1):
        for n in cfg.seq_lens:
            xrng = Rng(cfg.seed + n)
            x = xrng.normal((n, cfg.dim), scale=0.5)
            if cfg.mode in ("vanilla", "both"):
                if n <= VANILLA_CAP:
                    med, lo = _timed(lambda: layer_forward(x, weights), cfg.trials)
                    records.append(BenchRecord(
                        n=n, n_p=cfg.vip_count, r=n, d=cfg.dim, k=cfg.k, h=cfg.h,
                        kind="vanilla", ms_median=med, ms_min=lo,
                        writes=0, retrievals=0, trials=cfg.trials, seed=cfg.seed,
                    ))
                else:
                    print(f"n={n}: vanilla layer skipped (cap {VANILLA_CAP})")
            if cfg.init_layers > 0:
                def one_initial_pass():
                    for a in range(0, n, 512):
                        layer_forward(x[a : a + 512], weights)
                med, lo = _timed(one_initial_pass, cfg.trials)
                records.append(BenchRecord(
                    n=n, n_p=cfg.vip_count, r=512, d=cfg.dim, k=cfg.k, h=cfg.h,
                    kind="initial", ms_median=med, ms_min=lo,
                    writes=0, retrievals=0, trials=cfg.trials, seed=cfg.seed,
                ))
            if cfg.mode in ("vcc", "both"):
                records.append(_vcc_record(cfg, n, x, weights))
    return records


def _vcc_record(cfg: BenchConfig, n: int, x: np.ndarray, weights: LayerWeights) -> BenchRecord:
    mask = np.zeros(n, dtype=bool)
    mask[: cfg.vip_count] = True
    part = reorder(x, mask, cfg.k)
    tree = build_tree(part.c, cfg.k)
    model_cfg = ModelConfig(
        layers=(weights,),
        k=cfg.k,
        budget=SelectionBudget.fixed_splits(cfg.h),
        scoring="projected",
    )
    pad = part.layout.pad_count
    diags = []

    def one_layer():
        fresh = tree.copy()
        t0 = time.perf_counter()
        _, _, diag = compressed_layer_forward(part.p, fresh, weights, model_cfg, pad)
        diags.append((time.perf_counter() - t0) * 1e3)
        return diag

    for _ in range(_WARMUPS):
        one_layer()
    diags.clear()
    first = one_layer()
    for _ in range(cfg.trials - 1):
        one_layer()
    return BenchRecord(
        n=n, n_p=cfg.vip_count, r=first.rows, d=cfg.dim, k=cfg.k, h=cfg.h,
        kind="vcc", ms_median=statistics.median(diags), ms_min=min(diags),
        writes=first.write_count, retrievals=first.retrievals,
        trials=cfg.trials, seed=cfg.seed,
    )


def emit_csv(records: list[BenchRecord], path: str) -> None:
    """Write records in sweep order; columns are fixed and documented."""
    try:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(CSV_COLUMNS)
            for rec in records:
                writer.writerow(rec.row())
    except OSError as e:
        raise OSError(f"cannot write CSV to {path}: {e}") from e


_FLAGS = {
    "seq_len": int, "dim": int, "heads": int, "layers": int, "init_layers": int,
    "vip_count": int, "k": int, "h": int, "mode": str, "seed": int,
    "trials": int, "out": str,
}


def _config_file_values(path: str) -> dict:
    """Bench defaults from a key = value file; seq_len takes a comma list."""
    from pathlib import Path
    kv = _parse_kv_bench(Path(path).read_text(), path)
    out = {}
    for key, (ln, value) in kv.items():
        try:
            if key == "seq_len":
                out["seq_lens"] = tuple(int(v) for v in value.split(","))
            elif key == "out":
                out["out"] = value
            elif key == "mode":
                out["mode"] = value
            else:
                out[key] = _FLAGS[key](value)
        except ValueError:
            raise ConfigError(f"{path}: line {ln}: bad value {value!r} for {key!r}") from None
    return out


def _parse_kv_bench(text: str, origin: str) -> dict:
    out = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}: line {ln}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FLAGS:
            raise ConfigError(f"{origin}: line {ln}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{origin}: line {ln}: duplicate key {key!r}")
        out[key] = (ln, value)
    return out


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="vcc-bench",
        description="Time vanilla vs. compressed Transformer layers over a length sweep.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--seq-len", type=int, action="append",
                        help="sequence length; repeat for a sweep (default 8192)")
    parser.add_argument("--dim", type=int, default=None, help="model width (default 64)")
    parser.add_argument("--heads", type=int, default=None, help="attention heads (default 4)")
    parser.add_argument("--layers", type=int, default=None,
                        help="layer count for the cost model (default 1)")
    parser.add_argument("--init-layers", type=int, default=None,
                        help="also time a segmented initial-stage pass (default 0)")
    parser.add_argument("--vip-count", type=int, default=None, help="VIP rows (default 32)")
    parser.add_argument("--k", type=int, default=None, help="tree branching factor (default 2)")
    parser.add_argument("--h", type=int, default=None,
                        help="total split budget; compressed rows = 1 + (k-1)*h (default 511)")
    parser.add_argument("--mode", choices=("vanilla", "vcc", "both"), default=None,
                        help="which kinds to time (default both)")
    parser.add_argument("--seed", type=int, default=None, help="rng seed (default 0)")
    parser.add_argument("--trials", type=int, default=None,
                        help="timed trials per point, at least 5 (default 5)")
    parser.add_argument("--out", type=str, default=None, help="CSV path (default bench.csv)")
    parser.add_argument("--config", type=str, default=None,
                        help="key = value file supplying flag defaults")
    args = parser.parse_args(argv)
    try:
        values: dict = {}
        if args.config:
            values.update(_config_file_values(args.config))
        if args.seq_len:
            values["seq_lens"] = tuple(args.seq_len)
        for flag in ("dim", "heads", "layers", "init_layers", "vip_count", "k",
                     "h", "mode", "seed", "trials", "out"):
            given = getattr(args, flag)
            if given is not None:
                values[flag] = given
        cfg = BenchConfig(**values)
        for n in cfg.seq_lens:
            model = predict_cost(cfg.layers, 1 + (cfg.k - 1) * cfg.h + cfg.vip_count,
                                 cfg.dim, n, cfg.vip_count, cfg.k)
            print(f"n={n}: predicted work ffn={model.ffn_term} attn={model.attention_term} "
                  f"tree={model.tree_term} scoring={model.scoring_term} io={model.io_term}")
        records = run_sweep(cfg)
        for rec in records:
            print(f"{rec.kind:8s} n={rec.n:>8d} r={rec.r:>6d} "
                  f"median={rec.ms_median:10.3f} ms min={rec.ms_min:10.3f} ms")
        if cfg.out:
            emit_csv(records, cfg.out)
            print(f"wrote {len(records)} rows to {cfg.out}")
        return 0
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
