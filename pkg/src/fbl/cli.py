"""Command-line runner: single runs, seed sweeps, lambda sweeps and ablations.

Config files are flat ``key = value`` lines; ``#`` starts a comment. Keys
are the FederationConfig field names plus the run keys in RUN_KEYS.
Command-line flags override file values.
"""

from __future__ import annotations

import argparse
import csv
import logging
import statistics
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

from .config import METHODS, FederationConfig
from .data import LabeledDataset, load_csv, make_synthetic_benchmark
from .federation import run_federation, write_metrics_csv, write_summary_json
from .rng import SERVER, derive_rng

log = logging.getLogger("fbl")

RUN_KEYS = {
    "dataset": "synthetic",
    "num_classes": 5,
    "n_per_class": 200,
    "dim": 8,
    "class_separation": 3.0,
    "test_fraction": 0.2,
    "out": "runs",
    "seeds": 1,
    "methods": "",
    "lambdas": "",
    "workers": 1,
    "timing": True,
}

_CONFIG_TYPES = {
    "local_epochs": "optional_int",
    "augment_sigma": "optional_float",
    "hidden_dims": "int_tuple",
}


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSpec:
    source: str = "synthetic"  # "synthetic" or "csv:PATH"
    num_classes: int = 5
    n_per_class: int = 200
    dim: int = 8
    class_separation: float = 3.0
    test_fraction: float = 0.2

    def load(self, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
        rng = derive_rng(seed, SERVER, 0, "data")
        if self.source == "synthetic":
            return make_synthetic_benchmark(
                self.num_classes, self.n_per_class, self.dim, self.class_separation, rng, self.test_fraction
            )
        if self.source.startswith("csv:"):
            full = load_csv(self.source[4:])
            order = rng.permutation(len(full))
            n_test = int(round(self.test_fraction * len(full)))
            return full.subset(sorted(order[n_test:])), full.subset(sorted(order[:n_test]))
        raise ConfigError(f"dataset must be 'synthetic' or 'csv:PATH', got {self.source!r}")


@dataclass
class RunSpec:
    config: FederationConfig
    dataset: DatasetSpec
    out_dir: Path
    seeds: list[int]
    methods: list[str] = field(default_factory=list)
    lambdas: list[float] = field(default_factory=list)
    workers: int = 1
    timing: bool = True

    def __post_init__(self) -> None:
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if not self.methods:
            self.methods = [self.config.method]
        if not self.lambdas:
            self.lambdas = [self.config.unconstrained_fraction]


def _coerce(key: str, raw, kind: str):
    if isinstance(raw, str):
        raw = raw.strip()
        if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "\"'":
            raw = raw[1:-1]
    try:
        if kind == "bool":
            if isinstance(raw, bool):
                return raw
            low = str(raw).lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if kind in ("optional_int", "optional_float"):
            if raw is None or str(raw).lower() in ("none", "null", ""):
                return None
            return int(raw) if kind == "optional_int" else float(raw)
        if kind == "int_tuple":
            if isinstance(raw, (tuple, list)):
                return tuple(int(v) for v in raw)
            return tuple(int(v) for v in str(raw).split(",") if v.strip())
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return str(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {kind}") from None


def _kind_of(key: str) -> str:
    if key in _CONFIG_TYPES:
        return _CONFIG_TYPES[key]
    default = RUN_KEYS[key] if key in RUN_KEYS else getattr(FederationConfig(), key)
    for t in (bool, int, float):
        if type(default) is t:
            return t.__name__
    return "str"


def valid_keys() -> list[str]:
    return sorted(set(FederationConfig.field_names()) | set(RUN_KEYS))


def read_config_file(path: str | Path) -> dict:
    values: dict = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in valid_keys():
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}; valid keys: {', '.join(valid_keys())}")
        if key in values:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return values


class _Once(argparse.Action):
    """Store a value, refusing a second occurrence of the same flag."""

    def __call__(self, parser, namespace, values, option_string=None):
        if self.dest in getattr(namespace, "_seen", set()):
            parser.error(f"duplicate flag {option_string}")
        namespace._seen = getattr(namespace, "_seen", set()) | {self.dest}
        setattr(namespace, self.dest, self.const if self.nargs == 0 else values)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fbl", description="Federated balanced learning simulator")
    S = argparse.SUPPRESS

    def opt(*names, dest, **kw):
        p.add_argument(*names, dest=dest, action=_Once, default=S, **kw)

    def toggle(name, dest, value, help):
        p.add_argument(name, dest=dest, action=_Once, nargs=0, const=value, default=S, help=help)

    opt("--config", dest="_config", metavar="PATH", help="key = value config file")
    opt("--method", dest="method", choices=METHODS)
    opt("--methods", dest="methods", metavar="M1,M2", help="sweep over several methods")
    opt("--clients", dest="num_clients", metavar="K")
    opt("--rounds", dest="rounds", metavar="T")
    opt("--local-iters", dest="local_iters", metavar="E")
    opt("--local-epochs", dest="local_epochs")
    opt("--selection", dest="selection_fraction", metavar="FRAC")
    opt("--lr", dest="lr")
    opt("--momentum", dest="momentum")
    opt("--weight-decay", dest="weight_decay")
    opt("--batch-size", dest="batch_size")
    opt("--alpha", dest="alpha")
    opt("--lambda", dest="unconstrained_fraction", metavar="LAMBDA")
    opt("--lambdas", dest="lambdas", metavar="L1,L2", help="sweep over several lambda values")
    opt("--incapable-frac", dest="incapable_fraction")
    opt("--prox-mu", dest="prox_mu")
    opt("--seed", dest="seed")
    opt("--seeds", dest="seeds", metavar="N", help="run seeds seed..seed+N-1")
    opt("--gamma", dest="gamma")
    opt("--replay-period", dest="replay_period", metavar="M")
    opt("--drop-count", dest="drop_count")
    opt("--hidden", dest="hidden_dims", metavar="H1,H2")
    opt("--out", dest="out", metavar="DIR")
    opt("--dataset", dest="dataset", metavar="{synthetic|csv:PATH}")
    opt("--workers", dest="workers")
    toggle("--no-alignment", "use_alignment", False, "disable alignment embeddings")
    toggle("--no-drop", "use_drop", False, "disable embedding drop")
    toggle("--random-sampling", "sampling", "random", "random instead of loss-based sampling")
    toggle("--no-timing", "timing", False, "leave the seconds column blank for byte-stable CSVs")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def parse_config(argv: list[str] | None = None) -> RunSpec:
    ns = build_parser().parse_args(argv)
    flags = {k: v for k, v in vars(ns).items() if not k.startswith("_") and k != "verbose"}
    values = read_config_file(ns._config) if hasattr(ns, "_config") else {}
    values.update(flags)

    cfg_kwargs = {}
    run = dict(RUN_KEYS)
    for key, raw in values.items():
        if key not in valid_keys():
            raise ConfigError(f"unknown key {key!r}; valid keys: {', '.join(valid_keys())}")
        value = _coerce(key, raw, _kind_of(key))
        if key in RUN_KEYS:
            run[key] = value
        else:
            cfg_kwargs[key] = value
    try:
        config = FederationConfig(**cfg_kwargs)
    except ValueError as e:
        raise ConfigError(str(e)) from None

    if run["seeds"] < 1:
        raise ConfigError("seeds must be >= 1")
    methods = [m.strip() for m in str(run["methods"]).split(",") if m.strip()]
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {m!r}")
    lambdas = [float(v) for v in str(run["lambdas"]).split(",") if v.strip()]
    for lam in lambdas:
        if not 0 <= lam <= 1 - config.incapable_fraction:
            raise ConfigError(f"lambda {lam} must lie in [0, 1 - incapable_fraction]")
    dataset = DatasetSpec(
        run["dataset"], run["num_classes"], run["n_per_class"], run["dim"], run["class_separation"], run["test_fraction"]
    )
    return RunSpec(
        config=config,
        dataset=dataset,
        out_dir=Path(run["out"]),
        seeds=[config.seed + i for i in range(run["seeds"])],
        methods=methods,
        lambdas=lambdas,
        workers=run["workers"],
        timing=run["timing"],
    )


def format_mean_std(values: list[float]) -> str:
    """Table-style ``mean(std)`` with the sample standard deviation; std is 0 for one value."""
    mean = statistics.fmean(values)
    std = statistics.stdev(values) if len(values) > 1 else 0.0
    return f"{mean:.2f}({std:.2f})"


def run_name(method: str, lam: float, seed: int) -> str:
    return f"{method}_lam{lam:g}_seed{seed}"


def run_sweep(spec: RunSpec) -> list[dict]:
    """Every (method, lambda, seed) cell; one summary row per (method, lambda)."""
    out = spec.out_dir
    (out / "runs").mkdir(parents=True, exist_ok=True)
    (out / "logs").mkdir(parents=True, exist_ok=True)
    base = spec.config.to_dict()
    rows = []
    for method in spec.methods:
        for lam in spec.lambdas:
            finals = []
            for seed in spec.seeds:
                name = run_name(method, lam, seed)
                log_path = out / "logs" / f"{name}.log"
                handler = logging.FileHandler(log_path, mode="w")
                handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
                root = logging.getLogger("fbl")
                root.addHandler(handler)
                try:
                    cfg = dict(base, method=method, unconstrained_fraction=lam, seed=seed)
                    config = FederationConfig(**cfg)
                    train, test = spec.dataset.load(seed)
                    log.info("run %s: %d train / %d test samples", name, len(train), len(test))
                    result = run_federation(config, train, test, workers=spec.workers)
                    write_metrics_csv(result.metrics, out / "runs" / f"{name}.csv", timing=spec.timing)
                    write_summary_json(result, out / "runs" / f"{name}.json", {"dataset": vars(spec.dataset)})
                    log.info("run %s: final accuracy %.4f", name, result.final_accuracy)
                except Exception as e:
                    log.exception("run %s failed", name)
                    raise RuntimeError(f"run {name} failed: {e}; see {log_path}") from e
                finally:
                    root.removeHandler(handler)
                    handler.close()
                finals.append(result.final_accuracy)
            rows.append(
                {
                    "method": method,
                    "lambda": lam,
                    "seeds": len(finals),
                    "mean_accuracy": statistics.fmean(finals),
                    "std_accuracy": statistics.stdev(finals) if len(finals) > 1 else 0.0,
                    "cell": format_mean_std([100 * a for a in finals]),
                }
            )
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return rows


def main(argv: list[str] | None = None) -> int:
    args = argv if argv is not None else sys.argv[1:]
    logging.basicConfig(
        level=logging.DEBUG if ("-v" in args or "--verbose" in args) else logging.INFO,
        format="%(levelname)s %(message)s",
    )
    try:
        spec = parse_config(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    rows = run_sweep(spec)
    width = max(len(r["method"]) for r in rows)
    for r in rows:
        print(f"{r['method']:<{width}}  lambda={r['lambda']:<5g} acc%={r['cell']}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
