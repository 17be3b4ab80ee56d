"""Experiment orchestration: train ensembles, acquire statistics, run the
method x corruption x intensity evaluation grid, and run the theory checks.

Everything is driven by a plain key=value ExperimentConfig. Commands are
deterministic given the config seed; report hashes exclude only the
wall-time column, which is inherently nondeterministic.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

from . import __version__
from .covstats import CovKind
from .data import (
    Dataset,
    apply_corruption,
    corruption_from_name,
    exact_removal_check,
    CorruptionOp,
    load_idx,
    power_law_spectrum,
    synth_digits,
    synth_stationary,
)
from .errors import ConfigError, ShiftMatchError
from .matching import (
    accuracy,
    acquire_train_stats,
    bma_predict,
    categorical_nll,
    resolve_placement,
)
from .netmodel import (
    LayerGraph,
    TrainConfig,
    build_ensemble,
    forward,
    load_graph_config,
    load_weight_sample,
    make_graph,
    save_weight_sample,
    softmax,
    _BUILTIN_LAYERS,
)

REPORT_COLUMNS = ("method", "corruption", "intensity", "accuracy", "nll", "examples", "ms")

# Structure used at spatial sites for each --spec value. "full" follows the
# ablation naming: the full per-channel spatial covariance, no Kronecker
# factorization (flat sites always use one full covariance; see matching).
_SPEC_KINDS = {
    "kron": CovKind.KRON,
    "full": CovKind.PER_CHANNEL,
    "channel-joint": CovKind.CHANNEL_JOINT,
    "meanvar": CovKind.MEAN_VAR,
}

_PLACEMENTS = {
    "pre": ("pre", "all"),
    "post": ("post", "all"),
    "input-only": ("pre", "input-only"),
}

METHOD_NAMES = (
    "plain", "meanvar", "shiftmatch", "input-only", "channel-joint", "full-cov",
    "post-activation",
)


@dataclass(frozen=True)
class ExperimentConfig:
    graph: str = "lenet-s"
    classes: int = 10
    data: str = "glyphs"            # glyphs | idx
    train_size: int = 10000
    test_size: int = 2000
    data_seed: int = 7
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    members: int = 5
    epochs: int = 8
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch: int = 128
    seed: int = 0
    spec: str = "kron"              # kron | full | channel-joint | meanvar
    placement: str = "pre"          # pre | post | input-only
    eps: float = 1e-5
    methods: str = "plain,meanvar,shiftmatch"
    corruptions: str = "blur:4"     # name:intensity pairs, comma separated
    samples: str = "runs/samples"
    out: str = "runs/out"
    theory_samples: int = 50000
    theory_size: int = 8
    theory_alpha: float = 1.5
    theory_cutoff: float = 2.5
    theory_eps: float = 1e-9

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in sorted(asdict(self).items()))

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


def _coerce(name: str, value: str):
    kind = ExperimentConfig.__dataclass_fields__[name].type
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        return value
    except ValueError as exc:
        raise ConfigError(f"bad value for {name!r}: {value!r}") from exc


def parse_config(text: str) -> ExperimentConfig:
    values: dict = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"bad config line {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in ExperimentConfig.__dataclass_fields__:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, val)
    return ExperimentConfig(**values)


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def apply_overrides(cfg: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    clean = {}
    for key, val in overrides.items():
        if val is None:
            continue
        if key not in ExperimentConfig.__dataclass_fields__:
            raise ConfigError(f"unknown config key {key!r}")
        clean[key] = _coerce(key, str(val))
    return replace(cfg, **clean) if clean else cfg


def validate_config(cfg: ExperimentConfig) -> None:
    if cfg.spec not in _SPEC_KINDS:
        raise ConfigError(f"unknown spec {cfg.spec!r}; have {sorted(_SPEC_KINDS)}")
    if cfg.placement not in _PLACEMENTS:
        raise ConfigError(f"unknown placement {cfg.placement!r}; have {sorted(_PLACEMENTS)}")
    if cfg.data not in ("glyphs", "idx"):
        raise ConfigError(f"unknown data source {cfg.data!r}")
    if cfg.members < 1:
        raise ConfigError("members must be >= 1")
    for name in method_list(cfg.methods):
        if name not in METHOD_NAMES:
            raise ConfigError(f"unknown method {name!r}; have {METHOD_NAMES}")
    parse_corruptions(cfg.corruptions)


def method_list(methods: str) -> list[str]:
    return [m.strip() for m in methods.split(",") if m.strip()]


def parse_corruptions(text: str) -> list[tuple[str, int]]:
    pairs: list[tuple[str, int]] = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        if ":" not in item:
            raise ConfigError(f"corruption {item!r} needs name:intensity")
        name, level = item.split(":", 1)
        try:
            pairs.append((name.strip(), int(level)))
        except ValueError as exc:
            raise ConfigError(f"bad intensity in {item!r}") from exc
    return pairs


@dataclass(frozen=True)
class MethodSetup:
    """Resolved matching configuration for one evaluation method."""

    name: str
    matched: bool
    kind: CovKind | None = None
    timing: str = "pre"
    variant: str = "all"

    @property
    def stats_tag(self) -> str:
        return f"{self.kind.value}-{self.timing}-{self.variant}"


def resolve_method(name: str, cfg: ExperimentConfig) -> MethodSetup:
    """Map a method name onto (covariance structure, placement).

    ``shiftmatch`` uses the config's spec/placement; the ablation methods
    override one dimension each, mirroring the usual comparison grid.
    """
    timing, variant = _PLACEMENTS[cfg.placement]
    base_kind = _SPEC_KINDS[cfg.spec]
    if name == "plain":
        return MethodSetup(name, matched=False)
    if name == "shiftmatch":
        return MethodSetup(name, True, base_kind, timing, variant)
    if name == "meanvar":
        return MethodSetup(name, True, CovKind.MEAN_VAR, timing, variant)
    if name == "input-only":
        return MethodSetup(name, True, base_kind, "pre", "input-only")
    if name == "channel-joint":
        return MethodSetup(name, True, CovKind.CHANNEL_JOINT, timing, variant)
    if name == "full-cov":
        return MethodSetup(name, True, CovKind.PER_CHANNEL, timing, variant)
    if name == "post-activation":
        return MethodSetup(name, True, base_kind, "post", variant)
    raise ConfigError(f"unknown method {name!r}")


# ---------------------------------------------------------------------------
# Data / model plumbing
# ---------------------------------------------------------------------------


def build_graph(cfg: ExperimentConfig) -> LayerGraph:
    if cfg.graph in _BUILTIN_LAYERS:
        return make_graph(cfg.graph, (1, 28, 28), cfg.classes)
    return load_graph_config(cfg.graph)


def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    if cfg.data == "glyphs":
        train = synth_digits(cfg.train_size, seed=cfg.data_seed, classes=cfg.classes)
        test = synth_digits(cfg.test_size, seed=cfg.data_seed + 1, classes=cfg.classes)
        return train, test
    for key in ("train_images", "train_labels", "test_images", "test_labels"):
        path = getattr(cfg, key)
        if not path or not Path(path).exists():
            raise ConfigError(f"data=idx requires existing {key} (got {path!r})")
    train = load_idx(cfg.train_images, cfg.train_labels)
    test = load_idx(cfg.test_images, cfg.test_labels)
    if cfg.train_size and cfg.train_size < train.size:
        train = train.subset(slice(0, cfg.train_size))
    if cfg.test_size and cfg.test_size < test.size:
        test = test.subset(slice(0, cfg.test_size))
    return train, test


def member_seeds(cfg: ExperimentConfig) -> list[int]:
    return [cfg.seed + i for i in range(cfg.members)]


def weight_path(cfg: ExperimentConfig, seed: int) -> Path:
    return Path(cfg.samples) / f"member-{seed}.smwt"


def stats_path(cfg: ExperimentConfig, seed: int, setup: MethodSetup) -> Path:
    return Path(cfg.samples) / f"member-{seed}.{setup.stats_tag}.smts"


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def run_train(cfg: ExperimentConfig) -> dict:
    """Train the ensemble, write SMWT files, report per-member clean accuracy."""
    validate_config(cfg)
    t0 = time.perf_counter()
    graph = build_graph(cfg)
    train, test = load_datasets(cfg)
    tc = TrainConfig(lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay,
                     epochs=cfg.epochs, batch=cfg.batch, seed=cfg.seed)
    members = build_ensemble(graph, train.images, train.labels, tc, member_seeds(cfg))
    outdir = Path(cfg.samples)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "graph.cfg").write_text(graph.config_text(), encoding="utf-8")
    files = []
    clean_acc: dict[str, float] = {}
    for seed, member in zip(member_seeds(cfg), members):
        path = weight_path(cfg, seed)
        save_weight_sample(path, graph, member)
        files.append(str(path))
        logits, _ = forward(graph, member, test.images)
        clean_acc[member.sample_id] = accuracy(softmax(logits), test.labels)
    return {
        "weight_files": files,
        "graph_file": str(outdir / "graph.cfg"),
        "clean_accuracy": clean_acc,
        "ms": (time.perf_counter() - t0) * 1e3,
    }


def _required_setups(cfg: ExperimentConfig, methods: list[str] | None) -> list[MethodSetup]:
    names = method_list(cfg.methods) if methods is None else methods
    setups: dict[str, MethodSetup] = {}
    for name in names:
        setup = resolve_method(name, cfg)
        if setup.matched:
            setups.setdefault(setup.stats_tag, setup)
    if not setups:  # statistics for the configured default, at minimum
        setup = resolve_method("shiftmatch", cfg)
        setups[setup.stats_tag] = setup
    return list(setups.values())


def run_stats(cfg: ExperimentConfig, methods: list[str] | None = None) -> dict:
    """Acquire per-sample training statistics for every matched method."""
    validate_config(cfg)
    t0 = time.perf_counter()
    graph = build_graph(cfg)
    train, _ = load_datasets(cfg)
    files = []
    from .matching import save_train_stats

    for setup in _required_setups(cfg, methods):
        placement = resolve_placement(graph, setup.timing, setup.variant)
        for seed in member_seeds(cfg):
            wpath = weight_path(cfg, seed)
            if not wpath.exists():
                raise ConfigError(f"missing weight file {wpath}; run train first")
            member = load_weight_sample(wpath, graph)
            ts = acquire_train_stats(graph, member, train.images, placement, setup.kind)
            spath = stats_path(cfg, seed, setup)
            save_train_stats(spath, ts)
            files.append(str(spath))
    return {"stats_files": files, "ms": (time.perf_counter() - t0) * 1e3}


def _grid(cfg: ExperimentConfig) -> list[tuple[str, int]]:
    return [("clean", 0)] + parse_corruptions(cfg.corruptions)


def run_eval(cfg: ExperimentConfig, methods: list[str] | None = None) -> dict:
    """Evaluate the full method x corruption x intensity grid via BMA."""
    validate_config(cfg)
    names = method_list(cfg.methods) if methods is None else methods
    for name in names:
        if name not in METHOD_NAMES:
            raise ConfigError(f"unknown method {name!r}")
    graph = build_graph(cfg)
    _, test = load_datasets(cfg)
    seeds = member_seeds(cfg)
    members = []
    for seed in seeds:
        wpath = weight_path(cfg, seed)
        if not wpath.exists():
            raise ConfigError(f"missing weight file {wpath}; run train first")
        members.append(load_weight_sample(wpath, graph))
    setups = {name: resolve_method(name, cfg) for name in names}
    for setup in setups.values():
        if setup.matched:
            for seed in seeds:
                spath = stats_path(cfg, seed, setup)
                if not spath.exists():
                    raise ConfigError(f"missing statistics {spath}; run stats first")

    rows: list[dict] = []
    for corruption, intensity in _grid(cfg):
        op_seed = cfg.seed + 7919 * intensity + len(corruption)
        op = corruption_from_name(corruption, intensity, seed=op_seed) if intensity else CorruptionOp("identity")
        corrupted = apply_corruption(test, op)
        for name in names:
            setup = setups[name]
            t0 = time.perf_counter()
            try:
                if setup.matched:
                    stats = [stats_path(cfg, seed, setup) for seed in seeds]
                    probs = bma_predict(graph, members, stats, corrupted.images, eps=cfg.eps)
                else:
                    probs = bma_predict(graph, members, None, corrupted.images)
            except ShiftMatchError as exc:
                raise type(exc)(
                    f"grid cell ({name}, {corruption}:{intensity}) failed: {exc}"
                ) from exc
            ms = (time.perf_counter() - t0) * 1e3
            rows.append({
                "method": name,
                "corruption": corruption,
                "intensity": intensity,
                "accuracy": accuracy(probs, corrupted.labels),
                "nll": categorical_nll(probs, corrupted.labels),
                "examples": int(corrupted.size),
                "ms": ms,
            })
    paths = write_report(cfg, rows)
    return {"rows": rows, **paths}


def report_content_hash(rows: list[dict]) -> str:
    """Hash of the deterministic report content (every column except ms)."""
    payload = [[row[c] for c in REPORT_COLUMNS if c != "ms"] for row in rows]
    return hashlib.sha256(json.dumps(payload).encode()).hexdigest()


def write_report(cfg: ExperimentConfig, rows: list[dict]) -> dict:
    outdir = Path(cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)
    csv_path = outdir / "eval.csv"
    json_path = outdir / "eval.json"
    hash_path = outdir / "eval.sha256"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for row in rows:
            writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c]
                             for c in REPORT_COLUMNS])
    doc = {"config_hash": cfg.config_hash(), "version": __version__, "rows": rows}
    json_path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    hash_path.write_text(report_content_hash(rows) + "\n", encoding="utf-8")
    return {"csv_path": str(csv_path), "json_path": str(json_path), "hash_path": str(hash_path)}


def read_report_csv(path) -> list[dict]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            rows.append({
                "method": rec["method"],
                "corruption": rec["corruption"],
                "intensity": int(rec["intensity"]),
                "accuracy": float(rec["accuracy"]),
                "nll": float(rec["nll"]),
                "examples": int(rec["examples"]),
                "ms": float(rec["ms"]),
            })
    return rows


THEORY_SIGMAS = (0.5, 1.0, 2.0)
THEORY_POPULATION_THRESHOLD = 1e-4
THEORY_EMPIRICAL_THRESHOLD = 0.05


def run_theory(cfg: ExperimentConfig) -> dict:
    """Stationary-corruption removal checks in population and empirical mode."""
    validate_config(cfg)
    t0 = time.perf_counter()
    n = cfg.theory_size
    spec = power_law_spectrum(n, n, alpha=cfg.theory_alpha, cutoff=cfg.theory_cutoff)
    train = synth_stationary(cfg.theory_samples, n, n, spec, seed=cfg.seed + 1)
    test = synth_stationary(cfg.theory_samples, n, n, spec, seed=cfg.seed + 2)
    rows: list[dict] = []

    def record(mode: str, label: str, op: CorruptionOp, threshold: float, eps: float):
        err = exact_removal_check(train, test, op, mode=mode, eps=eps)
        rows.append({
            "mode": mode, "corruption": label, "error": err,
            "threshold": threshold, "passed": bool(err <= threshold),
        })

    record("population", "identity", CorruptionOp("identity"), THEORY_POPULATION_THRESHOLD, 0.0)
    for sigma in THEORY_SIGMAS:
        record("population", f"blur:{sigma}", CorruptionOp("circulant_blur", sigma=sigma),
               THEORY_POPULATION_THRESHOLD, 0.0)
    for sigma in THEORY_SIGMAS:
        record("empirical", f"blur:{sigma}", CorruptionOp("circulant_blur", sigma=sigma),
               THEORY_EMPIRICAL_THRESHOLD, cfg.theory_eps)

    outdir = Path(cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)
    csv_path = outdir / "theory.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mode", "corruption", "error", "threshold", "passed"])
        for row in rows:
            writer.writerow([row["mode"], row["corruption"], repr(row["error"]),
                             repr(row["threshold"]), row["passed"]])
    return {
        "rows": rows,
        "passed": all(r["passed"] for r in rows),
        "csv_path": str(csv_path),
        "ms": (time.perf_counter() - t0) * 1e3,
    }
