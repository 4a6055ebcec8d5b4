"""Experiment orchestration: config loading, tuning, the full pipeline and reports."""
from __future__ import annotations

import csv
import json
import logging
import math
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import train as T
from .data import HEAT_COLUMNS, HeatGenConfig, generate_heat, load_csv, prepare
from .explain import explain, kmeans_background, mean_abs_ranking, read_shap_summary, write_shap_summary, write_shap_values
from .fnn import FnnConfig, FnnModel, fnn_forward, fnn_train
from .kan import KanNetwork, forward
from .metrics import METRIC_FIELDS, metrics_table, read_metrics_csv, write_metrics_csv
from .symbolic import SymbolicModel, snap_network

log = logging.getLogger(__name__)

SPLINE_WEIGHT = 0.2
SYMBOLIC_WEIGHT = 0.8
BUILTIN_HEAT = "builtin:heat"
MODELS = ("KAN", "FNN")
TOP_FEATURES = 5

# artifact names inside a bundle
KAN_CKPT = "kan_checkpoint.json"
SYMBOLIC_CKPT = "symbolic.json"
FNN_CKPT = "fnn_checkpoint.json"
EQUATIONS = "equations.txt"
METRICS = "metrics.csv"
MANIFEST = "manifest.json"
FAILED = "FAILED"


def shap_files(model: str) -> tuple[str, str]:
    tag = model.lower()
    return f"shap_values_{tag}.csv", f"shap_summary_{tag}.csv"


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


class TuneError(RuntimeError):
    pass


class ReportError(RuntimeError):
    pass


# -- configuration --------------------------------------------------------

# default search space: every Table 2 choice
DEFAULT_SPACE = {
    "depth": list(T.DEPTHS),
    "grid": list(T.GRIDS),
    "k": list(T.ORDERS),
    "steps": list(T.STEPS),
    "lr1": list(T.LEARNING_RATES),
    "lr2": list(T.LEARNING_RATES),
    "reg_metric": list(T.REG_METRICS),
    "lam": [0.0, T.LAMBDA_MAX],
    "lam_entropy": [0.0, T.LAMBDA_ENTROPY_MAX],
}
CONTINUOUS = ("lam", "lam_entropy")


@dataclass
class ExperimentConfig:
    dataset: str = BUILTIN_HEAT  # csv path or builtin:heat
    input_cols: list[str] = field(default_factory=list)
    output_cols: list[str] = field(default_factory=list)
    n_samples: int = 1000
    heat: dict = field(default_factory=dict)  # HeatGenConfig overrides
    kan: dict | None = None
    search: dict | None = None
    fnn: dict = field(default_factory=dict)
    seed: int = 42
    output_dir: str = "bundle"
    explain: bool = True
    explain_samples: int | None = None  # cap on test rows explained; None = all
    simplicity: float = 0.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.dataset != BUILTIN_HEAT:
            if not self.input_cols or not self.output_cols:
                raise ConfigError("csv datasets need input_cols and output_cols")
        if not 0.0 <= self.simplicity <= 1.0:
            raise ConfigError("simplicity must lie in [0, 1]")
        if self.explain_samples is not None and self.explain_samples < 1:
            raise ConfigError("explain_samples must be positive")
        try:
            self.kan_params()
            self.fnn_config()
            if self.dataset == BUILTIN_HEAT:
                self.heat_config().validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        self.search_space()

    def kan_params(self) -> T.KanHyperParams:
        hp = T.KanHyperParams(**(self.kan or {}))
        hp.seed = self.seed
        return hp

    def fnn_config(self) -> FnnConfig:
        cfg = FnnConfig(**self.fnn)
        cfg.seed = self.seed
        return cfg

    def heat_config(self) -> HeatGenConfig:
        extra = {k: tuple(v) if isinstance(v, list) else v for k, v in self.heat.items()}
        return HeatGenConfig(n_samples=self.n_samples, seed=self.seed, **extra)

    def search_space(self) -> dict:
        space = dict(DEFAULT_SPACE)
        for key, values in (self.search or {}).items():
            if key not in space:
                raise ConfigError(f"unknown search key {key!r}")
            values = list(values) if isinstance(values, (list, tuple)) else [values]
            if key in CONTINUOUS:
                lo, hi = (values[0], values[0]) if len(values) == 1 else values
                limit = T.LAMBDA_MAX if key == "lam" else T.LAMBDA_ENTROPY_MAX
                if not 0 <= lo <= hi <= limit:
                    raise ConfigError(f"{key} bounds [{lo}, {hi}] outside [0, {limit}]")
                values = [lo, hi]
            else:
                allowed = DEFAULT_SPACE[key]
                if key in ("lr1", "lr2"):
                    bad = [v for v in values if not 0.5 <= v <= 2.0]
                else:
                    bad = [v for v in values if v not in allowed]
                if bad or not values:
                    raise ConfigError(f"{key} choices {bad or values} outside the allowed ranges")
            space[key] = values
        return space

    def to_dict(self) -> dict:
        return asdict(self)


def load_config(path) -> ExperimentConfig:
    """Read a JSON config; relative paths resolve against the config's directory."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - set(ExperimentConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    base = path.resolve().parent
    for key in ("output_dir", "dataset"):
        if key in raw and raw[key] != BUILTIN_HEAT and not Path(raw[key]).is_absolute():
            raw[key] = str(base / raw[key])
    if "output_dir" not in raw:
        raw["output_dir"] = str(base / "bundle")
    return ExperimentConfig(**raw)


def load_dataset(cfg: ExperimentConfig):
    """Returns the prepared dataset and the number of heat-generator resamples."""
    if cfg.dataset == BUILTIN_HEAT:
        table = generate_heat(cfg.heat_config())
        data = prepare(table.inputs, table.output, HEAT_COLUMNS[:-1], HEAT_COLUMNS[-1:], cfg.seed)
        return data, table.resamples
    return load_csv(cfg.dataset, cfg.input_cols, cfg.output_cols, cfg.seed), 0


# -- tuning ---------------------------------------------------------------


def objective(spline_r2: float, symbolic_r2: float) -> float:
    return SPLINE_WEIGHT * spline_r2 + SYMBOLIC_WEIGHT * symbolic_r2


@dataclass
class TuneTrial:
    index: int
    params: dict
    spline_r2: float = math.nan
    symbolic_r2: float = math.nan
    objective: float = math.nan
    status: str = "ok"
    reason: str = ""


def sample_params(space: dict, rng) -> dict:
    out = {}
    for key, values in space.items():
        if key in CONTINUOUS:
            out[key] = float(rng.uniform(values[0], values[1]))
        else:
            v = values[int(rng.integers(len(values)))]
            out[key] = v.item() if hasattr(v, "item") else v
    return out


def run_trial(data, hp: T.KanHyperParams, simplicity: float = 0.0) -> tuple[float, float]:
    """Mean test R2 of the spline network and of its snapped copy."""
    net, report = T.train_two_stage(data, hp)
    sym = snap_network(net, data.X_train, simplicity, data.feature_labels, data.output_labels,
                       data.X_test, data.Y_test)
    return _mean_defined(report.spline_r2), _mean_defined(sym.r2)


def _mean_defined(vals) -> float:
    good = [v for v in vals if np.isfinite(v)]
    if len(good) < len(vals):
        log.warning("excluding %d output(s) with undefined R2 from the mean", len(vals) - len(good))
    return float(np.mean(good)) if good else math.nan


def tune(cfg: ExperimentConfig, max_evals: int = 200, log_path=None, data=None):
    """Seeded random search; returns (best trial, all trials)."""
    if max_evals < 1:
        raise ConfigError("max_evals must be >= 1")
    space = cfg.search_space()
    if data is None:
        data, _ = load_dataset(cfg)
    rng = np.random.default_rng(cfg.seed)
    trials = []
    fh = open(log_path, "w") if log_path else None
    try:
        for idx in range(max_evals):
            params = sample_params(space, rng)
            trial = TuneTrial(idx, params)
            try:
                hp = T.KanHyperParams(**params, seed=cfg.seed + idx)
                trial.spline_r2, trial.symbolic_r2 = run_trial(data, hp, cfg.simplicity)
                trial.objective = objective(trial.spline_r2, trial.symbolic_r2)
                if not np.isfinite(trial.objective):
                    trial.status, trial.reason = "skipped", "non-finite objective"
            except Exception as exc:  # failing combinations are skipped, not fatal
                trial.status, trial.reason = "skipped", f"{type(exc).__name__}: {exc}"
            trials.append(trial)
            if fh:
                fh.write(json.dumps(asdict(trial)) + "\n")
                fh.flush()
    finally:
        if fh:
            fh.close()
    ok = [t for t in trials if t.status == "ok"]
    if not ok:
        raise TuneError("every trial was skipped: " + "; ".join(t.reason for t in trials))
    best = max(ok, key=lambda t: (t.objective, -t.index))
    return best, trials


# -- pipeline -------------------------------------------------------------


def _versions() -> dict:
    from importlib.metadata import PackageNotFoundError, version
    try:
        pkg = version("artifact")
    except PackageNotFoundError:
        pkg = "unknown"
    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__, "package": pkg}


def _metrics(data, kan_net, sym, fnn_model):
    Y = data.unscale_y(data.Y_test)
    return {
        "KAN": metrics_table(Y, data.unscale_y(sym.predict(data.X_test)), data.output_labels),
        "KAN-spline": metrics_table(Y, data.unscale_y(forward(kan_net, data.X_test)), data.output_labels),
        "FNN": metrics_table(Y, data.unscale_y(fnn_forward(fnn_model, data.X_test)), data.output_labels),
    }


def _explain(cfg, data, sym, fnn_model, out: Path) -> dict:
    bg = kmeans_background(data.X_train, seed=cfg.seed)
    X = data.X_test if cfg.explain_samples is None else data.X_test[: cfg.explain_samples]
    rankings = {}
    for name, f in (("KAN", sym.predict), ("FNN", lambda Z: fnn_forward(fnn_model, Z))):
        rep = explain(f, X, bg, data.feature_labels, data.output_labels, seed=cfg.seed)
        values, summary = shap_files(name)
        write_shap_values(rep, out / values)
        write_shap_summary(rep, out / summary)
        rankings[name] = mean_abs_ranking(rep)
    return {"background_size": int(bg.points.shape[0]), "explained_samples": int(X.shape[0]), "rankings": rankings}


class _Stages:
    """Runs named stages, timing each and wrapping failures in StageError."""

    def __init__(self):
        self.timings: dict[str, float] = {}

    def run(self, name, fn, *args, **kwargs):
        t0 = time.perf_counter()
        try:
            return fn(*args, **kwargs)
        except Exception as exc:
            raise StageError(name, exc) from exc
        finally:
            self.timings[name] = time.perf_counter() - t0


def run_pipeline(cfg: ExperimentConfig) -> Path:
    """Data, KAN fit/prune/refit, snapping, FNN, metrics and SHAP; returns the bundle directory."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / FAILED).unlink(missing_ok=True)
    stages = _Stages()
    manifest = {"config": cfg.to_dict(), "seed": cfg.seed, "versions": _versions()}
    try:
        data, resamples = stages.run("data", load_dataset, cfg)
        hp = cfg.kan_params()
        net, kan_report = stages.run("kan_train", T.train_two_stage, data, hp)
        net.save(out / KAN_CKPT)
        sym = stages.run("symbolic", snap_network, net, data.X_train, cfg.simplicity, data.feature_labels,
                         data.output_labels, data.X_test, data.Y_test)
        (out / SYMBOLIC_CKPT).write_text(json.dumps(sym.to_dict(), indent=1))
        sym.write_equations(out / EQUATIONS)
        fnn_model, fnn_report = stages.run("fnn_train", fnn_train, data, cfg.fnn_config())
        fnn_model.save(out / FNN_CKPT)
        rows = stages.run("metrics", _metrics, data, net, sym, fnn_model)
        write_metrics_csv(out / METRICS, rows)
        _, clamps = sym.predict(data.X_test, return_clamps=True)
        manifest.update({
            "heat_resamples": resamples,
            "symbolic_clamps": int(clamps),
            "kan": {"spline_r2": kan_report.spline_r2, "symbolic_r2": sym.r2, "pruned_edges": kan_report.pruned_edges,
                    "pruned_nodes": kan_report.pruned_nodes, "width": net.width, "warnings": kan_report.warnings},
            "fnn": {"test_r2": fnn_report.test_r2, "final_loss": fnn_report.loss_trace[-1] if fnn_report.loss_trace else None},
        })
        if cfg.explain:
            manifest["explain"] = stages.run("explain", _explain, cfg, data, sym, fnn_model, out)
    except StageError as exc:
        (out / FAILED).write_text(f"{exc.stage}\n{exc.cause}\n")
        manifest["failed_stage"] = exc.stage
        raise
    finally:
        manifest["timings"] = stages.timings
        (out / MANIFEST).write_text(json.dumps(manifest, indent=1, default=float))
    return out


def load_bundle(bundle) -> tuple[ExperimentConfig, object, KanNetwork, SymbolicModel, FnnModel]:
    bundle = Path(bundle)
    missing = [n for n in (MANIFEST, KAN_CKPT, SYMBOLIC_CKPT, FNN_CKPT) if not (bundle / n).exists()]
    if missing:
        raise ReportError(f"bundle {bundle} is missing: {', '.join(missing)}")
    cfg = ExperimentConfig(**json.loads((bundle / MANIFEST).read_text())["config"])
    data, _ = load_dataset(cfg)
    sym = SymbolicModel.from_dict(json.loads((bundle / SYMBOLIC_CKPT).read_text()))
    return cfg, data, KanNetwork.load(bundle / KAN_CKPT), sym, FnnModel.load(bundle / FNN_CKPT)


def evaluate_bundle(bundle) -> dict:
    """Recompute test metrics from a bundle's checkpoints."""
    _, data, net, sym, fnn_model = load_bundle(bundle)
    return _metrics(data, net, sym, fnn_model)


def explain_bundle(bundle) -> dict:
    """(Re)write a bundle's SHAP files from its checkpoints."""
    cfg, data, _, sym, fnn_model = load_bundle(bundle)
    return _explain(cfg, data, sym, fnn_model, Path(bundle))


# -- reports --------------------------------------------------------------


@dataclass
class Report:
    rows: list[dict]
    missing: list[str]
    text: str = ""


def report(bundle, against=None, write: bool = True) -> Report:
    """KAN vs FNN metrics side by side with each model's top SHAP features."""
    bundle = Path(bundle)
    needed = [METRICS] + [f for m in MODELS for f in shap_files(m)]
    missing = [n for n in needed if not (bundle / n).exists()]
    if len(missing) == len(needed):
        raise ReportError(f"no artifacts in {bundle}; missing: {', '.join(missing)}")
    rows = []
    if (bundle / METRICS).exists():
        rows = [r for r in read_metrics_csv(bundle / METRICS) if r["model"] in MODELS]
    for r in rows:
        path = bundle / shap_files(r["model"])[1]
        r["top_features"] = ""
        if path.exists():
            ranked = sorted(read_shap_summary(path).get(r["output"], []), key=lambda t: -t[1])
            r["top_features"] = ";".join(name for name, _ in ranked[:TOP_FEATURES])
    if against is not None:
        other = {(r["output"], r["model"]): r for r in read_metrics_csv(Path(against) / METRICS)}
        for r in rows:
            ref = other.get((r["output"], r["model"]))
            for f in METRIC_FIELDS:
                r[f"d{f}"] = r[f] - ref[f] if ref else math.nan
    rows.sort(key=lambda r: (r["output"], MODELS.index(r["model"])))
    rep = Report(rows, missing, _format(rows, missing, against is not None))
    if write and rows:
        name = "report_diff.csv" if against is not None else "report.csv"
        with open(bundle / name, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    return rep


def _format(rows, missing, diff: bool) -> str:
    fields = [f"d{f}" for f in METRIC_FIELDS] if diff else list(METRIC_FIELDS)
    lines = ["  ".join(["output".ljust(10), "model".ljust(6)] + [f.rjust(12) for f in fields] + ["top features"])]
    for r in rows:
        cells = [str(r["output"]).ljust(10), r["model"].ljust(6)] + [f"{r[f]:12.5g}" for f in fields]
        lines.append("  ".join(cells + [r.get("top_features", "")]))
    if missing:
        lines.append("missing: " + ", ".join(missing))
    return "\n".join(lines) + "\n"
