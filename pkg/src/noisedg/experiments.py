"""Experiment drivers: grid sweeps, theory checks, and table writers.

Every run produces raw.csv (one row per grid point x seed x objective),
summary.csv (per-cell means and standard errors over seeds), and
manifest.json (config echo; no timestamps). All floats are written with
repr so reruns are byte-identical and summaries can be recomputed exactly
from the raw table. Seeds for data, training, and projections are derived
from (seed, role) only, never from the grid index, so every grid point of
a given seed reuses the same base draw: sweeps compare grid values on
common random numbers, and rows are likewise paired across objectives and
across the projection flag. For a noise grid this pairing is strict in a
useful sense: the flip mask at a lower eta is a subset of the mask at a
higher eta, so moving along the grid only adds flips.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    estimate_memorization_cost,
    group_errors,
    theorem_gap_check,
)
from .datagen import (
    EnvironmentSpec,
    FeatureSpec,
    LabeledDataset,
    apply_projection,
    derive_seed,
    export_dataset,
    make_cmnist_analogue,
    random_orthogonal,
    sample_environment,
    sample_population,
    sample_test_environment,
)
from .errors import ConfigError, TrainingDivergedError
from .model import BlockMask, save_model
from .objectives import ObjectiveConfig, irm_coefficient
from .trainer import TrainConfig, fit_restricted, train

EXPERIMENT_KINDS = (
    "noise_sweep",
    "ndata_sweep",
    "norm_sweep",
    "boundary_export",
    "coefficient_curves",
    "cmnist_analogue",
    "projection_check",
)

SWEEP_COLUMNS = [
    "experiment", "grid_name", "grid_value", "seed", "objective", "projected",
    "avg_err", "wg_err", "err_g1", "err_g2", "err_g3", "err_g4", "test_acc",
    "train_err", "memo_acc",
    "norm_inv", "norm_spu", "norm_nui", "norm_total",
    "lhs", "rhs", "memo_cost_C", "condition_holds",
    "n_tilde_inv", "n_tilde_spu",
    "inv_fit_norm", "spu_fit_norm", "full_norm_inv_ge_spu",
]

SUMMARY_COLUMNS = [
    "experiment", "grid_name", "grid_value", "objective", "projected",
    "metric", "mean", "stderr", "n",
]


# ---------------------------------------------------------------------------
# config

def _parse_dataclass(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from exc


def _parse_train(d: dict, where: str) -> TrainConfig:
    d = dict(d)
    if "block_mask" in d:
        from .model import BlockMask

        d["block_mask"] = _parse_dataclass(BlockMask, d["block_mask"], f"{where}.block_mask")
    return _parse_dataclass(TrainConfig, d, where)


@dataclass(frozen=True)
class ExperimentConfig:
    """Flat config for every experiment kind; kind-specific fields are
    validated in validate(). Loaded from / dumped to plain JSON."""

    experiment: str
    feature_spec: FeatureSpec
    train: TrainConfig
    objectives: tuple[ObjectiveConfig, ...] = (ObjectiveConfig(kind="ERM"),)
    seeds: tuple[int, ...] = (0,)
    # environment structure for single-training-environment sweeps
    gamma: float = 0.99
    n_train: int = 1000
    gamma_test: float = 0.5
    n_test: int = 2000
    # grids
    etas: tuple[float, ...] | None = None
    ns: tuple[int, ...] | None = None
    eta: float | None = None
    # multi-environment analogue
    gammas: tuple[float, ...] | None = None
    n_per_env: int = 500
    # norm sweep extras
    memo_k_values: tuple[int, ...] = (4, 8, 16, 32)
    memo_trials: int = 3
    restricted_l2: float = 1e-6
    # boundary export
    grid_x: int = 61
    grid_y: int = 61
    grid_range: float = 3.0
    # coefficient curves
    lambdas: tuple[float, ...] | None = None
    phi_max: float = 8.0
    phi_points: int = 321

    def validate(self) -> None:
        if self.experiment not in EXPERIMENT_KINDS:
            raise ConfigError(f"experiment must be one of {EXPERIMENT_KINDS}")
        if len(self.seeds) < 1 or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be nonempty and distinct")
        if not self.objectives:
            raise ConfigError("need at least one objective")
        needs_etas = self.experiment in (
            "noise_sweep", "norm_sweep", "boundary_export", "projection_check",
            "cmnist_analogue",
        )
        if needs_etas and not self.etas:
            raise ConfigError(f"{self.experiment} needs a nonempty etas grid")
        if self.etas and any(not 0.0 <= e < 0.5 for e in self.etas):
            raise ConfigError("etas must lie in [0, 0.5)")
        if self.eta is not None and not 0.0 <= self.eta < 0.5:
            raise ConfigError("eta must lie in [0, 0.5)")
        if self.experiment == "ndata_sweep":
            if not self.ns:
                raise ConfigError("ndata_sweep needs a nonempty ns grid")
            if list(self.ns) != sorted(self.ns):
                raise ConfigError("ns grid must be ascending")
            if self.eta is None:
                raise ConfigError("ndata_sweep needs a fixed eta")
        if self.experiment == "cmnist_analogue":
            if not self.gammas or len(self.gammas) < 2:
                raise ConfigError("cmnist_analogue needs at least two training gammas")
            if any(not 0.5 < g <= 1.0 for g in self.gammas):
                raise ConfigError("training gammas must lie in (0.5, 1]")
            kinds = {o.kind for o in self.objectives}
            required = {"ERM", "IRMv1", "VREx", "GroupDRO", "Mixup"}
            if not required <= kinds:
                missing = sorted(required - kinds)
                raise ConfigError(f"cmnist_analogue objectives missing {missing}")
        if not 0.0 <= self.gamma_test <= 1.0:
            raise ConfigError("gamma_test must lie in [0, 1]")
        # boundary pictures may turn the correlation off entirely; the other
        # single-environment sweeps keep the training-range guard
        if self.experiment == "boundary_export":
            if not 0.0 <= self.gamma <= 1.0:
                raise ConfigError("gamma must lie in [0, 1]")
        elif self.experiment in ("noise_sweep", "ndata_sweep", "norm_sweep",
                                 "projection_check"):
            if not 0.5 < self.gamma <= 1.0:
                raise ConfigError("gamma must lie in (0.5, 1]")
        if self.experiment == "coefficient_curves":
            if not self.lambdas:
                raise ConfigError("coefficient_curves needs lambdas")
            if self.phi_points < 3 or self.phi_max <= 0:
                raise ConfigError("need phi_points >= 3 and phi_max > 0")
        if self.experiment == "boundary_export":
            if self.feature_spec.d_inv != 1 or self.feature_spec.d_spu != 1:
                raise ConfigError("boundary_export needs d_inv = d_spu = 1")
            if self.grid_x < 2 or self.grid_y < 2:
                raise ConfigError("boundary grid must be at least 2 x 2")
        if self.experiment == "norm_sweep":
            if len(self.objectives) != 1 or self.objectives[0].kind != "ERM":
                raise ConfigError("norm_sweep runs ERM only")

    def with_seed_offset(self, offset: int) -> "ExperimentConfig":
        if offset == 0:
            return self
        return dataclasses.replace(self, seeds=tuple(s + offset for s in self.seeds))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        d = dict(d)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "experiment" not in d or "feature_spec" not in d or "train" not in d:
            raise ConfigError("config needs experiment, feature_spec, and train")
        d["feature_spec"] = _parse_dataclass(FeatureSpec, d["feature_spec"], "feature_spec")
        d["train"] = _parse_train(d["train"], "train")
        if "objectives" in d:
            if not isinstance(d["objectives"], list):
                raise ConfigError("objectives must be a list")
            d["objectives"] = tuple(
                _parse_dataclass(ObjectiveConfig, o, f"objectives[{i}]")
                for i, o in enumerate(d["objectives"])
            )
        for key in ("seeds", "etas", "ns", "gammas", "memo_k_values", "lambdas"):
            if d.get(key) is not None:
                if not isinstance(d[key], list):
                    raise ConfigError(f"{key} must be a list")
                d[key] = tuple(d[key])
        try:
            cfg = cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, path: str | Path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(raw)


# ---------------------------------------------------------------------------
# result container and writers

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        f = float(v)
        return "" if not math.isfinite(f) else repr(f)
    return str(v)


@dataclass
class SweepResult:
    """All tables of one experiment run, ready to be written out."""

    experiment: str
    columns: list[str]
    rows: list[list]
    summary_columns: list[str]
    summary_rows: list[list]
    manifest: dict
    extra_tables: dict[str, tuple[list[str], list[list]]] = field(default_factory=dict)

    def write_outputs(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "raw.csv", self.columns, self.rows)
        _write_csv(out / "summary.csv", self.summary_columns, self.summary_rows)
        manifest = dict(self.manifest)
        manifest["outputs"] = sorted(
            ["raw.csv", "summary.csv", "manifest.json", *self.extra_tables]
        )
        (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2))
        for name, (header, rows) in self.extra_tables.items():
            _write_csv(out / name, header, rows)
        return out


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


SUMMARY_METRICS = [
    "avg_err", "wg_err", "err_g1", "err_g2", "err_g3", "err_g4", "test_acc",
    "train_err", "memo_acc", "norm_inv", "norm_spu", "norm_nui", "norm_total",
    "lhs", "rhs", "memo_cost_C", "condition_holds",
    "inv_fit_norm", "spu_fit_norm", "full_norm_inv_ge_spu",
]


def summarize_rows(experiment: str, columns: list[str], rows: list[list]) -> list[list]:
    """Per (grid value, objective, projected) means and standard errors over
    seeds, in deterministic first-appearance order."""
    ci = {c: i for i, c in enumerate(columns)}
    groups: dict[tuple, list[list]] = {}
    order: list[tuple] = []
    for row in rows:
        key = (row[ci["grid_name"]], row[ci["grid_value"]],
               row[ci["objective"]], row[ci["projected"]])
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(row)
    out = []
    for key in order:
        grid_name, grid_value, objective, projected = key
        for metric in SUMMARY_METRICS:
            if metric not in ci:
                continue
            vals = []
            for row in groups[key]:
                v = row[ci[metric]]
                if v is None:
                    continue
                f = float(v)
                if math.isfinite(f):
                    vals.append(f)
            if not vals:
                continue
            arr = np.asarray(vals)
            mean = float(arr.mean())
            stderr = float(arr.std(ddof=1) / np.sqrt(arr.size)) if arr.size > 1 else None
            out.append([experiment, grid_name, grid_value, objective, projected,
                        metric, mean, stderr, arr.size])
    return out


def _manifest(cfg: ExperimentConfig, columns: list[str], n_rows: int) -> dict:
    return {
        "experiment": cfg.experiment,
        "tool": {"name": "noisedg", "version": __version__},
        "config": cfg.to_dict(),
        "columns": columns,
        "n_rows": n_rows,
        "seeds": list(cfg.seeds),
    }


# ---------------------------------------------------------------------------
# shared per-run evaluation

def _objective_tag(o: ObjectiveConfig) -> str:
    return o.kind


def _eval_run(
    train_envs: list[LabeledDataset],
    test_ds: LabeledDataset,
    obj_cfg: ObjectiveConfig,
    tc: TrainConfig,
):
    """Train one model and collect the standard metric block."""
    model, hist = train(train_envs, obj_cfg, tc)
    rep = group_errors(model, test_ds)
    metrics = {
        "avg_err": rep.average_error,
        "wg_err": rep.worst_group_error,
        "err_g1": rep.errors.get(1),
        "err_g2": rep.errors.get(2),
        "err_g3": rep.errors.get(3),
        "err_g4": rep.errors.get(4),
        "test_acc": 1.0 - rep.average_error,
        "train_err": hist.train_err[-1],
        "memo_acc": hist.memo_acc[-1],
    }
    if not train_envs[0].projected:
        norms = model.block_norms()
        metrics.update(
            norm_inv=norms["inv"], norm_spu=norms["spu"], norm_nui=norms["nui"],
            norm_total=float(np.linalg.norm(model.flat())),
        )
    return model, metrics


def _blank_row(experiment: str, grid_name: str, grid_value, seed: int,
               objective: str, projected: bool) -> dict:
    row = {c: None for c in SWEEP_COLUMNS}
    row.update(experiment=experiment, grid_name=grid_name, grid_value=grid_value,
               seed=seed, objective=objective, projected=projected)
    return row


def _row_list(row: dict) -> list:
    return [row[c] for c in SWEEP_COLUMNS]


def _train_seed(tc: TrainConfig, seed: int) -> TrainConfig:
    return dataclasses.replace(tc, seed=seed)


def _at_point(exc: TrainingDivergedError, **point) -> TrainingDivergedError:
    where = ", ".join(f"{k}={v}" for k, v in point.items())
    return TrainingDivergedError(f"{exc} [at {where}]")


# ---------------------------------------------------------------------------
# experiment kinds

def run_noise_sweep(cfg: ExperimentConfig) -> SweepResult:
    """Worst-group degradation as the label-noise rate grows, on a single
    training environment with a group-balanced noise-free test set."""
    rows = []
    for eta in cfg.etas:
        for seed in cfg.seeds:
            env = EnvironmentSpec(n=cfg.n_train, gamma=cfg.gamma, eta=eta, env_id="e0")
            train_ds = sample_environment(cfg.feature_spec, env, derive_seed(seed, 0))
            test_ds = sample_test_environment(
                cfg.feature_spec, cfg.n_test, cfg.gamma_test, derive_seed(seed, 1)
            )
            for obj_cfg in cfg.objectives:
                tc = _train_seed(cfg.train, derive_seed(seed, 2))
                try:
                    _, metrics = _eval_run([train_ds], test_ds, obj_cfg, tc)
                except TrainingDivergedError as exc:
                    raise _at_point(exc, eta=eta, seed=seed, objective=obj_cfg.kind) from exc
                row = _blank_row(cfg.experiment, "eta", eta, seed,
                                 _objective_tag(obj_cfg), False)
                row.update(metrics)
                rows.append(_row_list(row))
    summary = summarize_rows(cfg.experiment, SWEEP_COLUMNS, rows)
    return SweepResult(cfg.experiment, SWEEP_COLUMNS, rows, SUMMARY_COLUMNS, summary,
                       _manifest(cfg, SWEEP_COLUMNS, len(rows)))


def run_ndata_sweep(cfg: ExperimentConfig) -> SweepResult:
    """Worst-group error as the training-set size grows at a fixed noise
    rate; more data counteracts the noise-driven spurious reliance."""
    rows = []
    for n in cfg.ns:
        for seed in cfg.seeds:
            env = EnvironmentSpec(n=int(n), gamma=cfg.gamma, eta=cfg.eta, env_id="e0")
            train_ds = sample_environment(cfg.feature_spec, env, derive_seed(seed, 0))
            test_ds = sample_test_environment(
                cfg.feature_spec, cfg.n_test, cfg.gamma_test, derive_seed(seed, 1)
            )
            for obj_cfg in cfg.objectives:
                tc = _train_seed(cfg.train, derive_seed(seed, 2))
                try:
                    _, metrics = _eval_run([train_ds], test_ds, obj_cfg, tc)
                except TrainingDivergedError as exc:
                    raise _at_point(exc, n=int(n), seed=seed, objective=obj_cfg.kind) from exc
                row = _blank_row(cfg.experiment, "n", int(n), seed,
                                 _objective_tag(obj_cfg), False)
                row.update(metrics)
                rows.append(_row_list(row))
    summary = summarize_rows(cfg.experiment, SWEEP_COLUMNS, rows)
    return SweepResult(cfg.experiment, SWEEP_COLUMNS, rows, SUMMARY_COLUMNS, summary,
                       _manifest(cfg, SWEEP_COLUMNS, len(rows)))


def run_norm_sweep(cfg: ExperimentConfig) -> SweepResult:
    """Restricted-fit norm accounting across noise rates.

    At each grid point the unrestricted model and the two single-signal-block
    fits are trained on the same data, and the norm-gap condition is scored.
    The per-sample memorization cost is estimated once per sweep (it depends
    on the feature geometry and the optimizer, not on the label draw) with
    the same near-unregularized training budget as the restricted fits.
    """
    restricted_cfg = dataclasses.replace(cfg.train, l2_reg=cfg.restricted_l2)
    memo_cost = estimate_memorization_cost(
        cfg.feature_spec, cfg.memo_k_values, cfg.memo_trials,
        restricted_cfg, derive_seed(cfg.seeds[0], 101),
    )
    inv_mask = BlockMask(inv=True, spu=False, nui=True)
    spu_mask = BlockMask(inv=False, spu=True, nui=True)
    rows = []
    for eta in cfg.etas:
        for seed in cfg.seeds:
            env = EnvironmentSpec(n=cfg.n_train, gamma=cfg.gamma, eta=eta, env_id="e0")
            train_ds = sample_environment(cfg.feature_spec, env, derive_seed(seed, 0))
            test_ds = sample_test_environment(
                cfg.feature_spec, cfg.n_test, cfg.gamma_test, derive_seed(seed, 1)
            )
            obj_cfg = cfg.objectives[0]
            tc = _train_seed(cfg.train, derive_seed(seed, 2))
            try:
                _, metrics = _eval_run([train_ds], test_ds, obj_cfg, tc)
                rcfg = dataclasses.replace(restricted_cfg, seed=derive_seed(seed, 3))
                w_inv_model = fit_restricted(train_ds, inv_mask, rcfg)
                w_spu_model = fit_restricted(train_ds, spu_mask, rcfg)
            except TrainingDivergedError as exc:
                raise _at_point(exc, eta=eta, seed=seed, objective=obj_cfg.kind) from exc
            gap = theorem_gap_check(
                w_inv_model, w_spu_model, train_ds.n, cfg.gamma, eta, memo_cost
            )
            row = _blank_row(cfg.experiment, "eta", eta, seed,
                             _objective_tag(obj_cfg), False)
            row.update(metrics)
            row.update(
                lhs=gap.lhs, rhs=gap.rhs, memo_cost_C=gap.memo_cost_C,
                condition_holds=gap.condition_holds,
                n_tilde_inv=gap.n_tilde_inv, n_tilde_spu=gap.n_tilde_spu,
                inv_fit_norm=gap.inv_fit_norm, spu_fit_norm=gap.spu_fit_norm,
                full_norm_inv_ge_spu=gap.full_norm_inv_ge_spu,
            )
            rows.append(_row_list(row))
    summary = summarize_rows(cfg.experiment, SWEEP_COLUMNS, rows)
    return SweepResult(cfg.experiment, SWEEP_COLUMNS, rows, SUMMARY_COLUMNS, summary,
                       _manifest(cfg, SWEEP_COLUMNS, len(rows)))


def run_projection_check(cfg: ExperimentConfig) -> SweepResult:
    """Paired runs with and without a random orthogonal feature rotation;
    the learner never uses block structure, so paired metrics must agree up
    to floating-point noise."""
    rows = []
    for eta in cfg.etas:
        for seed in cfg.seeds:
            env = EnvironmentSpec(n=cfg.n_train, gamma=cfg.gamma, eta=eta, env_id="e0")
            train_ds = sample_environment(cfg.feature_spec, env, derive_seed(seed, 0))
            test_ds = sample_test_environment(
                cfg.feature_spec, cfg.n_test, cfg.gamma_test, derive_seed(seed, 1)
            )
            proj = random_orthogonal(cfg.feature_spec.dim, derive_seed(seed, 3))
            train_p = apply_projection(train_ds, proj)
            test_p = apply_projection(test_ds, proj)
            for obj_cfg in cfg.objectives:
                tc = _train_seed(cfg.train, derive_seed(seed, 2))
                for projected, tr, te in ((False, train_ds, test_ds), (True, train_p, test_p)):
                    try:
                        _, metrics = _eval_run([tr], te, obj_cfg, tc)
                    except TrainingDivergedError as exc:
                        raise _at_point(exc, eta=eta, seed=seed,
                                        objective=obj_cfg.kind,
                                        projected=projected) from exc
                    row = _blank_row(cfg.experiment, "eta", eta, seed,
                                     _objective_tag(obj_cfg), projected)
                    row.update(metrics)
                    rows.append(_row_list(row))
    summary = summarize_rows(cfg.experiment, SWEEP_COLUMNS, rows)
    return SweepResult(cfg.experiment, SWEEP_COLUMNS, rows, SUMMARY_COLUMNS, summary,
                       _manifest(cfg, SWEEP_COLUMNS, len(rows)))


def run_cmnist_analogue(cfg: ExperimentConfig) -> SweepResult:
    """Two-training-environment comparison of all objectives, evaluated on a
    correlation-reversed noise-free test set."""
    rows = []
    for eta in cfg.etas:
        for seed in cfg.seeds:
            datasets = make_cmnist_analogue(
                cfg.feature_spec, cfg.n_per_env, cfg.gammas, cfg.gamma_test,
                eta, derive_seed(seed, 0), n_test=cfg.n_test,
            )
            train_envs, test_ds = datasets[:-1], datasets[-1]
            for obj_cfg in cfg.objectives:
                tc = _train_seed(cfg.train, derive_seed(seed, 2))
                try:
                    _, metrics = _eval_run(train_envs, test_ds, obj_cfg, tc)
                except TrainingDivergedError as exc:
                    raise _at_point(exc, eta=eta, seed=seed, objective=obj_cfg.kind) from exc
                row = _blank_row(cfg.experiment, "eta", eta, seed,
                                 _objective_tag(obj_cfg), False)
                row.update(metrics)
                rows.append(_row_list(row))
    summary = summarize_rows(cfg.experiment, SWEEP_COLUMNS, rows)
    return SweepResult(cfg.experiment, SWEEP_COLUMNS, rows, SUMMARY_COLUMNS, summary,
                       _manifest(cfg, SWEEP_COLUMNS, len(rows)))


def run_boundary_export(cfg: ExperimentConfig) -> SweepResult:
    """Decision-boundary geometry in the 2-d signal plane (one invariant and
    one spurious coordinate, nuisance held at zero). Exports a logit grid and
    the training points for plotting; the boundary slope magnitude
    |w_spu / w_inv| is recoverable from the norm columns."""
    rows = []
    grid_rows = []
    point_rows = []
    xs = np.linspace(-cfg.grid_range, cfg.grid_range, cfg.grid_x)
    ys = np.linspace(-cfg.grid_range, cfg.grid_range, cfg.grid_y)
    for eta in cfg.etas:
        for seed in cfg.seeds:
            # sample_population here: the boundary picture is also drawn at
            # gamma = 0.5, outside the training-range guard
            train_ds = sample_population(
                cfg.feature_spec, cfg.n_train, cfg.gamma, eta, "e0",
                derive_seed(seed, 0),
            )
            test_ds = sample_test_environment(
                cfg.feature_spec, cfg.n_test, cfg.gamma_test, derive_seed(seed, 1)
            )
            for obj_cfg in cfg.objectives:
                tc = _train_seed(cfg.train, derive_seed(seed, 2))
                try:
                    model, metrics = _eval_run([train_ds], test_ds, obj_cfg, tc)
                except TrainingDivergedError as exc:
                    raise _at_point(exc, eta=eta, seed=seed, objective=obj_cfg.kind) from exc
                row = _blank_row(cfg.experiment, "eta", eta, seed,
                                 _objective_tag(obj_cfg), False)
                row.update(metrics)
                rows.append(_row_list(row))
                w_inv, w_spu = float(model.w_inv[0]), float(model.w_spu[0])
                for xv in xs:
                    for yv in ys:
                        logit = w_inv * xv + w_spu * yv
                        grid_rows.append([eta, seed, _objective_tag(obj_cfg),
                                          float(xv), float(yv), logit,
                                          1 if logit > 0 else -1])
                inv_col = train_ds.block("inv")[:, 0]
                spu_col = train_ds.block("spu")[:, 0]
                for i in range(train_ds.n):
                    point_rows.append([
                        eta, seed, float(inv_col[i]), float(spu_col[i]),
                        int(train_ds.clean_labels[i]), int(train_ds.labels[i]),
                        int(train_ds.group_ids[i]), bool(train_ds.noise_mask[i]),
                    ])
    summary = summarize_rows(cfg.experiment, SWEEP_COLUMNS, rows)
    extra = {
        "boundary_grid.csv": (
            ["eta", "seed", "objective", "x_inv", "x_spu", "logit", "pred"],
            grid_rows,
        ),
        "train_points.csv": (
            ["eta", "seed", "x_inv", "x_spu", "clean_label", "label", "group", "flipped"],
            point_rows,
        ),
    }
    return SweepResult(cfg.experiment, SWEEP_COLUMNS, rows, SUMMARY_COLUMNS, summary,
                       _manifest(cfg, SWEEP_COLUMNS, len(rows)), extra)


def _bisect_root(f, lo: float, hi: float, iters: int = 200) -> float:
    flo = f(lo)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if fm == 0.0:
            return mid
        if (flo < 0) == (fm < 0):
            lo, flo = mid, fm
        else:
            hi = mid
    return 0.5 * (lo + hi)


CURVE_COLUMNS = ["lambda", "y", "phi", "alpha", "negative"]
CURVE_SUMMARY_COLUMNS = [
    "lambda", "y", "alpha_min", "phi_at_min", "n_sign_changes",
    "first_root", "second_root",
]


def run_coefficient_curves(cfg: ExperimentConfig) -> SweepResult:
    """Tabulate the per-sample gradient factor of the squared-dummy-gradient
    penalty over a logit range, marking where it turns negative, with
    sign-change abscissas refined by bisection."""
    rows = []
    summary_rows = []
    phis = np.linspace(0.0, cfg.phi_max, cfg.phi_points)
    for lam in cfg.lambdas:
        for y01 in (0, 1):
            vals = np.array([irm_coefficient(p, y01, lam) for p in phis])
            roots = []
            for i in range(len(phis) - 1):
                a, b = vals[i], vals[i + 1]
                if a == 0.0:
                    roots.append(float(phis[i]))
                elif (a < 0) != (b < 0):
                    roots.append(_bisect_root(
                        lambda p: irm_coefficient(p, y01, lam),
                        float(phis[i]), float(phis[i + 1]),
                    ))
            if vals[-1] == 0.0:
                roots.append(float(phis[-1]))
            for p, v in zip(phis, vals):
                rows.append([lam, y01, float(p), float(v), bool(v < 0)])
            imin = int(np.argmin(vals))
            summary_rows.append([
                lam, y01, float(vals[imin]), float(phis[imin]), len(roots),
                roots[0] if roots else None,
                roots[1] if len(roots) > 1 else None,
            ])
    return SweepResult(cfg.experiment, CURVE_COLUMNS, rows,
                       CURVE_SUMMARY_COLUMNS, summary_rows,
                       _manifest(cfg, CURVE_COLUMNS, len(rows)))


RUNNERS = {
    "noise_sweep": run_noise_sweep,
    "ndata_sweep": run_ndata_sweep,
    "norm_sweep": run_norm_sweep,
    "boundary_export": run_boundary_export,
    "coefficient_curves": run_coefficient_curves,
    "cmnist_analogue": run_cmnist_analogue,
    "projection_check": run_projection_check,
}


def run_experiment(cfg: ExperimentConfig) -> SweepResult:
    cfg.validate()
    return RUNNERS[cfg.experiment](cfg)


# ---------------------------------------------------------------------------
# dataset generation / single training run (CLI helpers)

def run_generate(raw: dict, out_dir: str | Path, seed_offset: int = 0) -> Path:
    """Materialize datasets described by a generate config: a feature spec
    plus a list of environments, optionally all rotated by one shared
    orthogonal matrix (project_seed)."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - {"feature_spec", "environments", "project_seed"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "feature_spec" not in raw or "environments" not in raw:
        raise ConfigError("generate config needs feature_spec and environments")
    spec = _parse_dataclass(FeatureSpec, raw["feature_spec"], "feature_spec")
    if not isinstance(raw["environments"], list) or not raw["environments"]:
        raise ConfigError("environments must be a nonempty list")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    proj = None
    if raw.get("project_seed") is not None:
        proj = random_orthogonal(spec.dim, int(raw["project_seed"]) + seed_offset)
    written = []
    for i, e in enumerate(raw["environments"]):
        if not isinstance(e, dict):
            raise ConfigError(f"environments[{i}] must be an object")
        unknown = set(e) - {"n", "gamma", "eta", "env_id", "seed"}
        if unknown:
            raise ConfigError(f"unknown keys in environments[{i}]: {sorted(unknown)}")
        try:
            ds = sample_population(
                spec, int(e["n"]), float(e["gamma"]), float(e.get("eta", 0.0)),
                str(e.get("env_id", f"env{i}")), int(e.get("seed", i)) + seed_offset,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid environments[{i}]: {exc}") from exc
        if proj is not None:
            ds = apply_projection(ds, proj)
        export_dataset(ds, out / ds.env_id)
        written.append(ds.env_id)
    manifest = {
        "command": "generate",
        "tool": {"name": "noisedg", "version": __version__},
        "config": raw,
        "seed_offset": seed_offset,
        "environments": written,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2))
    return out


def run_single_training(raw: dict, out_dir: str | Path, seed_offset: int = 0) -> Path:
    """Train one model from an inline environment description and write
    model.json, history.csv, and manifest.json."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - {"feature_spec", "environments", "objective", "train"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key in ("feature_spec", "environments", "objective", "train"):
        if key not in raw:
            raise ConfigError(f"train config needs {key}")
    spec = _parse_dataclass(FeatureSpec, raw["feature_spec"], "feature_spec")
    obj_cfg = _parse_dataclass(ObjectiveConfig, raw["objective"], "objective")
    tc = _parse_train(raw["train"], "train")
    tc = dataclasses.replace(tc, seed=tc.seed + seed_offset)
    if not isinstance(raw["environments"], list) or not raw["environments"]:
        raise ConfigError("environments must be a nonempty list")
    envs = []
    for i, e in enumerate(raw["environments"]):
        try:
            env = EnvironmentSpec(
                n=int(e["n"]), gamma=float(e["gamma"]), eta=float(e.get("eta", 0.0)),
                env_id=str(e.get("env_id", f"env{i}")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid environments[{i}]: {exc}") from exc
        envs.append(sample_environment(spec, env, int(e.get("seed", i)) + seed_offset))
    model, history = train(envs, obj_cfg, tc)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_model(model, out / "model.json")
    history.to_csv(out / "history.csv")
    manifest = {
        "command": "train",
        "tool": {"name": "noisedg", "version": __version__},
        "config": raw,
        "seed_offset": seed_offset,
        "outputs": ["history.csv", "manifest.json", "model.json"],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2))
    return out
