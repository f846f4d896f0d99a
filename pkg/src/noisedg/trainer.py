"""Full-batch gradient descent on the multi-environment objectives.

Training always starts from the zero vector, runs a fixed number of steps at
a fixed learning rate, and is bit-deterministic in its inputs. A BlockMask
freezes whole feature blocks at exactly zero: internally the trainer slices
the active columns out of every environment once and optimizes only those
coordinates, so masked blocks never move and the l2 penalty only sees active
blocks. The objective recorded in the history includes the l2 term (it is
the quantity the updates descend).
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import objectives as obj
from .datagen import LabeledDataset, derive_seed
from .errors import TrainingDivergedError
from .model import BlockedLinearModel, BlockMask, logistic_residual
from .objectives import MixupBatch, ObjectiveConfig


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float
    steps: int
    l2_reg: float = 0.0
    block_mask: BlockMask = field(default_factory=BlockMask)
    seed: int = 0
    record_every: int = 100

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.l2_reg < 0:
            raise ValueError("l2_reg must be >= 0")
        if self.record_every < 1:
            raise ValueError("record_every must be >= 1")


@dataclass
class TrainHistory:
    """Snapshot table; one row per recorded step (0, multiples of
    record_every, and the final step). memo_acc is NaN when the training
    data contains no flipped labels."""

    env_ids: tuple[str, ...]
    steps: list[int] = field(default_factory=list)
    objective: list[float] = field(default_factory=list)
    env_risks: list[tuple[float, ...]] = field(default_factory=list)
    norm_inv: list[float] = field(default_factory=list)
    norm_spu: list[float] = field(default_factory=list)
    norm_nui: list[float] = field(default_factory=list)
    train_err: list[float] = field(default_factory=list)
    memo_acc: list[float] = field(default_factory=list)
    wg_train_err: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.steps)

    def header(self) -> list[str]:
        risk_cols = [f"risk_env_{e}" for e in self.env_ids]
        return ["step", "objective", *risk_cols, "norm_inv", "norm_spu",
                "norm_nui", "train_err", "memo_acc", "wg_train_err"]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.header())
            for i in range(len(self.steps)):
                row = [self.steps[i], repr(self.objective[i])]
                row += [repr(v) for v in self.env_risks[i]]
                row += [repr(self.norm_inv[i]), repr(self.norm_spu[i]),
                        repr(self.norm_nui[i]), repr(self.train_err[i]),
                        repr(self.memo_acc[i]), repr(self.wg_train_err[i])]
                writer.writerow(row)


def _pooled_metrics(w, arrays, labels_all, flips_all, groups_all):
    """train error, memorization accuracy, worst-group error at weights w."""
    logits = np.concatenate([X @ w for X, _ in arrays])
    correct = labels_all * logits > 0.0
    train_err = float(np.mean(~correct))
    if flips_all.any():
        memo = float(np.mean(correct[flips_all]))
    else:
        memo = float("nan")
    wg = 0.0
    for g in (1, 2, 3, 4):
        sel = groups_all == g
        if sel.any():
            wg = max(wg, float(np.mean(~correct[sel])))
    return train_err, memo, wg


def train(
    envs: list[LabeledDataset],
    objective: ObjectiveConfig,
    config: TrainConfig,
) -> tuple[BlockedLinearModel, TrainHistory]:
    """Minimize the configured objective over the environments.

    Returns the final model and the snapshot history. Raises
    TrainingDivergedError if the objective ever becomes non-finite.
    """
    if not envs:
        raise ValueError("need at least one environment")
    spec = envs[0].spec
    if any(e.spec != spec for e in envs):
        raise ValueError("all environments must share one feature spec")
    if len({e.projected for e in envs}) != 1:
        raise ValueError("cannot mix projected and unprojected environments")
    mask = config.block_mask
    restricted = not (mask.inv and mask.spu and mask.nui)
    if restricted and envs[0].projected:
        raise ValueError("block masks require unprojected features")

    active = mask.active_columns(spec)
    if restricted:
        arrays = [(np.ascontiguousarray(e.features[:, active]), e.labels) for e in envs]
    else:
        arrays = [(e.features, e.labels) for e in envs]
    labels_all = np.concatenate([e.labels for e in envs]).astype(np.float64)
    flips_all = np.concatenate([e.noise_mask for e in envs])
    groups_all = np.concatenate([e.group_ids for e in envs])

    m = len(envs)
    w = np.zeros(int(active.sum()))
    dro_weights = np.full(m, 1.0 / m)
    lam = objective.penalty_lambda if objective.penalty_lambda is not None else 0.0

    def evaluate(w_cur, step, update_state):
        nonlocal dro_weights
        if objective.kind == "ERM":
            return obj._erm_value_grad(w_cur, arrays, objective.erm_pooled)
        if objective.kind == "IRMv1":
            return obj._irmv1_value_grad(w_cur, arrays, lam)
        if objective.kind == "VREx":
            return obj._vrex_value_grad(w_cur, arrays, lam)
        if objective.kind == "GroupDRO":
            risks = np.empty(m)
            env_grads = []
            for i, (X, y) in enumerate(arrays):
                phi = X @ w_cur
                risks[i] = float(np.mean(np.logaddexp(0.0, -y * phi)))
                env_grads.append(X.T @ logistic_residual(phi, y) / X.shape[0])
            if update_state:
                dro_weights = obj.groupdro_step(dro_weights, risks, objective.dro_step)
            value = float(dro_weights @ risks)
            grad = np.zeros_like(w_cur)
            for q, g in zip(dro_weights, env_grads):
                grad += q * g
            return value, grad, risks
        if objective.kind == "Mixup":
            n_pool = sum(X.shape[0] for X, _ in arrays)
            batch = obj.mixup_pairs(n_pool, objective.mixup_alpha, derive_seed(config.seed, step))
            value, grad = obj._mixup_value_grad(w_cur, arrays, batch)
            return value, grad, None
        raise ValueError(f"unknown objective kind {objective.kind}")

    def full_model(w_cur):
        w_full = np.zeros(spec.dim)
        w_full[active] = w_cur
        return BlockedLinearModel.from_flat(w_full, spec)

    history = TrainHistory(env_ids=tuple(e.env_id for e in envs))

    def record(step, w_cur, value, risks):
        if risks is None:
            _, _, risks = obj._erm_value_grad(w_cur, arrays, False)
        model = full_model(w_cur)
        norms = model.block_norms()
        tr, memo, wg = _pooled_metrics(w_cur, arrays, labels_all, flips_all, groups_all)
        history.steps.append(step)
        history.objective.append(float(value))  # plain float so repr round-trips
        history.env_risks.append(tuple(float(r) for r in risks))
        history.norm_inv.append(norms["inv"])
        history.norm_spu.append(norms["spu"])
        history.norm_nui.append(norms["nui"])
        history.train_err.append(tr)
        history.memo_acc.append(memo)
        history.wg_train_err.append(wg)

    for step in range(config.steps):
        value, grad, risks = evaluate(w, step, update_state=True)
        reg_value = value + 0.5 * config.l2_reg * float(w @ w)
        if not np.isfinite(reg_value) or not np.isfinite(grad).all():
            raise TrainingDivergedError(
                f"objective non-finite at step {step} (value={reg_value!r}); "
                f"reduce learning_rate (currently {config.learning_rate})"
            )
        if step % config.record_every == 0:
            record(step, w, reg_value, risks)
        w = w - config.learning_rate * (grad + config.l2_reg * w)

    value, _, risks = evaluate(w, config.steps, update_state=False)
    reg_value = value + 0.5 * config.l2_reg * float(w @ w)
    if not np.isfinite(reg_value):
        raise TrainingDivergedError(
            f"objective non-finite after final step; "
            f"reduce learning_rate (currently {config.learning_rate})"
        )
    record(config.steps, w, reg_value, risks)
    return full_model(w), history


def fit_restricted(
    dataset: LabeledDataset, mask: BlockMask, config: TrainConfig
) -> BlockedLinearModel:
    """ERM fit on one environment with exactly one signal block active.

    The mask must exclude exactly one of the invariant and spurious blocks;
    masks that keep both (no restriction) or drop both (nuisance-only) are
    rejected. config.block_mask is ignored in favor of the explicit mask.
    The excluded block stays exactly zero in the returned model.
    """
    if mask.inv and mask.spu:
        raise ValueError("mask must exclude one of the inv/spu blocks")
    if not mask.inv and not mask.spu:
        raise ValueError("mask excludes both signal blocks; nothing left to restrict to")
    cfg = dataclasses.replace(config, block_mask=mask)
    model, _ = train([dataset], ObjectiveConfig(kind="ERM"), cfg)
    return model
