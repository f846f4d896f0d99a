"""Multi-environment training objectives over a shared linear model.

Five objective kinds on per-environment empirical logistic risks R_e:

* ERM        sum_e R_e (environment-balanced; pooled mean behind a flag)
* IRMv1      sum_e [ R_e + lambda * g_e^2 ] with the scalar dummy-classifier
             gradient g_e = (1/n_e) sum_i (sigmoid(phi_i) - y01_i) phi_i
* VREx       (1/m) sum_e R_e + lambda * Var_e(R_e)   (population variance)
* GroupDRO   exponentiated-gradient weights over environments
* Mixup      pooled pairwise convex combinations with Beta(alpha, alpha)
             coefficients, one coefficient per pair

Labels cross this interface as +/-1 and are converted to y01 internally.
Gradients are flat vectors in feature order [inv | spu | nui].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .model import BlockedLinearModel, logistic_loss, logistic_residual, predict_logits

OBJECTIVE_KINDS = ("ERM", "IRMv1", "VREx", "GroupDRO", "Mixup")


@dataclass(frozen=True)
class ObjectiveConfig:
    """Objective kind plus its hyperparameters.

    penalty_lambda applies to IRMv1 and VREx only, dro_step to GroupDRO only,
    mixup_alpha to Mixup only; setting an inapplicable one is rejected.
    erm_pooled switches ERM from the environment-balanced sum to the classic
    pooled mean over the concatenated environments.
    """

    kind: str
    penalty_lambda: float | None = None
    dro_step: float | None = None
    mixup_alpha: float | None = None
    erm_pooled: bool = False

    def __post_init__(self) -> None:
        if self.kind not in OBJECTIVE_KINDS:
            raise ValueError(f"kind must be one of {OBJECTIVE_KINDS}")
        if self.kind in ("IRMv1", "VREx"):
            if self.penalty_lambda is None or self.penalty_lambda < 0:
                raise ValueError(f"{self.kind} needs penalty_lambda >= 0")
        elif self.penalty_lambda is not None:
            raise ValueError(f"penalty_lambda does not apply to {self.kind}")
        if self.kind == "GroupDRO":
            if self.dro_step is None or self.dro_step <= 0:
                raise ValueError("GroupDRO needs dro_step > 0")
        elif self.dro_step is not None:
            raise ValueError(f"dro_step does not apply to {self.kind}")
        if self.kind == "Mixup":
            if self.mixup_alpha is None or self.mixup_alpha <= 0:
                raise ValueError("Mixup needs mixup_alpha > 0")
        elif self.mixup_alpha is not None:
            raise ValueError(f"mixup_alpha does not apply to {self.kind}")
        if self.erm_pooled and self.kind != "ERM":
            raise ValueError("erm_pooled applies to ERM only")


@dataclass(frozen=True)
class EnvRiskVector:
    """Per-environment risks aligned with their environment ids."""

    risks: np.ndarray
    env_ids: tuple[str, ...]

    def __post_init__(self) -> None:
        r = np.asarray(self.risks, dtype=np.float64)
        if r.ndim != 1 or r.shape[0] != len(self.env_ids):
            raise ValueError("risks and env_ids must align")
        if r.shape[0] < 1:
            raise ValueError("need at least one environment")
        if not np.isfinite(r).all() or (r < 0).any():
            raise ValueError("risks must be finite and nonnegative")
        object.__setattr__(self, "risks", r)


# ---------------------------------------------------------------------------
# IRMv1

def irm_coefficient(logit: float, label01: int, penalty_lambda: float) -> float:
    """Per-sample factor multiplying the plain gradient under the IRMv1
    penalty, in the one-sample-per-environment case:

        alpha(phi) = 1 + 2 * lambda * phi * (sigmoid(phi)
                                             + phi * sigmoid'(phi) - y01)

    alpha(0) = 1 exactly for every lambda; for large lambda there is a logit
    region where alpha goes negative and the penalty pushes against fitting.
    """
    if label01 not in (0, 1):
        raise ValueError("label01 must be 0 or 1")
    if penalty_lambda < 0:
        raise ValueError("penalty_lambda must be >= 0")
    phi = float(logit)
    if label01 == 0:
        phi = -phi  # reflect onto the y01=1 branch; makes the symmetry exact
    s = float(expit(phi))
    return 1.0 + 2.0 * penalty_lambda * phi * (s + phi * s * (1.0 - s) - 1.0)


def _env_arrays(envs) -> list[tuple[np.ndarray, np.ndarray]]:
    out = []
    for e in envs:
        if hasattr(e, "features"):
            out.append((e.features, np.asarray(e.labels)))
        else:
            x, y = e
            out.append((np.asarray(x, dtype=np.float64), np.asarray(y)))
    if not out:
        raise ValueError("need at least one environment")
    return out


def _irmv1_value_grad(w: np.ndarray, envs, lam: float) -> tuple[float, np.ndarray, np.ndarray]:
    """Shared core: objective, flat gradient, and the per-env risk vector."""
    total = 0.0
    grad = np.zeros_like(w)
    risks = []
    for X, y in _env_arrays(envs):
        n = X.shape[0]
        phi = X @ w
        r = logistic_residual(phi, y)  # sigmoid(phi) - y01
        risk = float(np.mean(np.logaddexp(0.0, -y * phi)))
        g_e = float(np.mean(r * phi))
        s = expit(phi)
        # d g_e / d w = (1/n) X' [ sigmoid'(phi) * phi + (sigmoid(phi) - y01) ]
        dg = X.T @ (s * (1.0 - s) * phi + r) / n
        dr = X.T @ r / n
        total += risk + lam * g_e * g_e
        grad += dr + 2.0 * lam * g_e * dg
        risks.append(risk)
    return total, grad, np.asarray(risks)


def irmv1_objective_and_gradient(
    model: BlockedLinearModel, envs, penalty_lambda: float
) -> tuple[float, np.ndarray]:
    """Objective sum_e [R_e + lambda g_e^2] and its exact flat gradient.

    With a single sample per environment the gradient factorizes into
    irm_coefficient(phi) times the plain per-sample gradient.
    """
    if penalty_lambda < 0:
        raise ValueError("penalty_lambda must be >= 0")
    val, grad, _ = _irmv1_value_grad(model.flat(), envs, penalty_lambda)
    return val, grad


# ---------------------------------------------------------------------------
# V-REx

def vrex_env_coefficients(risks: EnvRiskVector | np.ndarray, penalty_lambda: float) -> np.ndarray:
    """Per-environment gradient coefficients c_e = (1/m) [2 lambda (R_e - Rbar) + 1].

    The coefficients always sum to 1; an environment's coefficient is
    negative exactly when its risk sits more than 1/(2 lambda) below the
    mean, i.e. the variance penalty pushes its risk back up.
    """
    if penalty_lambda < 0:
        raise ValueError("penalty_lambda must be >= 0")
    r = risks.risks if isinstance(risks, EnvRiskVector) else np.asarray(risks, dtype=np.float64)
    if r.ndim != 1 or r.size < 1:
        raise ValueError("need a 1-d risk vector")
    m = r.size
    dev = r - r.mean()
    dev = dev - dev.mean()  # re-center so the coefficients sum to 1 at roundoff
    return (2.0 * penalty_lambda * dev + 1.0) / m


def _vrex_value_grad(w: np.ndarray, envs, lam: float) -> tuple[float, np.ndarray, np.ndarray]:
    arrays = _env_arrays(envs)
    risks = np.empty(len(arrays))
    grads = []
    for i, (X, y) in enumerate(arrays):
        phi = X @ w
        risks[i] = float(np.mean(np.logaddexp(0.0, -y * phi)))
        grads.append(X.T @ logistic_residual(phi, y) / X.shape[0])
    coeff = vrex_env_coefficients(risks, lam)
    value = float(risks.mean() + lam * risks.var())  # population variance
    grad = np.zeros_like(w)
    for c, g in zip(coeff, grads):
        grad += c * g
    return value, grad, risks


def vrex_objective_and_gradient(
    model: BlockedLinearModel, envs, penalty_lambda: float
) -> tuple[float, np.ndarray]:
    """Objective (1/m) sum_e R_e + lambda Var_e(R_e) and its flat gradient
    sum_e c_e grad R_e with the coefficients from vrex_env_coefficients."""
    if penalty_lambda < 0:
        raise ValueError("penalty_lambda must be >= 0")
    val, grad, _ = _vrex_value_grad(model.flat(), envs, penalty_lambda)
    return val, grad


# ---------------------------------------------------------------------------
# ERM

def _erm_value_grad(w: np.ndarray, envs, pooled: bool) -> tuple[float, np.ndarray, np.ndarray]:
    arrays = _env_arrays(envs)
    risks = np.empty(len(arrays))
    grad = np.zeros_like(w)
    if pooled:
        total_n = sum(X.shape[0] for X, _ in arrays)
        value = 0.0
        for i, (X, y) in enumerate(arrays):
            phi = X @ w
            risks[i] = float(np.mean(np.logaddexp(0.0, -y * phi)))
            value += risks[i] * X.shape[0] / total_n
            grad += X.T @ logistic_residual(phi, y) / total_n
        return value, grad, risks
    value = 0.0
    for i, (X, y) in enumerate(arrays):
        phi = X @ w
        risks[i] = float(np.mean(np.logaddexp(0.0, -y * phi)))
        value += risks[i]
        grad += X.T @ logistic_residual(phi, y) / X.shape[0]
    return value, grad, risks


# ---------------------------------------------------------------------------
# GroupDRO

def groupdro_step(weights: np.ndarray, risks: EnvRiskVector | np.ndarray, step: float) -> np.ndarray:
    """One exponentiated-gradient update of the environment weights:
    q_e' proportional to q_e * exp(step * R_e), renormalized to the simplex."""
    q = np.asarray(weights, dtype=np.float64)
    r = risks.risks if isinstance(risks, EnvRiskVector) else np.asarray(risks, dtype=np.float64)
    if q.shape != r.shape or q.ndim != 1:
        raise ValueError("weights and risks must be aligned 1-d vectors")
    if step <= 0:
        raise ValueError("step must be > 0")
    if (q < 0).any() or abs(q.sum() - 1.0) > 1e-9:
        raise ValueError("weights must lie on the probability simplex")
    z = step * r
    q_new = q * np.exp(z - z.max())  # shift for overflow safety
    total = q_new.sum()
    if total <= 0 or not np.isfinite(total):
        raise ValueError("degenerate weight update")
    return q_new / total


# ---------------------------------------------------------------------------
# Mixup

@dataclass(frozen=True)
class MixupBatch:
    """Pairing descriptor: sample i is mixed with partner[i] at weight t[i]."""

    partner: np.ndarray
    t: np.ndarray

    @property
    def n(self) -> int:
        return self.partner.shape[0]


def mixup_pairs(n: int, alpha: float, seed: int) -> MixupBatch:
    """Pair each of n pooled samples with a uniformly permuted partner and
    draw one Beta(alpha, alpha) mixing coefficient per pair."""
    if n < 1:
        raise ValueError("need at least one sample")
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    rng = np.random.default_rng(seed)
    partner = rng.permutation(n)
    t = rng.beta(alpha, alpha, size=n)
    return MixupBatch(partner=partner, t=t)


def _mixup_value_grad(
    w: np.ndarray, envs, batch: MixupBatch
) -> tuple[float, np.ndarray]:
    arrays = _env_arrays(envs)
    X = np.concatenate([x for x, _ in arrays], axis=0)
    y = np.concatenate([lab for _, lab in arrays])
    if batch.n != X.shape[0]:
        raise ValueError("mixup batch size must match the pooled sample count")
    t = batch.t[:, None]
    Xm = t * X + (1.0 - t) * X[batch.partner]
    y01_i = (y + 1.0) / 2.0
    y01_j = y01_i[batch.partner]
    phi = Xm @ w
    # loss per pair: t * ce(phi, y_i) + (1 - t) * ce(phi, y_j)
    ce_i = np.logaddexp(0.0, -y * phi)
    ce_j = np.logaddexp(0.0, -y[batch.partner] * phi)
    value = float(np.mean(batch.t * ce_i + (1.0 - batch.t) * ce_j))
    s = expit(phi)
    resid = batch.t * (s - y01_i) + (1.0 - batch.t) * (s - y01_j)
    grad = Xm.T @ resid / X.shape[0]
    return value, grad


def mixup_objective_and_gradient(
    model: BlockedLinearModel, envs, batch: MixupBatch
) -> tuple[float, np.ndarray]:
    """Mixed-pair logistic objective and flat gradient for a fixed pairing."""
    return _mixup_value_grad(model.flat(), envs, batch)
