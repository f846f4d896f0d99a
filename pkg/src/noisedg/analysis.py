"""Theory-side quantities and checks for trained models.

Covers the norm accounting (which block carries the classifier), expected
memorization counts under label noise, the spurious/invariant risk formulas,
the empirical per-sample memorization cost, the norm-gap condition that
predicts when the spurious solution is cheaper than the invariant one, and a
hard-margin direction oracle used to pin down the implicit bias of long
unregularized logistic training.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .datagen import FeatureSpec, LabeledDataset, derive_seed
from .errors import NoFlippedLabelsError, NonSeparableError
from .model import BlockedLinearModel, BlockMask, predict_logits
from .objectives import ObjectiveConfig


@dataclass(frozen=True)
class NormDecomposition:
    """Euclidean norms of the three weight blocks and the full vector."""

    norm_inv: float
    norm_spu: float
    norm_nui: float
    norm_total: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def norm_decomposition(model: BlockedLinearModel) -> NormDecomposition:
    n = model.block_norms()
    # total computed from the concatenated vector, independently of the
    # blocks, so the Pythagorean identity is a real consistency check
    total = float(np.linalg.norm(model.flat()))
    return NormDecomposition(
        norm_inv=n["inv"], norm_spu=n["spu"], norm_nui=n["nui"], norm_total=total
    )


def memorization_counts(n: int, gamma: float, eta: float) -> tuple[float, float]:
    """Expected numbers of points each restricted fit must memorize.

    The invariant-only fit fights only the flipped labels: n * eta. The
    spurious-only fit additionally fights every sample whose attribute
    disagrees with its (noisy) label: n * (1 - gamma + (2 gamma - 1) * eta).

    Unlike the samplers, this accepts the closed boundaries gamma = 0.5 and
    eta = 0.5: the formulas stay continuous there and the degenerate limits
    (coin-flip attribute, pure-noise labels) are exactly the cases the gap
    condition's rhs vanishes or saturates at.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.5 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0.5, 1]")
    if not 0.0 <= eta <= 0.5:
        raise ValueError("eta must lie in [0, 0.5]")
    n_inv = n * eta
    n_spu = n * (1.0 - gamma + (2.0 * gamma - 1.0) * eta)
    return n_inv, n_spu


def spurious_risk(gamma: float, eta: float) -> tuple[float, float, bool]:
    """Noisy-label risks (attribute-following, label-following, dominance).

    The attribute-following classifier pays 1 - gamma + (2 gamma - 1) eta;
    the label-following classifier pays exactly eta. Their difference
    (1 - gamma)(1 - 2 eta) vanishes only at gamma = 1 or eta = 0.5, so the
    returned flag risk_bayes <= risk_spu always holds on the valid domain.
    """
    if not 0.5 < gamma <= 1.0:
        raise ValueError("gamma must lie in (0.5, 1]")
    if not 0.0 <= eta < 0.5:
        raise ValueError("eta must lie in [0, 0.5)")
    risk_spu = 1.0 - gamma + (2.0 * gamma - 1.0) * eta
    risk_bayes = eta
    return risk_spu, risk_bayes, bool(risk_bayes <= risk_spu)


def invariant_risk(eta: float) -> float:
    """Noisy-label risk of the perfect label-following classifier."""
    if not 0.0 <= eta < 0.5:
        raise ValueError("eta must lie in [0, 0.5)")
    return eta


def expected_gradient_coeffs(p1: float, eta: float) -> tuple[float, float]:
    """Coefficients of the two conditional gradient directions in the
    expected noisy logistic gradient when the model outputs probability p1
    for the positive class: (p1 - (1 - eta), (1 - eta) - p1).

    Both vanish exactly when p1 = 1 - eta, the unique stationary output.
    The grouping p1 - (1 - eta) is deliberate: it returns exact zeros in
    floating point whenever p1 was itself computed as 1 - eta.
    """
    if not 0.0 <= p1 <= 1.0:
        raise ValueError("p1 must lie in [0, 1]")
    if not 0.0 <= eta < 0.5:
        raise ValueError("eta must lie in [0, 0.5)")
    c1 = p1 - (1.0 - eta)
    c0 = (1.0 - eta) - p1
    return c1, c0


def memorization_accuracy(model: BlockedLinearModel, dataset: LabeledDataset) -> float:
    """Fraction of flipped training points the model classifies as their
    noisy label. Rejects datasets with no flipped points."""
    if not dataset.noise_mask.any():
        raise NoFlippedLabelsError("dataset has no flipped labels")
    phi = predict_logits(model, dataset.features)
    sel = dataset.noise_mask
    return float(np.mean(dataset.labels[sel] * phi[sel] > 0.0))


@dataclass(frozen=True)
class GroupErrorReport:
    """Per-group error rates; empty groups are excluded and listed."""

    errors: dict[int, float]
    worst_group_error: float
    average_error: float
    missing_groups: tuple[int, ...]


def group_errors(model: BlockedLinearModel, dataset: LabeledDataset) -> GroupErrorReport:
    """Zero-one error per (y, a) group against dataset.labels.

    Empty groups are excluded from the worst-group maximum and flagged in
    missing_groups rather than raising.
    """
    phi = predict_logits(model, dataset.features)
    wrong = dataset.labels * phi <= 0.0
    errors: dict[int, float] = {}
    missing = []
    for g in (1, 2, 3, 4):
        sel = dataset.group_ids == g
        if sel.any():
            errors[g] = float(np.mean(wrong[sel]))
        else:
            missing.append(g)
    return GroupErrorReport(
        errors=errors,
        worst_group_error=max(errors.values()),
        average_error=float(np.mean(wrong)),
        missing_groups=tuple(missing),
    )


# ---------------------------------------------------------------------------
# memorization cost

def _random_label_nuisance_dataset(spec: FeatureSpec, k: int, seed: int) -> LabeledDataset:
    """k points whose only usable signal is the nuisance block: invariant and
    spurious columns are zero, labels are independent coin flips."""
    rng = np.random.default_rng(seed)
    labels = rng.choice(np.array([-1, 1], dtype=np.int64), size=k)
    nui_var = spec.var_nui / spec.d_nui if spec.nuisance_scaled else spec.var_nui
    features = np.zeros((k, spec.dim))
    sl = spec.block_slices()["nui"]
    features[:, sl] = np.sqrt(nui_var) * rng.standard_normal((k, spec.d_nui))
    # group ids keep the (y, a=y) convention; unused by nuisance-only fits
    gid = np.where(labels > 0, 4, 1).astype(np.int64)
    return LabeledDataset(
        features=features,
        clean_labels=labels,
        labels=labels.copy(),
        noise_mask=np.zeros(k, dtype=bool),
        group_ids=gid,
        env_id="memo",
        spec=spec,
        seed=seed,
    )


def estimate_memorization_cost(
    spec: FeatureSpec,
    k_values: list[int] | tuple[int, ...],
    trials: int,
    config,
    seed: int,
) -> float:
    """Empirical per-sample cost of memorizing via the nuisance block.

    For each k, fits nuisance-only classifiers (invariant and spurious blocks
    masked) to k random-labeled points and records the squared nuisance norm;
    the least-squares slope of that norm against k is the per-sample cost C.
    Larger per-coordinate nuisance variance makes memorization cheaper, so C
    scales like 1 / (var_nui / d_nui) given a fixed margin profile.

    config is a TrainConfig whose block mask is overridden to nuisance-only.
    k values beyond d_nui are rejected (no interpolation guarantee there).
    """
    from .trainer import TrainConfig, train

    ks = [int(k) for k in k_values]
    if len(ks) < 2 or len(set(ks)) < 2:
        raise ValueError("need at least two distinct k values")
    if min(ks) < 1:
        raise ValueError("k values must be >= 1")
    if max(ks) > spec.d_nui:
        raise ValueError("k values must not exceed d_nui")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    cfg = TrainConfig(
        learning_rate=config.learning_rate,
        steps=config.steps,
        l2_reg=config.l2_reg,
        block_mask=BlockMask(inv=False, spu=False, nui=True),
        seed=config.seed,
        record_every=config.record_every,
    )
    xs, ys = [], []
    for k in ks:
        for t in range(trials):
            ds = _random_label_nuisance_dataset(spec, k, derive_seed(seed, k, t))
            model, _ = train([ds], ObjectiveConfig(kind="ERM"), cfg)
            xs.append(float(k))
            ys.append(float(model.w_nui @ model.w_nui))
    slope = float(np.polyfit(np.asarray(xs), np.asarray(ys), 1)[0])
    return slope


# ---------------------------------------------------------------------------
# norm-gap condition

@dataclass(frozen=True)
class GapReport:
    """Outcome of the norm-gap condition between two restricted fits.

    lhs is the signal-block difference ||w_inv-fit restricted to inv||^2 -
    ||w_spu-fit restricted to spu||^2; rhs is the extra memorization budget
    the spurious fit pays, n (1 - gamma)(1 - 2 eta) C. condition_holds means
    lhs >= rhs, which predicts the spurious solution interpolates with the
    smaller total norm, i.e. full ||w^(inv)||_2 >= ||w^(spu)||_2.
    full_norm_inv_ge_spu records that ordering empirically, nuisance parts
    included: false without noise (only the spurious fit memorizes there)
    and expected to turn true once noise forces both fits to memorize.
    """

    lhs: float
    rhs: float
    memo_cost_C: float
    condition_holds: bool
    n_tilde_inv: float
    n_tilde_spu: float
    inv_fit_norm: float
    spu_fit_norm: float
    full_norm_inv_ge_spu: bool

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def theorem_gap_check(
    w_inv_model: BlockedLinearModel,
    w_spu_model: BlockedLinearModel,
    n: int,
    gamma: float,
    eta: float,
    memo_cost_C: float,
) -> GapReport:
    """Evaluate the norm-gap condition for a pair of already-fit restricted
    classifiers with the given per-sample memorization cost.

    w_inv_model must have a zero spurious block and w_spu_model a zero
    invariant block (each fit with the other signal block masked out);
    mismatched inputs are rejected rather than silently scored.
    """
    if w_inv_model.spec.to_dict() != w_spu_model.spec.to_dict():
        raise ValueError("restricted models use different feature layouts")
    if np.any(w_inv_model.w_spu != 0.0):
        raise ValueError(
            "w_inv_model has nonzero spurious weights; expected a fit with "
            "the spurious block masked out"
        )
    if np.any(w_spu_model.w_inv != 0.0):
        raise ValueError(
            "w_spu_model has nonzero invariant weights; expected a fit with "
            "the invariant block masked out"
        )
    if n < 1:
        raise ValueError("n must be >= 1")
    lhs = float(w_inv_model.w_inv @ w_inv_model.w_inv) - float(
        w_spu_model.w_spu @ w_spu_model.w_spu
    )
    rhs = n * (1.0 - gamma) * (1.0 - 2.0 * eta) * memo_cost_C
    nt_inv, nt_spu = memorization_counts(n, gamma, eta)
    inv_norm = float(np.linalg.norm(w_inv_model.flat()))
    spu_norm = float(np.linalg.norm(w_spu_model.flat()))
    return GapReport(
        lhs=lhs,
        rhs=rhs,
        memo_cost_C=memo_cost_C,
        condition_holds=bool(lhs >= rhs),
        n_tilde_inv=nt_inv,
        n_tilde_spu=nt_spu,
        inv_fit_norm=inv_norm,
        spu_fit_norm=spu_norm,
        full_norm_inv_ge_spu=bool(inv_norm >= spu_norm),
    )


# ---------------------------------------------------------------------------
# hard-margin direction (implicit-bias oracle)

def _check_margin_inputs(features: np.ndarray, labels: np.ndarray, n_max: int):
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ValueError("features must be (n, d) with aligned labels")
    if not np.isin(y, (-1.0, 1.0)).all():
        raise ValueError("labels must be +/-1")
    if X.shape[0] > n_max:
        raise ValueError(f"at most {n_max} points supported")
    return X, y


def _assert_separable(X: np.ndarray, y: np.ndarray) -> None:
    n, d = X.shape
    res = linprog(
        c=np.zeros(d),
        A_ub=-(y[:, None] * X),
        b_ub=-np.ones(n),
        bounds=[(None, None)] * d,
        method="highs",
    )
    if not res.success:
        raise NonSeparableError("point set is not linearly separable")


def max_margin_direction(features: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Unit vector of the hard-margin separator, for small point sets
    (n <= 64). Solved by cyclic coordinate ascent on the hard-margin dual
        max_a  sum(a) - 0.5 a' Q a,  a >= 0,  Q_ij = y_i y_j x_i . x_j
    with a duality-gap stopping rule; the primal direction is X' (a * y).
    Raises NonSeparableError when no separator exists.
    """
    X, y = _check_margin_inputs(features, labels, 64)
    _assert_separable(X, y)
    A = y[:, None] * X
    Q = A @ A.T
    n = Q.shape[0]
    diag = np.diag(Q).copy()
    alpha = np.zeros(n)
    qa = np.zeros(n)  # Q @ alpha, maintained incrementally
    for sweep in range(200_000):
        for i in range(n):
            if diag[i] <= 0.0:
                continue
            new = max(0.0, alpha[i] + (1.0 - qa[i]) / diag[i])
            delta = new - alpha[i]
            if delta != 0.0:
                alpha[i] = new
                qa += delta * Q[:, i]
        if sweep % 16 == 0:
            dual = alpha.sum() - 0.5 * float(alpha @ qa)
            margins = qa  # y_i x_i . w with w = A' alpha
            min_margin = margins.min()
            if min_margin > 0:
                primal = 0.5 * float(alpha @ qa) / (min_margin * min_margin)
                if primal - dual <= 1e-10 * max(1.0, primal):
                    break
    w = A.T @ alpha
    nrm = np.linalg.norm(w)
    if nrm == 0.0:
        raise NonSeparableError("degenerate dual solution")
    return w / nrm


def max_margin_direction_by_enumeration(
    features: np.ndarray, labels: np.ndarray
) -> np.ndarray:
    """Independent route for tiny sets (n <= 16): enumerate candidate support
    sets, solve the equality system G_S a_S = 1 on each, keep feasible
    stationary points, and return the smallest-norm separator with unit
    margin. Intended as a cross-check for max_margin_direction.
    """
    X, y = _check_margin_inputs(features, labels, 16)
    _assert_separable(X, y)
    A = y[:, None] * X
    n = X.shape[0]
    best_w = None
    best_sq = np.inf
    for bits in range(1, 1 << n):
        idx = [i for i in range(n) if bits >> i & 1]
        G = A[idx] @ A[idx].T
        ones = np.ones(len(idx))
        try:
            a, *_ = np.linalg.lstsq(G, ones, rcond=None)
        except np.linalg.LinAlgError:
            continue
        if not np.allclose(G @ a, ones, atol=1e-8):
            continue
        if (a < -1e-9).any():
            continue
        w = A[idx].T @ a
        margins = A @ w
        if margins.min() < 1.0 - 1e-7:
            continue
        sq = float(w @ w)
        if sq < best_sq - 1e-12:
            best_sq = sq
            best_w = w
    if best_w is None:
        raise NonSeparableError("no feasible support set found")
    return best_w / np.linalg.norm(best_w)
