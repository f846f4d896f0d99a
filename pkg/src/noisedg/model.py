"""Bias-free linear classifier with block-structured weights.

The weight vector is stored as three blocks matching the feature layout
``[invariant | spurious | nuisance]``. Losses and gradients use the logistic
model: labels are +/-1 at this interface, the 0/1 conversion y01 = (y + 1)/2
happens inside the residual. All formulas are overflow-free via
``logaddexp`` / ``expit``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .datagen import FeatureSpec

BLOCK_NAMES = ("inv", "spu", "nui")


@dataclass(frozen=True)
class BlockMask:
    """Which weight blocks may move during training; masked blocks stay 0."""

    inv: bool = True
    spu: bool = True
    nui: bool = True

    def __post_init__(self) -> None:
        if not (self.inv or self.spu or self.nui):
            raise ValueError("at least one block must be active")

    def active_columns(self, spec: FeatureSpec) -> np.ndarray:
        """Boolean column selector over the concatenated feature layout."""
        sl = spec.block_slices()
        m = np.zeros(spec.dim, dtype=bool)
        for name, on in zip(BLOCK_NAMES, (self.inv, self.spu, self.nui)):
            if on:
                m[sl[name]] = True
        return m


@dataclass
class BlockedLinearModel:
    """Weights (w_inv, w_spu, w_nui); no bias term."""

    w_inv: np.ndarray
    w_spu: np.ndarray
    w_nui: np.ndarray
    spec: FeatureSpec

    def __post_init__(self) -> None:
        if (
            self.w_inv.shape != (self.spec.d_inv,)
            or self.w_spu.shape != (self.spec.d_spu,)
            or self.w_nui.shape != (self.spec.d_nui,)
        ):
            raise ValueError("block shapes must match the feature spec")

    @classmethod
    def zeros(cls, spec: FeatureSpec) -> "BlockedLinearModel":
        return cls(
            w_inv=np.zeros(spec.d_inv),
            w_spu=np.zeros(spec.d_spu),
            w_nui=np.zeros(spec.d_nui),
            spec=spec,
        )

    @classmethod
    def from_flat(cls, w: np.ndarray, spec: FeatureSpec) -> "BlockedLinearModel":
        if w.shape != (spec.dim,):
            raise ValueError("flat weight length must equal spec.dim")
        sl = spec.block_slices()
        return cls(
            w_inv=np.array(w[sl["inv"]]),
            w_spu=np.array(w[sl["spu"]]),
            w_nui=np.array(w[sl["nui"]]),
            spec=spec,
        )

    def flat(self) -> np.ndarray:
        """Concatenated weights in feature order [inv | spu | nui]."""
        return np.concatenate([self.w_inv, self.w_spu, self.w_nui])

    def block_norms(self) -> dict[str, float]:
        return {
            "inv": float(np.linalg.norm(self.w_inv)),
            "spu": float(np.linalg.norm(self.w_spu)),
            "nui": float(np.linalg.norm(self.w_nui)),
        }


def predict_logits(model: BlockedLinearModel, features: np.ndarray) -> np.ndarray:
    if features.ndim != 2 or features.shape[1] != model.spec.dim:
        raise ValueError("features must be (n, spec.dim)")
    return features @ model.flat()


def logistic_loss(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean log(1 + exp(-y * logit)) with +/-1 labels, overflow-free."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if not np.isin(labels, (-1, 1)).all():
        raise ValueError("labels must be +/-1")
    return float(np.mean(np.logaddexp(0.0, -labels * logits)))


def logistic_residual(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """sigmoid(logit) - y01, computed as -y * sigmoid(-y * logit)."""
    labels = np.asarray(labels, dtype=np.float64)
    return -labels * expit(-labels * logits)


def loss_gradient(
    model: BlockedLinearModel, features: np.ndarray, labels: np.ndarray
) -> np.ndarray:
    """Gradient of the mean logistic loss: (1/n) sum (sigmoid(phi_i) - y01_i) x_i.

    Returned flat in feature order [inv | spu | nui].
    """
    phi = predict_logits(model, features)
    r = logistic_residual(phi, labels)
    return features.T @ r / features.shape[0]


def zero_one_error(model: BlockedLinearModel, features: np.ndarray, labels: np.ndarray) -> float:
    """Misclassification rate; a zero logit counts as an error."""
    phi = predict_logits(model, features)
    return float(np.mean(np.asarray(labels) * phi <= 0.0))


def save_model(model: BlockedLinearModel, path: str | Path) -> None:
    """JSON round-trip format with the feature-spec fingerprint embedded."""
    payload = {
        "spec": model.spec.to_dict(),
        "w_inv": model.w_inv.tolist(),
        "w_spu": model.w_spu.tolist(),
        "w_nui": model.w_nui.tolist(),
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True))


def load_model(path: str | Path, expected_spec: FeatureSpec | None = None) -> BlockedLinearModel:
    """Load a saved model; rejects a feature-spec mismatch when one is given."""
    payload = json.loads(Path(path).read_text())
    spec = FeatureSpec.from_dict(payload["spec"])
    if expected_spec is not None and spec != expected_spec:
        raise ValueError("saved model was trained under a different feature spec")
    return BlockedLinearModel(
        w_inv=np.asarray(payload["w_inv"], dtype=np.float64),
        w_spu=np.asarray(payload["w_spu"], dtype=np.float64),
        w_nui=np.asarray(payload["w_nui"], dtype=np.float64),
        spec=spec,
    )
