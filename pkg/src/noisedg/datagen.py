"""Synthetic environments with invariant, spurious, and nuisance features.

Feature vectors are block-concatenated as ``[invariant | spurious | nuisance]``:

* invariant block  ~ N(y * 1, var_inv * I), mean tied to the label y,
* spurious block   ~ N(a * 1, var_spu * I), mean tied to a group attribute a
  that agrees with y on a gamma fraction of samples,
* nuisance block   ~ N(0, (var_nui / d_nui) * I) by default (total nuisance
  power fixed as the block grows), or N(0, var_nui * I) when
  ``nuisance_scaled`` is off.

Labels are +/-1. Label noise flips each label independently with rate eta
after group assignment, so the spurious attribute stays tied to the clean
label. Groups are the four (y, a) sign combinations:

    g1 = (-1, -1), g2 = (-1, +1), g3 = (+1, -1), g4 = (+1, +1)

with g1/g4 the majority pair (a == y) at rate gamma.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# group ids, fixed encoding: (y, a) -> id
GROUP_LABELS = {1: (-1, -1), 2: (-1, +1), 3: (+1, -1), 4: (+1, +1)}


def derive_seed(*parts: int) -> int:
    """Mix integer parts into a fresh 32-bit seed, deterministically."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


@dataclass(frozen=True)
class FeatureSpec:
    """Block dimensions and per-block variances.

    ``nuisance_scaled`` keeps total nuisance power at var_nui by drawing each
    nuisance coordinate with variance var_nui / d_nui; switching it off draws
    each coordinate with variance var_nui.
    """

    d_inv: int
    d_spu: int
    d_nui: int
    var_inv: float = 1.0
    var_spu: float = 1.0
    var_nui: float = 1.0
    nuisance_scaled: bool = True

    def __post_init__(self) -> None:
        for name in ("d_inv", "d_spu", "d_nui"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("var_inv", "var_spu", "var_nui"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")

    @property
    def dim(self) -> int:
        return self.d_inv + self.d_spu + self.d_nui

    def block_slices(self) -> dict[str, slice]:
        """Column slices of the three blocks in concatenation order."""
        a, b = self.d_inv, self.d_inv + self.d_spu
        return {"inv": slice(0, a), "spu": slice(a, b), "nui": slice(b, self.dim)}

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSpec":
        return cls(**d)


@dataclass(frozen=True)
class EnvironmentSpec:
    """One training environment: size, spurious correlation, noise rate."""

    n: int
    gamma: float
    eta: float
    env_id: str

    def __post_init__(self) -> None:
        if self.n < 4:
            raise ValueError("n must be >= 4 (one sample per group)")
        if not 0.5 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0.5, 1]")
        if not 0.0 <= self.eta < 0.5:
            raise ValueError("eta must lie in [0, 0.5)")
        if not self.env_id:
            raise ValueError("env_id must be nonempty")


@dataclass
class LabeledDataset:
    """Feature matrix plus labels, group structure, and noise bookkeeping.

    ``features`` has rows ``[invariant | spurious | nuisance]`` under
    ``spec``; after a random projection the block structure is destroyed and
    ``projected`` is set, which makes block-dependent consumers reject the
    dataset. ``labels`` are the (possibly noisy) training labels in +/-1,
    ``clean_labels`` the pre-noise labels, ``noise_mask`` marks flips.
    """

    features: np.ndarray
    clean_labels: np.ndarray
    labels: np.ndarray
    noise_mask: np.ndarray
    group_ids: np.ndarray
    env_id: str
    spec: FeatureSpec
    projected: bool = False
    gamma: float | None = None
    eta: float | None = None
    seed: int | None = None

    def __post_init__(self) -> None:
        n = self.features.shape[0]
        if self.features.ndim != 2 or self.features.shape[1] != self.spec.dim:
            raise ValueError("features must be (n, spec.dim)")
        for name in ("clean_labels", "labels", "noise_mask", "group_ids"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} must have shape (n,)")
        for lab in (self.clean_labels, self.labels):
            if not np.isin(lab, (-1, 1)).all():
                raise ValueError("labels must be +/-1")
        if not np.isin(self.group_ids, (1, 2, 3, 4)).all():
            raise ValueError("group_ids must be in {1, 2, 3, 4}")
        expected = np.where(self.noise_mask, -self.clean_labels, self.clean_labels)
        if not np.array_equal(expected, self.labels):
            raise ValueError("labels must equal clean_labels flipped on noise_mask")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    def block(self, name: str) -> np.ndarray:
        """Columns of one block; rejected on projected datasets."""
        if self.projected:
            raise ValueError("block structure not available on projected features")
        return self.features[:, self.spec.block_slices()[name]]

    def spurious_attribute(self) -> np.ndarray:
        """The +/-1 group attribute a, recovered from group ids."""
        return np.where(np.isin(self.group_ids, (2, 4)), 1, -1).astype(np.int64)


@dataclass(frozen=True)
class ProjectionMatrix:
    """Square orthogonal matrix used to scramble the block structure."""

    matrix: np.ndarray
    seed: int

    def __post_init__(self) -> None:
        m = self.matrix
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("projection matrix must be square")
        err = np.abs(m.T @ m - np.eye(m.shape[0])).max()
        if err >= 1e-10:
            raise ValueError(f"matrix not orthogonal: max |M'M - I| = {err:.3e}")


def group_counts(n: int, gamma: float) -> tuple[int, int, int, int]:
    """Deterministic per-group sample counts (g1, g2, g3, g4).

    The majority pair g1/g4 each get round(gamma * n / 2) samples with
    round-half-to-even; the remainder is split between g2 and g3 and a
    leftover odd unit goes to g2. Total is always exactly n. Defined for any
    gamma in [0, 1]; gamma < 0.5 just swaps which pair is the majority.
    """
    if n < 4:
        raise ValueError("n must be >= 4")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    maj = int(np.round(gamma * n / 2.0))  # round-half-to-even
    maj = min(maj, n // 2)
    rest = n - 2 * maj
    g2 = rest // 2 + rest % 2
    g3 = rest // 2
    return (maj, g2, g3, maj)


def sample_population(
    spec: FeatureSpec, n: int, gamma: float, eta: float, env_id: str, seed: int
) -> LabeledDataset:
    """General sampler without the training-range guard on gamma.

    Accepts any gamma in [0, 1] and eta in [0, 0.5); gamma = 0.5 gives a
    group-balanced population, gamma < 0.5 an anti-correlated one. The guarded
    entry points sample_environment (training, gamma in (0.5, 1]) and
    sample_test_environment (noise-free) both delegate here.
    """
    if not 0.0 <= eta < 0.5:
        raise ValueError("eta must lie in [0, 0.5)")
    rng = np.random.default_rng(seed)
    c1, c2, c3, c4 = group_counts(n, gamma)
    y = np.concatenate(
        [np.full(c, GROUP_LABELS[g][0], dtype=np.int64) for g, c in zip((1, 2, 3, 4), (c1, c2, c3, c4))]
    )
    a = np.concatenate(
        [np.full(c, GROUP_LABELS[g][1], dtype=np.int64) for g, c in zip((1, 2, 3, 4), (c1, c2, c3, c4))]
    )
    gid = np.concatenate(
        [np.full(c, g, dtype=np.int64) for g, c in zip((1, 2, 3, 4), (c1, c2, c3, c4))]
    )
    order = rng.permutation(n)
    y, a, gid = y[order], a[order], gid[order]

    x_inv = y[:, None] + np.sqrt(spec.var_inv) * rng.standard_normal((n, spec.d_inv))
    x_spu = a[:, None] + np.sqrt(spec.var_spu) * rng.standard_normal((n, spec.d_spu))
    nui_var = spec.var_nui / spec.d_nui if spec.nuisance_scaled else spec.var_nui
    x_nui = np.sqrt(nui_var) * rng.standard_normal((n, spec.d_nui))
    features = np.concatenate([x_inv, x_spu, x_nui], axis=1)

    flips = rng.random(n) < eta
    labels = np.where(flips, -y, y)
    return LabeledDataset(
        features=features,
        clean_labels=y,
        labels=labels,
        noise_mask=flips,
        group_ids=gid,
        env_id=env_id,
        spec=spec,
        gamma=gamma,
        eta=eta,
        seed=seed,
    )


def sample_environment(spec: FeatureSpec, env: EnvironmentSpec, seed: int) -> LabeledDataset:
    """Draw one training environment; label noise at env.eta already applied.

    Bit-deterministic in (spec, env, seed): group sizes come from
    ``group_counts``, group membership is shuffled, features are drawn
    conditional on (y, a), then labels are flipped independently at rate eta.
    """
    return sample_population(spec, env.n, env.gamma, env.eta, env.env_id, seed)


def sample_test_environment(
    spec: FeatureSpec, n: int, gamma: float, seed: int, env_id: str = "test"
) -> LabeledDataset:
    """Noise-free evaluation set at any gamma in [0, 1].

    gamma = 0.5 gives the group-balanced test sets used by the subpopulation
    sweeps; gamma < 0.5 reverses the spurious correlation (the attribute
    disagrees with the label on the majority of samples).
    """
    return sample_population(spec, n, gamma, 0.0, env_id, seed)


def inject_label_noise(labels: np.ndarray, eta: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Flip each +/-1 label independently with probability eta.

    Returns (noisy_labels, flip_mask). Composable: flipping twice with
    independent seeds agrees with the original on a 1 - 2*eta*(1-eta)
    fraction in expectation.
    """
    labels = np.asarray(labels)
    if not np.isin(labels, (-1, 1)).all():
        raise ValueError("labels must be +/-1")
    if not 0.0 <= eta < 0.5:
        raise ValueError("eta must lie in [0, 0.5)")
    flips = np.random.default_rng(seed).random(labels.shape[0]) < eta
    return np.where(flips, -labels, labels), flips


def random_orthogonal(dim: int, seed: int) -> ProjectionMatrix:
    """Haar-ish orthogonal matrix via QR of a square Gaussian draw."""
    g = np.random.default_rng(seed).standard_normal((dim, dim))
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.diag(r))  # fix the sign convention so QR is unique
    return ProjectionMatrix(matrix=q, seed=seed)


def apply_projection(dataset: LabeledDataset, projection: ProjectionMatrix) -> LabeledDataset:
    """Rotate features by an existing orthogonal matrix; marks the result
    projected so block-dependent consumers reject it. Labels, groups, and
    noise bookkeeping are carried over unchanged."""
    if projection.matrix.shape[0] != dataset.spec.dim:
        raise ValueError("projection dimension does not match feature dimension")
    return LabeledDataset(
        features=dataset.features @ projection.matrix,
        clean_labels=dataset.clean_labels.copy(),
        labels=dataset.labels.copy(),
        noise_mask=dataset.noise_mask.copy(),
        group_ids=dataset.group_ids.copy(),
        env_id=dataset.env_id,
        spec=dataset.spec,
        projected=True,
        gamma=dataset.gamma,
        eta=dataset.eta,
        seed=dataset.seed,
    )


def apply_random_projection(
    dataset: LabeledDataset, seed: int
) -> tuple[LabeledDataset, ProjectionMatrix]:
    """Rotate features by a fresh seeded orthogonal matrix.

    Returns the projected dataset and the matrix so the same rotation can be
    applied to a paired evaluation set. Row norms are preserved (isometry).
    """
    proj = random_orthogonal(dataset.spec.dim, seed)
    return apply_projection(dataset, proj), proj


def make_cmnist_analogue(
    spec: FeatureSpec,
    n_per_env: int,
    gammas: tuple[float, ...] | list[float],
    gamma_test: float,
    eta: float,
    seed: int,
    n_test: int | None = None,
) -> list[LabeledDataset]:
    """Multi-environment setup in the two-training-environment style: one
    dataset per training gamma with label noise eta, plus one noise-free test
    set at gamma_test (last element of the returned list).

    Training gammas must sit in (0.5, 1]; gamma_test may be anything in
    [0, 1] (0.1 reverses the correlation at test time). Environment ids are
    train0, train1, ..., test.
    """
    if len(gammas) == 0:
        raise ValueError("need at least one training gamma")
    if not 0.0 <= gamma_test <= 1.0:
        raise ValueError("gamma_test must lie in [0, 1]")
    datasets = []
    for i, g in enumerate(gammas):
        env = EnvironmentSpec(n=n_per_env, gamma=float(g), eta=eta, env_id=f"train{i}")
        datasets.append(sample_environment(spec, env, derive_seed(seed, i)))
    datasets.append(
        sample_test_environment(
            spec, n_test if n_test is not None else n_per_env, gamma_test,
            derive_seed(seed, len(gammas)), env_id="test",
        )
    )
    return datasets


# ---------------------------------------------------------------------------
# disk format: features.bin (float64, little-endian, row-major) + meta.json

def export_dataset(dataset: LabeledDataset, out_dir: str | Path) -> Path:
    """Write features.bin plus a JSON sidecar with labels and provenance."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    feats = np.ascontiguousarray(dataset.features, dtype="<f8")
    (out / "features.bin").write_bytes(feats.tobytes())
    meta = {
        "format": {"dtype": "<f8", "order": "C", "shape": list(dataset.features.shape)},
        "env_id": dataset.env_id,
        "spec": dataset.spec.to_dict(),
        "projected": dataset.projected,
        "gamma": dataset.gamma,
        "eta": dataset.eta,
        "seed": dataset.seed,
        "group_counts": [int((dataset.group_ids == g).sum()) for g in (1, 2, 3, 4)],
        "clean_labels": dataset.clean_labels.tolist(),
        "labels": dataset.labels.tolist(),
        "noise_mask": dataset.noise_mask.astype(int).tolist(),
        "group_ids": dataset.group_ids.tolist(),
    }
    (out / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1))
    return out


def import_dataset(in_dir: str | Path) -> LabeledDataset:
    """Inverse of export_dataset; validates shape against the sidecar."""
    src = Path(in_dir)
    meta = json.loads((src / "meta.json").read_text())
    shape = tuple(meta["format"]["shape"])
    raw = np.frombuffer((src / "features.bin").read_bytes(), dtype="<f8")
    if raw.size != shape[0] * shape[1]:
        raise ValueError("features.bin size does not match sidecar shape")
    features = raw.reshape(shape).astype(np.float64)
    return LabeledDataset(
        features=features,
        clean_labels=np.asarray(meta["clean_labels"], dtype=np.int64),
        labels=np.asarray(meta["labels"], dtype=np.int64),
        noise_mask=np.asarray(meta["noise_mask"], dtype=bool),
        group_ids=np.asarray(meta["group_ids"], dtype=np.int64),
        env_id=meta["env_id"],
        spec=FeatureSpec.from_dict(meta["spec"]),
        projected=meta["projected"],
        gamma=meta["gamma"],
        eta=meta["eta"],
        seed=meta["seed"],
    )
