"""Membership scores for diffusion denoisers.

Four scorers live here:

* ``naive_loss_score``: diffusion loss at one fixed noise and timestep.
* ``secmi_t_error``: DDIM round-trip deviation at timestep ``t``.
* ``best_noise_oracle``: labelled reference that picks the best fixed noise.
* the trained classifier over a grid of losses (``extract_features`` ->
  ``train_attack_classifier`` -> ``score_records``).

All scores are oriented so that higher means "more likely member".
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import evaluation
from .diffusion import (
    NoiseSchedule,
    ddim_backward_step,
    ddim_forward_step,
    diffusion_loss,
    forward_diffuse,
    iterated_forward,
)
from .numerics import (
    AdamState,
    MlpParams,
    NonFiniteError,
    ShapeError,
    adam_step,
    init_mlp,
    load_params,
    mlp_backward,
    mlp_forward_cached,
    mlp_logits,
    save_params,
    sigmoid,
)

log = logging.getLogger(__name__)

TABLE1_TIMESTEPS = [5, 10, 20, 30, 40, 50, 100]


@dataclass
class AttackConfig:
    n_eps: int = 300
    timesteps: list[int] = field(default_factory=lambda: list(TABLE1_TIMESTEPS))
    epochs: int = 5000
    hidden_widths: list[int] = field(default_factory=lambda: [64, 128])
    lrs: list[float] = field(default_factory=lambda: [1e-3, 3e-4])
    eval_every: int = 50
    split_ratio: list[int] = field(default_factory=lambda: [2, 1])
    secmi_t: int = 100
    secmi_stride: int = 1
    secmi_fresh_eps: bool = True
    best_noise_candidates: int = 1000
    best_noise_timesteps: list[int] = field(default_factory=lambda: [10, 20, 50, 100])
    naive_timesteps: list[int] = field(default_factory=lambda: [10, 20, 50, 100, 200, 999])

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj) -> "AttackConfig":
        return cls(**obj)


@dataclass
class NoiseSet:
    noises: np.ndarray
    seed: int

    @property
    def n_eps(self) -> int:
        return self.noises.shape[0]


def make_noise_set(n_eps: int, d: int, seed: int) -> NoiseSet:
    rng = np.random.default_rng(seed)
    return NoiseSet(rng.standard_normal((n_eps, d)), seed)


@dataclass
class TimeSet:
    timesteps: list[int]

    def __post_init__(self):
        ts = [int(t) for t in self.timesteps]
        if len(set(ts)) != len(ts):
            raise ValueError("timesteps must be distinct")
        self.timesteps = sorted(ts)

    def check(self, T: int) -> None:
        if self.timesteps and (self.timesteps[0] < 0 or self.timesteps[-1] >= T):
            raise ValueError(f"timesteps must lie in [0, {T})")

    @property
    def n_t(self) -> int:
        return len(self.timesteps)


@dataclass
class FeatureMatrix:
    """Loss grid per record; column ``j * n_t + k`` is noise ``j`` at ``timesteps[k]``."""

    values: np.ndarray
    n_eps: int
    timesteps: list[int]
    record_ids: list[str]
    model_ids: list[str]
    labels: np.ndarray | None = None
    noise_seed: int | None = None

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[1] != self.n_eps * len(self.timesteps):
            raise ShapeError("feature width must be n_eps * n_t")
        if len(self.record_ids) != self.values.shape[0] or len(self.model_ids) != self.values.shape[0]:
            raise ShapeError("one record id and model id per row required")
        if not np.all(np.isfinite(self.values)):
            raise NonFiniteError("feature matrix contains non-finite values")

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def column(self, noise_idx: int, t_idx: int) -> int:
        return noise_idx * len(self.timesteps) + t_idx

    @staticmethod
    def concat(mats: list["FeatureMatrix"]) -> "FeatureMatrix":
        if not mats:
            raise ValueError("nothing to concatenate")
        first = mats[0]
        for m in mats[1:]:
            if m.n_eps != first.n_eps or m.timesteps != first.timesteps:
                raise ShapeError("feature layouts differ")
        labels = None
        if all(m.labels is not None for m in mats):
            labels = np.concatenate([m.labels for m in mats])
        return FeatureMatrix(
            np.concatenate([m.values for m in mats]),
            first.n_eps,
            list(first.timesteps),
            [r for m in mats for r in m.record_ids],
            [r for m in mats for r in m.model_ids],
            labels,
            first.noise_seed,
        )


# -- single-loss scorers ----------------------------------------------------


def naive_loss_score(model, x, eps0, t: int, schedule: NoiseSchedule):
    """Diffusion loss at the fixed ``(eps0, t)``; lower means more likely member.

    Negate before ranking (see :func:`naive_membership_scores`).
    """
    x = np.asarray(x, dtype=np.float64)
    eps = np.broadcast_to(np.asarray(eps0, dtype=np.float64), x.shape)
    return diffusion_loss(model, x, eps, t, schedule)


def naive_membership_scores(model, x, eps0, t, schedule) -> np.ndarray:
    return -np.atleast_1d(naive_loss_score(model, x, eps0, t, schedule))


def secmi_t_error(model, x, t: int, schedule: NoiseSchedule, stride: int = 1, fresh_eps: bool = True):
    """Plain L2 norm of ``psi(phi(x_t, t), t) - x_t`` with ``x_t = Phi(x, t)``.

    With ``fresh_eps=False`` psi reuses phi's noise prediction, which makes
    the round trip an exact inverse (useful only as a sanity check).
    """
    if t + stride >= schedule.T:
        raise IndexError(f"t={t} leaves no room for a forward step")
    xt = iterated_forward(model, x, t, schedule, stride)
    x_next, eps = ddim_forward_step(model, xt, t, schedule, stride, return_eps=True)
    back = ddim_backward_step(model, x_next, t, schedule, stride, eps=None if fresh_eps else eps)
    return np.linalg.norm(back - xt, axis=-1)


def secmi_membership_scores(model, x, t, schedule, stride=1, fresh_eps=True) -> np.ndarray:
    return -np.atleast_1d(secmi_t_error(model, x, t, schedule, stride, fresh_eps))


# -- features ---------------------------------------------------------------


def extract_features(model, records, noise_set: NoiseSet, time_set: TimeSet, schedule: NoiseSchedule,
                     record_ids=None, model_id="", labels=None) -> FeatureMatrix:
    """Loss of every record under every (noise, timestep) pair."""
    X = np.atleast_2d(np.asarray(records, dtype=np.float64))
    time_set.check(schedule.T)
    n, d = X.shape
    if noise_set.noises.shape[1] != d:
        raise ShapeError("noise dimension does not match records")
    n_eps, n_t = noise_set.n_eps, time_set.n_t
    out = np.empty((n, n_eps, n_t))
    if n:
        Xr = np.repeat(X, n_eps, axis=0)
        E = np.tile(noise_set.noises, (n, 1))
        for k, t in enumerate(time_set.timesteps):
            xt = forward_diffuse(Xr, E, t, schedule)
            diff = model.predict(xt, t) - E
            grid = np.sum(diff * diff, axis=1).reshape(n, n_eps)
            if not np.all(np.isfinite(grid)):
                i, j = np.argwhere(~np.isfinite(grid))[0]
                raise NonFiniteError(f"non-finite loss at record={record_ids[i] if record_ids is not None else i}, "
                                     f"noise={j}, t={t}")
            out[:, :, k] = grid
    ids = list(record_ids) if record_ids is not None else [str(i) for i in range(n)]
    lab = None if labels is None else np.asarray(labels, dtype=np.int64)
    return FeatureMatrix(out.reshape(n, n_eps * n_t), n_eps, list(time_set.timesteps), ids,
                         [model_id] * n, lab, noise_set.seed)


# TFMX layout (little-endian):
#   4s magic "TFMX", u32 version (1), u64 n_rows, u32 width, u32 n_eps, u32 n_t,
#   u32 x n_t timesteps, then f64 values row-major.
# Sidecar JSON carries noise_seed, record_ids, model_ids and optional labels.
FEATURE_MAGIC = b"TFMX"


def save_features(fm: FeatureMatrix, path, sidecar_path=None) -> None:
    n_t = len(fm.timesteps)
    header = struct.pack(f"<4sIQIII{n_t}I", FEATURE_MAGIC, 1, fm.values.shape[0], fm.width, fm.n_eps, n_t, *fm.timesteps)
    Path(path).write_bytes(header + np.ascontiguousarray(fm.values, dtype="<f8").tobytes())
    side = {
        "noise_seed": fm.noise_seed,
        "record_ids": fm.record_ids,
        "model_ids": fm.model_ids,
        "labels": None if fm.labels is None else [int(v) for v in fm.labels],
    }
    sidecar_path = sidecar_path or str(path) + ".json"
    Path(sidecar_path).write_text(json.dumps(side) + "\n")


def load_features(path, sidecar_path=None) -> FeatureMatrix:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != FEATURE_MAGIC:
        raise ValueError("not a TFMX feature file")
    version, n_rows, width, n_eps, n_t = struct.unpack_from("<IQIII", buf, 4)
    if version != 1:
        raise ValueError(f"unsupported feature file version {version}")
    off = 4 + struct.calcsize("<IQIII")
    times = list(struct.unpack_from(f"<{n_t}I", buf, off))
    off += 4 * n_t
    vals = np.frombuffer(buf, dtype="<f8", count=n_rows * width, offset=off).reshape(n_rows, width).astype(np.float64)
    with open(sidecar_path or str(path) + ".json") as fh:
        side = json.load(fh)
    labels = None if side.get("labels") is None else np.asarray(side["labels"], dtype=np.int64)
    return FeatureMatrix(vals, n_eps, times, side["record_ids"], side["model_ids"], labels, side.get("noise_seed"))


# -- model-based split ------------------------------------------------------


class InsufficientModels(ValueError):
    pass


def model_based_split(model_ids, seed: int, ratio=(2, 1)) -> dict[str, list[str]]:
    """Partition whole models into classifier-train and validation groups.

    The train share is ``round(n * a / (a + b))``, clamped so both groups are
    non-empty: 30 -> 20/10, 6 -> 4/2.
    """
    ids = list(model_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate model ids")
    if len(ids) < 2:
        raise InsufficientModels(f"insufficient models for a train/validation split: {len(ids)}")
    a, b = ratio
    n_train = min(max(int(round(len(ids) * a / (a + b))), 1), len(ids) - 1)
    perm = np.random.default_rng(seed).permutation(len(ids))
    return {"train": [ids[i] for i in perm[:n_train]], "val": [ids[i] for i in perm[n_train:]]}


# -- classifier -------------------------------------------------------------


@dataclass
class AttackClassifier:
    mlp: MlpParams
    feature_mean: np.ndarray
    feature_std: np.ndarray
    selected_hparams: dict
    candidates: list[dict] = field(default_factory=list)

    @property
    def input_size(self) -> int:
        return self.mlp.layer_sizes[0]

    def save(self, path, sidecar_path=None) -> None:
        save_params(self.mlp, path)
        side = {
            "feature_mean": [float(v) for v in self.feature_mean],
            "feature_std": [float(v) for v in self.feature_std],
            "selected_hparams": self.selected_hparams,
            "candidates": self.candidates,
        }
        Path(sidecar_path or str(path) + ".json").write_text(json.dumps(side, indent=1) + "\n")

    @classmethod
    def load(cls, path, sidecar_path=None) -> "AttackClassifier":
        with open(sidecar_path or str(path) + ".json") as fh:
            side = json.load(fh)
        return cls(load_params(path), np.asarray(side["feature_mean"]), np.asarray(side["feature_std"]),
                   side["selected_hparams"], side.get("candidates", []))


@dataclass
class ScoreRecord:
    record_id: str
    model_id: str
    score: float


class DegenerateLabels(ValueError):
    pass


def _check_labeled(fm: FeatureMatrix, name: str) -> np.ndarray:
    if fm.labels is None:
        raise DegenerateLabels(f"{name} features carry no labels")
    y = np.asarray(fm.labels)
    if y.min() == y.max():
        raise DegenerateLabels(f"{name} features contain a single class")
    return y.astype(np.float64)


def _normalize(values, mean, std):
    return (values - mean) / std


def train_attack_classifier(train: FeatureMatrix, val: FeatureMatrix, hidden_widths=(64, 128),
                            lrs=(1e-3, 3e-4), epochs: int = 5000, seed: int = 0,
                            eval_every: int = 50, fpr_level: float = 0.10) -> AttackClassifier:
    """Grid-search a three-layer sigmoid MLP on the logistic loss.

    Each candidate ``(width, lr)`` is a ``[in, width, width // 2, 1]`` net
    trained full-batch with Adam. Validation TPR@``fpr_level`` is checked
    every ``eval_every`` epochs and the best snapshot (validation AUC breaks
    ties, then the earlier epoch) stands for the candidate. Across candidates
    the highest validation TPR wins; ties go to the smaller width, then the
    lower learning rate.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    ytr = _check_labeled(train, "training")
    yva = _check_labeled(val, "validation")
    if train.width != val.width:
        raise ShapeError(f"feature widths differ: {train.width} vs {val.width}")
    mean = train.values.mean(axis=0)
    std = train.values.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    Xtr = _normalize(train.values, mean, std)
    Xva = _normalize(val.values, mean, std)
    n = Xtr.shape[0]
    results = []
    for width in sorted(hidden_widths):
        for lr in sorted(lrs):
            rng = np.random.default_rng([seed, int(width), int(round(lr * 1e9))])
            mlp = init_mlp([train.width, width, max(width // 2, 1), 1], rng, "relu", "sigmoid")
            state = AdamState.zeros_like(mlp, lr=lr)
            best = None
            for epoch in range(1, epochs + 1):
                p, cache = mlp_forward_cached(mlp, Xtr)
                g = (p[:, 0] - ytr)[:, None] / n  # dBCE/dlogit
                grads = mlp_backward(mlp, Xtr, g, through_head=False, cache=cache)
                mlp, state = adam_step(mlp, grads, state)
                if epoch % eval_every == 0 or epoch == epochs:
                    z = mlp_logits(mlp, Xva)[:, 0]
                    key = (evaluation.tpr_at_fpr(z, yva, fpr_level), evaluation.auc(z, yva))
                    if best is None or key > best[0]:
                        best = (key, epoch, mlp.copy())
            (tpr, vauc), ep, snap = best
            log.info("candidate width=%d lr=%g: val TPR=%.4f AUC=%.4f at epoch %d", width, lr, tpr, vauc, ep)
            results.append({"width": width, "lr": lr, "epoch": ep, "val_tpr": tpr, "val_auc": vauc, "_mlp": snap})
    # sorted iteration + strict '>' keeps the smallest width / lowest lr on ties
    chosen = results[0]
    for r in results[1:]:
        if r["val_tpr"] > chosen["val_tpr"]:
            chosen = r
    public = [{k: v for k, v in r.items() if k != "_mlp"} for r in results]
    hp = {k: v for k, v in chosen.items() if k != "_mlp"}
    return AttackClassifier(chosen["_mlp"], mean, std, hp, public)


def classifier_scores(clf: AttackClassifier, values) -> np.ndarray:
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    if values.shape[1] != clf.input_size:
        raise ShapeError(f"feature width {values.shape[1]} != classifier input {clf.input_size}")
    z = mlp_logits(clf.mlp, _normalize(values, clf.feature_mean, clf.feature_std), row_exact=True)[:, 0]
    return np.clip(sigmoid(z), 0.0, 1.0)


def score_records(clf: AttackClassifier, fm: FeatureMatrix) -> list[ScoreRecord]:
    s = classifier_scores(clf, fm.values)
    return [ScoreRecord(r, m, float(v)) for r, m, v in zip(fm.record_ids, fm.model_ids, s)]


# -- best-noise reference ---------------------------------------------------


def best_noise_oracle(model, records, labels, noises, t: int, schedule: NoiseSchedule, chunk: int = 64):
    """AUC of the naive loss under each candidate noise, and the argmax.

    Needs ground-truth labels, so it is a reference point, not an attack.

    Returns:
        ``(aucs, best_index)``.
    """
    if labels is None:
        raise DegenerateLabels("best-noise selection needs labels")
    X = np.atleast_2d(np.asarray(records, dtype=np.float64))
    y = np.asarray(labels)
    noises = np.atleast_2d(np.asarray(noises, dtype=np.float64))
    n = X.shape[0]
    aucs = np.empty(noises.shape[0])
    for start in range(0, noises.shape[0], chunk):
        E = noises[start:start + chunk]
        m = E.shape[0]
        L = diffusion_loss(model, np.tile(X, (m, 1)), np.repeat(E, n, axis=0), t, schedule).reshape(m, n)
        for j in range(m):
            aucs[start + j] = evaluation.auc(-L[j], y)
    return aucs, int(np.argmax(aucs))
