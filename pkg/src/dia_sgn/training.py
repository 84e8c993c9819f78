"""Training loop, evaluation metrics, and gradient checking."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import sgn
from .autodiff import Tensor
from .errors import (
    Diverged,
    EmptyDataset,
    InvalidLabel,
    NonFiniteGradient,
)
from .gmm import OUTPUT_NAMES, GmmParams
from .sgn import Batch, Sample, SgnConfig, SgnParams

_PRESETS = {"paper": sgn.paper_config, "desk": sgn.desk_config, "tiny": sgn.tiny_config}


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 512
    epochs: int = 50
    beta: float = 1.0
    k_reg: float = 1e-3
    n_mixtures: int = 3
    max_history: int = 2
    preset: str = "paper"
    ua_sgn: bool = False
    nc_sgn: bool = False
    raw_sigma: bool = False
    optimizer: str = "adam"
    clip_norm: float = 10.0
    dropout_rate: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.preset not in _PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    @staticmethod
    def desk(**overrides) -> "TrainConfig":
        base = dict(preset="desk", batch_size=64)
        base.update(overrides)
        return TrainConfig(**base)

    def sgn_config(self) -> SgnConfig:
        return _PRESETS[self.preset](
            n_mixtures=self.n_mixtures,
            k_reg=self.k_reg,
            max_history=self.max_history,
            ua_sgn=self.ua_sgn,
            nc_sgn=self.nc_sgn,
            raw_sigma=self.raw_sigma,
            dropout_rate=self.dropout_rate,
        )

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class Metrics:
    intention_accuracy: float | None = None
    rmse: dict[str, float] | None = None
    std: dict[str, float] | None = None
    loss_curve: tuple[float, ...] = ()
    accuracy_curve: tuple[float, ...] = ()
    n_samples: int = 0

    def to_dict(self) -> dict:
        return {
            "intention_accuracy": self.intention_accuracy,
            "rmse": self.rmse,
            "std": self.std,
            "loss_curve": list(self.loss_curve),
            "accuracy_curve": list(self.accuracy_curve),
            "n_samples": self.n_samples,
        }

    @staticmethod
    def from_dict(d: Mapping) -> "Metrics":
        return Metrics(
            intention_accuracy=d.get("intention_accuracy"),
            rmse=d.get("rmse"),
            std=d.get("std"),
            loss_curve=tuple(d.get("loss_curve", ())),
            accuracy_curve=tuple(d.get("accuracy_curve", ())),
            n_samples=d.get("n_samples", 0),
        )

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1))

    def write_epochs_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "mean_loss", "accuracy"])
            for i, (l, a) in enumerate(zip(self.loss_curve, self.accuracy_curve), start=1):
                writer.writerow([i, repr(float(l)), repr(float(a))])


# ---------------------------------------------------------------------------
# gradients and optimizers


def gradients(loss_value: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of a scalar loss for every named parameter."""
    if not math.isfinite(float(loss_value.data)):
        raise NonFiniteGradient("loss is not finite before backward")
    loss_value.backward()
    out: dict[str, np.ndarray] = {}
    for name, t in params.items():
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"gradient of {name!r} contains NaN/Inf")
        out[name] = np.asarray(g)
    return out


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm <= 0 or total <= max_norm:
        return grads
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}


class SgdOptimizer:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, tensors: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        for k in tensors:
            tensors[k] = tensors[k] - self.lr * grads[k]


class AdamOptimizer:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, tensors: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for k in tensors:
            g = grads[k]
            m = self.m.get(k)
            v = self.v.get(k)
            m = (1 - self.beta1) * g if m is None else self.beta1 * m + (1 - self.beta1) * g
            v = (1 - self.beta2) * g * g if v is None else self.beta2 * v + (1 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            tensors[k] = tensors[k] - self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def _make_optimizer(config: TrainConfig):
    if config.optimizer == "sgd":
        return SgdOptimizer(config.learning_rate)
    return AdamOptimizer(config.learning_rate)


# ---------------------------------------------------------------------------
# training


def _validate_dataset(dataset: Sequence[Sample]) -> None:
    if not dataset:
        raise EmptyDataset("training requested on an empty dataset")
    for s in dataset:
        k = len(s.history.node_ids)
        if not 0 <= s.target_index < k:
            raise InvalidLabel(f"target index {s.target_index} outside 0..{k - 1}")
        if not np.all(np.isfinite(s.y)) or s.y.shape != (3,):
            raise InvalidLabel(f"bad target vector {s.y}")


def train(dataset: Sequence[Sample], config: TrainConfig) -> tuple[SgnParams, Metrics]:
    """Gradient-descent training; bit-reproducible for a fixed seed."""
    _validate_dataset(dataset)
    cfg = config.sgn_config()
    params = sgn.init_params(cfg, config.seed)
    optimizer = _make_optimizer(config)
    order_rng = np.random.default_rng([config.seed, 101])
    n = len(dataset)
    losses: list[float] = []
    accs: list[float] = []
    last_good = params.copy()
    step_idx = 0
    for epoch in range(config.epochs):
        perm = order_rng.permutation(n)
        epoch_loss = 0.0
        epoch_correct = 0
        for start in range(0, n, config.batch_size):
            chunk = [dataset[i] for i in perm[start : start + config.batch_size]]
            batches = sgn.bucket_samples(chunk, cfg)
            pt = sgn.wrap_parameters(params)
            drop_rng = (
                np.random.default_rng([config.seed, 202, step_idx])
                if config.dropout_rate > 0
                else None
            )
            total = len(chunk)
            acc_t: Tensor | None = None
            for b in batches:
                term, correct = sgn.batch_loss_parts(pt, b, cfg, config.beta, drop_rng)
                acc_t = term if acc_t is None else acc_t + term
                epoch_correct += correct
            loss_t = acc_t * (1.0 / total)
            value = float(loss_t.data)
            if not math.isfinite(value):
                raise Diverged(
                    f"loss became non-finite at epoch {epoch + 1}",
                    params=last_good,
                    metrics=Metrics(
                        loss_curve=tuple(losses), accuracy_curve=tuple(accs), n_samples=n
                    ),
                )
            grads = gradients(loss_t, pt)
            grads = clip_by_global_norm(grads, config.clip_norm)
            optimizer.step(params.tensors, grads)
            epoch_loss += value * total
            step_idx += 1
        losses.append(epoch_loss / n)
        accs.append(epoch_correct / n)
        last_good = params.copy()
    metrics = Metrics(
        intention_accuracy=accs[-1] if accs else None,
        loss_curve=tuple(losses),
        accuracy_curve=tuple(accs),
        n_samples=n,
    )
    return params, metrics


# ---------------------------------------------------------------------------
# evaluation


def _grouped_indices(dataset: Sequence[Sample]) -> list[list[int]]:
    groups: dict[tuple[int, int], list[int]] = {}
    for i, s in enumerate(dataset):
        groups.setdefault(s.history.features.shape[:2], []).append(i)
    return [groups[k] for k in sorted(groups)]


def predict_batches(
    params: SgnParams, dataset: Sequence[Sample]
) -> tuple[np.ndarray, list[np.ndarray], list[GmmParams]]:
    """Vectorized inference: argmax candidate, w vectors, target-edge GMMs."""
    cfg = params.config
    pt = sgn.wrap_parameters(params)
    picks = np.zeros(len(dataset), dtype=np.int64)
    w_out: list[np.ndarray] = [None] * len(dataset)  # type: ignore[list-item]
    gmms: list[GmmParams] = [None] * len(dataset)  # type: ignore[list-item]
    for idx_group in _grouped_indices(dataset):
        group = [dataset[i] for i in idx_group]
        batch = sgn.pack_histories(
            [s.history for s in group],
            cfg,
            targets=[s.target_index for s in group],
            ys=[s.y for s in group],
        )
        with ad.no_grad():
            out = sgn._forward_tensors(pt, batch, cfg, None)
            b = np.arange(batch.size)
            o_t = out["o"][b, batch.tgt_idx]
            raw = ad.linear(o_t, pt["out1.W"], pt["out1.b"])
            raw = ad.reshape(raw, (batch.size, cfg.n_mixtures, sgn.GMM_FIELDS_PER_COMPONENT))
            logits, mu, entries = sgn._gmm_entry_tensors(raw, cfg)
        z = out["z"].data
        raw_w = sgn._stable_logistic_of_negative(z)
        w = raw_w / raw_w.sum(-1, keepdims=True)
        lg = logits.data
        alphas = np.exp(lg - lg.max(-1, keepdims=True))
        alphas /= alphas.sum(-1, keepdims=True)
        covs = sgn._entries_to_covs(entries)
        for row, i in enumerate(idx_group):
            picks[i] = int(np.argmax(w[row]))
            w_out[i] = w[row].copy()
            gmms[i] = GmmParams(alphas=alphas[row], means=mu.data[row], covs=covs[row])
    return picks, w_out, gmms


def compute_metrics(
    picks: np.ndarray,
    targets: np.ndarray,
    gmms: Sequence[GmmParams],
    ys: np.ndarray,
    n_samples: int,
    seed: int,
) -> Metrics:
    """Classification accuracy plus per-variable error of mean-of-draws.

    Point estimates are the mean of ``n_samples`` draws from the ground
    truth candidate's mixture; errors are estimate minus target.
    """
    rng = np.random.default_rng([seed, 31])
    errors = np.zeros((len(gmms), 3))
    for i, (gmm, y) in enumerate(zip(gmms, ys)):
        draws = gmm.sample(rng, n_samples)
        errors[i] = draws.mean(axis=0) - y
    rmse = {n: float(np.sqrt((errors[:, j] ** 2).mean())) for j, n in enumerate(OUTPUT_NAMES)}
    std = {n: float(errors[:, j].std()) for j, n in enumerate(OUTPUT_NAMES)}
    return Metrics(
        intention_accuracy=float((picks == targets).mean()),
        rmse=rmse,
        std=std,
        n_samples=len(gmms),
    )


def evaluate(
    params: SgnParams,
    dataset: Sequence[Sample],
    n_samples: int = 50,
    seed: int = 0,
) -> Metrics:
    """Held-out metrics; read-only on the parameters."""
    if not dataset:
        raise EmptyDataset("evaluation requested on an empty dataset")
    picks, _, gmms = predict_batches(params, dataset)
    targets = np.array([s.target_index for s in dataset])
    ys = np.stack([s.y for s in dataset])
    return compute_metrics(picks, targets, gmms, ys, n_samples, seed)


# ---------------------------------------------------------------------------
# finite-difference gradient checking


def finite_difference_gradients(
    params: SgnParams,
    batches: Sequence[Batch],
    beta: float,
    step: float = 1e-5,
    chunk: int = 256,
) -> dict[str, np.ndarray]:
    """Central differences of the loss for every scalar parameter.

    Perturbations are evaluated in vectorized stacks through the plain
    numpy twin of the loss (asserted elsewhere to match the autodiff path
    to machine precision).
    """
    base = {k: v[None] for k, v in params.tensors.items()}
    out: dict[str, np.ndarray] = {}
    for name, arr in params.tensors.items():
        flat = arr.reshape(-1)
        grad = np.zeros_like(flat)
        for lo in range(0, flat.size, chunk):
            idx = np.arange(lo, min(lo + chunk, flat.size))
            stack = np.repeat(flat[None], len(idx), axis=0)
            stack[np.arange(len(idx)), idx] += step
            plus = sgn.loss_value_stacked(
                {**base, name: stack.reshape((len(idx),) + arr.shape)},
                batches,
                params.config,
                beta,
            )
            stack[np.arange(len(idx)), idx] -= 2 * step
            minus = sgn.loss_value_stacked(
                {**base, name: stack.reshape((len(idx),) + arr.shape)},
                batches,
                params.config,
                beta,
            )
            grad[idx] = (plus - minus) / (2 * step)
        out[name] = grad.reshape(arr.shape)
    return out


def gradient_check(
    params: SgnParams,
    samples: Sequence[Sample],
    beta: float = 1.0,
    step: float = 1e-5,
) -> float:
    """Worst relative disagreement between autodiff and central differences.

    Relative error uses a small floor so that near-zero entries are judged
    against the finite-difference noise floor rather than 0/0.
    """
    batches = sgn.bucket_samples(list(samples), params.config)
    pt = sgn.wrap_parameters(params)
    analytic = gradients(
        sgn.loss_tensor(pt, batches, params.config, beta, None), pt
    )
    # twin must agree with the differentiated loss before FD means anything
    twin = sgn.loss_value_stacked(
        {k: v[None] for k, v in params.tensors.items()}, batches, params.config, beta
    )[0]
    direct = float(sgn.loss_tensor(sgn.wrap_parameters(params), batches, params.config, beta).data)
    if not math.isclose(twin, direct, rel_tol=1e-12, abs_tol=1e-12):
        raise AssertionError(f"loss twin diverged from autodiff path: {twin} vs {direct}")
    numeric = finite_difference_gradients(params, batches, beta, step=step)
    worst = 0.0
    for k in analytic:
        a, f = analytic[k], numeric[k]
        rel = np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-3)
        worst = max(worst, float(rel.max()))
    return worst
