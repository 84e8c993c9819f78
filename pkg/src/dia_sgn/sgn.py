"""Graph network over insertion-area candidates.

Per snapshot history, every candidate node j is encoded relative to the
reference node i (the predicted vehicle's front gap):

* relative features  x_{j->i} = W_rel [x_j - x_i ; x_j] + b_rel
* recurrent encoders ``rec1`` (per candidate, over relative features) and
  ``rec2`` (reference node, over its absolute features); gated recurrent
  cells with update/reset gates: h' = (1-z) h + z tanh(...)
* spatial attention: scores over candidate pairs, softmax across the
  attended index, attention-weighted sum of encoded features
* predictor encoding: edge vector o_ij from concat of the attended
  feature and the encoded pair [h_cand ; h_ref]
* output heads: a mixture density (M trivariate Gaussians, Cholesky
  parameterized, plus k*I regularization) and a per-candidate insertion
  probability w_ij = 1/(1+exp(score)), normalized across candidates.

Ablation flags: ``ua_sgn`` forces uniform attention; ``nc_sgn`` feeds the
pair encoder the reference hidden state alone; ``raw_sigma`` switches the
covariance head to the unconstrained construction (exp stds, raw
covariances) that positive-definiteness is not guaranteed for.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dynamic_env import FEATURE_NAMES
from .errors import (
    DimensionMismatch,
    EmptyNeighborhood,
    InvalidLabel,
    NonFinite,
)
from .gmm import GmmParams
from .semantic_graph import FEATURE_SCALES, GraphHistory

log = logging.getLogger("dia_sgn")

GMM_FIELDS_PER_COMPONENT = 10   # mixing logit, 3 means, 3 diag, 3 off-diag
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class SgnConfig:
    embed_dim: int = 64
    hidden_dim: int = 128
    n_mixtures: int = 3
    features: tuple[str, ...] = FEATURE_NAMES
    k_reg: float = 1e-3
    dropout_rate: float = 0.1
    max_history: int = 2
    ua_sgn: bool = False
    nc_sgn: bool = False
    raw_sigma: bool = False
    version: int = 1

    @property
    def n_features(self) -> int:
        return len(self.features)

    def feature_scales(self) -> np.ndarray:
        return np.array([FEATURE_SCALES[n] for n in self.features])

    def to_dict(self) -> dict:
        return {
            "embed_dim": self.embed_dim,
            "hidden_dim": self.hidden_dim,
            "n_mixtures": self.n_mixtures,
            "features": list(self.features),
            "k_reg": self.k_reg,
            "dropout_rate": self.dropout_rate,
            "max_history": self.max_history,
            "ua_sgn": self.ua_sgn,
            "nc_sgn": self.nc_sgn,
            "raw_sigma": self.raw_sigma,
            "version": self.version,
        }

    @staticmethod
    def from_dict(d: Mapping) -> "SgnConfig":
        d = dict(d)
        d["features"] = tuple(d["features"])
        return SgnConfig(**d)


def paper_config(**overrides) -> SgnConfig:
    return replace(SgnConfig(embed_dim=64, hidden_dim=128), **overrides)


def desk_config(**overrides) -> SgnConfig:
    """Half-size preset: keeps gradient checks and CI runs fast."""
    return replace(SgnConfig(embed_dim=32, hidden_dim=64), **overrides)


def tiny_config(**overrides) -> SgnConfig:
    """Minimal dims for exhaustive per-parameter derivative checks."""
    return replace(SgnConfig(embed_dim=8, hidden_dim=8, n_mixtures=2), **overrides)


def parameter_shapes(config: SgnConfig) -> dict[str, tuple[int, ...]]:
    """Canonical tensor layout; also the serialization order."""
    F, E, H, M = config.n_features, config.embed_dim, config.hidden_dim, config.n_mixtures
    shapes: dict[str, tuple[int, ...]] = {"rel.W": (2 * F, E), "rel.b": (E,)}
    for name, xdim in (("rec1", E), ("rec2", F)):
        for gate in "zrc":
            shapes[f"{name}.W{gate}"] = (xdim, H)
            shapes[f"{name}.U{gate}"] = (H, H)
            shapes[f"{name}.b{gate}"] = (H,)
    shapes["enc1.W"] = (H, E)
    shapes["enc1.b"] = (E,)
    shapes["att.W"] = (2 * E, 1)
    shapes["att.b"] = (1,)
    shapes["enc2.W"] = (H if config.nc_sgn else 2 * H, E)
    shapes["enc2.b"] = (E,)
    shapes["pred.W"] = (2 * E, E)
    shapes["pred.b"] = (E,)
    shapes["out1.W"] = (E, M * GMM_FIELDS_PER_COMPONENT)
    shapes["out1.b"] = (M * GMM_FIELDS_PER_COMPONENT,)
    shapes["out2.W"] = (E, 1)
    shapes["out2.b"] = (1,)
    return shapes


@dataclass(eq=False)
class SgnParams:
    config: SgnConfig
    tensors: dict[str, np.ndarray]

    def copy(self) -> "SgnParams":
        return SgnParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def n_parameters(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def validate(self) -> None:
        shapes = parameter_shapes(self.config)
        if list(shapes) != list(self.tensors):
            raise DimensionMismatch("parameter names/order do not match the config layout")
        for k, s in shapes.items():
            if self.tensors[k].shape != s:
                raise DimensionMismatch(f"{k}: shape {self.tensors[k].shape}, expected {s}")
            if not np.all(np.isfinite(self.tensors[k])):
                raise NonFinite(f"parameter {k} contains NaN/Inf")


def init_params(config: SgnConfig, seed: int) -> SgnParams:
    """Glorot-uniform weights, zero biases.

    The mixture head's diagonal log-std bias starts at 1.0 so initial
    densities are wide enough for meter/second scale targets.
    """
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(config).items():
        if name.split(".")[-1].startswith("b"):  # biases: .b / .bz / .br / .bc
            tensors[name] = np.zeros(shape)
        else:
            fan_in, fan_out = shape[0], shape[1]
            lim = math.sqrt(6.0 / (fan_in + fan_out))
            tensors[name] = rng.uniform(-lim, lim, size=shape)
    b1 = tensors["out1.b"].reshape(config.n_mixtures, GMM_FIELDS_PER_COMPONENT)
    b1[:, 4:7] = 1.0
    tensors["out1.b"] = b1.reshape(-1)
    return SgnParams(config=config, tensors=tensors)


def wrap_parameters(params: SgnParams) -> dict[str, Tensor]:
    return {k: ad.parameter(v) for k, v in params.tensors.items()}


# ---------------------------------------------------------------------------
# batching


@dataclass(frozen=True, eq=False)
class Sample:
    """One training/evaluation record: history plus insertion label."""

    history: GraphHistory
    target_index: int
    y: np.ndarray   # (3,) ground-truth [y_s1, y_s2, y_t]


@dataclass(eq=False)
class Batch:
    """Stacked histories with identical (T, K)."""

    rel: np.ndarray           # (B, T, K, 2F) normalized relative features
    ref_feats: np.ndarray     # (B, T, F) normalized reference features
    presence: np.ndarray      # (B, T, K) float mask
    ref_presence: np.ndarray  # (B, T) float mask
    tgt_idx: np.ndarray | None = None   # (B,)
    y: np.ndarray | None = None         # (B, 3)

    @property
    def size(self) -> int:
        return self.rel.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.rel.shape[2]


def pack_histories(
    histories: Sequence[GraphHistory],
    config: SgnConfig,
    targets: Sequence[int] | None = None,
    ys: Sequence[np.ndarray] | None = None,
) -> Batch:
    """Stack equal-shape histories into arrays ready for the network."""
    shapes = {h.features.shape for h in histories}
    if len(shapes) != 1:
        raise DimensionMismatch(f"histories differ in (T, K): {sorted(shapes)}")
    idx = [FEATURE_NAMES.index(n) for n in config.features]
    scales = config.feature_scales()
    feats = np.stack([h.features for h in histories])[:, :, :, idx] / scales
    presence = np.stack([h.presence for h in histories]).astype(np.float64)
    ref_idx = np.array([h.reference_index for h in histories])
    b = np.arange(len(histories))
    ref_feats = feats[b, :, ref_idx, :]
    ref_presence = presence[b, :, ref_idx]
    rel = np.concatenate([feats - ref_feats[:, :, None, :], feats], axis=-1)
    return Batch(
        rel=rel,
        ref_feats=ref_feats,
        presence=presence,
        ref_presence=ref_presence,
        tgt_idx=None if targets is None else np.asarray(targets, dtype=np.int64),
        y=None if ys is None else np.stack([np.asarray(y, dtype=np.float64) for y in ys]),
    )


def bucket_samples(samples: Sequence[Sample], config: SgnConfig) -> list[Batch]:
    """Group samples by (history length, node count); deterministic order."""
    groups: dict[tuple[int, int], list[Sample]] = {}
    for s in samples:
        groups.setdefault(s.history.features.shape[:2], []).append(s)
    out = []
    for key in sorted(groups):
        grp = groups[key]
        out.append(
            pack_histories(
                [s.history for s in grp],
                config,
                targets=[s.target_index for s in grp],
                ys=[s.y for s in grp],
            )
        )
    return out


# ---------------------------------------------------------------------------
# tensor-graph forward


def _dropout(t: Tensor, config: SgnConfig, rng: np.random.Generator | None) -> Tensor:
    if rng is None or config.dropout_rate <= 0.0:
        return t
    keep = 1.0 - config.dropout_rate
    mask = (rng.random(t.shape) < keep) / keep
    return ad.mul(t, Tensor(mask))


def _gru_step(pt: Mapping[str, Tensor], name: str, x: Tensor, h: Tensor) -> Tensor:
    z = ad.sigmoid(ad.linear(x, pt[f"{name}.Wz"], pt[f"{name}.bz"]) + h @ pt[f"{name}.Uz"])
    r = ad.sigmoid(ad.linear(x, pt[f"{name}.Wr"], pt[f"{name}.br"]) + h @ pt[f"{name}.Ur"])
    c = ad.tanh(ad.linear(x, pt[f"{name}.Wc"], pt[f"{name}.bc"]) + (r * h) @ pt[f"{name}.Uc"])
    return (1.0 - z) * h + z * c


def _expand_nodes(t: Tensor, k: int) -> Tensor:
    """(B, D) -> (B, K, D) by explicit broadcast."""
    b, d = t.shape
    return ad.reshape(t, (b, 1, d)) + Tensor(np.zeros((b, k, d)))


def _encode_tensors(
    pt: Mapping[str, Tensor],
    batch: Batch,
    config: SgnConfig,
    rng: np.random.Generator | None,
) -> tuple[Tensor, Tensor]:
    """Recurrent encodings: per-candidate hidden (B,K,H), reference (B,H)."""
    B, T, K, _ = batch.rel.shape
    H = config.hidden_dim
    x_lin = _dropout(ad.linear(Tensor(batch.rel), pt["rel.W"], pt["rel.b"]), config, rng)
    h1: Tensor = Tensor(np.zeros((B, K, H)))
    for t in range(T):
        h_new = _gru_step(pt, "rec1", x_lin[:, t], h1)
        m = Tensor(batch.presence[:, t][..., None])
        h1 = m * h_new + (1.0 - m) * h1
    ref = Tensor(batch.ref_feats)
    h2: Tensor = Tensor(np.zeros((B, H)))
    for t in range(T):
        h_new = _gru_step(pt, "rec2", ref[:, t], h2)
        m = Tensor(batch.ref_presence[:, t][..., None])
        h2 = m * h_new + (1.0 - m) * h2
    return h1, h2


def _attention_tensors(
    pt: Mapping[str, Tensor],
    h1: Tensor,
    config: SgnConfig,
    rng: np.random.Generator | None,
) -> tuple[Tensor, Tensor]:
    """Attention-weighted candidate features (B,K,E) and weights (B,K,K)."""
    B, K, _ = h1.shape
    E = config.embed_dim
    h_enc = _dropout(ad.tanh(ad.linear(h1, pt["enc1.W"], pt["enc1.b"])), config, rng)
    if config.ua_sgn:
        alpha: Tensor = Tensor(np.full((B, K, K), 1.0 / K))
    else:
        w_j = pt["att.W"][0:E]
        w_k = pt["att.W"][E:]
        u = h_enc @ w_j                      # (B, K, 1)
        v = ad.reshape(h_enc @ w_k, (B, 1, K))
        scores = ad.tanh(u + v + pt["att.b"])
        alpha = ad.softmax(scores, axis=-1)
    h_bar = alpha @ h_enc
    return h_bar, alpha


def _predictor_tensors(
    pt: Mapping[str, Tensor],
    h1: Tensor,
    h2: Tensor,
    h_bar: Tensor,
    config: SgnConfig,
    rng: np.random.Generator | None,
) -> Tensor:
    B, K, _ = h1.shape
    if config.nc_sgn:
        h_ij = ad.tanh(ad.linear(h2, pt["enc2.W"], pt["enc2.b"]))
        h_ij = _expand_nodes(h_ij, K)
    else:
        pair = ad.concat([h1, _expand_nodes(h2, K)], axis=-1)
        h_ij = ad.tanh(ad.linear(pair, pt["enc2.W"], pt["enc2.b"]))
    h_ij = _dropout(h_ij, config, rng)
    o = ad.tanh(ad.linear(ad.concat([h_bar, h_ij], axis=-1), pt["pred.W"], pt["pred.b"]))
    return _dropout(o, config, rng)


def _forward_tensors(
    pt: Mapping[str, Tensor],
    batch: Batch,
    config: SgnConfig,
    rng: np.random.Generator | None = None,
) -> dict[str, Tensor]:
    if batch.rel.shape[-1] != 2 * config.n_features:
        raise DimensionMismatch(
            f"batch features {batch.rel.shape[-1] // 2} vs config {config.n_features}"
        )
    if batch.n_nodes < 1:
        raise EmptyNeighborhood("no candidate nodes")
    h1, h2 = _encode_tensors(pt, batch, config, rng)
    h_bar, alpha = _attention_tensors(pt, h1, config, rng)
    o = _predictor_tensors(pt, h1, h2, h_bar, config, rng)
    z = ad.linear(o, pt["out2.W"], pt["out2.b"])[..., 0]   # (B, K)
    return {"h1": h1, "h2": h2, "h_bar": h_bar, "alpha": alpha, "o": o, "z": z}


def _gmm_entry_tensors(raw: Tensor, config: SgnConfig):
    """Split head output (..., M, 10) into mixture parameter tensors.

    Returns (logits, means, cov entries (s00,s01,s02,s11,s12,s22)), each
    entry shaped (..., M). Cholesky construction by default; the raw
    construction (flag) reproduces the unconstrained covariance assembly.
    """
    k = config.k_reg
    logits = raw[..., 0]
    mu = raw[..., 1:4]
    d0, d1, d2 = raw[..., 4], raw[..., 5], raw[..., 6]
    o0, o1, o2 = raw[..., 7], raw[..., 8], raw[..., 9]
    if config.raw_sigma:
        sd0, sd1, sd2 = ad.exp(d0), ad.exp(d1), ad.exp(d2)
        s00 = sd0 * sd0 + k
        s11 = sd1 * sd1 + k
        s22 = sd2 * sd2 + k
        s01, s02, s12 = o0, o1, o2
    else:
        l00, l11, l22 = ad.exp(d0), ad.exp(d1), ad.exp(d2)
        s00 = l00 * l00 + k
        s01 = l00 * o0
        s02 = l00 * o1
        s11 = o0 * o0 + l11 * l11 + k
        s12 = o0 * o1 + l11 * o2
        s22 = o1 * o1 + o2 * o2 + l22 * l22 + k
    return logits, mu, (s00, s01, s02, s11, s12, s22)


def _log_mixture_density(logits, mu, entries, y: np.ndarray) -> Tensor:
    """log sum_m alpha_m N(y | mu_m, Sigma_m), shapes (..., M) -> (...)."""
    s00, s01, s02, s11, s12, s22 = entries
    v = Tensor(y)[..., None, :] - mu
    v0, v1, v2 = v[..., 0], v[..., 1], v[..., 2]
    a00 = s11 * s22 - s12 * s12
    a01 = s02 * s12 - s01 * s22
    a02 = s01 * s12 - s02 * s11
    a11 = s00 * s22 - s02 * s02
    a12 = s01 * s02 - s00 * s12
    a22 = s00 * s11 - s01 * s01
    det = s00 * a00 + s01 * a01 + s02 * a02
    quad = (
        v0 * v0 * a00
        + v1 * v1 * a11
        + v2 * v2 * a22
        + 2.0 * (v0 * v1 * a01 + v0 * v2 * a02 + v1 * v2 * a12)
    ) / det
    log_norm = ad.log(det) * 0.5 + 1.5 * LOG_2PI
    log_comp = quad * (-0.5) - log_norm
    log_alpha = logits - ad.logsumexp(logits, axis=-1, keepdims=True)
    return ad.logsumexp(log_alpha + log_comp, axis=-1)


def _log_insertion_probs(z: Tensor) -> Tensor:
    """log of normalized w for w_raw = 1/(1+exp(z)); stable for any z."""
    q = ad.softplus(z) * (-1.0)                      # log raw w
    return q - ad.logsumexp(q, axis=-1, keepdims=True)


def batch_loss_parts(
    pt: Mapping[str, Tensor],
    batch: Batch,
    config: SgnConfig,
    beta: float,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, int]:
    """Loss sum over the batch plus the count of correct argmax picks.

    The highest normalized w coincides with the lowest raw head score, so
    correctness needs no extra normalization pass.
    """
    if batch.tgt_idx is None or batch.y is None:
        raise InvalidLabel("batch carries no labels")
    out = _forward_tensors(pt, batch, config, rng)
    b = np.arange(batch.size)
    o_t = out["o"][b, batch.tgt_idx]                       # (B, E)
    raw = ad.linear(o_t, pt["out1.W"], pt["out1.b"])
    raw = ad.reshape(raw, (batch.size, config.n_mixtures, GMM_FIELDS_PER_COMPONENT))
    logits, mu, entries = _gmm_entry_tensors(raw, config)
    log_f = _log_mixture_density(logits, mu, entries, batch.y)   # (B,)
    log_w = _log_insertion_probs(out["z"])[b, batch.tgt_idx]     # (B,)
    per_sample = log_f * (-1.0) + log_w * (-beta)
    correct = int((np.argmin(out["z"].data, axis=-1) == batch.tgt_idx).sum())
    return ad.tsum(per_sample), correct


def batch_loss_sum(
    pt: Mapping[str, Tensor],
    batch: Batch,
    config: SgnConfig,
    beta: float,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Sum over the batch of [-log f(y | true edge) - beta log w(true edge)]."""
    return batch_loss_parts(pt, batch, config, beta, rng)[0]


def loss_tensor(
    pt: Mapping[str, Tensor],
    batches: Sequence[Batch],
    config: SgnConfig,
    beta: float,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Mean loss over all samples in the (bucketed) batch list."""
    total = sum(b.size for b in batches)
    acc: Tensor | None = None
    for b in batches:
        term = batch_loss_sum(pt, b, config, beta, rng)
        acc = term if acc is None else acc + term
    assert acc is not None
    return acc * (1.0 / total)


# ---------------------------------------------------------------------------
# public single-graph operations (inference, oracles, tests)


@dataclass(frozen=True, eq=False)
class EdgeOutput:
    o: np.ndarray
    gmm: GmmParams
    w: float


@dataclass(frozen=True, eq=False)
class ForwardResult:
    node_ids: tuple[str, ...]
    reference_node: str
    edges: tuple[EdgeOutput, ...]
    attention: np.ndarray    # (K, K): row j attends over columns k
    w: np.ndarray            # (K,) normalized insertion probabilities

    def edge(self, node_id: str) -> EdgeOutput:
        return self.edges[self.node_ids.index(node_id)]

    def edge_outputs(self) -> dict[str, tuple[GmmParams, float]]:
        return {nid: (e.gmm, e.w) for nid, e in zip(self.node_ids, self.edges)}


def _entries_to_covs(entries) -> np.ndarray:
    s00, s01, s02, s11, s12, s22 = (e.data if isinstance(e, Tensor) else e for e in entries)
    covs = np.empty(s00.shape + (3, 3))
    covs[..., 0, 0] = s00
    covs[..., 0, 1] = covs[..., 1, 0] = s01
    covs[..., 0, 2] = covs[..., 2, 0] = s02
    covs[..., 1, 1] = s11
    covs[..., 1, 2] = covs[..., 2, 1] = s12
    covs[..., 2, 2] = s22
    return covs


def encode_nodes(history: GraphHistory, params: SgnParams) -> tuple[np.ndarray, np.ndarray]:
    """Hidden states for every candidate (K, H) and the reference node (H,)."""
    batch = pack_histories([history], params.config)
    with ad.no_grad():
        h1, h2 = _encode_tensors(wrap_parameters(params), batch, params.config, None)
    return h1.data[0], h2.data[0]


def spatial_attention(
    hidden: np.ndarray,
    params: SgnParams,
    ua_sgn: bool | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Attention over candidate hiddens (K, H): returns (h_bar, alpha)."""
    if hidden.ndim != 2 or hidden.shape[0] == 0:
        raise EmptyNeighborhood("attention needs at least one candidate")
    cfg = params.config if ua_sgn is None else replace(params.config, ua_sgn=ua_sgn)
    with ad.no_grad():
        h_bar, alpha = _attention_tensors(
            wrap_parameters(params), Tensor(hidden[None]), cfg, None
        )
    return h_bar.data[0], alpha.data[0]


def predictor_encode(
    hidden: np.ndarray,
    ref_hidden: np.ndarray,
    h_bar: np.ndarray,
    params: SgnParams,
    nc_sgn: bool | None = None,
) -> np.ndarray:
    """Edge vectors o (K, E) from candidate hiddens, reference hidden, h_bar."""
    cfg = params.config if nc_sgn is None else replace(params.config, nc_sgn=nc_sgn)
    with ad.no_grad():
        o = _predictor_tensors(
            wrap_parameters(params),
            Tensor(hidden[None]),
            Tensor(ref_hidden[None]),
            Tensor(h_bar[None]),
            cfg,
            None,
        )
    return o.data[0]


def gmm_head(o: np.ndarray, params: SgnParams, k_reg: float | None = None):
    """Mixture parameters for edge vectors: (E,) -> GmmParams, (K,E) -> list."""
    cfg = params.config if k_reg is None else replace(params.config, k_reg=k_reg)
    single = o.ndim == 1
    o2 = np.atleast_2d(np.asarray(o, dtype=np.float64))
    if not np.all(np.isfinite(o2)):
        raise NonFinite("edge vector contains NaN/Inf")
    pt = wrap_parameters(params)
    with ad.no_grad():
        raw = ad.linear(Tensor(o2), pt["out1.W"], pt["out1.b"])
        raw = ad.reshape(raw, (len(o2), cfg.n_mixtures, GMM_FIELDS_PER_COMPONENT))
        logits, mu, entries = _gmm_entry_tensors(raw, cfg)
    lg = logits.data
    alphas = np.exp(lg - lg.max(-1, keepdims=True))
    alphas = alphas / alphas.sum(-1, keepdims=True)
    covs = _entries_to_covs(entries)
    if not (np.all(np.isfinite(alphas)) and np.all(np.isfinite(mu.data)) and np.all(np.isfinite(covs))):
        raise NonFinite("mixture head produced NaN/Inf")
    out = [GmmParams(alphas=alphas[i], means=mu.data[i], covs=covs[i]) for i in range(len(o2))]
    return out[0] if single else out


def insertion_probs(o: np.ndarray, params: SgnParams) -> np.ndarray:
    """Normalized insertion probabilities for edge vectors (K, E)."""
    if len(o) == 0:
        raise EmptyNeighborhood("no candidates")
    pt = wrap_parameters(params)
    with ad.no_grad():
        z = ad.linear(Tensor(np.atleast_2d(o)), pt["out2.W"], pt["out2.b"]).data[..., 0]
    raw = _stable_logistic_of_negative(z)
    total = raw.sum()
    if total < 1e-30:
        log.warning("all raw insertion probabilities underflowed; returning uniform")
        return np.full(len(raw), 1.0 / len(raw))
    return raw / total


def _stable_logistic_of_negative(z: np.ndarray) -> np.ndarray:
    """1 / (1 + exp(z)) without overflow."""
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = np.exp(-z[pos]) / (1.0 + np.exp(-z[pos]))
    out[~pos] = 1.0 / (1.0 + np.exp(z[~pos]))
    return out


def forward(history: GraphHistory, params: SgnParams) -> ForwardResult:
    """Full inference pass over one history; dropout disabled."""
    cfg = params.config
    batch = pack_histories([history], cfg)
    pt = wrap_parameters(params)
    with ad.no_grad():
        out = _forward_tensors(pt, batch, cfg, None)
        raw = ad.linear(out["o"], pt["out1.W"], pt["out1.b"])
        raw = ad.reshape(raw, (1, batch.n_nodes, cfg.n_mixtures, GMM_FIELDS_PER_COMPONENT))
        logits, mu, entries = _gmm_entry_tensors(raw, cfg)
    z = out["z"].data[0]
    raw_w = _stable_logistic_of_negative(z)
    total = raw_w.sum()
    if total < 1e-30:
        log.warning("all raw insertion probabilities underflowed; returning uniform")
        w = np.full(len(raw_w), 1.0 / len(raw_w))
    else:
        w = raw_w / total
    lg = logits.data[0]
    alphas = np.exp(lg - lg.max(-1, keepdims=True))
    alphas = alphas / alphas.sum(-1, keepdims=True)
    covs = _entries_to_covs(entries)[0]
    means = mu.data[0]
    edges = tuple(
        EdgeOutput(
            o=out["o"].data[0, k].copy(),
            gmm=GmmParams(alphas=alphas[k], means=means[k], covs=covs[k]),
            w=float(w[k]),
        )
        for k in range(batch.n_nodes)
    )
    return ForwardResult(
        node_ids=history.node_ids,
        reference_node=history.reference_node,
        edges=edges,
        attention=out["alpha"].data[0].copy(),
        w=w,
    )


def loss(
    samples: Sequence[Sample] | Sequence[GraphHistory],
    w_true: Sequence[np.ndarray] | None,
    ys: Sequence[np.ndarray] | None,
    params: SgnParams,
    beta: float,
) -> float:
    """Mean loss over graphs given one-hot insertion labels.

    Accepts prebuilt :class:`Sample` records (pass ``w_true=ys=None``) or
    parallel lists of histories / one-hot vectors / targets.
    """
    if w_true is None:
        records = list(samples)  # type: ignore[arg-type]
    else:
        records = []
        for h, w, y in zip(samples, w_true, ys):  # type: ignore[arg-type]
            w = np.asarray(w, dtype=np.float64)
            if w.shape != (len(h.node_ids),):
                raise InvalidLabel(f"one-hot shape {w.shape} vs {len(h.node_ids)} candidates")
            ones = np.flatnonzero(np.abs(w - 1.0) < 1e-12)
            if len(ones) != 1 or not np.all((np.abs(w) < 1e-12) | (np.abs(w - 1.0) < 1e-12)):
                raise InvalidLabel(f"weights not one-hot: {w}")
            records.append(Sample(history=h, target_index=int(ones[0]), y=np.asarray(y)))
    batches = bucket_samples(records, params.config)
    with ad.no_grad():
        value = loss_tensor(wrap_parameters(params), batches, params.config, beta, None)
    out = float(value.data)
    if not math.isfinite(out):
        raise NonFinite("loss is not finite")
    return out


# ---------------------------------------------------------------------------
# vectorized plain-numpy twin of the loss (finite-difference oracle support)
#
# Evaluates the identical computation for P perturbed parameter sets at
# once: every parameter array carries a leading P axis (or broadcasts).


def _mmv(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """x (P, ..., i) @ w (P, i, o) with broadcast over the middle dims."""
    return np.matmul(x, w.reshape(w.shape[0], *([1] * (x.ndim - 3)), *w.shape[1:]))


def _bias(x: np.ndarray, b: np.ndarray) -> np.ndarray:
    return x + b.reshape(b.shape[0], *([1] * (x.ndim - 2)), b.shape[1])


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _gru_np(p: Mapping[str, np.ndarray], name: str, x: np.ndarray, h: np.ndarray) -> np.ndarray:
    z = _sigmoid_np(_bias(_mmv(x, p[f"{name}.Wz"]) + _mmv(h, p[f"{name}.Uz"]), p[f"{name}.bz"]))
    r = _sigmoid_np(_bias(_mmv(x, p[f"{name}.Wr"]) + _mmv(h, p[f"{name}.Ur"]), p[f"{name}.br"]))
    c = np.tanh(_bias(_mmv(x, p[f"{name}.Wc"]) + _mmv(r * h, p[f"{name}.Uc"]), p[f"{name}.bc"]))
    return (1.0 - z) * h + z * c


def _logsumexp_np(x: np.ndarray, axis: int = -1, keepdims: bool = False) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    out = np.log(np.exp(x - m).sum(axis=axis, keepdims=True)) + m
    return out if keepdims else np.squeeze(out, axis=axis)


def loss_value_stacked(
    stacks: Mapping[str, np.ndarray],
    batches: Sequence[Batch],
    config: SgnConfig,
    beta: float,
) -> np.ndarray:
    """Mean loss for P stacked parameter sets; returns (P,).

    Mirrors :func:`loss_tensor` exactly (same formulas and evaluation
    order); equality of the two paths is asserted in the test suite.
    """
    P = max(v.shape[0] for v in stacks.values())
    total = sum(b.size for b in batches)
    acc = np.zeros(P)
    for batch in batches:
        B, T, K, _ = batch.rel.shape
        H = config.hidden_dim
        E = config.embed_dim
        x_lin = _bias(_mmv(np.broadcast_to(batch.rel, (P,) + batch.rel.shape), stacks["rel.W"]), stacks["rel.b"])
        h1 = np.zeros((P, B, K, H))
        for t in range(T):
            h_new = _gru_np(stacks, "rec1", x_lin[:, :, t], h1)
            m = batch.presence[:, t][None, ..., None]
            h1 = m * h_new + (1.0 - m) * h1
        ref = np.broadcast_to(batch.ref_feats, (P,) + batch.ref_feats.shape)
        h2 = np.zeros((P, B, H))
        for t in range(T):
            h_new = _gru_np(stacks, "rec2", ref[:, :, t], h2)
            m = batch.ref_presence[:, t][None, :, None]
            h2 = m * h_new + (1.0 - m) * h2
        h_enc = np.tanh(_bias(_mmv(h1, stacks["enc1.W"]), stacks["enc1.b"]))
        if config.ua_sgn:
            alpha = np.full((P, B, K, K), 1.0 / K)
        else:
            w_j = stacks["att.W"][:, :E]
            w_k = stacks["att.W"][:, E:]
            u = _mmv(h_enc, w_j)
            v = np.swapaxes(_mmv(h_enc, w_k), -1, -2)
            scores = np.tanh(u + v + stacks["att.b"].reshape(-1, 1, 1, 1))
            e = np.exp(scores - scores.max(-1, keepdims=True))
            alpha = e / e.sum(-1, keepdims=True)
        h_bar = np.matmul(alpha, h_enc)
        if config.nc_sgn:
            h_ij = np.tanh(_bias(_mmv(h2, stacks["enc2.W"]), stacks["enc2.b"]))
            h_ij = np.broadcast_to(h_ij[:, :, None, :], (P, B, K, h_ij.shape[-1]))
        else:
            pair = np.concatenate(
                [h1, np.broadcast_to(h2[:, :, None, :], (P, B, K, H))], axis=-1
            )
            h_ij = np.tanh(_bias(_mmv(pair, stacks["enc2.W"]), stacks["enc2.b"]))
        o = np.tanh(_bias(_mmv(np.concatenate([h_bar, h_ij], -1), stacks["pred.W"]), stacks["pred.b"]))
        z = _bias(_mmv(o, stacks["out2.W"]), stacks["out2.b"])[..., 0]
        b_idx = np.arange(B)
        o_t = o[:, b_idx, batch.tgt_idx]
        raw = _bias(_mmv(o_t, stacks["out1.W"]), stacks["out1.b"])
        raw = raw.reshape(P, B, config.n_mixtures, GMM_FIELDS_PER_COMPONENT)
        k = config.k_reg
        logits = raw[..., 0]
        mu = raw[..., 1:4]
        d0, d1, d2 = raw[..., 4], raw[..., 5], raw[..., 6]
        o0, o1, o2 = raw[..., 7], raw[..., 8], raw[..., 9]
        if config.raw_sigma:
            e0, e1, e2 = np.exp(d0), np.exp(d1), np.exp(d2)
            s00, s11, s22 = e0 * e0 + k, e1 * e1 + k, e2 * e2 + k
            s01, s02, s12 = o0, o1, o2
        else:
            l00, l11, l22 = np.exp(d0), np.exp(d1), np.exp(d2)
            s00 = l00 * l00 + k
            s01 = l00 * o0
            s02 = l00 * o1
            s11 = o0 * o0 + l11 * l11 + k
            s12 = o0 * o1 + l11 * o2
            s22 = o1 * o1 + o2 * o2 + l22 * l22 + k
        v3 = batch.y[None, :, None, :] - mu
        v0, v1, v2 = v3[..., 0], v3[..., 1], v3[..., 2]
        a00 = s11 * s22 - s12 * s12
        a01 = s02 * s12 - s01 * s22
        a02 = s01 * s12 - s02 * s11
        a11 = s00 * s22 - s02 * s02
        a12 = s01 * s02 - s00 * s12
        a22 = s00 * s11 - s01 * s01
        det = s00 * a00 + s01 * a01 + s02 * a02
        quad = (
            v0 * v0 * a00
            + v1 * v1 * a11
            + v2 * v2 * a22
            + 2.0 * (v0 * v1 * a01 + v0 * v2 * a02 + v1 * v2 * a12)
        ) / det
        log_comp = -0.5 * quad - (0.5 * np.log(det) + 1.5 * LOG_2PI)
        log_alpha = logits - _logsumexp_np(logits, keepdims=True)
        log_f = _logsumexp_np(log_alpha + log_comp)
        q = -np.logaddexp(0.0, z)
        log_w = q - _logsumexp_np(q, keepdims=True)
        log_w_t = log_w[:, b_idx, batch.tgt_idx]
        acc += (-log_f - beta * log_w_t).sum(axis=-1)
    return acc / total
