"""Trivariate Gaussian mixture over insertion targets (location-in-gap,
gap location, time-to-insertion)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidDistribution

OUTPUT_DIM = 3
OUTPUT_NAMES = ("y_s1", "y_s2", "y_t")


@dataclass(frozen=True, eq=False)
class GmmParams:
    alphas: np.ndarray   # (M,) mixing weights on the simplex
    means: np.ndarray    # (M, 3)
    covs: np.ndarray     # (M, 3, 3) regularized covariances

    @property
    def n_components(self) -> int:
        return len(self.alphas)

    def validate(self) -> None:
        if not (
            np.all(np.isfinite(self.alphas))
            and np.all(np.isfinite(self.means))
            and np.all(np.isfinite(self.covs))
        ):
            raise InvalidDistribution("non-finite mixture parameters")
        if np.any(self.alphas < -1e-12) or abs(self.alphas.sum() - 1.0) > 1e-9:
            raise InvalidDistribution(f"mixing weights off the simplex: {self.alphas}")
        if not np.allclose(self.covs, np.swapaxes(self.covs, -1, -2), atol=1e-9):
            raise InvalidDistribution("covariance not symmetric")
        try:
            np.linalg.cholesky(self.covs)
        except np.linalg.LinAlgError as e:
            raise InvalidDistribution("covariance not positive definite") from e

    def pdf(self, y: np.ndarray) -> np.ndarray:
        """Mixture density at points ``y`` of shape (..., 3)."""
        y = np.asarray(y, dtype=np.float64)
        squeeze = y.ndim == 1
        pts = np.atleast_2d(y)                       # (N, 3)
        chol = np.linalg.cholesky(self.covs)         # (M, 3, 3)
        diff = pts[:, None, :] - self.means[None]    # (N, M, 3)
        sol = np.linalg.solve(chol[None], diff[..., None])[..., 0]   # (N, M, 3)
        quad = np.einsum("nmk,nmk->nm", sol, sol)
        logdet = 2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(-1)  # (M,)
        norm = np.exp(-0.5 * (quad + logdet + OUTPUT_DIM * np.log(2 * np.pi)))
        dens = (self.alphas[None] * norm).sum(-1)
        return float(dens[0]) if squeeze else dens

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Draw ``n`` points; component choice then a Cholesky transform."""
        cum = np.cumsum(self.alphas)
        cum /= cum[-1]
        comp = np.searchsorted(cum, rng.random(n), side="right")
        comp = np.clip(comp, 0, self.n_components - 1)
        chol = np.linalg.cholesky(self.covs)
        eps = rng.standard_normal((n, OUTPUT_DIM))
        return self.means[comp] + np.einsum("nij,nj->ni", chol[comp], eps)
