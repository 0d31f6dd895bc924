"""Singular-value modulation of frozen weights.

A base weight ``W0`` (d1 x d2) is factored once into thin ``U, s, V``; the layer
then applies ``U diag(s + ds_static + ds_dynamic) V^T`` without ever forming the
dense matrix during training.
"""
from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .errors import ContractError, NumericError, ShapeError

ORTHO_TOL = 1e-6
RECON_TOL = 1e-6


class SpectralLayer(nn.Module):
    """Linear map ``y = x W^T`` with ``W = U diag(s + ds) V^T`` and frozen ``U, s, V``.

    Only ``delta_s_static`` is a parameter. Whether it takes part (and trains) is
    controlled by ``static_enabled``; ``dynamic_enabled`` says whether a per-sample
    offset must be supplied to ``forward``.
    """

    def __init__(self, U: torch.Tensor, s: torch.Tensor, V: torch.Tensor):
        super().__init__()
        self.d1, self.d2 = U.shape[0], V.shape[0]
        self.r = s.shape[0]
        self.register_buffer("U", U)
        self.register_buffer("s", s)
        self.register_buffer("V", V)
        self.delta_s_static = nn.Parameter(torch.zeros(self.r, dtype=s.dtype))
        self.static_enabled = True
        self.dynamic_enabled = False

    def extra_repr(self) -> str:
        return f"d1={self.d1}, d2={self.d2}, static={self.static_enabled}, dynamic={self.dynamic_enabled}"

    def set_static(self, enabled: bool) -> None:
        self.static_enabled = enabled
        self.delta_s_static.requires_grad_(enabled)

    def effective_offsets(self, delta_s_dyn: torch.Tensor | None = None) -> torch.Tensor:
        if delta_s_dyn is not None and not self.dynamic_enabled:
            raise ContractError("dynamic offset passed to a layer without a dynamic pathway")
        if delta_s_dyn is None and self.dynamic_enabled:
            raise ContractError("layer has a dynamic pathway but no dynamic offset was given")
        if delta_s_dyn is not None and delta_s_dyn.shape[-1] != self.r:
            raise ShapeError(f"dynamic offset has length {delta_s_dyn.shape[-1]}, expected {self.r}")
        ds = self.delta_s_static if self.static_enabled else torch.zeros_like(self.s)
        if delta_s_dyn is not None:
            ds = ds + delta_s_dyn
        return ds

    def forward(self, x: torch.Tensor, delta_s_dyn: torch.Tensor | None = None) -> torch.Tensor:
        """``x``: (batch, d2) or (batch, tokens, d2). ``delta_s_dyn``: (r,) or (batch, r)."""
        if x.shape[-1] != self.d2:
            raise ShapeError(f"input width {x.shape[-1]} != {self.d2}")
        scale = self.s + self.effective_offsets(delta_s_dyn)
        if scale.ndim == 2 and x.ndim == 3:
            scale = scale.unsqueeze(1)
        return ((x @ self.V) * scale) @ self.U.T

    def merge(self, delta_s_dyn: torch.Tensor | None = None) -> torch.Tensor:
        """Dense ``W`` for inference. ``delta_s_dyn`` must be a single (r,) vector here."""
        if delta_s_dyn is not None and delta_s_dyn.ndim != 1:
            raise ShapeError("merge takes one offset vector, not a batch")
        scale = self.s + self.effective_offsets(delta_s_dyn)
        return (self.U * scale) @ self.V.T

    def base_weight(self) -> torch.Tensor:
        return (self.U * self.s) @ self.V.T


def svd_factorize(W0: torch.Tensor, dtype: torch.dtype | None = None) -> SpectralLayer:
    """Thin SVD of ``W0`` (computed in 64-bit), checked against the layer invariants."""
    if W0.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {tuple(W0.shape)}")
    W = W0.detach().to(torch.float64).cpu().numpy()
    if not np.isfinite(W).all():
        raise NumericError("weight contains non-finite values")
    try:
        U, s, Vt = np.linalg.svd(W, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"SVD did not converge: {exc}") from exc

    r = s.shape[0]
    eye = np.eye(r)
    if np.abs(U.T @ U - eye).max() > ORTHO_TOL or np.abs(Vt @ Vt.T - eye).max() > ORTHO_TOL:
        raise NumericError("SVD factors are not orthonormal to tolerance")
    norm = np.linalg.norm(W)
    if np.linalg.norm((U * s) @ Vt - W) > RECON_TOL * max(norm, 1e-300):
        raise NumericError("SVD reconstruction error above tolerance")

    dtype = dtype or W0.dtype
    return SpectralLayer(
        torch.from_numpy(U.copy()).to(dtype),
        torch.from_numpy(s.copy()).to(dtype),
        torch.from_numpy(Vt.T.copy()).to(dtype),
    )


def modulated_forward(
    layer: SpectralLayer, x: torch.Tensor, delta_s_dyn: torch.Tensor | None = None
) -> torch.Tensor:
    return layer(x, delta_s_dyn)


def merge(layer: SpectralLayer, delta_s_dyn: torch.Tensor | None = None) -> torch.Tensor:
    return layer.merge(delta_s_dyn)


def spectral_delta_norm(layer: SpectralLayer, delta_s: torch.Tensor) -> float:
    """Spectral norm of the weight change caused by ``delta_s``: the largest |offset|."""
    if delta_s.shape != (layer.r,):
        raise ShapeError(f"offset shape {tuple(delta_s.shape)} != ({layer.r},)")
    return float(delta_s.abs().max()) if layer.r else 0.0


def power_iteration_norm(M: torch.Tensor, iters: int = 5000, tol: float = 1e-15, seed: int = 0) -> float:
    """Largest singular value of ``M`` by power iteration on ``M^T M``.

    Independent of any SVD routine; used as the oracle for ``spectral_delta_norm``.
    """
    A = M.detach().to(torch.float64).cpu().numpy()
    G = A.T @ A
    v = np.random.default_rng(seed).standard_normal(A.shape[1])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = G @ v
        n = np.linalg.norm(w)
        if n == 0.0:
            return 0.0
        v = w / n
        if abs(n - lam) <= tol * n:
            break
        lam = n
    return float(np.linalg.norm(A @ v))
