"""Contrastive objectives and the transport-plan negative weighting.

All functions take a similarity matrix ``S`` whose diagonal holds the positive
pairs (query i, positive i); off-diagonal entries are in-batch negatives.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .errors import ConfigError, ContractError, NumericError, ShapeError


@dataclass
class LossConfig:
    tau: float = 0.07
    gamma: float = 80.0
    lambda_: float = 1.0
    epsilon: float = 1.0
    sinkhorn_iters: int = 50
    margin: float = 0.2
    hard_k: int | None = None  # None -> ceil(N / 4)

    def __post_init__(self):
        for name in ("tau", "lambda_", "epsilon"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"loss.{name.rstrip('_')} must be > 0")
        if self.gamma < 0:
            raise ConfigError("loss.gamma must be >= 0")
        if self.sinkhorn_iters < 1:
            raise ConfigError("loss.sinkhorn_iters must be a positive integer")
        if self.hard_k is not None and self.hard_k < 1:
            raise ConfigError("loss.hard_k must be >= 1")


@dataclass
class TransportPlan:
    plan: torch.Tensor
    deviation: float
    history: list[float] = field(default_factory=list)

    @property
    def weights(self) -> torch.Tensor:
        return self.plan


def similarity_matrix(Q: torch.Tensor, P: torch.Tensor) -> torch.Tensor:
    """Cosine similarities ``S[i, j] = <q_i, p_j>`` after unit-normalizing rows."""
    if Q.ndim != 2 or Q.shape != P.shape:
        raise ShapeError(f"Q {tuple(Q.shape)} and P {tuple(P.shape)} must be equal-shape matrices")
    if Q.shape[0] < 2:
        raise ContractError("need at least two pairs")
    qn, pn = Q.norm(dim=1, keepdim=True), P.norm(dim=1, keepdim=True)
    if (qn == 0).any() or (pn == 0).any():
        raise NumericError("zero-norm embedding row")
    return (Q / qn) @ (P / pn).T


def cost_matrix(S: torch.Tensor, lambda_: float) -> torch.Tensor:
    """``exp((1 - S) / lambda)`` off the diagonal, ``inf`` on it."""
    if not lambda_ > 0:
        raise ConfigError("lambda must be > 0")
    C = torch.exp((1.0 - S.detach()) / lambda_)
    return C.masked_fill(torch.eye(S.shape[0], dtype=torch.bool), math.inf)


def sinkhorn(C: torch.Tensor, epsilon: float = 1.0, iters: int = 50, record_every: int = 0) -> TransportPlan:
    """Entropic OT plan with unit row/column marginals and an exactly-zero diagonal.

    Log-domain alternating scaling for a fixed number of rounds. Entries with
    infinite cost get a zero kernel, so they stay exactly zero in the plan. The
    result carries no gradient.
    """
    N = C.shape[0]
    if C.ndim != 2 or C.shape[1] != N:
        raise ShapeError(f"cost matrix must be square, got {tuple(C.shape)}")
    if N < 2:
        raise ContractError("no zero-diagonal doubly stochastic plan exists for N < 2")
    if not epsilon > 0:
        raise ConfigError("epsilon must be > 0")
    with torch.no_grad():
        log_k = -C.detach() / epsilon
        if torch.isneginf(log_k).all(dim=1).any() or torch.isneginf(log_k).all(dim=0).any():
            raise NumericError("a row or column of the kernel is fully masked")
        f = torch.zeros(N, dtype=C.dtype)
        g = torch.zeros(N, dtype=C.dtype)
        history = []
        for it in range(1, iters + 1):
            f = -torch.logsumexp(log_k + g[None, :], dim=1)
            g = -torch.logsumexp(log_k + f[:, None], dim=0)
            if record_every and it % record_every == 0:
                history.append(_marginal_deviation(torch.exp(log_k + f[:, None] + g[None, :])))
        T = torch.exp(log_k + f[:, None] + g[None, :])
        if not torch.isfinite(T).all():
            raise NumericError("non-finite transport plan")
    return TransportPlan(T, _marginal_deviation(T), history)


def _marginal_deviation(T: torch.Tensor) -> float:
    return max((T.sum(1) - 1).abs().max().item(), (T.sum(0) - 1).abs().max().item())


def transport_weights(S: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    return sinkhorn(cost_matrix(S, cfg.lambda_), cfg.epsilon, cfg.sinkhorn_iters).plan


def _nce(logits: torch.Tensor, log_neg_weight: torch.Tensor | None = None) -> torch.Tensor:
    # log_neg_weight has a zero diagonal; -inf drops a term entirely
    if log_neg_weight is not None:
        logits = logits + log_neg_weight
    return (torch.logsumexp(logits, dim=1) - logits.diagonal()).mean()


def infonce(S: torch.Tensor, tau: float = 0.07) -> torch.Tensor:
    if not tau > 0:
        raise ConfigError("tau must be > 0")
    return _nce(S / tau)


def stylence(S: torch.Tensor, cfg: LossConfig, weights: torch.Tensor | None = None) -> torch.Tensor:
    """Transport-weighted InfoNCE: negatives scaled by ``gamma * w_ij``.

    ``weights`` overrides the Sinkhorn plan (which is otherwise computed from
    ``S`` and treated as a constant).
    """
    N = S.shape[0]
    if N < 2:
        raise ContractError("stylence needs at least two pairs")
    if weights is None:
        weights = transport_weights(S, cfg)
    with torch.no_grad():
        w = (cfg.gamma * weights.to(S.dtype)).clamp_min(0)
        log_w = torch.log(w).fill_diagonal_(0.0)
    return _nce(S / cfg.tau, log_w)


def triplet_loss(S: torch.Tensor, margin: float = 0.2) -> torch.Tensor:
    """Hinge on the hardest in-batch negative of each row."""
    N = S.shape[0]
    if N < 2:
        raise ContractError("triplet loss needs at least two pairs")
    off = S.masked_fill(torch.eye(N, dtype=torch.bool), -math.inf)
    return torch.relu(margin - S.diagonal() + off.max(dim=1).values).mean()


def infonce_hard_negative(S: torch.Tensor, tau: float = 0.07, k: int | None = None) -> torch.Tensor:
    """InfoNCE over the positive and the ``k`` most similar negatives of each row."""
    N = S.shape[0]
    if N < 2:
        raise ContractError("hard-negative InfoNCE needs at least two pairs")
    k = min(k if k is not None else math.ceil(N / 4), N - 1)
    eye = torch.eye(N, dtype=torch.bool)
    off = S.detach().masked_fill(eye, -math.inf)
    keep = torch.zeros_like(eye)
    keep.scatter_(1, off.topk(k, dim=1).indices, True)
    log_mask = torch.zeros_like(S).masked_fill(~(keep | eye), -math.inf)
    return _nce(S / tau, log_mask)


LOSSES = ("stylence", "infonce", "triplet", "infonce_hard")


def compute_loss(name: str, S: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    if name == "stylence":
        return stylence(S, cfg)
    if name == "infonce":
        return infonce(S, cfg.tau)
    if name == "triplet":
        return triplet_loss(S, cfg.margin)
    if name == "infonce_hard":
        return infonce_hard_negative(S, cfg.tau, cfg.hard_k)
    raise ConfigError(f"unknown loss {name!r}; choose from {LOSSES}")


def write_matrix_csv(M: torch.Tensor, path: str | Path) -> None:
    """Row-major CSV with 9 significant digits; infinite entries are written as ``inf``."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row in M.detach().cpu().tolist():
            writer.writerow([f"{v:.9g}" for v in row])
