"""64-bit finite-difference checks at three scopes: loss, layer and end-to-end."""
from __future__ import annotations

import torch

from .encoder import EncoderConfig, StyleRetriever
from .errors import ConfigError
from .hypernet import HyperNet
from .losses import LossConfig, infonce, infonce_hard_negative, similarity_matrix, stylence, transport_weights, triplet_loss
from .spectral import svd_factorize
from .tensor_core import gradient_errors, precision

THRESHOLDS = {"loss": 1e-5, "layer": 1e-5, "end2end": 1e-4}


class _CorruptAdjoint(torch.autograd.Function):
    """Identity forward; backward scales the incoming gradient. Test hook only."""

    @staticmethod
    def forward(ctx, x):
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return grad * 1.5


def _wrap(fn, corrupt: bool):
    if not corrupt:
        return fn
    return lambda: _CorruptAdjoint.apply(fn())


def _loss_scope(g: torch.Generator, corrupt: bool) -> dict[str, float]:
    N, d = 6, 5
    Q = torch.randn(N, d, generator=g).requires_grad_()
    P = torch.randn(N, d, generator=g).requires_grad_()
    cfg = LossConfig(tau=0.5, gamma=3.0)
    with torch.no_grad():
        W = transport_weights(similarity_matrix(Q, P), cfg)
    losses = {
        "infonce": lambda: infonce(similarity_matrix(Q, P), cfg.tau),
        "stylence": lambda: stylence(similarity_matrix(Q, P), cfg, W),
        "triplet": lambda: triplet_loss(similarity_matrix(Q, P), margin=5.0),
        "infonce_hard": lambda: infonce_hard_negative(similarity_matrix(Q, P), cfg.tau, 2),
    }
    errs = {}
    for name, fn in losses.items():
        for tname, err in gradient_errors(_wrap(fn, corrupt), [("Q", Q), ("P", P)]).items():
            errs[f"{name}.{tname}"] = err
    return errs


def _layer_scope(g: torch.Generator, corrupt: bool) -> dict[str, float]:
    layer = svd_factorize(torch.randn(7, 5, generator=g))
    layer.dynamic_enabled = True
    with torch.no_grad():
        layer.delta_s_static.normal_(0.0, 0.3, generator=g)
    x = torch.randn(3, 4, 5, generator=g).requires_grad_()
    dyn = (0.3 * torch.randn(3, 5, generator=g)).requires_grad_()
    w = torch.randn(3, 4, 7, generator=g)
    errs = {}
    named = [("x", x), ("delta_s_dyn", dyn), ("delta_s_static", layer.delta_s_static)]
    for name, err in gradient_errors(_wrap(lambda: (torch.tanh(layer(x, dyn)) * w).sum(), corrupt), named).items():
        errs[f"spectral.{name}"] = err

    net = HyperNet(4, 5, activation="gelu")
    with torch.no_grad():
        for p in net.parameters():
            p.normal_(0.0, 0.5, generator=g)
    z = torch.randn(3, 4, generator=g).requires_grad_()
    v = torch.randn(3, 5, generator=g)
    named = [("z", z)] + list(net.named_parameters())
    for name, err in gradient_errors(_wrap(lambda: (net(z) * v).sum(), corrupt), named).items():
        errs[f"hypernet.{name}"] = err
    return errs


def _end2end_scope(g: torch.Generator, corrupt: bool) -> dict[str, float]:
    cfg = EncoderConfig(image_size=8, patch_size=4, d_model=8, n_heads=2, n_layers=2,
                        injected_layers=[1], embed_dim=4, d_style=4)
    model = StyleRetriever(cfg, seed=3, mode="hybrid")
    with torch.no_grad():
        for p in model.parameters():
            if p.requires_grad and p is not model.encoder.proj:
                p.normal_(0.0, 0.2, generator=g)
    x = torch.rand(4, 8, 8, generator=g)
    loss_cfg = LossConfig(tau=0.5, gamma=2.0)
    with torch.no_grad():
        e = model(x)
        W = transport_weights(similarity_matrix(e[:2], e[2:]), loss_cfg)

    def fn():
        emb = model(x)
        return stylence(similarity_matrix(emb[:2], emb[2:]), loss_cfg, W)

    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    return gradient_errors(_wrap(fn, corrupt), named)


SCOPES = {"loss": _loss_scope, "layer": _layer_scope, "end2end": _end2end_scope}


def run_gradcheck(scope: str, seed: int = 0, corrupt_adjoint: bool = False) -> dict[str, float]:
    """Max relative error per named tensor for ``scope``; always computed in 64-bit."""
    if scope not in SCOPES:
        raise ConfigError(f"scope must be one of {sorted(SCOPES)}")
    with precision(torch.float64):
        g = torch.Generator().manual_seed(seed)
        return SCOPES[scope](g, corrupt_adjoint)
