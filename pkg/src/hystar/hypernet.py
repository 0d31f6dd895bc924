"""Style-conditioned generator of singular-value offsets."""
from __future__ import annotations

import torch
from torch import nn

from .errors import ConfigError, ShapeError

ACTIVATIONS = {"relu": nn.ReLU, "gelu": lambda: nn.GELU(approximate="none")}

# name -> hidden widths as multiples of r; "depth:1" is a single linear map.
LAYOUTS = {
    "width:r": (1,),
    "width:2r": (2,),
    "width:4r": (4,),
    "depth:1": (),
    "depth:2": (2,),
    "depth:3": (2, 2),
}
DEFAULT_LAYOUT = "width:2r"


class HyperNet(nn.Module):
    """MLP ``z -> delta_s`` with a zero-initialized output layer, so it emits zeros until trained."""

    def __init__(
        self,
        d_style: int,
        r_out: int,
        hidden: tuple[int, ...] | None = None,
        activation: str = "relu",
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        if activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {activation!r}")
        if hidden is None:
            hidden = (2 * r_out,)
        self.d_style, self.r_out, self.hidden = d_style, r_out, tuple(hidden)
        self.activation = activation

        widths = (d_style, *self.hidden, r_out)
        self.linears = nn.ModuleList(nn.Linear(a, b) for a, b in zip(widths[:-1], widths[1:]))
        self.act = ACTIVATIONS[activation]()
        with torch.no_grad():
            for lin in self.linears[:-1]:
                bound = lin.in_features ** -0.5
                lin.weight.uniform_(-bound, bound, generator=generator)
                lin.bias.uniform_(-bound, bound, generator=generator)
            self.linears[-1].weight.zero_()
            self.linears[-1].bias.zero_()

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.d_style:
            raise ShapeError(f"style vector width {z.shape[-1]} != {self.d_style}")
        h = z
        for lin in self.linears[:-1]:
            h = self.act(lin(h))
        return self.linears[-1](h)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def hypernet_forward(h: HyperNet, z: torch.Tensor) -> torch.Tensor:
    return h(z)


def hypernet_shape_for(
    d_model: int,
    d_style: int,
    layout_name: str = DEFAULT_LAYOUT,
    activation: str = "relu",
    generator: torch.Generator | None = None,
) -> HyperNet:
    """HyperNet for square ``d_model x d_model`` attention projections (so r = d_model)."""
    if d_model <= 0 or d_style <= 0:
        raise ConfigError("dimensions must be positive")
    try:
        multiples = LAYOUTS[layout_name]
    except KeyError:
        raise ConfigError(f"unsupported hypernet layout {layout_name!r}; choose from {sorted(LAYOUTS)}") from None
    r = d_model
    return HyperNet(d_style, r, tuple(m * r for m in multiples), activation, generator)
