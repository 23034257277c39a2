"""Convolution layers whose filters are fixed under quarter turns and mirror flips.

A 3x3 filter tied to three numbers (centre, edge, corner) commutes with rot90, and
circular padding keeps that true at the image border, so any stack of these layers
is exactly equivariant to quarter turns about the image centre and to circular shifts.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

# masks for the centre, the 4 edge neighbours and the 4 corners of a 3x3 stencil
_BASIS = torch.tensor([
    [[0, 0, 0], [0, 1, 0], [0, 0, 0]],
    [[0, 1, 0], [1, 0, 1], [0, 1, 0]],
    [[1, 0, 1], [0, 0, 0], [1, 0, 1]],
], dtype=torch.float32)


class IsoConv2d(nn.Module):
    def __init__(self, c_in: int, c_out: int, kernel_size: int = 3, dilation: int = 1, bias: bool = True):
        super().__init__()
        if kernel_size not in (1, 3):
            raise ValueError("only 1x1 and 3x3 symmetric filters are supported")
        self.c_in, self.c_out = c_in, c_out
        self.kernel_size = kernel_size
        self.dilation = dilation
        n_basis = 1 if kernel_size == 1 else 3
        fan_in = c_in * kernel_size * kernel_size
        self.coef = nn.Parameter(torch.randn(c_out, c_in, n_basis) * math.sqrt(2.0 / fan_in))
        self.bias = nn.Parameter(torch.zeros(c_out)) if bias else None
        self.register_buffer("basis", _BASIS if kernel_size == 3 else torch.ones(1, 1, 1), persistent=False)

    def weight(self) -> torch.Tensor:
        return torch.einsum("oib,bhw->oihw", self.coef, self.basis.to(self.coef.dtype))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.kernel_size == 3:
            d = self.dilation
            x = F.pad(x, (d, d, d, d), mode="circular")
        return F.conv2d(x, self.weight(), self.bias, dilation=self.dilation)


class ResidualBlock(nn.Module):
    def __init__(self, width: int, dilation: int):
        super().__init__()
        self.conv1 = IsoConv2d(width, width, 3, dilation)
        self.conv2 = IsoConv2d(width, width, 3, dilation)
        # start close to identity so deep stacks train from a sane point
        nn.init.zeros_(self.conv2.coef)

    def forward(self, x):
        return F.relu(x + self.conv2(F.relu(self.conv1(x))))
