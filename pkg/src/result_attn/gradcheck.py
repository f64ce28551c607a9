"""Numerical verification of block gradients.

Compares autograd gradients of a scalar loss (the sum of the block output)
against central finite differences, element by element, in double
precision. Used by the test suite to validate the backward pass of every
block kind at toy sizes.
"""

from __future__ import annotations

import math

import torch
from torch import Tensor, nn

from .blocks import AuxHead, SqueezeExcite
from .errors import GradientCheckError

BLOCK_KINDS = ("se_block", "se_r_block", "aux_head", "linear")


class _LinearToy(nn.Module):
    """Linear -> ReLU -> Linear with inputs kept away from the ReLU kink."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int) -> None:
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden, bias=False)
        self.fc2 = nn.Linear(hidden, out_dim, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(torch.relu(self.fc1(x)))


def _build(block_kind: str, c: int, h: int, w: int, n: int, r: int, gen: torch.Generator):
    """Returns (module, list of input tensors with requires_grad set)."""
    def rand(*shape, lo=-1.0, hi=1.0):
        return (torch.rand(*shape, generator=gen, dtype=torch.float64) * (hi - lo) + lo)

    if block_kind == "se_block":
        mod = SqueezeExcite(c, reduction=r).double()
        inputs = [rand(1, c, h, w)]
    elif block_kind == "se_r_block":
        mod = SqueezeExcite(c, reduction=r, aux_dim=n).double()
        inputs = [rand(1, c, h, w), rand(1, n)]
    elif block_kind == "aux_head":
        # shrunk head widths so the element-wise finite differences stay cheap
        mod = AuxHead(c, max(n, 2), conv_channels=c, hidden_dim=2 * c, pool_size=2, dropout=0.0).double()
        inputs = [rand(1, c, h, w)]
    elif block_kind == "linear":
        mod = _LinearToy(c, 2 * c, c).double()
        # positive weights and inputs keep every ReLU pre-activation > 0
        with torch.no_grad():
            mod.fc1.weight.copy_(rand(2 * c, c, lo=0.1, hi=0.5))
            mod.fc2.weight.copy_(rand(c, 2 * c, lo=0.1, hi=0.5))
        inputs = [rand(1, c, lo=0.5, hi=1.5)]
    else:
        raise ValueError(f"unknown block kind {block_kind!r}, expected one of {BLOCK_KINDS}")

    for t in inputs:
        t.requires_grad_(True)
    return mod, inputs


def _loss(mod: nn.Module, inputs: list[Tensor]) -> Tensor:
    return mod(*inputs).sum()


def gradient_check(
    block_kind: str,
    c: int = 4,
    h: int = 2,
    w: int = 2,
    n: int = 3,
    r: int = 2,
    epsilon: float = 1e-5,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central-difference gradients.

    Covers every parameter tensor and every input (the feature map, and the
    auxiliary logits for the result-conditioned block). Runs entirely in
    float64; intended for small dims (c <= 8, h, w <= 4, n <= 4).
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must lie in [1e-6, 1e-3], got {epsilon}")
    gen = torch.Generator().manual_seed(seed)
    mod, inputs = _build(block_kind, c, h, w, n, r, gen)
    mod.eval()

    loss = _loss(mod, inputs)
    loss.backward()

    checked: list[tuple[str, Tensor, Tensor]] = []
    for name, p in mod.named_parameters():
        checked.append((name, p, p.grad))
    for i, t in enumerate(inputs):
        checked.append((f"input[{i}]", t, t.grad))

    max_err = 0.0
    for name, tensor, grad in checked:
        if grad is None or not torch.isfinite(grad).all():
            raise GradientCheckError(f"non-finite analytic gradient for '{name}'")
        flat = tensor.detach().reshape(-1)
        gflat = grad.reshape(-1)
        for j in range(flat.numel()):
            orig = flat[j].item()
            with torch.no_grad():
                flat[j] = orig + epsilon
                hi = _loss(mod, inputs).item()
                flat[j] = orig - epsilon
                lo = _loss(mod, inputs).item()
                flat[j] = orig
            numeric = (hi - lo) / (2.0 * epsilon)
            if not math.isfinite(numeric):
                raise GradientCheckError(f"non-finite numeric gradient for '{name}'")
            analytic = gflat[j].item()
            denom = max(abs(analytic), abs(numeric), 1e-6)
            max_err = max(max_err, abs(analytic - numeric) / denom)
    return max_err
