"""Channel-attention building blocks.

The plain squeeze-and-excitation path is

    z = squeeze(U)                 # per-channel global average pool
    s = excite(z, W1, W2)          # sigmoid(W2 @ relu(W1 @ z))
    X = rescale(U, s)              # channel c scaled by s_c

The result-conditioned variant concatenates class logits ``T`` coming from
an auxiliary classifier in front of the squeezed descriptor before the
excitation runs:

    z' = concat_result(T, z)       # T occupies the leading slice
    s  = excite(z', W1, W2)        # W1 is (C/r) x (C + n)
    X  = rescale(U, s)

Feature maps are channels-first tensors, ``(C, H, W)`` or batched
``(B, C, H, W)``. Attention weights always lie strictly inside (0, 1).
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import Tensor, nn


def squeeze(u: Tensor) -> Tensor:
    """Global average pool per channel: ``(..., C, H, W) -> (..., C)``."""
    if u.dim() < 3:
        raise ValueError(f"feature map must be (C, H, W) or (B, C, H, W), got shape {tuple(u.shape)}")
    if u.shape[-1] == 0 or u.shape[-2] == 0:
        raise ValueError("feature map has empty spatial extent")
    return u.mean(dim=(-2, -1))


def concat_result(t: Tensor, z: Tensor) -> Tensor:
    """Prepend auxiliary logits to a channel descriptor along the last dim.

    ``t`` may be empty (length 0), in which case ``z`` is returned unchanged.
    """
    if t.shape[-1] == 0:
        return z
    if t.dim() != z.dim():
        raise ValueError(f"logits rank {t.dim()} does not match descriptor rank {z.dim()}")
    return torch.cat([t, z], dim=-1)


def excite(z: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """Two-layer gating: ``sigmoid(w2 @ relu(w1 @ z))``.

    ``w1`` is (hidden, D) with D = len(z); ``w2`` is (C, hidden). Returns
    per-channel weights of length C, each strictly inside (0, 1).
    """
    if z.shape[-1] != w1.shape[1]:
        raise ValueError(f"descriptor length {z.shape[-1]} does not match w1 width {w1.shape[1]}")
    if w1.shape[0] != w2.shape[1]:
        raise ValueError(f"w1 rows {w1.shape[0]} do not match w2 columns {w2.shape[1]}")
    return torch.sigmoid(F.linear(F.relu(F.linear(z, w1)), w2))


def rescale(u: Tensor, s: Tensor) -> Tensor:
    """Scale channel c of ``u`` by ``s[..., c]``; shape is preserved."""
    if u.dim() < 3:
        raise ValueError(f"feature map must be (C, H, W) or (B, C, H, W), got shape {tuple(u.shape)}")
    if s.shape[-1] != u.shape[-3]:
        raise ValueError(f"{s.shape[-1]} attention weights for {u.shape[-3]} channels")
    return u * s[..., :, None, None]


def se_block_forward(u: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """Plain squeeze -> excite -> rescale."""
    return rescale(u, excite(squeeze(u), w1, w2))


def se_r_block_forward(u: Tensor, t: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """Result-conditioned variant: the descriptor is augmented with ``t``.

    With an empty ``t`` this is exactly ``se_block_forward``.
    """
    return rescale(u, excite(concat_result(t, squeeze(u)), w1, w2))


class SqueezeExcite(nn.Module):
    """Channel-attention gate, optionally conditioned on auxiliary logits.

    The bottleneck width is ``floor(channels / reduction)`` (at least 1) and
    is computed from ``channels`` alone; ``aux_dim`` only widens the first
    layer's input. Both layers are bias-free.

    Args:
        channels: Number of feature-map channels gated by this block.
        reduction: Bottleneck reduction ratio.
        aux_dim: Length of the auxiliary logits vector concatenated in front
            of the squeezed descriptor (0 for a plain block).
    """

    def __init__(self, channels: int, reduction: int = 8, aux_dim: int = 0) -> None:
        super().__init__()
        if channels < 1 or reduction < 1 or aux_dim < 0:
            raise ValueError("channels and reduction must be >= 1, aux_dim >= 0")
        hidden = max(channels // reduction, 1)
        self.channels = channels
        self.aux_dim = aux_dim
        self.fc1 = nn.Linear(channels + aux_dim, hidden, bias=False)
        self.fc2 = nn.Linear(hidden, channels, bias=False)

    def forward(self, x: Tensor, aux: Tensor | None = None) -> Tensor:
        z = squeeze(x)
        if self.aux_dim:
            if aux is None:
                raise ValueError(f"block expects auxiliary logits of length {self.aux_dim}")
            if aux.shape[-1] != self.aux_dim:
                raise ValueError(f"auxiliary logits length {aux.shape[-1]}, expected {self.aux_dim}")
            z = concat_result(aux, z)
        elif aux is not None and aux.shape[-1] != 0:
            raise ValueError("plain block received auxiliary logits")
        s = torch.sigmoid(self.fc2(F.relu(self.fc1(z))))
        return rescale(x, s)


class AuxHead(nn.Module):
    """Auxiliary classifier: pool -> 1x1 conv -> fc -> dropout -> fc.

    Defaults follow the GoogLeNet side head: adaptive average pooling to
    4x4, a 1x1 convolution to 128 channels, a 1024-wide hidden linear layer
    and dropout (drop probability) between the two linear layers. Dropout is
    active only in training mode.
    """

    def __init__(
        self,
        in_channels: int,
        num_classes: int,
        conv_channels: int = 128,
        hidden_dim: int = 1024,
        pool_size: int = 4,
        dropout: float = 0.7,
    ) -> None:
        super().__init__()
        if num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {num_classes}")
        if not 0.0 <= dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {dropout}")
        self.pool_size = pool_size
        self.dropout = dropout
        self.conv = nn.Conv2d(in_channels, conv_channels, kernel_size=1)
        self.fc1 = nn.Linear(conv_channels * pool_size * pool_size, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, num_classes)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-3] != self.conv.in_channels:
            raise ValueError(f"expected {self.conv.in_channels} input channels, got {x.shape[-3]}")
        out = F.adaptive_avg_pool2d(x, self.pool_size)
        out = F.relu(self.conv(out))
        out = torch.flatten(out, 1)
        out = F.relu(self.fc1(out))
        out = F.dropout(out, self.dropout, training=self.training)
        return self.fc2(out)
