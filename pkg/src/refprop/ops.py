"""Small shared tensor helpers."""

from __future__ import annotations

import torch

LOGIT_CLAMP = 8.0


def inverse_sigmoid(x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Logit of x, clamped to +-LOGIT_CLAMP to stay away from saturation."""
    x = x.clamp(min=eps, max=1.0 - eps)
    return torch.log(x / (1.0 - x)).clamp(min=-LOGIT_CLAMP, max=LOGIT_CLAMP)


def make_ffn(dim: int, hidden: int, out_dim: int | None = None) -> torch.nn.Sequential:
    """3-layer feed-forward network, ReLU on all but the last layer."""
    out_dim = dim if out_dim is None else out_dim
    return torch.nn.Sequential(
        torch.nn.Linear(dim, hidden),
        torch.nn.ReLU(inplace=True),
        torch.nn.Linear(hidden, hidden),
        torch.nn.ReLU(inplace=True),
        torch.nn.Linear(hidden, out_dim),
    )
