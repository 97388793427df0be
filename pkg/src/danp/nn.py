"""Differentiable substrate: parameter store, 1D convolutions, the U-Net trunk
and set-convolution encode/decode between off-grid points and a uniform grid.

Everything runs in float64 on CPU; gradients come from torch reverse mode and
are validated against central finite differences in the test suite.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch

from danp.linalg import NumericalError

torch.set_default_dtype(torch.float64)

DTYPE = torch.float64


class ParamStore:
    """Named float64 tensors holding all learnable parameters."""

    def __init__(self, arrays=None):
        self._arrays = {}
        if arrays:
            for name, value in arrays.items():
                self[name] = value

    def __setitem__(self, name, value):
        tensor = torch.as_tensor(value, dtype=DTYPE).contiguous()
        if not torch.isfinite(tensor).all():
            raise ValueError(f"non-finite values in parameter {name!r}")
        self._arrays[name] = tensor

    def __getitem__(self, name):
        return self._arrays[name]

    def __contains__(self, name):
        return name in self._arrays

    def __len__(self):
        return len(self._arrays)

    def names(self):
        return sorted(self._arrays)

    def items(self):
        return [(name, self._arrays[name]) for name in self.names()]

    @property
    def n_params(self):
        return sum(t.numel() for t in self._arrays.values())

    def clone(self):
        return ParamStore({n: t.detach().clone() for n, t in self._arrays.items()})

    def requires_grad_(self, flag=True):
        for t in self._arrays.values():
            t.requires_grad_(flag)
        return self

    def zero_like(self):
        return ParamStore({n: torch.zeros_like(t) for n, t in self._arrays.items()})

    def to_numpy(self):
        return {n: t.detach().numpy().copy() for n, t in self._arrays.items()}


@dataclass(frozen=True)
class UNetConfig:
    levels: int = 6  # resolution levels
    channels: int = 64  # channels per level
    stride: int = 2
    kernel_size: int = 5
    in_channels: int = 2
    out_channels: int = 64

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")
        if self.stride != 2:
            raise ValueError("only stride 2 is supported")

    @property
    def divisor(self):
        return self.stride**self.levels


def make_grid(input_range, points_per_unit=64, margin=0.5, multiple=64):
    """Uniform grid covering input_range plus margin, node count padded to `multiple`."""
    lo, hi = input_range
    span = (hi - lo) + 2.0 * margin
    n = int(math.ceil(span * points_per_unit))
    n = int(math.ceil(n / multiple)) * multiple
    half_extra = (n / points_per_unit - span) / 2.0
    start = lo - margin - half_extra
    return start + np.arange(n) / points_per_unit


def conv1d(signal, kernel, stride=1, mode="same"):
    """Cross-correlation of two 1D arrays with the given stride.

    mode "same" (stride 1 only) zero-pads so output length equals input length;
    mode "valid" returns only fully overlapping positions.
    """
    signal = torch.as_tensor(signal, dtype=DTYPE).reshape(1, 1, -1)
    kernel = torch.as_tensor(kernel, dtype=DTYPE).reshape(1, 1, -1)
    if kernel.shape[-1] > signal.shape[-1]:
        raise ValueError("kernel longer than signal")
    if mode == "same":
        if stride != 1:
            raise ValueError("'same' mode requires stride 1")
        pad = (kernel.shape[-1] - 1) // 2
    elif mode == "valid":
        pad = 0
    else:
        raise ValueError(f"unknown mode {mode!r}")
    out = torch.nn.functional.conv1d(signal, kernel, stride=stride, padding=pad)
    return out.reshape(-1)


def _init_conv(rng, out_ch, in_ch, k):
    scale = 1.0 / math.sqrt(in_ch * k)
    return rng.standard_normal((out_ch, in_ch, k)) * scale


def init_unet_params(cfg, rng, prefix="unet"):
    """Fan-in-scaled Gaussian init for all U-Net convolutions."""
    params = {}
    k, c = cfg.kernel_size, cfg.channels
    params[f"{prefix}.in.w"] = _init_conv(rng, c, cfg.in_channels, k)
    params[f"{prefix}.in.b"] = np.zeros(c)
    for lvl in range(cfg.levels):
        params[f"{prefix}.down{lvl}.w"] = _init_conv(rng, c, c, k)
        params[f"{prefix}.down{lvl}.b"] = np.zeros(c)
    for lvl in range(cfg.levels):
        in_ch = c if lvl == 0 else 2 * c
        # transposed conv weight layout is (in, out, k)
        params[f"{prefix}.up{lvl}.w"] = np.transpose(
            _init_conv(rng, c, in_ch, k), (1, 0, 2)
        )
        params[f"{prefix}.up{lvl}.b"] = np.zeros(c)
    params[f"{prefix}.out.w"] = _init_conv(rng, cfg.out_channels, 2 * c, k)
    params[f"{prefix}.out.b"] = np.zeros(cfg.out_channels)
    return params


def unet_apply(params, cfg, grid_features, prefix="unet"):
    """U-Net trunk: `levels` stride-2 blocks down, then back up with skips.

    grid_features: (B, in_channels, L) with L divisible by stride^levels.
    Returns (B, out_channels, L).
    """
    x = torch.as_tensor(grid_features, dtype=DTYPE)
    squeeze = x.dim() == 2
    if squeeze:
        x = x.unsqueeze(0)
    length = x.shape[-1]
    if length % cfg.divisor != 0:
        raise ValueError(
            f"grid length {length} not divisible by {cfg.divisor}"
        )
    pad = (cfg.kernel_size - 1) // 2
    conv = torch.nn.functional.conv1d
    convt = torch.nn.functional.conv_transpose1d

    h = torch.relu(conv(x, params[f"{prefix}.in.w"],
                        params[f"{prefix}.in.b"], padding=pad))
    skips = [h]
    for lvl in range(cfg.levels):
        h = torch.relu(conv(h, params[f"{prefix}.down{lvl}.w"],
                            params[f"{prefix}.down{lvl}.b"],
                            stride=2, padding=pad))
        skips.append(h)
    for lvl in range(cfg.levels):
        h = torch.relu(convt(h, params[f"{prefix}.up{lvl}.w"],
                             params[f"{prefix}.up{lvl}.b"],
                             stride=2, padding=pad, output_padding=1))
        h = torch.cat([h, skips[cfg.levels - 1 - lvl]], dim=1)
    out = conv(h, params[f"{prefix}.out.w"], params[f"{prefix}.out.b"], padding=pad)
    return out.squeeze(0) if squeeze else out


def _rbf_weights(xs, grid, lengthscale):
    xs = torch.as_tensor(xs, dtype=DTYPE).reshape(-1, 1)
    grid = torch.as_tensor(grid, dtype=DTYPE).reshape(1, -1)
    return torch.exp(-((xs - grid) ** 2) / (2.0 * lengthscale**2))


def setconv_encode(xs, ys, grid, lengthscale):
    """Encode an off-grid point set as (density, value) channels on the grid.

    Density is the sum of RBF weights; the value channel is the RBF-weighted
    sum of y, normalised by density wherever the density is positive.
    """
    n_grid = len(grid)
    xs = torch.as_tensor(xs, dtype=DTYPE).reshape(-1)
    ys = torch.as_tensor(ys, dtype=DTYPE).reshape(-1)
    if xs.numel() == 0:
        return torch.zeros(2, n_grid)
    weights = _rbf_weights(xs, grid, lengthscale)  # (N, L)
    density = weights.sum(dim=0)
    value = (ys.reshape(-1, 1) * weights).sum(dim=0)
    value = value / torch.clamp(density, min=1e-8)
    return torch.stack([density, value], dim=0)


def setconv_decode(grid_features, query_xs, grid, lengthscale):
    """RBF-weighted readout of grid features at arbitrary query inputs.

    grid_features: (C, L); returns (M, C). Linear in the grid features.
    """
    grid_features = torch.as_tensor(grid_features, dtype=DTYPE)
    weights = _rbf_weights(query_xs, grid, lengthscale)  # (M, L)
    return weights @ grid_features.T


def value_and_grad(objective, params):
    """Evaluate objective(params) and reverse-mode gradients for every entry.

    Returns (float value, dict name -> gradient tensor). Parameters that the
    objective does not touch get zero gradients.
    """
    leaves = ParamStore(
        {n: torch.as_tensor(t, dtype=DTYPE).detach().clone() for n, t in params.items()}
    ).requires_grad_(True)
    value = objective(leaves)
    if not torch.isfinite(value):
        raise NumericalError(f"non-finite objective value {value}")
    tensors = [leaves[n] for n in leaves.names()]
    if value.requires_grad:
        grads = torch.autograd.grad(value, tensors, allow_unused=True)
    else:
        grads = [None] * len(tensors)
    out = {}
    for name, tensor, grad in zip(leaves.names(), tensors, grads):
        out[name] = torch.zeros_like(tensor) if grad is None else grad
    return float(value.detach()), out
