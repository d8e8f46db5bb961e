"""Differentiable building blocks on top of PyTorch.

Conv/deconv blocks, Xavier init, a named-parameter Adam wrapper with a
finite-gradient guard, seeding, a finite-difference gradient checker and a
small binary checkpoint format.
"""

from __future__ import annotations

import contextlib
import json
import random
import struct
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

LEAKY_SLOPE = 0.01
BN_MOMENTUM = 0.1
BN_EPS = 1e-5

CKPT_MAGIC = b"SSCK"
CKPT_VERSION = 1


def seed_everything(seed: int) -> torch.Generator:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    return torch.Generator().manual_seed(seed)


def conv_out_length(length: int, kernel: int, stride: int = 1, padding: int = 0) -> int:
    return (length + 2 * padding - kernel) // stride + 1


def halving_padding(kernel: int, stride: int = 2) -> int:
    """Symmetric padding that makes a stride-2 conv exactly halve even lengths."""
    if (kernel - stride) % 2:
        raise ValueError(f"kernel {kernel} with stride {stride} cannot halve symmetrically")
    return (kernel - stride) // 2


def deconv_output_padding(l_in: int, l_target: int, kernel: int, stride: int, padding: int) -> int:
    base = (l_in - 1) * stride - 2 * padding + kernel
    extra = l_target - base
    if not 0 <= extra < stride:
        raise ValueError(f"cannot reach length {l_target} from {l_in} with this transposed conv")
    return extra


def conv1d_forward(x, weight, bias=None, stride: int = 1, padding: int = 0) -> torch.Tensor:
    """Cross-correlation of ``[batch, c_in, length]`` with ``[c_out, c_in, k]`` weights."""
    x = torch.as_tensor(x)
    weight = torch.as_tensor(weight, dtype=x.dtype)
    if x.dim() != 3 or weight.dim() != 3:
        raise ValueError("expected 3-D input [batch, channels, length] and 3-D weights")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"input has {x.shape[1]} channels, weights expect {weight.shape[1]}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if x.shape[2] + 2 * padding < weight.shape[2]:
        raise ValueError("kernel does not fit the padded input")
    if bias is not None:
        bias = torch.as_tensor(bias, dtype=x.dtype)
    return F.conv1d(x, weight, bias, stride=stride, padding=padding)


class ConvBlock(nn.Sequential):
    """Conv1d -> BatchNorm -> LeakyReLU."""

    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int = 1, padding: int = 0):
        super().__init__(
            nn.Conv1d(c_in, c_out, kernel, stride=stride, padding=padding),
            nn.BatchNorm1d(c_out, eps=BN_EPS, momentum=BN_MOMENTUM),
            nn.LeakyReLU(LEAKY_SLOPE),
        )


class DeconvBlock(nn.Sequential):
    def __init__(self, c_in, c_out, kernel, stride, padding, output_padding=0, activate=True):
        layers = [nn.ConvTranspose1d(c_in, c_out, kernel, stride=stride, padding=padding,
                                     output_padding=output_padding)]
        if activate:
            layers += [nn.BatchNorm1d(c_out, eps=BN_EPS, momentum=BN_MOMENTUM), nn.LeakyReLU(LEAKY_SLOPE)]
        super().__init__(*layers)


def xavier_init(module: nn.Module) -> nn.Module:
    """Xavier-normal weights and zero biases for every conv / linear layer."""
    for m in module.modules():
        if isinstance(m, (nn.Conv1d, nn.ConvTranspose1d, nn.Linear)):
            nn.init.xavier_normal_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
    return module


@contextlib.contextmanager
def eval_mode(module):
    """Temporarily switch a module (and its batch-norm layers) to eval mode."""
    if not isinstance(module, nn.Module):
        yield module
        return
    was_training = module.training
    module.eval()
    try:
        yield module
    finally:
        module.train(was_training)


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.name = name


class Adam:
    """Adam over named parameters; refuses to step on NaN/inf gradients.

    Holds the optimizer state (moments and step counter) for one model.
    """

    def __init__(self, named_params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        named = list(named_params)
        if not lr > 0:
            raise ValueError("learning rate must be positive")
        self.names = [n for n, _ in named]
        self.params = [p for _, p in named]
        self.lr = lr
        self._opt = torch.optim.Adam(self.params, lr=lr, betas=betas, eps=eps)
        self.step_count = 0

    def zero_grad(self) -> None:
        self._opt.zero_grad(set_to_none=False)
        for p in self.params:
            if p.grad is None:
                p.grad = torch.zeros_like(p)

    def step(self) -> None:
        for name, p in zip(self.names, self.params):
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise NonFiniteGradientError(name)
        self._opt.step()
        self.step_count += 1

    def moments(self, name: str):
        p = self.params[self.names.index(name)]
        state = self._opt.state.get(p, {})
        return state.get("exp_avg"), state.get("exp_avg_sq")


def adam_step(params, state: Adam) -> Adam:
    """Apply one Adam update using the gradients already stored on ``params``."""
    state.step()
    return state


def grad_check(
    loss_fn: Callable[[dict], torch.Tensor],
    params: dict[str, torch.Tensor],
    epsilon: float = 1e-6,
    n_coords: int = 12,
    seed: int = 0,
) -> float:
    """Max relative gap between autograd and central finite differences.

    ``params`` maps names to leaf tensors with ``requires_grad``; they are
    perturbed in place and restored.  Up to ``n_coords`` coordinates are
    sampled from each tensor.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon should lie in [1e-7, 1e-3]")
    for p in params.values():
        if p.grad is not None:
            p.grad = None
    loss = loss_fn(params)
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for (name, p), g in zip(params.items(), grads):
            g = torch.zeros_like(p) if g is None else g
            flat, gflat = p.view(-1), g.reshape(-1)
            n = flat.numel()
            coords = rng.choice(n, size=min(n, n_coords), replace=False)
            for i in coords:
                orig = flat[i].item()
                flat[i] = orig + epsilon
                up = float(loss_fn(params))
                flat[i] = orig - epsilon
                down = float(loss_fn(params))
                flat[i] = orig
                fd = (up - down) / (2 * epsilon)
                ad = float(gflat[i])
                worst = max(worst, abs(fd - ad) / max(1.0, abs(fd), abs(ad)))
    return worst


def save_checkpoint(path, module: nn.Module, config_hash: str = "", seed: int = 0, extra: dict | None = None):
    """Write ``state_dict`` as a JSON header plus little-endian f32 payload."""
    entries, payload, offset = [], [], 0
    for name, tensor in module.state_dict().items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": str(tensor.dtype).replace("torch.", ""),
                        "offset": offset, "nbytes": len(raw)})
        payload.append(raw)
        offset += len(raw)
    header = json.dumps({"version": CKPT_VERSION, "config_hash": config_hash, "seed": seed,
                         "extra": extra or {}, "params": entries}).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(header)))
        fh.write(header)
        for raw in payload:
            fh.write(raw)


def load_checkpoint(path, module: nn.Module | None = None) -> tuple[dict, dict]:
    """Read a checkpoint; loads it into ``module`` if given.  Returns (state, header)."""
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[12: 12 + hlen])
    base = 12 + hlen
    state = {}
    for e in header["params"]:
        arr = np.frombuffer(raw, dtype="<f4", count=e["nbytes"] // 4, offset=base + e["offset"])
        t = torch.from_numpy(arr.copy().reshape(e["shape"]))
        state[e["name"]] = t.to(getattr(torch, e["dtype"]))
    if module is not None:
        module.load_state_dict(state)
    return state, header
