"""Skip-connection convolutional autoencoder (stage 1 feature extractor)."""

from __future__ import annotations

import copy
import logging
import math

import numpy as np
import torch
import torch.nn as nn

from .substrate import (
    LEAKY_SLOPE,
    Adam,
    ConvBlock,
    DeconvBlock,
    conv_out_length,
    deconv_output_padding,
    halving_padding,
    xavier_init,
)

log = logging.getLogger(__name__)

CHANNELS = (8, 16, 32)
KERNEL = 10
STRIDE = 2


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss; ``state`` is the last finite state_dict."""

    def __init__(self, message, state=None, epoch=None):
        super().__init__(message)
        self.state = state
        self.epoch = epoch


class Encoder(nn.Module):
    """Three stride-2 conv blocks, flatten, dense to ``n_rep``.

    ``forward`` returns the embedding and the post-activation output of
    every conv block (shallow to deep) for the skip connections.
    """

    def __init__(self, n_input: int = 512, n_rep: int = 32, channels=CHANNELS, kernel: int = KERNEL):
        super().__init__()
        pad = halving_padding(kernel, STRIDE)
        self.lengths = [n_input]
        blocks, c_in = [], 1
        for c in channels:
            blocks.append(ConvBlock(c_in, c, kernel, STRIDE, pad))
            self.lengths.append(conv_out_length(self.lengths[-1], kernel, STRIDE, pad))
            c_in = c
        self.blocks = nn.ModuleList(blocks)
        self.channels = tuple(channels)
        self.n_input, self.n_rep = n_input, n_rep
        self.flat_dim = channels[-1] * self.lengths[-1]
        self.embed = nn.Linear(self.flat_dim, n_rep)

    def forward(self, x: torch.Tensor):
        if x.dim() != 2 or x.shape[1] != self.n_input:
            raise ValueError(f"expected input of shape [batch, {self.n_input}], got {tuple(x.shape)}")
        h = x.unsqueeze(1)
        skips = []
        for block in self.blocks:
            h = block(h)
            skips.append(h)
        return self.embed(h.flatten(1)), skips


class SCCAE(nn.Module):
    def __init__(self, n_input: int = 512, n_rep: int = 32, channels=CHANNELS, kernel: int = KERNEL,
                 skip: bool = True, skip_activation: bool = True):
        super().__init__()
        self.encoder = Encoder(n_input, n_rep, channels, kernel)
        self.skip = skip
        lengths = self.encoder.lengths  # e.g. [512, 256, 128, 64]
        pad = halving_padding(kernel, STRIDE)
        self.expand = nn.Sequential(nn.Linear(n_rep, self.encoder.flat_dim), nn.LeakyReLU(LEAKY_SLOPE))

        fuse, deconvs = [], []
        rev = list(reversed(channels))  # 32, 16, 8
        for i, c in enumerate(rev):
            width1 = [nn.Conv1d(2 * c, c, 1)]
            if skip_activation:
                width1.append(nn.LeakyReLU(LEAKY_SLOPE))
            fuse.append(nn.Sequential(*width1))
            c_out = rev[i + 1] if i + 1 < len(rev) else 1
            l_in, l_out = lengths[-1 - i], lengths[-2 - i]
            op = deconv_output_padding(l_in, l_out, kernel, STRIDE, pad)
            deconvs.append(DeconvBlock(c, c_out, kernel, STRIDE, pad, op, activate=c_out != 1))
        self.fuse = nn.ModuleList(fuse)
        self.deconvs = nn.ModuleList(deconvs)
        self.out = nn.Linear(n_input, n_input)
        xavier_init(self)

    @property
    def n_rep(self) -> int:
        return self.encoder.n_rep

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x)[0]

    def decode(self, z: torch.Tensor, skips=None) -> torch.Tensor:
        expected = [(c, l) for c, l in zip(self.encoder.channels, self.encoder.lengths[1:])]
        if self.skip:
            if skips is None or len(skips) != len(expected):
                raise ValueError(f"decode needs {len(expected)} skip activations")
            for s, (c, l) in zip(skips, expected):
                if s.dim() != 3 or tuple(s.shape[1:]) != (c, l) or s.shape[0] != z.shape[0]:
                    raise ValueError(f"skip activation of shape {tuple(s.shape)} does not match [{z.shape[0]}, {c}, {l}]")
        c_last, l_last = expected[-1]
        h = self.expand(z).view(-1, c_last, l_last)
        for i, (fuse, deconv) in enumerate(zip(self.fuse, self.deconvs)):
            low = skips[-1 - i] if self.skip else torch.zeros_like(h)
            h = deconv(fuse(torch.cat([h, low], dim=1)))
        return self.out(h.flatten(1))

    def forward(self, x: torch.Tensor):
        z, skips = self.encoder(x)
        return self.decode(z, skips), z


def reconstruction_loss(x, x_hat) -> torch.Tensor:
    """Mean over samples of the squared Euclidean reconstruction error."""
    x, x_hat = torch.as_tensor(x), torch.as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return ((x - x_hat) ** 2).reshape(x.shape[0], -1).sum(dim=1).mean()


def build_sccae(config) -> SCCAE:
    return SCCAE(config.n_input, config.n_rep, skip=not config.no_skip,
                 skip_activation=config.skip_conv_activation)


@torch.no_grad()
def embed(model: nn.Module, X, batch_size: int = 256) -> np.ndarray:
    """Eval-mode embeddings of a spectrum matrix (``model`` is an SCCAE or Encoder)."""
    encoder = model.encoder if isinstance(model, SCCAE) else model
    was = encoder.training
    encoder.eval()
    dtype = next(encoder.parameters()).dtype
    X = torch.as_tensor(np.asarray(X), dtype=dtype)
    out = [encoder(X[i: i + batch_size])[0] for i in range(0, len(X), batch_size)]
    encoder.train(was)
    if not out:
        return np.zeros((0, encoder.n_rep), dtype=np.float32)
    return torch.cat(out).numpy()


def iterate_minibatches(n: int, batch_size: int, generator: torch.Generator):
    order = torch.randperm(n, generator=generator)
    for i in range(0, n, batch_size):
        yield order[i: i + batch_size]


def pretrain(model: SCCAE, data, config, seed: int = 0) -> tuple[SCCAE, list[float]]:
    """Stage 1: minimise the reconstruction loss with mini-batch Adam.

    Stops early when the epoch loss fails to improve by more than
    ``pretrain_min_delta`` for ``pretrain_patience`` epochs.  Returns the
    model and the per-epoch mean loss.
    """
    X = torch.as_tensor(np.asarray(data), dtype=next(model.parameters()).dtype)
    if len(X) == 0:
        raise ValueError("pretrain needs at least one sample")
    gen = torch.Generator().manual_seed(seed)
    opt = Adam(model.named_parameters(), lr=config.pretrain_lr)
    curve: list[float] = []
    best, stale = math.inf, 0
    last_finite = copy.deepcopy(model.state_dict())
    model.train()
    for epoch in range(config.pretrain_epochs):
        total, seen = 0.0, 0
        for idx in iterate_minibatches(len(X), config.batch_size, gen):
            if len(idx) < 2:  # batch-norm needs more than one sample
                continue
            xb = X[idx]
            opt.zero_grad()
            x_hat, _ = model(xb)
            loss = reconstruction_loss(xb, x_hat)
            if not torch.isfinite(loss):
                model.load_state_dict(last_finite)
                raise DivergenceError(f"reconstruction loss became {loss.item()} at epoch {epoch}",
                                      state=last_finite, epoch=epoch)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        if not seen:
            raise ValueError("pretrain needs at least two samples per batch")
        curve.append(total / seen)
        last_finite = copy.deepcopy(model.state_dict())
        if curve[-1] < best - config.pretrain_min_delta:
            best, stale = curve[-1], 0
        else:
            stale += 1
            if stale >= config.pretrain_patience:
                log.info("pretraining plateaued at epoch %d (loss %.5f)", epoch, curve[-1])
                break
    return model, curve
