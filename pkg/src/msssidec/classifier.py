"""Stage 3: discriminative model trained on labeled plus pseudo-labeled data."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .sccae import DivergenceError, Encoder, iterate_minibatches
from .substrate import LEAKY_SLOPE, Adam, ConvBlock, xavier_init

LOG_FLOOR = math.log(1e-12)


class DiscriminativeModel(nn.Module):
    """Copied encoder + conv head (8, 16 channels, kernel 3) + dense 128 + dense N_cluster.

    The embedding is read by the head as a one-channel sequence of length
    ``n_rep``.
    """

    def __init__(self, encoder: Encoder, n_cluster: int):
        super().__init__()
        self.encoder = copy.deepcopy(encoder)
        n_rep = encoder.n_rep
        head = nn.Sequential(
            ConvBlock(1, 8, 3, 1, 1),
            ConvBlock(8, 16, 3, 1, 1),
            nn.Flatten(),
            nn.Linear(16 * n_rep, 128),
            nn.LeakyReLU(LEAKY_SLOPE),
            nn.Linear(128, n_cluster),
        )
        self.head = xavier_init(head)
        self.head.to(next(encoder.parameters()).dtype)
        self.n_cluster = n_cluster

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z = self.encoder(x)[0]
        return self.head(z.unsqueeze(1))


@dataclass
class AugmentedSet:
    spectra: np.ndarray
    labels: np.ndarray
    is_pseudo: np.ndarray

    def __len__(self):
        return len(self.labels)

    def provenance_counts(self, n_classes: int) -> dict[str, np.ndarray]:
        return {
            "true": np.bincount(self.labels[~self.is_pseudo], minlength=n_classes),
            "pseudo": np.bincount(self.labels[self.is_pseudo], minlength=n_classes),
        }


def augment_labels(X_sp, y_sp, X_un, s) -> AugmentedSet:
    """Union of the labeled set and the pseudo-labeled unlabeled set."""
    X_sp, X_un = np.asarray(X_sp, dtype=np.float32), np.asarray(X_un, dtype=np.float32)
    y_sp, s = np.asarray(y_sp, dtype=np.int64), np.asarray(s, dtype=np.int64)
    if len(s) != len(X_un):
        raise ValueError(f"{len(s)} pseudo-labels for {len(X_un)} unlabeled samples")
    if len(y_sp) != len(X_sp):
        raise ValueError("labeled spectra and labels differ in length")
    dim = X_sp.shape[1] if X_sp.ndim == 2 and len(X_sp) else X_un.shape[-1]
    return AugmentedSet(
        np.concatenate([X_sp.reshape(-1, dim), X_un.reshape(-1, dim)]),
        np.concatenate([y_sp, s]),
        np.concatenate([np.zeros(len(y_sp), bool), np.ones(len(s), bool)]),
    )


def _nll(logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    logp = torch.log_softmax(logits, dim=1).clamp_min(LOG_FLOOR)
    return -logp.gather(1, y.view(-1, 1)).squeeze(1)


def supervised_loss(logits: torch.Tensor, labels, is_pseudo=None, pseudo_weight: float = 1.0) -> torch.Tensor:
    """Cross-entropy averaged separately over true-labeled and pseudo-labeled rows."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    k = logits.shape[1]
    if len(labels) and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    if is_pseudo is None:
        is_pseudo = torch.zeros(len(labels), dtype=torch.bool)
    is_pseudo = torch.as_tensor(is_pseudo, dtype=torch.bool)
    nll = _nll(logits, labels)
    loss = logits.new_zeros(())
    if bool((~is_pseudo).any()):
        loss = loss + nll[~is_pseudo].mean()
    if bool(is_pseudo.any()):
        loss = loss + pseudo_weight * nll[is_pseudo].mean()
    return loss


def train_classifier(model: DiscriminativeModel, data: AugmentedSet, config, seed: int = 0,
                     epochs: int | None = None) -> dict:
    """Adam on the supervised loss; encoder and head both update."""
    epochs = config.classifier_epochs if epochs is None else epochs
    if len(data) == 0:
        raise ValueError("training set is empty")
    missing = np.flatnonzero(np.bincount(data.labels, minlength=model.n_cluster) == 0)
    if len(missing):
        raise ValueError(f"classes {missing.tolist()} have no training samples")
    dtype = next(model.parameters()).dtype
    X = torch.as_tensor(data.spectra, dtype=dtype)
    y = torch.as_tensor(data.labels)
    pseudo = torch.as_tensor(data.is_pseudo)
    gen = torch.Generator().manual_seed(seed)
    opt = Adam(model.named_parameters(), lr=config.classifier_lr)
    curves = {"loss": [], "accuracy": []}
    batch = config.batch_size if len(X) > 1 else 1
    for epoch in range(epochs):
        model.train()
        total, correct, seen = 0.0, 0, 0
        for idx in iterate_minibatches(len(X), batch, gen):
            if len(idx) < 2:
                continue
            opt.zero_grad()
            logits = model(X[idx])
            loss = supervised_loss(logits, y[idx], pseudo[idx], config.pseudo_weight)
            if not torch.isfinite(loss):
                raise DivergenceError(f"supervised loss became {loss.item()} at epoch {epoch}", epoch=epoch)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            correct += int((logits.argmax(1) == y[idx]).sum())
            seen += len(idx)
        if not seen:
            raise ValueError("need at least two training samples")
        curves["loss"].append(total / seen)
        curves["accuracy"].append(correct / seen)
    return curves


@torch.no_grad()
def predict(model: DiscriminativeModel, X, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode class predictions and softmax probabilities."""
    was = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    X = torch.as_tensor(np.asarray(X), dtype=dtype)
    probs = [torch.softmax(model(X[i: i + batch_size]), dim=1) for i in range(0, len(X), batch_size)]
    model.train(was)
    probs = torch.cat(probs).numpy() if probs else np.zeros((0, model.n_cluster))
    return np.argmax(probs, axis=1), probs
