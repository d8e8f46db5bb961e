"""Stage 2: semi-supervised improved deep embedded clustering with VAT.

The autoencoder from stage 1 gets a clustering layer (Student-t soft
assignment to trainable centroids).  Reconstruction, KL clustering and
virtual-adversarial losses are optimised jointly; the target distribution
is refreshed every ``update_interval`` epochs and training stops once the
pseudo-labels settle.
"""

from __future__ import annotations

import functools
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .kmeans import kmeans
from .sccae import SCCAE, embed, iterate_minibatches, reconstruction_loss
from .substrate import Adam, eval_mode

log = logging.getLogger(__name__)

Q_FLOOR = 1e-12


def _accepts_arrays(fn):
    """Let tensor math be called with numpy arrays (computed in float64)."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        if any(isinstance(a, np.ndarray) for a in args):
            args = [torch.as_tensor(a, dtype=torch.float64) if isinstance(a, np.ndarray) else a for a in args]
            out = fn(*args, **kwargs)
            return out.detach().numpy() if out.dim() else float(out)
        return fn(*args, **kwargs)

    return wrapper


@_accepts_arrays
def soft_assign(Z: torch.Tensor, centroids: torch.Tensor, alpha: float = 1.0,
                distance: str = "sqeuclidean") -> torch.Tensor:
    """Student-t kernel similarity of each embedding to each centroid, row-normalised."""
    if Z.dim() != 2 or centroids.dim() != 2 or Z.shape[1] != centroids.shape[1]:
        raise ValueError(f"incompatible shapes {tuple(Z.shape)} and {tuple(centroids.shape)}")
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    d = ((Z.unsqueeze(1) - centroids.unsqueeze(0)) ** 2).sum(-1)
    if distance == "euclidean":
        d = d.clamp_min(1e-24).sqrt()
    elif distance != "sqeuclidean":
        raise ValueError(f"unknown distance {distance!r}")
    # log-space for stability with large distances
    logits = -(alpha + 1.0) / 2.0 * torch.log1p(d / alpha)
    return torch.softmax(logits, dim=1)


@_accepts_arrays
def target_distribution(Q: torch.Tensor) -> torch.Tensor:
    """Square Q, divide by cluster frequency, renormalise rows."""
    freq = Q.sum(0)
    empty = freq <= 0
    if bool(empty.any()):
        warnings.warn(f"clusters {empty.nonzero().flatten().tolist()} have zero mass; dropped from P",
                      RuntimeWarning, stacklevel=2)
    weight = torch.where(empty, torch.zeros_like(freq), 1.0 / torch.where(empty, torch.ones_like(freq), freq))
    num = Q ** 2 * weight
    return num / num.sum(1, keepdim=True)


def _kl_rows(P: torch.Tensor, Q: torch.Tensor) -> torch.Tensor:
    if P.shape != Q.shape:
        raise ValueError(f"shape mismatch {tuple(P.shape)} vs {tuple(Q.shape)}")
    support = P > 0
    if bool((support & (Q <= 0)).any()):
        warnings.warn("q = 0 where p > 0; clamping q", RuntimeWarning, stacklevel=3)
    Qc = Q.clamp_min(Q_FLOOR)
    Ps = torch.where(support, P, torch.ones_like(P))
    terms = torch.where(support, P * (torch.log(Ps) - torch.log(Qc)), torch.zeros_like(P))
    return terms.sum(1)


@_accepts_arrays
def clustering_loss(P: torch.Tensor, Q: torch.Tensor, reduction: str = "sum") -> torch.Tensor:
    """KL(P || Q) summed over all entries (``reduction="mean"`` averages over rows)."""
    rows = _kl_rows(P, Q)
    if reduction == "sum":
        return rows.sum()
    if reduction == "mean":
        return rows.mean()
    raise ValueError(f"unknown reduction {reduction!r}")


def pseudo_labels(Q) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest cluster index."""
    Q = Q.detach().cpu().numpy() if isinstance(Q, torch.Tensor) else np.asarray(Q)
    return np.argmax(Q, axis=1)


class ClusteringModel(nn.Module):
    """SCCAE plus a clustering layer holding the centroids."""

    def __init__(self, ae: SCCAE, centroids, alpha: float = 1.0, distance: str = "sqeuclidean"):
        super().__init__()
        self.ae = ae
        dtype = next(ae.parameters()).dtype
        self.centroids = nn.Parameter(torch.as_tensor(np.asarray(centroids), dtype=dtype).clone())
        self.alpha = alpha
        self.distance = distance

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return soft_assign(self.ae.encode(x), self.centroids, self.alpha, self.distance)


def _unit_rows(d: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    norms = d.reshape(d.shape[0], -1).norm(dim=1)
    safe = torch.where(norms > 0, norms, torch.ones_like(norms))
    return d / safe.view(-1, *([1] * (d.dim() - 1))), norms


def vat_perturbation(model, x: torch.Tensor, eps: float = 2.0, xi: float = 1e-6, power_iters: int = 1,
                     generator: torch.Generator | None = None) -> torch.Tensor:
    """Approximate the KL-maximising perturbation of L2 norm ``eps`` per sample.

    Power iteration on the KL curvature starting from a random direction.
    ``model`` maps inputs to assignment distributions; an ``nn.Module`` is
    evaluated with frozen batch-norm statistics.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    x = x.detach()
    with eval_mode(model):
        with torch.no_grad():
            q_ref = model(x)
        d, _ = _unit_rows(torch.randn(x.shape, generator=generator, dtype=x.dtype))
        for _ in range(power_iters):
            d = d.detach().requires_grad_(True)
            kl = _kl_rows(q_ref, model(x + xi * d)).sum()
            (grad,) = torch.autograd.grad(kl, d)
            g, norms = _unit_rows(grad)
            flat = norms == 0
            if bool(flat.any()):
                # constant message so the default filter reports it once per call site
                warnings.warn("zero VAT gradient for some samples; keeping their random direction",
                              RuntimeWarning, stacklevel=2)
                log.debug("%d samples with zero VAT gradient", int(flat.sum()))
                g = torch.where(flat.view(-1, *([1] * (x.dim() - 1))), d.detach(), g)
            d = g
    r = eps * d.detach()
    return r


def vat_loss(model, x: torch.Tensor, r_adv: torch.Tensor) -> torch.Tensor:
    """Mean KL between assignments at ``x`` (held constant) and at ``x + r_adv``."""
    with eval_mode(model):
        with torch.no_grad():
            q_ref = model(x)
        q_adv = model(x + r_adv)
    return _kl_rows(q_ref, q_adv).mean()


@dataclass
class ClusteringState:
    centroids: np.ndarray
    Q: np.ndarray
    P: np.ndarray
    s: np.ndarray
    s_old: np.ndarray | None = None
    change_history: list[float] = field(default_factory=list)

    def check(self, atol: float = 1e-6) -> None:
        for name in ("Q", "P"):
            m = getattr(self, name)
            if np.any(m < 0) or not np.allclose(m.sum(1), 1.0, atol=atol):
                raise AssertionError(f"{name} rows are not distributions")
        if not np.array_equal(self.s, pseudo_labels(self.Q)):
            raise AssertionError("pseudo-labels disagree with argmax Q")


def init_centroids_semisup(encoder, X_sp, y_sp, n_cluster: int) -> np.ndarray:
    """Centroid k is the mean embedding of the labeled samples of class k."""
    y_sp = np.asarray(y_sp)
    Z = encoder(X_sp) if callable(encoder) and not isinstance(encoder, nn.Module) else embed(encoder, X_sp)
    Z = np.asarray(Z, dtype=np.float64)
    out = np.zeros((n_cluster, Z.shape[1]))
    for k in range(n_cluster):
        members = Z[y_sp == k]
        if len(members) == 0:
            raise ValueError(f"class {k} has no labeled samples to initialise its centroid")
        out[k] = members.mean(0)
    return out


def init_centroids_unsup(encoder, X_un, k: int, restarts: int = 10, seed: int = 0, max_iter: int = 300) -> np.ndarray:
    Z = encoder(X_un) if callable(encoder) and not isinstance(encoder, nn.Module) else embed(encoder, X_un)
    Z = np.asarray(Z, dtype=np.float64)
    if len(Z) < k:
        raise ValueError(f"{len(Z)} points cannot be split into {k} clusters")
    return kmeans(Z, k, max_iter=max_iter, restarts=restarts, seed=seed).centroids


class LossComponentError(FloatingPointError):
    def __init__(self, component: str, value: float):
        super().__init__(f"loss component {component} is {value}")
        self.component = component


def joint_step(model: ClusteringModel, optimizer: Adam, x: torch.Tensor, p: torch.Tensor, config,
               generator: torch.Generator | None = None, vat_mask: torch.Tensor | None = None) -> dict:
    """One Adam step on L_rec + gamma_c * L_c + gamma_vat * L_v for a batch.

    ``p`` holds the target-distribution rows of the batch.  Decoder weights
    only see the reconstruction term because L_c and L_v never touch them.
    """
    gamma_c = config.gamma_c
    gamma_v = config.effective_gamma_vat
    model.train()
    optimizer.zero_grad()
    x_hat, z = model.ae(x)
    parts = {"rec": reconstruction_loss(x, x_hat)}
    loss = parts["rec"]
    if gamma_c > 0:
        q = soft_assign(z, model.centroids, model.alpha, model.distance)
        parts["c"] = clustering_loss(p, q, reduction="mean")
        loss = loss + gamma_c * parts["c"]
    if gamma_v > 0:
        xv = x if vat_mask is None else x[vat_mask]
        if len(xv):
            r = vat_perturbation(model, xv, config.vat_eps, config.vat_xi, config.vat_power_iters, generator)
            parts["v"] = vat_loss(model, xv, r)
            loss = loss + gamma_v * parts["v"]
    for name, value in parts.items():
        if not torch.isfinite(value):
            raise LossComponentError(f"L_{name}", value.item())
    loss.backward()
    optimizer.step()
    out = {k: v.item() for k, v in parts.items()}
    out["total"] = loss.item()
    return out


@torch.no_grad()
def assign_all(model: ClusteringModel, X: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    with eval_mode(model):
        parts = [model(X[i: i + batch_size]) for i in range(0, len(X), batch_size)]
    return torch.cat(parts)


def run_ssidec(ae: SCCAE, data, config, labeled=None, seed: int = 0, centroids=None):
    """Run the clustering stage on ``data`` (D_sp and D_un stacked).

    ``labeled`` is ``(X_sp, y_sp)`` in semi-supervised mode.  Centroids may be
    given directly; otherwise they come from the labeled class means or from
    k-means on the embeddings.  Returns ``(ClusteringState, model, history)``.
    """
    X = torch.as_tensor(np.asarray(data), dtype=next(ae.parameters()).dtype)
    n = len(X)
    if centroids is None:
        if config.mode == "semisup":
            if labeled is None:
                raise ValueError("semi-supervised mode needs labeled data")
            centroids = init_centroids_semisup(ae, labeled[0], labeled[1], config.n_cluster)
        else:
            centroids = init_centroids_unsup(ae, X.numpy(), config.n_cluster, config.kmeans_restarts, seed,
                                             config.kmeans_max_iter)
    model = ClusteringModel(ae, centroids, config.alpha, config.distance)
    opt = Adam(model.named_parameters(), lr=config.cluster_lr)
    gen = torch.Generator().manual_seed(seed)

    vat_rows = None
    if not config.vat_all_samples and labeled is not None:
        vat_rows = torch.ones(n, dtype=torch.bool)
        vat_rows[: len(labeled[0])] = False

    history = {"rec": [], "c": [], "v": [], "change": []}
    s = None
    change_history = []
    P = None
    for epoch in range(config.cluster_epochs):
        if epoch % config.update_interval == 0:
            Q = assign_all(model, X)
            P = target_distribution(Q)
            s_old, s = s, pseudo_labels(Q)
            if s_old is not None:
                change = float(np.mean(s_old != s))
                change_history.append(change)
                log.info("epoch %d: pseudo-label change %.5f", epoch, change)
                if change < config.tol:
                    break
        sums = {"rec": 0.0, "c": 0.0, "v": 0.0}
        for idx in iterate_minibatches(n, config.batch_size, gen):
            if len(idx) < 2:
                continue
            mask = None if vat_rows is None else vat_rows[idx]
            out = joint_step(model, opt, X[idx], P[idx], config, gen, mask)
            for k in sums:
                sums[k] += out.get(k, 0.0) * len(idx)
        for k in sums:
            history[k].append(sums[k] / n)

    Q = assign_all(model, X)
    P = target_distribution(Q)
    s_final = pseudo_labels(Q)
    history["change"] = change_history
    state = ClusteringState(
        centroids=model.centroids.detach().numpy().copy(),
        Q=Q.numpy(), P=P.numpy(), s=s_final, s_old=s, change_history=change_history,
    )
    return state, model, history
