"""Contrastive and soft contrastive losses with analytic gradients.

Given a batch of embeddings ``z`` (one row per sample), their augmented
views ``z_aug`` and multi-hot label rows ``y``:

  contrastive (InfoNCE):
      L_c = -sum_i log[ exp(z_i . z'_i / T) / sum_j exp(z_i . z'_j / T) ]

  soft contrastive (label alignment):
      L_s = -sum_ij [ Y_ij log s(X_ij) + (1 - Y_ij) log(1 - s(X_ij)) ]
      with X_ij = z_i . z_j, Y_ij the cosine similarity of label rows
      (zero whenever either row is all zeros), and s the logistic function.

  total: L = L_c + soft_weight * L_s

With ``normalize=True`` (the default) rows of z and z_aug are
L2-normalized inside the loss and the gradients chain through the
normalization. Both terms use log-sum-exp / softplus forms, so dot
products of magnitude several hundred stay finite.
"""

from __future__ import annotations

import numpy as np

from .errors import NonPositiveTemperature, ShapeMismatch
from .mathutil import logsumexp_rows, sigmoid, softplus
from .validation import as_float_array, check_multihot, check_same_shape

_NORM_FLOOR = 1e-12


def label_similarity(labels) -> np.ndarray:
    """Pairwise cosine similarity of multi-hot label rows.

    Rows without any positive label get similarity 0 against every partner,
    themselves included; cosine is undefined at zero and "no shared class"
    is the safe target. Entries lie in [0, 1]; identical non-empty rows give
    exactly 1.0 because the denominator is sqrt of an exact integer product.
    """
    y = check_multihot(labels)
    counts = y.sum(axis=1)
    gram = y @ y.T
    denom = np.sqrt(np.outer(counts, counts))
    sim = gram / np.where(denom > 0, denom, 1.0)
    alive = counts > 0
    return sim * np.outer(alive, alive)


def contrastive_loss(z, z_aug, temperature: float = 0.1,
                     normalize: bool = True) -> float:
    """InfoNCE over the batch; always >= 0, exactly 0 for a single sample."""
    zh, _ = _prepare(z, "z", normalize)
    zah, _ = _prepare(z_aug, "z_aug", normalize)
    check_same_shape(zh, zah, "z", "z_aug")
    _check_temperature(temperature)
    logits = (zh @ zah.T) / temperature
    return float((logsumexp_rows(logits) - np.diag(logits)).sum())


def soft_loss(z, labels, normalize: bool = True, include_diagonal: bool = True,
              label_sim=None) -> float:
    """Binary cross-entropy between feature similarities and label similarity.

    ``label_sim`` overrides the cosine target matrix (useful for ablating
    against the raw label Gram matrix). Stable for |z_i . z_j| up to several
    hundred via the softplus identity.
    """
    zh, _ = _prepare(z, "z", normalize)
    ysim = _target_matrix(zh, labels, label_sim)
    x = zh @ zh.T
    terms = softplus(x) - ysim * x
    if not include_diagonal:
        np.fill_diagonal(terms, 0.0)
    return float(terms.sum())


def total_loss(z, z_aug, labels, temperature: float = 0.1,
               soft_weight: float = 1.0, normalize: bool = True,
               include_diagonal: bool = True, label_sim=None) -> float:
    """contrastive_loss + soft_weight * soft_loss."""
    loss, _, _ = total_loss_and_grad(
        z, z_aug, labels, temperature=temperature, soft_weight=soft_weight,
        normalize=normalize, include_diagonal=include_diagonal,
        label_sim=label_sim,
    )
    return loss


def total_loss_grad(z, z_aug, labels, temperature: float = 0.1,
                    soft_weight: float = 1.0, normalize: bool = True,
                    include_diagonal: bool = True, label_sim=None):
    """Analytic gradients of the total loss w.r.t. z and z_aug."""
    _, dz, dz_aug = total_loss_and_grad(
        z, z_aug, labels, temperature=temperature, soft_weight=soft_weight,
        normalize=normalize, include_diagonal=include_diagonal,
        label_sim=label_sim,
    )
    return dz, dz_aug


def total_loss_and_grad(z, z_aug, labels, temperature: float = 0.1,
                        soft_weight: float = 1.0, normalize: bool = True,
                        include_diagonal: bool = True, label_sim=None):
    """Loss value plus gradients, sharing one forward computation.

    Returns (loss, dL/dz, dL/dz_aug).
    """
    _check_temperature(temperature)
    if soft_weight < 0:
        raise ShapeMismatch("soft_weight must be >= 0")
    zh, z_raw = _prepare(z, "z", normalize)
    zah, za_raw = _prepare(z_aug, "z_aug", normalize)
    check_same_shape(zh, zah, "z", "z_aug")
    n = zh.shape[0]

    logits = (zh @ zah.T) / temperature
    loss_c = float((logsumexp_rows(logits) - np.diag(logits)).sum())
    shifted = logits - logits.max(axis=1, keepdims=True)
    expl = np.exp(shifted)
    probs = expl / expl.sum(axis=1, keepdims=True)
    g = (probs - np.eye(n)) / temperature
    grad_zh = g @ zah
    grad_zah = g.T @ zh

    if soft_weight > 0:
        ysim = _target_matrix(zh, labels, label_sim)
        x = zh @ zh.T
        terms = softplus(x) - ysim * x
        d = sigmoid(x) - ysim
        if not include_diagonal:
            np.fill_diagonal(terms, 0.0)
            np.fill_diagonal(d, 0.0)
        loss_s = float(terms.sum())
        grad_zh = grad_zh + soft_weight * ((d + d.T) @ zh)
    else:
        check_multihot(labels)
        loss_s = 0.0

    if normalize:
        grad_z = _chain_through_normalization(grad_zh, zh, z_raw)
        grad_z_aug = _chain_through_normalization(grad_zah, zah, za_raw)
    else:
        grad_z, grad_z_aug = grad_zh, grad_zah
    return loss_c + soft_weight * loss_s, grad_z, grad_z_aug


def _prepare(z, name, normalize):
    arr = as_float_array(z, name=name, ndim=2)
    if arr.shape[0] < 1:
        raise ShapeMismatch(f"{name}: batch must hold at least one row")
    if not normalize:
        return arr, arr
    norms = np.maximum(np.linalg.norm(arr, axis=1, keepdims=True), _NORM_FLOOR)
    return arr / norms, arr


def _target_matrix(zh, labels, label_sim):
    if label_sim is not None:
        ysim = as_float_array(label_sim, name="label_sim", ndim=2)
    else:
        ysim = label_similarity(labels)
    if ysim.shape != (zh.shape[0], zh.shape[0]):
        raise ShapeMismatch(
            f"label similarity is {ysim.shape}, batch needs {(zh.shape[0],) * 2}"
        )
    return ysim


def _chain_through_normalization(grad, unit_rows, raw_rows):
    """Backpropagate row gradients through z -> z / |z|."""
    norms = np.maximum(np.linalg.norm(raw_rows, axis=1, keepdims=True), _NORM_FLOOR)
    radial = (grad * unit_rows).sum(axis=1, keepdims=True)
    return (grad - radial * unit_rows) / norms


def _check_temperature(temperature):
    if not temperature > 0:
        raise NonPositiveTemperature(f"temperature must be > 0, got {temperature}")
