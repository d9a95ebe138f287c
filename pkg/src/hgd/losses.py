"""Contrastive granularity losses plus the reconstruction/adversarial terms.

Every content map here is a single ``(C, H, W)`` tensor; label maps are
``(H, W)`` integer tensors at the content resolution.
"""
from __future__ import annotations

import logging
import math
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.stats import rankdata

from .config import LossConfig

log = logging.getLogger(__name__)

TERM_WEIGHTS = {
    "adv_content": "lambda1",
    "adv_domain": "lambda2",
    "cycle": "lambda3",
    "self_recon": "lambda4",
    "pgd": "lambda5",
    "sgd": "lambda6",
    "ggd": "lambda7",
}


def _cos(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise cosine similarity of the rows of ``a`` and ``b``."""
    return F.normalize(a, dim=-1) @ F.normalize(b, dim=-1).T


def info_nce(anchor, positives, pool, tau: float, weights=None):
    """Contrastive loss of one anchor.

    ``pool`` is the full candidate set the anchor is compared against (the
    anchor itself excluded, the positives included).  Each positive
    contributes ``-log(exp(w * s+ / tau) / sum_pool exp(s / tau))``; the
    result is the mean over positives.  Returns ``None`` when there is
    nothing to contrast against.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    anchor = torch.as_tensor(anchor).reshape(1, -1)
    positives = torch.as_tensor(positives).reshape(-1, anchor.shape[1])
    pool = torch.as_tensor(pool).reshape(-1, anchor.shape[1])
    if positives.shape[0] == 0 or pool.shape[0] == 0:
        return None
    if weights is None:
        weights = torch.ones(positives.shape[0], dtype=anchor.dtype)
    weights = torch.as_tensor(weights, dtype=anchor.dtype)
    pos = _cos(anchor, positives)[0]
    denom = torch.logsumexp(_cos(anchor, pool)[0] / tau, dim=0)
    return (denom - weights * pos / tau).mean()


def _nce_rows(pos, pos_w, neg, tau, neg_mask=None):
    """Vectorised :func:`info_nce` with one positive per anchor row.

    ``pos``/``pos_w`` are ``(A,)``; ``neg`` is ``(A, M)`` similarities to the
    negatives, optionally masked.  The positive is part of the denominator.
    """
    logits = torch.cat([pos[:, None], neg], dim=1) / tau
    if neg_mask is not None:
        keep = torch.cat([torch.ones_like(neg_mask[:, :1]), neg_mask], dim=1)
        logits = logits.masked_fill(~keep, float("-inf"))
    return torch.logsumexp(logits, dim=1) - pos_w * pos / tau


def _pixels(z: torch.Tensor) -> torch.Tensor:
    return z.reshape(z.shape[0], -1).T


def pgd_loss(content_orig, content_translated, cross_subject_pool: Sequence[torch.Tensor] = (),
             tau1: float = 0.5, max_anchors: int | None = 256, generator: torch.Generator | None = None):
    """Pixel-level contrast between a content map and its translation.

    Anchor pixel ``n`` of the original map is pulled towards pixel ``n`` of
    the translated map and pushed away from every other pixel of the
    original and from all pixels of the maps in ``cross_subject_pool``.
    """
    if content_orig.shape != content_translated.shape:
        raise ValueError(f"misaligned content maps {tuple(content_orig.shape)} vs {tuple(content_translated.shape)}")
    if tau1 <= 0:
        raise ValueError("tau must be positive")
    q = F.normalize(_pixels(content_orig), dim=-1)
    t = F.normalize(_pixels(content_translated), dim=-1)
    n = q.shape[0]
    if n == 1 and not cross_subject_pool:
        log.debug("pgd: single pixel and no cross-subject pool, anchor excluded")
        return content_orig.sum() * 0.0
    idx = torch.arange(n)
    if max_anchors is not None and n > max_anchors:
        idx = torch.randperm(n, generator=generator)[:max_anchors].sort().values
    qa, ta = q[idx], t[idx]
    pos = (qa * ta).sum(-1)
    pool = torch.cat([q, *(F.normalize(_pixels(o), dim=-1) for o in cross_subject_pool)])
    neg = qa @ pool.T
    neg_mask = torch.ones_like(neg, dtype=torch.bool)
    neg_mask[torch.arange(len(idx)), idx] = False
    return _nce_rows(pos, torch.ones_like(pos), neg, tau1, neg_mask).mean()


def mask_structure(z, labels, s: int, num_classes: int | None = None):
    """Zero every position of ``z`` whose label differs from ``s``."""
    if s < 0 or (num_classes is not None and s >= num_classes):
        raise ValueError(f"class id {s} outside [0, {num_classes})")
    labels = torch.as_tensor(labels)
    if labels.shape != z.shape[-2:]:
        raise ValueError(f"labels {tuple(labels.shape)} do not match content grid {tuple(z.shape[-2:])}")
    return torch.where(labels == s, z, torch.zeros((), dtype=z.dtype))


def deformation(z_src_masked, z_trans_masked):
    if z_src_masked.shape != z_trans_masked.shape:
        raise ValueError("deformation needs equally shaped maps")
    return (z_src_masked - z_trans_masked).abs().sum()


def rank_weights(deformations, alpha_s: float = 0.5) -> np.ndarray:
    """``exp(-alpha_s * rank)`` with rank 0 for the largest deformation.

    Ties share the smaller rank, so the hardest pairs all get weight 1.
    """
    d = np.asarray(deformations, dtype=np.float64).ravel()
    if d.size == 0:
        raise ValueError("rank_weights needs at least one deformation")
    if np.any(d < 0):
        raise ValueError("deformations must be nonnegative")
    rank = rankdata(-d, method="min") - 1
    return np.exp(-alpha_s * rank)


def _structure_vectors(z, labels, classes, feature):
    """One row per class: the flattened masked map, or its in-mask mean."""
    if not classes:
        return z.new_zeros((0, z.numel() if feature != "mean" else z.shape[0]))
    onehot = (labels[None] == torch.as_tensor(classes)[:, None, None]).to(z.dtype)   # (k, H, W)
    if feature == "mean":
        return torch.einsum("chw,khw->kc", z, onehot) / onehot.sum(dim=(1, 2)).clamp(min=1)[:, None]
    return (z[None] * onehot[:, None]).reshape(len(classes), -1)


def sgd_loss(content_orig, content_translated, labels, cross_subject_pool=(), tau2: float = 0.5,
             alpha_s: float = 0.5, feature: str = "flatten"):
    """Structure-level contrast with deformation-ranked positive weights.

    ``cross_subject_pool`` holds ``(content_map, labels)`` pairs from other
    subjects; all of their structures act as negatives, together with the
    other structures of the anchor's own subject.
    """
    if content_orig.shape != content_translated.shape:
        raise ValueError("misaligned content maps")
    labels = torch.as_tensor(labels)
    if labels.shape != content_orig.shape[-2:]:
        raise ValueError(f"labels {tuple(labels.shape)} do not match content grid {tuple(content_orig.shape[-2:])}")
    present = torch.unique(labels).tolist()
    a = _structure_vectors(content_orig, labels, present, feature)
    p = _structure_vectors(content_translated, labels, present, feature)
    with torch.no_grad():
        if feature == "mean":
            flat = _structure_vectors(content_orig - content_translated, labels, present, "flatten")
        else:
            flat = a - p
        d = flat.abs().sum(dim=1).tolist()
    w = torch.as_tensor(rank_weights(d, alpha_s), dtype=a.dtype)
    a_n, p_n = F.normalize(a, dim=-1), F.normalize(p, dim=-1)

    k = len(present)
    own = a_n @ torch.cat([a_n, p_n]).T                                  # (k, 2k)
    own_mask = ~torch.cat([torch.eye(k, dtype=torch.bool)] * 2, dim=1)  # drop self and positive
    negs, masks = [own], [own_mask]
    for other, other_labels in cross_subject_pool:
        other_labels = torch.as_tensor(other_labels)
        other_present = torch.unique(other_labels).tolist()
        missing = len(set(present) - set(other_present))
        if missing:
            log.debug("sgd: %d structures absent from a pool map, skipped", missing)
        v = _structure_vectors(other, other_labels, other_present, feature)
        sim = a_n @ F.normalize(v, dim=-1).T
        negs.append(sim)
        masks.append(torch.ones_like(sim, dtype=torch.bool))
    neg = torch.cat(negs, dim=1)
    neg_mask = torch.cat(masks, dim=1)
    usable = neg_mask.any(dim=1)
    if not usable.all():
        log.debug("sgd: %d anchors without negatives excluded", int((~usable).sum()))
    if not usable.any():
        return content_orig.sum() * 0.0
    pos = (a_n * p_n).sum(-1)
    rows = _nce_rows(pos, w, neg, tau2, neg_mask)
    return rows[usable].mean()


def ggd_loss(content_orig, content_translated, cross_subject_pool: Sequence[torch.Tensor] = (), tau2: float = 0.5):
    """Whole-map contrast, symmetrised over which of the two maps is the anchor."""
    if content_orig.shape != content_translated.shape:
        raise ValueError("misaligned content maps")
    if not cross_subject_pool:
        log.debug("ggd: no other subject in the batch, loss excluded")
        return content_orig.sum() * 0.0
    a = content_orig.reshape(1, -1)
    p = content_translated.reshape(1, -1)
    others = torch.stack([o.reshape(-1) for o in cross_subject_pool])
    pos = _cos(a, p)[0]
    one = torch.ones_like(pos)
    fwd = _nce_rows(pos, one, _cos(a, others), tau2)
    bwd = _nce_rows(pos, one, _cos(p, others), tau2)
    return 0.5 * (fwd + bwd).mean()


def cycle_loss(m, m_reconstructed):
    return (m - m_reconstructed).abs().mean()


def self_recon_loss(m, m_self):
    return (m - m_self).abs().mean()


def _as_list(scores):
    return list(scores) if isinstance(scores, (list, tuple)) else [scores]


def lsgan_d_loss(real_scores, fake_scores):
    """Least-squares discriminator loss, summed over scales."""
    real = sum(((r - 1) ** 2).mean() for r in _as_list(real_scores))
    fake = sum((f ** 2).mean() for f in _as_list(fake_scores))
    return real + fake


def lsgan_g_loss(fake_scores):
    return sum(((f - 1) ** 2).mean() for f in _as_list(fake_scores))


def adv_domain_loss(real_scores, fake_scores):
    """``(discriminator term, generator term)`` for the per-modality patch discriminators.

    Callers detach the fakes themselves before stepping the discriminator.
    """
    return lsgan_d_loss(real_scores, fake_scores), lsgan_g_loss(fake_scores)


def content_d_loss(scores, modalities):
    """The content discriminator regresses a one-hot modality code."""
    k = scores.shape[1]
    target = F.one_hot(torch.as_tensor(modalities), k).to(scores.dtype)
    return ((scores - target) ** 2).mean()


def content_g_loss(scores):
    """Encoders are pushed towards the uniform code so content carries no modality cue."""
    return ((scores - 1.0 / scores.shape[1]) ** 2).mean()


def adv_content_loss(scores, modalities):
    return content_d_loss(scores, modalities), content_g_loss(scores)


def total_loss(terms: Mapping[str, torch.Tensor], config: LossConfig):
    """Weighted sum of the named terms plus a float breakdown for logging."""
    unknown = set(terms) - set(TERM_WEIGHTS)
    if unknown:
        raise KeyError(f"unknown loss terms: {sorted(unknown)}")
    total = 0.0
    breakdown = {}
    for name, weight_name in TERM_WEIGHTS.items():
        value = terms.get(name)
        if value is None:
            breakdown[name] = 0.0
            continue
        weighted = getattr(config, weight_name) * value
        total = total + weighted
        breakdown[name] = float(weighted.detach()) if torch.is_tensor(weighted) else float(weighted)
    breakdown["total"] = float(total.detach()) if torch.is_tensor(total) else float(total)
    if not math.isfinite(breakdown["total"]):
        raise FloatingPointError(f"non-finite loss: {breakdown}")
    return total, breakdown
