"""Composite training objective: classification, contrastive alignment, auxiliary visual loss."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numcore as nc
from .fusion import BatchOutput, FusionParams, project
from .numcore import Tensor


def loss_infonce(z_a: Tensor, z_b: Tensor, tau: float) -> Tensor:
    """Symmetric InfoNCE over cosine similarities; row ``i`` of each side is a positive pair."""
    z_a, z_b = nc.l2_normalize(z_a), nc.l2_normalize(z_b)
    b = z_a.shape[0]
    if b < 2:
        raise ValueError("InfoNCE needs a batch of at least 2 pairs")
    if tau <= 0:
        raise ValueError("temperature must be positive")
    sim = nc.scale(nc.matmul(z_a, nc.transpose(z_b)), 1.0 / tau)
    targets = np.arange(b)
    a_to_b = nc.cross_entropy(sim, targets)
    b_to_a = nc.cross_entropy(nc.transpose(sim), targets)
    return nc.scale(nc.add(a_to_b, b_to_a), 0.5)


@dataclass
class SupConResult:
    loss: Tensor
    n_anchors: int

    @property
    def no_anchors(self) -> bool:
        return self.n_anchors == 0


def loss_supcon(z: Tensor, labels: Sequence[int], tau: float) -> SupConResult:
    """Supervised contrastive loss, positives averaged outside the log.

    Anchors without another same-label sample are skipped; a batch with no
    valid anchor yields a zero loss and ``n_anchors == 0``.
    """
    z = nc.l2_normalize(z)
    labels = np.asarray(labels)
    b = z.shape[0]
    if b < 2:
        raise ValueError("SupCon needs a batch of at least 2")
    if tau <= 0:
        raise ValueError("temperature must be positive")
    off_diag = ~np.eye(b, dtype=bool)
    positives = (labels[:, None] == labels[None, :]) & off_diag
    counts = positives.sum(axis=1)
    anchors = counts > 0
    n_anchors = int(anchors.sum())
    if n_anchors == 0:
        return SupConResult(nc.constant(0.0), 0)
    sim = nc.scale(nc.matmul(z, nc.transpose(z)), 1.0 / tau)
    log_prob = nc.log_softmax(sim, mask=off_diag)
    weights = np.where(positives, 1.0 / np.maximum(counts, 1)[:, None], 0.0) / n_anchors
    return SupConResult(nc.scale(nc.sum_all(nc.mul(log_prob, nc.constant(weights))), -1.0), n_anchors)


@dataclass
class LossTerms:
    total: float
    cls: float
    cl: float
    aux: float

    def as_dict(self) -> dict[str, float]:
        return {"total": self.total, "cls": self.cls, "cl": self.cl, "aux": self.aux}


def contrastive_term(out: BatchOutput, params: FusionParams, labels: Sequence[int],
                     tau_infonce: float, tau_supcon: float, use_infonce: bool = True,
                     use_supcon: bool = True) -> Tensor:
    """Alignment loss on the encoder states, before any cross-modal interaction."""
    z = {m: project(out.h[m], params, m) for m in out.h}
    n = z["visual"].shape[0]
    parts = []
    if n >= 2 and use_infonce:
        nce = [loss_infonce(z["visual"], z["text"], tau_infonce), loss_infonce(z["visual"], z["audio"], tau_infonce)]
        parts.append(nc.scale(nc.add(nce[0], nce[1]), 0.5))
    if n >= 2 and use_supcon:
        sc = [loss_supcon(z[m], labels, tau_supcon) for m in ("visual", "text", "audio")]
        valid = [r.loss for r in sc if not r.no_anchors]
        if valid:
            acc = valid[0]
            for term in valid[1:]:
                acc = nc.add(acc, term)
            parts.append(nc.scale(acc, 1.0 / len(valid)))
    if not parts:
        return nc.constant(0.0)
    return parts[0] if len(parts) == 1 else nc.add(parts[0], parts[1])


def loss_total(out: BatchOutput, params: FusionParams, labels: Sequence[int], lambda_cl: float,
               lambda_aux: float, tau_infonce: float = 0.07, tau_supcon: float = 0.1,
               use_infonce: bool = True, use_supcon: bool = True) -> tuple[Tensor, LossTerms]:
    """``cls + lambda_cl * cl + lambda_aux * aux`` with the per-term breakdown."""
    if lambda_cl < 0 or lambda_aux < 0:
        raise ValueError("loss weights must be non-negative")
    labels = np.asarray(labels, dtype=np.int64)
    cls = nc.cross_entropy(out.logits, labels)
    aux = nc.cross_entropy(out.aux_logits, labels)
    if lambda_cl > 0:
        cl = contrastive_term(out, params, labels, tau_infonce, tau_supcon, use_infonce, use_supcon)
    else:
        cl = nc.constant(0.0)
    total = nc.add(nc.add(cls, nc.scale(cl, lambda_cl)), nc.scale(aux, lambda_aux))
    terms = LossTerms(total.item(), cls.item(), cl.item(), aux.item())
    if not math.isfinite(terms.total):
        raise FloatingPointError(f"non-finite loss: {terms.as_dict()}")
    return total, terms
