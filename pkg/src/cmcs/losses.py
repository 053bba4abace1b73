"""Regression losses, cross-model adversarial loss and the cross-stream
pseudo-label pipeline (similarity -> sharpen -> AND -> vote -> loss)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import DegenerateVector, NormalizationError, ParameterError

EPS = 1e-6


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    lambda_: float = 1.0
    gamma: float = 10.0

    def __post_init__(self):
        for name in ("alpha", "beta", "lambda_", "gamma"):
            if not math.isfinite(getattr(self, name)):
                raise ParameterError(f"loss weight {name} must be finite")


@dataclass
class SimilarityBundle:
    """Per-stream pair of N x N similarity matrices (S, S')."""

    matrices: dict[str, tuple[torch.Tensor, torch.Tensor]]

    def __iter__(self):
        for s, sp in self.matrices.values():
            yield s
            yield sp

    def __len__(self):
        return 2 * len(self.matrices)

    @property
    def streams(self):
        return list(self.matrices)


@dataclass
class PseudoLabelMatrix:
    matrix: torch.Tensor
    k_used: int

    @property
    def density(self):
        return float(self.matrix.float().mean())


def normalized_mse(a, b):
    """2 - 2 cos(a, b), computed along the last axis."""
    na = a.norm(dim=-1)
    nb = b.norm(dim=-1)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise DegenerateVector("normalized_mse got a zero-norm vector")
    return 2.0 - 2.0 * (a * b).sum(dim=-1) / (na * nb)


def byol_loss(p, pp, z_t, zp_t):
    """Symmetrized regression of each view's prediction onto the other view's target."""
    z_t, zp_t = z_t.detach(), zp_t.detach()
    return (normalized_mse(p, zp_t) + normalized_mse(pp, z_t)).mean()


def cmal_terms(p, pp, z_t, zp_t):
    """(attract, repel): prediction agreement across views, and distance to own-view targets."""
    z_t, zp_t = z_t.detach(), zp_t.detach()
    attract = normalized_mse(p, pp).mean()
    repel = 0.5 * (normalized_mse(p, z_t) + normalized_mse(pp, zp_t)).mean()
    return attract, repel


def cmal_loss(p, pp, z_t, zp_t, w=None):
    w = w or LossWeights()
    attract, repel = cmal_terms(p, pp, z_t, zp_t)
    return w.alpha * attract - w.beta * repel


def l2_normalize(x):
    return torch.nn.functional.normalize(x, dim=-1)


def batch_similarity(Q, Kp, tol=1e-4):
    for name, m in (("Q", Q), ("K", Kp)):
        norms = m.detach().norm(dim=-1)
        if not bool(torch.all((norms - 1).abs() <= tol)):
            raise NormalizationError(f"rows of {name} are not L2-normalized")
    return Q @ Kp.T


def sharpen(S, k):
    """Binary matrix: the diagonal plus the k largest off-diagonal entries per row.

    Ties go to the lower column index.
    """
    S = S.detach()
    N = S.shape[0]
    if S.dim() != 2 or S.shape[1] != N:
        raise ParameterError(f"expected a square matrix, got {tuple(S.shape)}")
    if not 0 <= k <= N - 1:
        raise ParameterError(f"k={k} outside [0, {N - 1}]")
    out = torch.eye(N, dtype=torch.bool, device=S.device)
    if k == 0:
        return out
    masked = S.clone().float() if S.dtype not in (torch.float32, torch.float64) else S.clone()
    masked.fill_diagonal_(-math.inf)
    order = torch.sort(masked, dim=1, descending=True, stable=True).indices[:, :k]
    out.scatter_(1, order, True)
    return out


def _as_bool(m):
    m = m.matrix if isinstance(m, PseudoLabelMatrix) else m
    if m.dtype == torch.bool:
        return m
    if not bool(((m == 0) | (m == 1)).all()):
        raise ParameterError("pseudo-label inputs must be binary")
    return m.bool()


def intra_stream_pseudo(S, Sp, k):
    if S.shape != Sp.shape:
        raise ParameterError("similarity matrices differ in shape")
    return PseudoLabelMatrix(sharpen(S, k) & sharpen(Sp, k), k)


def inter_stream_vote(A, B, C, strict=False):
    """Elementwise majority (>= 2 of 3); ``strict`` requires all three."""
    a, b, c = _as_bool(A), _as_bool(B), _as_bool(C)
    if not (a.shape == b.shape == c.shape):
        raise ParameterError("vote inputs differ in shape")
    votes = a.int() + b.int() + c.int()
    k = A.k_used if isinstance(A, PseudoLabelMatrix) else -1
    return PseudoLabelMatrix(votes >= (3 if strict else 2), k)


def similarity_to_prob(S, eps=EPS):
    return ((S + 1.0) / 2.0).clamp(eps, 1.0 - eps)


def cscl_loss(label, bundle, eps=EPS):
    """Binary cross-entropy between every similarity matrix and the pseudo-label.

    Similarities are mapped to probabilities with (s + 1) / 2 and clamped to
    [eps, 1 - eps]; the result is half the mean over all elements and matrices.
    """
    target = _as_bool(label).detach()
    mats = list(bundle)
    target = target.to(mats[0].dtype)
    total = 0.0
    for S in mats:
        prob = similarity_to_prob(S, eps)
        total = total + (target * prob.log() + (1 - target) * (1 - prob).log()).mean()
    return -0.5 * total / len(mats)


def stream_similarities(p, pp, z_t, zp_t):
    """(S, S') of one stream from online predictions and target projections."""
    Q, Qp = l2_normalize(p), l2_normalize(pp)
    K, Kp = l2_normalize(z_t.detach()), l2_normalize(zp_t.detach())
    return batch_similarity(Q, Kp), batch_similarity(Qp, K)


@torch.no_grad()
def ensemble_pseudo_label(bundle, k, strict=False):
    """Per-stream AND-fused labels, then the cross-stream vote when three streams exist."""
    per_stream = {name: intra_stream_pseudo(s, sp, k) for name, (s, sp) in bundle.matrices.items()}
    if len(per_stream) == 3:
        return inter_stream_vote(*per_stream.values(), strict=strict), per_stream
    return None, per_stream
