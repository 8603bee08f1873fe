"""Cross-entropy, information-maximisation and zero-shot KL terms.

All terms operate on posterior probability tensors and return scalar
tensors that stay on the tape.  Per-row log-probabilities come from a stable
log-softmax when the logits are at hand (a :class:`Posterior`, or the
``log_probs`` argument); otherwise, and always for the marginal entropy,
probabilities pass through ``autodiff.log``, which raises inputs below 1e-12
to that floor.  The floor has zero gradient, so a support sample whose
true-class probability underflows it would stop receiving a CE signal.

Conventions:

* cross-entropy is averaged over the support rows;
* conditional entropy is averaged over the query rows (the per-query sum
  divided by ``|Q|``) so it lives on the same ``[0, ln K]`` scale as the
  marginal entropy;
* :func:`kl_text` sums the per-query divergences; inside :func:`limo_loss`
  the sum is divided by ``|Q|`` by default (``kl_reduction="mean"``) so the
  anchor does not outweigh the other terms on large query sets.  Pass
  ``kl_reduction="sum"`` for the unnormalised form, where the effective
  strength of ``lambda_text`` grows with the query set.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DomainError, EpisodeError, LabelError

UNIT_TOL = 1e-6


@dataclass(frozen=True)
class LossWeights:
    lambda_ent: float = 10.0
    lambda_cond: float = 1.0
    lambda_text: float = 0.1

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v >= 0:
                raise DomainError(f"{k} must be nonnegative, got {v}")


@dataclass
class Posterior:
    probs: Tensor
    source: str = "live"  # or "zero_shot_snapshot"
    log_probs: Tensor | None = None

    def argmax(self) -> np.ndarray:
        # np.argmax resolves ties toward the lowest class index
        return np.argmax(self.probs.data, axis=1)


@dataclass
class LossReport:
    ce: float
    cond_entropy: float
    marg_entropy: float
    kl_text: float
    total: float
    weights: LossWeights = field(default_factory=LossWeights)
    tau: float = 0.01

    def recomposed(self) -> float:
        w = self.weights
        return (self.ce - (w.lambda_ent * self.marg_entropy - w.lambda_cond * self.cond_entropy)
                + w.lambda_text * self.kl_text)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["weights"] = asdict(self.weights)
        return out


def _probs(p) -> Tensor:
    return p.probs if isinstance(p, Posterior) else p


def _log_probs(post, p: Tensor, log_probs: Tensor | None) -> Tensor:
    if log_probs is None and isinstance(post, Posterior):
        log_probs = post.log_probs
    if log_probs is None:
        return ad.log(p)
    if log_probs.shape != p.shape:
        raise ContractError(f"log_probs {log_probs.shape} do not match posterior {p.shape}")
    return log_probs


def logits(image_emb: Tensor, class_emb: Tensor) -> Tensor:
    """Cosine-similarity logits ``f_i . t_k`` between unit-norm rows."""
    for name, t in (("image", image_emb), ("class", class_emb)):
        dev = np.abs(np.sqrt((t.data ** 2).sum(axis=1)) - 1.0)
        if dev.size and dev.max() > UNIT_TOL:
            raise ContractError(
                f"{name} embeddings must be unit rows; row {int(dev.argmax())} deviates by {dev.max():.3g}")
    return ad.matmul(image_emb, ad.transpose(class_emb))


def posterior(logit: Tensor, tau: float, source: str = "live") -> Posterior:
    if not tau > 0:
        raise DomainError(f"temperature must be positive, got {tau}")
    return Posterior(ad.softmax_rows(logit, tau), source, ad.log_softmax_rows(logit, tau))


def cross_entropy(post, labels, log_probs: Tensor | None = None) -> Tensor:
    """Mean negative log-likelihood of one-hot ``labels`` (|S| x K)."""
    p = _probs(post)
    z = np.asarray(labels, dtype=np.float64)
    if z.shape != p.shape:
        raise LabelError(f"labels {z.shape} do not match posterior {p.shape}")
    if not (np.isin(z, (0.0, 1.0)).all() and (z.sum(axis=1) == 1).all()):
        raise LabelError("every label row must be one-hot")
    if p.shape[0] == 0:
        raise ContractError("cross-entropy over an empty support set")
    return ad.scale(ad.sum(ad.mul(Tensor(z), _log_probs(post, p, log_probs))), -1.0 / p.shape[0])


def _row_entropy_sum(p: Tensor, log_p: Tensor) -> Tensor:
    return ad.neg(ad.sum(ad.mul(p, log_p)))


def conditional_entropy(post, log_probs: Tensor | None = None) -> Tensor:
    p = _probs(post)
    if p.shape[0] == 0:
        raise ContractError("conditional entropy over an empty query set")
    return ad.scale(_row_entropy_sum(p, _log_probs(post, p, log_probs)), 1.0 / p.shape[0])


def marginal_entropy(post) -> Tensor:
    p = _probs(post)
    if p.shape[0] == 0:
        raise ContractError("marginal entropy over an empty query set")
    p_bar = ad.mean(p, axis=0)
    return _row_entropy_sum(p_bar, ad.log(p_bar))


def kl_text(post, zero_shot, lambda_text: float = 1.0, log_probs: Tensor | None = None) -> Tensor:
    """``lambda_text * sum_i KL(p_i || y_i)``; the snapshot is a constant."""
    p = _probs(post)
    y = zero_shot.probs.data if isinstance(zero_shot, Posterior) else np.asarray(
        zero_shot.data if isinstance(zero_shot, Tensor) else zero_shot, dtype=np.float64)
    if y.shape != p.shape:
        raise ContractError(f"snapshot {y.shape} does not match posterior {p.shape}")
    if lambda_text < 0:
        raise DomainError("lambda_text must be nonnegative")
    log_y = Tensor(np.log(np.maximum(y, ad.LOG_FLOOR)))
    kl = ad.sum(ad.mul(p, ad.sub(_log_probs(post, p, log_probs), log_y)))
    return ad.scale(kl, lambda_text)


def limo_loss(image_emb: Tensor, class_emb: Tensor, support_rows, support_onehot,
              query_rows, zero_shot, weights: LossWeights = LossWeights(),
              tau: float = 0.01, diagnostic: bool = False,
              kl_reduction: str = "mean") -> tuple[Tensor, LossReport]:
    """Full objective over the rows of ``image_emb`` named by the two index sets.

    ``zero_shot`` holds the snapshot posterior for the query rows (|Q| x K).
    An empty support set is only accepted with ``diagnostic=True``; the CE
    term is then zero.  The KL term is skipped (reported as 0) when
    ``weights.lambda_text == 0``; ``kl_reduction`` is ``"mean"`` or ``"sum"``
    over the query rows.
    """
    if kl_reduction not in ("mean", "sum"):
        raise ContractError(f"kl_reduction must be 'mean' or 'sum', got {kl_reduction!r}")
    s_rows = np.asarray(support_rows, dtype=np.int64)
    q_rows = np.asarray(query_rows, dtype=np.int64)
    if np.intersect1d(s_rows, q_rows).size:
        raise EpisodeError("support and query rows overlap")
    if s_rows.size == 0 and not diagnostic:
        raise EpisodeError("empty support set outside diagnostic mode")

    post = posterior(logits(image_emb, class_emb), tau)
    p_all, lp_all = post.probs, post.log_probs
    p_q = ad.take(p_all, q_rows)
    lp_q = ad.take(lp_all, q_rows)

    if s_rows.size:
        ce = cross_entropy(ad.take(p_all, s_rows), support_onehot, ad.take(lp_all, s_rows))
    else:
        ce = Tensor(0.0)
    h_cond = conditional_entropy(p_q, lp_q)
    h_marg = marginal_entropy(p_q)
    if weights.lambda_text > 0:
        kl = kl_text(p_q, zero_shot, 1.0, lp_q)
        if kl_reduction == "mean":
            kl = ad.scale(kl, 1.0 / p_q.shape[0])
    else:
        kl = Tensor(0.0)

    total = ad.add(ce, ad.scale(h_marg, -weights.lambda_ent))
    total = ad.add(total, ad.scale(h_cond, weights.lambda_cond))
    total = ad.add(total, ad.scale(kl, weights.lambda_text))
    report = LossReport(ce=ce.item(), cond_entropy=h_cond.item(), marg_entropy=h_marg.item(),
                        kl_text=kl.item(), total=total.item(), weights=weights, tau=tau)
    return total, report
