"""Training objectives.

The pretraining loss reconstructs masked fields from the surviving ones:
for every masked position the model scores the true token against the
ground-truth tokens other batch instances carry in that field (cosine
logits, softmax over the sampled candidate set), and each term is
importance-weighted by the reciprocal of its mask probability. The
label field always uses its exhaustive two-way softmax. The fine-tune
loss is the plain click logloss through the label-masked CTR head; for
label-only masking the two coincide term by term, which
verify_label_equivalence checks numerically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corruption import CorruptedBatch, corrupt_batch, loss_positions
from .data import Sample
from .errors import DataError
from .model import Model, field_logits, full_vocab_logits, encode, label_logit_diff
from .schedule import NoiseSchedule


@dataclass
class PretrainLossConfig:
    max_negatives: int = 127  # cap on in-batch negatives per masked field
    weight_by_mask_prob: bool = True  # 1/p importance weight per masked term
    mask_prob_floor: float = 0.01  # weight clip keeping 1/p bounded
    label_mode: str = "diffuse"

    def validate(self) -> None:
        if self.max_negatives < 1:
            raise DataError("max_negatives must be >= 1")
        if not 0 < self.mask_prob_floor < 1:
            raise DataError("mask_prob_floor must lie in (0, 1)")


def _candidate_mask(clean_col: np.ndarray, vocab: int, max_negatives: int) -> np.ndarray:
    """Per-instance candidate set over the field vocabulary.

    Row i holds the union of the positive with the distinct tokens other
    instances carry in this field, minus any token equal to the positive
    (a contradictory negative), truncated to max_negatives distinct
    negatives in batch order. Keeping the candidates a set matters:
    duplicate-weighted denominators bias the learned softmax away from
    the clean conditional, which breaks reverse sampling.
    """
    B = clean_col.shape[0]
    totals = np.bincount(clean_col, minlength=vocab)
    distinct = int((totals > 0).sum())
    if distinct - 1 <= max_negatives:
        # a token is a valid negative for row i when some other instance has it
        mask = totals[None, :] > (np.arange(vocab)[None, :] == clean_col[:, None])
        mask[np.arange(B), clean_col] = True
        return mask
    mask = np.zeros((B, vocab), dtype=bool)
    for i in range(B):
        tok = clean_col[i]
        taken = 0
        for j in range(B):
            t = clean_col[j]
            if j == i or t == tok or mask[i, t]:
                continue
            mask[i, t] = True
            taken += 1
            if taken == max_negatives:
                break
        mask[i, tok] = True
    return mask


def masked_field_losses(
    model: Model, corrupted: CorruptedBatch, cfg: PretrainLossConfig
) -> tuple[Tensor, np.ndarray]:
    """Scalar pretraining loss and the detached (B, P) per-term matrix."""
    cfg.validate()
    B, P = corrupted.tokens.shape
    if B < 2:
        raise DataError("in-batch negatives need a batch of at least 2 instances")
    ctx_all = encode(model, corrupted.tokens)
    eligible = loss_positions(P, cfg.label_mode)
    weights = np.where(
        corrupted.masked & eligible[None, :],
        1.0 / np.maximum(corrupted.mask_probs, cfg.mask_prob_floor)
        if cfg.weight_by_mask_prob
        else 1.0,
        0.0,
    )

    total = None
    terms = np.zeros((B, P))
    for k in range(P):
        if not weights[:, k].any():
            continue
        f = model.schema[k]
        if k == model.label_position:
            mask = np.ones((B, f.vocab_size), dtype=bool)  # exhaustive two-way softmax
        else:
            mask = _candidate_mask(corrupted.clean_tokens[:, k], f.vocab_size, cfg.max_negatives)
        ctx = ad.take_position(ctx_all, k)
        logits = full_vocab_logits(model, k, ctx)
        gate = np.where(mask, 0.0, ad.LOG_ZERO)
        denom = ad.logsumexp(ad.add(logits, ad.const(gate)), axis=1)
        onehot = np.zeros((B, f.vocab_size))
        onehot[np.arange(B), corrupted.clean_tokens[:, k]] = 1.0
        positive = ad.tsum(ad.mul(logits, ad.const(onehot)), axis=1)
        ce = ad.sub(denom, positive)
        terms[:, k] = ce.data * weights[:, k]
        contrib = ad.tsum(ad.mul(ce, ad.const(weights[:, k])))
        total = contrib if total is None else ad.add(total, contrib)
    return ad.smul(total, 1.0 / B), terms


def pretrain_loss(
    model: Model,
    samples: list[Sample],
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    cfg: PretrainLossConfig | None = None,
    fixed_probs: np.ndarray | None = None,
) -> Tensor:
    """Corrupt a clean batch and score the masked-field reconstruction.

    One schedule draw per instance Monte-Carlo-estimates the integral
    over mask levels; fixed_probs switches to constant-rate masking.
    """
    cfg = cfg or PretrainLossConfig()
    if len(samples) < 2:
        raise DataError("pretrain_loss needs a batch of at least 2 instances")
    corrupted = corrupt_batch(
        samples, schedule, rng, model.mask_ids, label_mode=cfg.label_mode, fixed_probs=fixed_probs
    )
    loss, _ = masked_field_losses(model, corrupted, cfg)
    return loss


@dataclass
class ScoreEntropyTerm:
    field_index: int
    outer_weight: float  # the leading corruption-rate slope
    h3: float  # slope * survive / (1 - survive)
    q_true: float  # full-vocabulary softmax mass on the clean token
    cross_entropy: float  # -log q_true
    total: float  # -outer * h3 * log(h3 * q_true), the integrand as written


MAX_SCORE_ENTROPY_VOCAB = 64


def score_entropy_oracle(
    model: Model,
    sample: Sample,
    masked_fields: tuple[int, ...],
    rate_slopes: np.ndarray,
    cum_rates: np.ndarray,
) -> list[ScoreEntropyTerm]:
    """Exact single-point evaluation of the rate-weighted entropy integrand.

    Documentation-only oracle: training uses the mask-probability form.
    Needs both the instantaneous rate slope and the cumulative rate per
    field; full-vocabulary softmax keeps it exact.
    """
    for f in model.schema:
        if f.vocab_size > MAX_SCORE_ENTROPY_VOCAB:
            raise DataError(
                f"score_entropy_oracle limited to vocab <= {MAX_SCORE_ENTROPY_VOCAB}"
            )
    tokens = np.array([sample.tokens], dtype=np.int64)
    for k in masked_fields:
        tokens[0, k] = model.mask_ids[k]
    ctx_all = encode(model, tokens)
    out = []
    for k in masked_fields:
        slope, rate = float(rate_slopes[k]), float(cum_rates[k])
        survive = np.exp(-rate)
        h3 = slope * survive / (1.0 - survive)
        logits = full_vocab_logits(model, k, ad.take_position(ctx_all, k)).data[0]
        probs = np.exp(logits - logits.max())
        probs /= probs.sum()
        q = float(probs[sample.tokens[k]])
        out.append(
            ScoreEntropyTerm(
                field_index=k,
                outer_weight=slope,
                h3=h3,
                q_true=q,
                cross_entropy=-float(np.log(q)),
                total=-slope * h3 * float(np.log(h3 * q)),
            )
        )
    return out


def sft_loss(model: Model, samples: list[Sample]) -> Tensor:
    """Mean click logloss through the label-masked scoring head."""
    tokens = np.array([s.tokens for s in samples], dtype=np.int64)
    labels = tokens[:, -1]
    if np.any((labels != 0) & (labels != 1)):
        raise DataError("sft_loss: labels must be 0 or 1")
    diff = label_logit_diff(model, tokens)
    signed = ad.mul(diff, ad.const(2.0 * labels - 1.0))
    return ad.tmean(ad.softplus(ad.smul(signed, -1.0)))


def per_instance_sft_losses(model: Model, samples: list[Sample]) -> np.ndarray:
    tokens = np.array([s.tokens for s in samples], dtype=np.int64)
    labels = tokens[:, -1]
    diff = label_logit_diff(model, tokens)
    signed = ad.mul(diff, ad.const(2.0 * labels - 1.0))
    return ad.softplus(ad.smul(signed, -1.0)).data


def verify_label_equivalence(model: Model, samples: list[Sample]) -> float:
    """Max |label-only-masked pretraining term - fine-tune logloss term|.

    The pretraining side runs the two-way softmax route, the fine-tune
    side the sigmoid route; the two are algebraically identical.
    """
    tokens = np.array([s.tokens for s in samples], dtype=np.int64)
    lbl = model.label_position
    masked = tokens.copy()
    masked[:, lbl] = model.mask_ids[lbl]
    ctx = ad.take_position(encode(model, masked), lbl)
    logits = field_logits(model, lbl, ctx, np.array([0, 1]))
    log_probs = ad.log_softmax(logits, axis=1).data
    labels = tokens[:, lbl]
    softmax_route = -log_probs[np.arange(len(samples)), labels]
    sigmoid_route = per_instance_sft_losses(model, samples)
    return float(np.max(np.abs(softmax_route - sigmoid_route)))
