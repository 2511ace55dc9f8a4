"""CTC, label-smoothed cross-entropy, and the four-term joint loss.

The total loss is the unweighted sum of two CTC terms (one per encoder)
and two CE terms (one per decoder); optional per-term weights default
to 1 for ablations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from asrkit import autodiff as ad
from asrkit.autodiff import Tensor
from asrkit.errors import AsrkitError, DataError

NEG_INF = -np.inf


class CtcLengthError(AsrkitError):
    """Label sequence cannot fit the encoder output; skip this utterance."""


@dataclass
class LossBundle:
    """Per-utterance loss terms; ``l_total`` is exactly their weighted sum."""

    l_ctc_uni: float
    l_ctc_bi: float
    l_ce_mocha: float
    l_ce_bfa: float
    l_total: float
    total: Tensor | None = None

    def as_dict(self) -> dict:
        return {
            "l_ctc_uni": self.l_ctc_uni,
            "l_ctc_bi": self.l_ctc_bi,
            "l_ce_mocha": self.l_ce_mocha,
            "l_ce_bfa": self.l_ce_bfa,
            "l_total": self.l_total,
        }


def ctc_min_frames(labels: list[int]) -> int:
    """Frames needed to emit `labels`: length plus blanks between repeats."""
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def ctc_loss(logits: Tensor, labels: list[int], blank: int | None = None) -> Tensor:
    """Negative log-probability of all blank-augmented alignments.

    `logits` is (T, V+1) with the blank in the last column unless `blank`
    says otherwise. Computed by the forward dynamic program in log space;
    the gradient comes from the forward-backward posteriors.
    """
    t_len, width = logits.data.shape
    if blank is None:
        blank = width - 1
    for lab in labels:
        if not 0 <= lab < width or lab == blank:
            raise DataError(f"ctc label id {lab} out of range for {width}-wide logits")
    needed = ctc_min_frames(labels)
    if t_len < needed:
        raise CtcLengthError(
            f"{t_len} frames cannot emit {len(labels)} labels (need {needed})"
        )
    logp = ad.log_softmax(logits, axis=-1)
    return _ctc_forward_backward(logp, labels, blank)


def _ctc_forward_backward(logp: Tensor, labels: list[int], blank: int) -> Tensor:
    t_len = logp.data.shape[0]
    ext = np.empty(2 * len(labels) + 1, dtype=np.int64)
    ext[0::2] = blank
    ext[1::2] = labels
    s_len = ext.shape[0]
    lp = logp.data
    dtype = lp.dtype

    # skip transition s-2 -> s allowed when ext[s] is a label differing from ext[s-2]
    allow_skip = np.zeros(s_len, dtype=bool)
    if s_len > 2:
        allow_skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])

    la = np.full((t_len, s_len), NEG_INF, dtype=dtype)
    la[0, 0] = lp[0, blank]
    if s_len > 1:
        la[0, 1] = lp[0, ext[1]]
    for t in range(1, t_len):
        prev = la[t - 1]
        cur = prev.copy()
        cur[1:] = np.logaddexp(cur[1:], prev[:-1])
        if s_len > 2:
            cur[2:][allow_skip[2:]] = np.logaddexp(
                cur[2:][allow_skip[2:]], prev[:-2][allow_skip[2:]]
            )
        la[t] = cur + lp[t, ext]
    total = la[t_len - 1, s_len - 1]
    if s_len > 1:
        total = np.logaddexp(total, la[t_len - 1, s_len - 2])
    loss_value = np.asarray(-total, dtype=dtype)

    def bwd(g):
        lb = np.full((t_len, s_len), NEG_INF, dtype=dtype)
        lb[t_len - 1, s_len - 1] = 0.0
        if s_len > 1:
            lb[t_len - 1, s_len - 2] = 0.0
        for t in range(t_len - 2, -1, -1):
            nxt = lb[t + 1] + lp[t + 1, ext]
            cur = nxt.copy()
            cur[:-1] = np.logaddexp(cur[:-1], nxt[1:])
            if s_len > 2:
                # transition s -> s+2 allowed when the landing state allows skip
                src = allow_skip[2:]
                cur[:-2][src] = np.logaddexp(cur[:-2][src], nxt[2:][src])
            lb[t] = cur
        post = np.exp(la + lb - total)
        dlp = np.zeros_like(lp)
        for s in range(s_len):
            dlp[:, ext[s]] -= post[:, s]
        return ((logp, dlp * g),)

    return ad._make(loss_value, (logp,), bwd)


def ce_label_smoothed(logits: Tensor, labels: list[int], eps: float = 0.1) -> Tensor:
    """Cross-entropy against (1-eps) on the target, eps/(V-1) elsewhere.

    Mean over positions. `logits` is (L, V); `labels` has length L.
    """
    l_len, v = logits.data.shape
    if len(labels) != l_len:
        raise DataError(f"{len(labels)} labels for {l_len} logit rows")
    for lab in labels:
        if not 0 <= lab < v:
            raise DataError(f"label id {lab} out of range for vocabulary {v}")
    dtype = logits.data.dtype
    q = np.full((l_len, v), eps / (v - 1), dtype=dtype)
    q[np.arange(l_len), labels] = dtype.type(1.0 - eps)
    lp = ad.log_softmax(logits, axis=-1)
    return ad.scale(ad.sum_all(ad.mul(ad.constant(q), lp)), -1.0 / l_len)


def joint_loss(
    outputs: dict,
    labels: list[int],
    eos_id: int,
    label_smoothing: float = 0.1,
    weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0),
    blank: int | None = None,
) -> LossBundle:
    """Four-term training loss over the outputs of a joint forward pass.

    CE targets are the labels followed by eos (matching the teacher-forced
    logit rows). CTC length violations propagate as ``CtcLengthError`` so
    the caller can skip the utterance.
    """
    ce_targets = list(labels) + [eos_id]
    terms = [
        ctc_loss(outputs["ctc_logits_uni"], labels, blank=blank),
        ctc_loss(outputs["ctc_logits_bi"], labels, blank=blank),
        ce_label_smoothed(outputs["ce_logits_mocha"], ce_targets, eps=label_smoothing),
        ce_label_smoothed(outputs["ce_logits_bfa"], ce_targets, eps=label_smoothing),
    ]
    weighted = [t if w == 1.0 else ad.scale(t, w) for t, w in zip(terms, weights)]
    total = weighted[0]
    for term in weighted[1:]:
        total = ad.add(total, term)
    return LossBundle(
        l_ctc_uni=float(terms[0].data),
        l_ctc_bi=float(terms[1].data),
        l_ce_mocha=float(terms[2].data),
        l_ce_bfa=float(terms[3].data),
        l_total=float(total.data),
        total=total,
    )
