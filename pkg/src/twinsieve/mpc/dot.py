"""Batched Beaver dot products between a shared prompt and every shared document."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from twinsieve.errors import IngestError, ProtocolError
from twinsieve.mpc.field import (
    FieldParams,
    fe_add,
    fe_matvec,
    fe_mul,
    fe_sub,
    fe_sum,
    trunc_signed,
)
from twinsieve.mpc.shares import Share


@dataclass(frozen=True)
class DotCorrelation:
    """One party's share of the triples for one query.

    ``doc_mask`` is static per deployment; ``prompt_mask`` and ``product_mask``
    are fresh per query with ``product_mask[j, n] = prompt_mask[n] * doc_mask[j, n]``
    after reconstruction.
    """

    party: int
    prompt_mask: np.ndarray          # (m,)
    product_mask: np.ndarray | None  # (N, m)
    doc_mask: np.ndarray | None      # (N, m)

    @property
    def m(self) -> int:
        return self.prompt_mask.shape[0]


def open_prompt_masks(prompt: Share, corr: DotCorrelation, params: FieldParams) -> Share:
    """Contribution ``[p] - [r_a]``; the two contributions sum to the public differences."""
    if prompt.party != corr.party:
        raise ProtocolError(f"prompt share of party {prompt.party} met correlation of party {corr.party}")
    values = np.atleast_1d(np.asarray(prompt.value, dtype=np.uint64))
    if values.shape != corr.prompt_mask.shape:
        raise ProtocolError(f"prompt has {values.size} dimensions, correlation expects {corr.m}")
    return Share(prompt.party, fe_sub(values, corr.prompt_mask, params))


def doc_mask_contribution(doc_share: Share, doc_mask: Share, params: FieldParams) -> Share:
    if doc_share.party != doc_mask.party:
        raise IngestError("document share and mask share belong to different parties")
    if np.shape(doc_share.value) != np.shape(doc_mask.value):
        raise IngestError(
            f"document shares {np.shape(doc_share.value)} do not match masks {np.shape(doc_mask.value)}"
        )
    return Share(doc_share.party, fe_sub(doc_share.value, doc_mask.value, params))


def precompute_doc_masks(
    doc_shares: tuple[Share, Share],
    doc_masks: tuple[Share, Share],
    params: FieldParams,
) -> np.ndarray:
    """Open ``e = x - r_b`` for the whole database at ingestion time."""
    c0 = doc_mask_contribution(doc_shares[0], doc_masks[0], params)
    c1 = doc_mask_contribution(doc_shares[1], doc_masks[1], params)
    if {c0.party, c1.party} != {0, 1}:
        raise IngestError("document mask opening needs one contribution per party")
    return fe_add(c0.value, c1.value, params)


def dot_finish(
    prompt_diffs: np.ndarray,
    doc_diffs: np.ndarray,
    corr: DotCorrelation,
    params: FieldParams,
    truncate_bits: int = 0,
) -> Share:
    """Shares of every distance ``sum_n p_n * x_{j,n}``.

    With ``truncate_bits`` each product share is truncated locally before the
    sum; otherwise the sum is exact at the combined prompt and document scale.
    """
    if corr.product_mask is None or corr.doc_mask is None:
        raise ProtocolError("dot product correlation is incomplete")
    d = np.asarray(prompt_diffs, dtype=np.uint64)
    e = np.asarray(doc_diffs, dtype=np.uint64)
    if e.ndim != 2 or e.shape[1] != d.shape[0]:
        raise ProtocolError(f"document differences {e.shape} do not match {d.shape[0]} dimensions")
    if corr.product_mask.shape != e.shape or corr.doc_mask.shape != e.shape:
        raise ProtocolError("correlation does not cover the document matrix")

    if truncate_bits:
        products = fe_add(
            fe_add(corr.product_mask, fe_mul(e, corr.prompt_mask, params), params),
            fe_mul(corr.doc_mask, d, params),
            params,
        )
        if corr.party == 1:
            products = fe_add(products, fe_mul(e, d, params), params)
        return Share(corr.party, fe_sum(trunc_signed(products, params, truncate_bits), params, axis=1))

    total = fe_add(
        fe_sum(corr.product_mask, params, axis=1),
        fe_add(fe_matvec(e, corr.prompt_mask, params), fe_matvec(corr.doc_mask, d, params), params),
        params,
    )
    if corr.party == 1:
        total = fe_add(total, fe_matvec(e, d, params), params)
    return Share(corr.party, total)
