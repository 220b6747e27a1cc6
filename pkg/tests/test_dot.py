"""Tests for the batched secure dot product."""

import numpy as np
import pytest

from twinsieve.errors import IngestError, ProtocolError
from twinsieve.harness.oracle import fixed_point_distances
from twinsieve.harness.synth import synth_dataset
from twinsieve.mpc.dot import DotCorrelation, dot_finish, open_prompt_masks, precompute_doc_masks
from twinsieve.mpc.field import FieldParams, centered, decode_fixed, encode_fixed, fe_add, fe_mul
from twinsieve.mpc.rng import SecureRandom
from twinsieve.mpc.shares import Share, reconstruct, share

from .conftest import CHI_SQUARE_15_LIMIT, chi_square


def correlations(N, m, params, rng):
    """Both parties' triple shares for one query, dealt in the clear."""
    prompt_mask = rng.field(params.p, m)
    doc_mask = rng.field(params.p, (N, m))
    product = fe_mul(doc_mask, prompt_mask, params)
    pm = share(prompt_mask, params, rng)
    dm = share(doc_mask, params, rng)
    pr = share(product, params, rng)
    return tuple(DotCorrelation(party, pm[party].value, pr[party].value, dm[party].value) for party in (0, 1))


def secure_distances(embeddings, prompt, params, rng, truncate_bits=0):
    N, m = embeddings.shape
    corr = correlations(N, m, params, rng)
    docs = share(encode_fixed(embeddings, params, bits=params.f_doc), params, rng)
    query = share(encode_fixed(prompt, params), params, rng)
    doc_masks = (Share(0, corr[0].doc_mask), Share(1, corr[1].doc_mask))
    doc_diffs = precompute_doc_masks(docs, doc_masks, params)
    opened = [open_prompt_masks(query[party], corr[party], params) for party in (0, 1)]
    prompt_diffs = fe_add(opened[0].value, opened[1].value, params)
    shares = [dot_finish(prompt_diffs, doc_diffs, corr[party], params, truncate_bits) for party in (0, 1)]
    return reconstruct(shares[0], shares[1], params)


def test_exact_mode_matches_oracle(field, rng):
    """Untruncated distances equal the fixed-point oracle exactly."""
    data = synth_dataset(64, 64, seed=5)
    d = secure_distances(data.embeddings, data.prompt, field, rng)
    assert centered(d, field).tolist() == [int(v) for v in fixed_point_distances(data.embeddings, data.prompt, field)]


def test_decoded_error_bound(field, rng):
    """Every decoded distance is within (m+1) * 2^-32 of the float dot product."""
    data = synth_dataset(64, 64, seed=6)
    d = secure_distances(data.embeddings, data.prompt, field, rng)
    decoded = decode_fixed(d, field, bits=field.f + field.f_doc)
    exact = data.embeddings @ data.prompt
    assert np.all(np.abs(decoded - exact) <= 65 * 2.0**-32)


def test_ranking_preserved_with_gaps(field, rng):
    """Distances separated by more than the error bound keep their order."""
    data = synth_dataset(64, 64, seed=8, layout="uniform")
    d = centered(secure_distances(data.embeddings, data.prompt, field, rng), field)
    exact = data.embeddings @ data.prompt
    assert np.array_equal(np.argsort(-d, kind="stable"), np.argsort(-exact, kind="stable"))


def test_truncated_mode(rng):
    """Per-product truncation stays within one unit per product of the exact value."""
    params = FieldParams(f=20, f_doc=20)
    data = synth_dataset(32, 16, seed=9)
    d = secure_distances(data.embeddings, data.prompt, params, rng, truncate_bits=20)
    got = centered(d, params)
    expected = fixed_point_distances(data.embeddings, data.prompt, params, truncate_bits=20)
    assert np.all(np.abs(got.astype(np.int64) - expected.astype(np.int64)) <= 16)


def test_shape_mismatch(field, rng):
    """Mismatched prompt or document shapes are rejected."""
    corr = correlations(4, 3, field, rng)
    with pytest.raises(ProtocolError):
        open_prompt_masks(Share(0, rng.field(field.p, 5)), corr[0], field)
    with pytest.raises(ProtocolError):
        open_prompt_masks(Share(1, rng.field(field.p, 3)), corr[0], field)
    with pytest.raises(ProtocolError):
        dot_finish(rng.field(field.p, 3), rng.field(field.p, (5, 3)), corr[0], field)
    with pytest.raises(IngestError):
        precompute_doc_masks(
            (Share(0, rng.field(field.p, (4, 3))), Share(1, rng.field(field.p, (4, 3)))),
            (Share(0, rng.field(field.p, (4, 2))), Share(1, rng.field(field.p, (4, 2)))),
            field,
        )


def test_opened_prompt_differences_are_uniform(field):
    """The public differences for a fixed prompt are uniform over the field."""
    rng = SecureRandom("prompt-diffs")
    m = 4096
    corr = correlations(1, m, field, rng)
    query = share(encode_fixed(np.full(m, 0.25), field), field, rng)
    opened = [open_prompt_masks(query[party], corr[party], field) for party in (0, 1)]
    assert chi_square(fe_add(opened[0].value, opened[1].value, field), field.p) < CHI_SQUARE_15_LIMIT
