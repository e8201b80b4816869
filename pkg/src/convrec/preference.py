"""User preference modeling: pooled entity and word evidence fused by a gate.

The entity side pools representations of mentioned plus retrieved entities;
the word side pools word-graph representations of the conversation's content
words. A learned sigmoid gate mixes the two pooled vectors into the final
user representation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import RecExample
from .encoders import uniform_init
from .errors import ShapeError
from .optim import ParamStore
from .retrieval import RetrievalResult

GATE_ELEMENTWISE = "elementwise"
GATE_SCALAR = "scalar"


@dataclass
class AttentionParams:
    """Two pooling heads plus the fusion gate.

    ``w_gate`` maps the concatenated (2d,) evidence vector to d gate logits,
    or to a single logit in scalar mode.
    """

    dim: int
    w_entity: Tensor
    b_entity: Tensor
    w_word: Tensor
    b_word: Tensor
    w_gate: Tensor
    gate_mode: str = GATE_ELEMENTWISE


def init_attention_params(
    store: ParamStore,
    prefix: str,
    dim: int,
    rng: np.random.Generator,
    *,
    gate_mode: str = GATE_ELEMENTWISE,
) -> AttentionParams:
    if gate_mode not in (GATE_ELEMENTWISE, GATE_SCALAR):
        raise ValueError(f"unknown gate mode {gate_mode!r}")
    gate_rows = dim if gate_mode == GATE_ELEMENTWISE else 1
    return AttentionParams(
        dim=dim,
        w_entity=store.add(f"{prefix}.ent.w", uniform_init(rng, (dim, dim), dim)),
        b_entity=store.add(f"{prefix}.ent.b", uniform_init(rng, (dim,), dim)),
        w_word=store.add(f"{prefix}.word.w", uniform_init(rng, (dim, dim), dim)),
        b_word=store.add(f"{prefix}.word.b", uniform_init(rng, (dim,), dim)),
        w_gate=store.add(f"{prefix}.gate.w", uniform_init(rng, (gate_rows, 2 * dim), 2 * dim)),
        gate_mode=gate_mode,
    )


@dataclass
class UserContext:
    """Representation rows behind one example; None marks an empty source."""

    mentioned: Tensor | None
    retrieved: Tensor | None
    words: Tensor | None
    missing_words: int = 0


def gather_context(
    example: RecExample,
    item_matrix: Tensor,
    word_matrix: Tensor | None,
    retrieval: RetrievalResult | None,
    word_rows: Mapping[int, int] | None,
) -> UserContext:
    """Look up the representation rows the example's context points at.

    Context words absent from the word graph have no representation; they are
    skipped and counted in ``missing_words``.
    """
    mentioned = (
        ad.lookup(item_matrix, list(example.context_entities))
        if example.context_entities else None
    )
    retrieved = None
    if retrieval is not None and retrieval.entities:
        retrieved = ad.lookup(item_matrix, list(retrieval.entities))

    words = None
    missing = 0
    if word_matrix is not None and word_rows is not None:
        rows = []
        for word_id in example.context_words:
            row = word_rows.get(word_id)
            if row is None:
                missing += 1
            else:
                rows.append(row)
        if rows:
            words = ad.lookup(word_matrix, rows)
    else:
        missing = len(example.context_words)
    return UserContext(mentioned=mentioned, retrieved=retrieved, words=words,
                       missing_words=missing)


def attention_pool(rows: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Softmax-weighted combination of rows, scored by b . tanh(row @ w)."""
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise ShapeError(f"attention_pool: need at least one row, got shape {rows.shape}")
    scores = ad.matmul(ad.tanh(ad.matmul(rows, w)), b)
    alpha = ad.softmax(scores)
    return ad.weighted_sum(alpha, rows)


def gate_fuse(v_entity: Tensor, v_word: Tensor, params: AttentionParams) -> tuple[Tensor, Tensor]:
    """Convex mix gamma * v_entity + (1 - gamma) * v_word; returns (fused, gamma)."""
    cat = ad.concat([v_entity, v_word])
    logits = ad.matmul(params.w_gate, cat)
    if params.gate_mode == GATE_SCALAR:
        gamma = ad.sigmoid(ad.sum_all(logits))
        complement = ad.add_const(ad.scale(gamma, -1.0), 1.0)
        fused = ad.add(ad.mul_scalar(gamma, v_entity), ad.mul_scalar(complement, v_word))
    else:
        gamma = ad.sigmoid(logits)
        complement = ad.add_const(ad.scale(gamma, -1.0), 1.0)
        fused = ad.add(ad.mul(gamma, v_entity), ad.mul(complement, v_word))
    return fused, gamma


@dataclass
class UserRep:
    vector: Tensor
    gamma: Tensor
    cold_start: bool
    missing_words: int
    n_entity_rows: int
    n_word_rows: int


def build_user_representation(
    example: RecExample,
    item_matrix: Tensor,
    word_matrix: Tensor | None,
    retrieval: RetrievalResult | None,
    params: AttentionParams,
    word_rows: Mapping[int, int] | None,
    *,
    without_rt: bool = False,
    without_cn: bool = False,
) -> UserRep:
    """Full pipeline from context ids to the fused user vector.

    Empty sources contribute zero vectors; when every source is empty the
    result is the zero vector with ``cold_start`` set.
    """
    ctx = gather_context(
        example,
        item_matrix,
        None if without_cn else word_matrix,
        None if without_rt else retrieval,
        None if without_cn else word_rows,
    )
    entity_parts = [m for m in (ctx.mentioned, ctx.retrieved) if m is not None]
    n_entity_rows = sum(int(p.shape[0]) for p in entity_parts)
    if entity_parts:
        stacked = entity_parts[0] if len(entity_parts) == 1 else ad.concat(entity_parts)
        v_entity = attention_pool(stacked, params.w_entity, params.b_entity)
    else:
        v_entity = ad.constant(np.zeros(params.dim))

    n_word_rows = 0 if ctx.words is None else int(ctx.words.shape[0])
    if ctx.words is not None:
        v_word = attention_pool(ctx.words, params.w_word, params.b_word)
    else:
        v_word = ad.constant(np.zeros(params.dim))

    fused, gamma = gate_fuse(v_entity, v_word, params)
    return UserRep(
        vector=fused,
        gamma=gamma,
        cold_start=(n_entity_rows == 0 and n_word_rows == 0),
        missing_words=ctx.missing_words,
        n_entity_rows=n_entity_rows,
        n_word_rows=n_word_rows,
    )
