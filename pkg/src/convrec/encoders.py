"""Graph encoders: relational message passing, word-graph convolution, and
the popularity augmentation that adds interaction-side item encodings onto
knowledge-side ones.

All weight matrices act on row vectors (``rows @ W``), matching the
right-multiplied convolution form used throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError
from .graphs import InteractionGraph, NormalizedAdjacency, TypedGraph
from .optim import ParamStore

NORM_CONSTANT = "constant"
NORM_IN_DEGREE = "in_degree"


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], dim: int) -> np.ndarray:
    """Uniform values in [-1/sqrt(dim), +1/sqrt(dim)]."""
    bound = 1.0 / np.sqrt(dim)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class RgcnParams:
    """Embedding table plus per-layer relation and self transforms."""

    dim: int
    relations: tuple[str, ...]
    embedding: Tensor
    rel_weights: list[dict[str, Tensor]]
    self_weights: list[Tensor]
    z: float = 1.0
    normalization: str = NORM_CONSTANT

    @property
    def n_layers(self) -> int:
        return len(self.self_weights)


def init_rgcn_params(
    store: ParamStore,
    prefix: str,
    n_nodes: int,
    relations: tuple[str, ...],
    dim: int,
    rng: np.random.Generator,
    *,
    layers: int = 2,
    z: float = 1.0,
    normalization: str = NORM_CONSTANT,
) -> RgcnParams:
    if normalization not in (NORM_CONSTANT, NORM_IN_DEGREE):
        raise ConfigurationError(f"unknown normalization mode {normalization!r}")
    if normalization == NORM_CONSTANT and z <= 0:
        raise ConfigurationError(f"normalization constant must be positive, got {z}")
    embedding = store.add(f"{prefix}.emb", uniform_init(rng, (n_nodes, dim), dim))
    rel_weights: list[dict[str, Tensor]] = []
    self_weights: list[Tensor] = []
    for layer in range(layers):
        per_rel = {
            rel: store.add(f"{prefix}.l{layer}.rel.{rel}", uniform_init(rng, (dim, dim), dim))
            for rel in relations
        }
        rel_weights.append(per_rel)
        self_weights.append(store.add(f"{prefix}.l{layer}.self", uniform_init(rng, (dim, dim), dim)))
    return RgcnParams(dim=dim, relations=tuple(relations), embedding=embedding,
                      rel_weights=rel_weights, self_weights=self_weights,
                      z=z, normalization=normalization)


def _relation_norm(graph: TypedGraph, rel: int, params: RgcnParams) -> np.ndarray | None:
    if params.normalization == NORM_IN_DEGREE:
        deg = graph.degree(rel)
        return np.where(deg > 0, 1.0 / np.maximum(deg, 1.0), 0.0)
    if params.z != 1.0:
        return np.full(graph.n_nodes, 1.0 / params.z)
    return None


def rgcn_forward(graph: TypedGraph, params: RgcnParams) -> Tensor:
    """Two-layer relational convolution over all nodes at once.

    Each layer computes ReLU(sum_r W_r-transformed neighbor sums + self
    transform) reading only the previous layer, so bipartite graphs update
    both node sides synchronously.
    """
    missing = [r for r in graph.relations if r not in params.rel_weights[0]]
    if missing:
        raise ConfigurationError(f"no weights for relations {missing}")
    if graph.n_nodes != params.embedding.shape[0]:
        raise ConfigurationError(
            f"embedding table has {params.embedding.shape[0]} rows, graph has {graph.n_nodes} nodes"
        )
    h = params.embedding
    for layer in range(params.n_layers):
        total = ad.matmul(h, params.self_weights[layer])
        for rel_idx, rel_name in enumerate(graph.relations):
            src, dst = graph.message_arrays(rel_idx)
            if src.size == 0:
                continue
            norm = _relation_norm(graph, rel_idx, params)
            agg = ad.neighbor_sum(h, src, dst, graph.n_nodes, norm)
            total = ad.add(total, ad.matmul(agg, params.rel_weights[layer][rel_name]))
        h = ad.relu(total)
    return h


@dataclass
class GcnParams:
    dim: int
    embedding: Tensor
    weights: list[Tensor]


def init_gcn_params(
    store: ParamStore,
    prefix: str,
    n_nodes: int,
    dim: int,
    rng: np.random.Generator,
    *,
    layers: int = 2,
) -> GcnParams:
    embedding = store.add(f"{prefix}.emb", uniform_init(rng, (n_nodes, dim), dim))
    weights = [
        store.add(f"{prefix}.l{layer}.w", uniform_init(rng, (dim, dim), dim))
        for layer in range(layers)
    ]
    return GcnParams(dim=dim, embedding=embedding, weights=weights)


def gcn_forward(adjacency: NormalizedAdjacency, params: GcnParams) -> Tensor:
    """Layered ReLU(A_hat @ V @ W) over the precomputed normalized adjacency."""
    h = params.embedding
    for w in params.weights:
        h = ad.relu(ad.matmul(ad.spmm(adjacency.matrix, h), w))
    return h


def encode_items(
    kg: TypedGraph,
    interaction: InteractionGraph | None,
    kg_params: RgcnParams,
    ig_params: RgcnParams | None,
    *,
    without_ig: bool = False,
    without_db: bool = False,
) -> Tensor:
    """Entity representation matrix with popularity augmentation.

    Row e holds the KG encoding of entity e plus, for items the interaction
    graph knows, the interaction-side encoding (elementwise). Entities the
    interaction graph never saw get the KG encoding alone. ``without_db``
    swaps the KG encoding for the raw embedding table; ``without_ig`` drops
    the interaction term.
    """
    k = kg_params.embedding if without_db else rgcn_forward(kg, kg_params)
    if without_ig or interaction is None or interaction.n_items == 0:
        return k
    if ig_params is None:
        raise ConfigurationError("interaction graph given but no interaction parameters")
    if ig_params.dim != kg_params.dim:
        raise ConfigurationError(
            f"encoder dims differ: kg={kg_params.dim}, interaction={ig_params.dim}"
        )
    ig_out = rgcn_forward(interaction.as_typed(), ig_params)
    item_rows = ad.lookup(ig_out, list(range(interaction.n_items)))
    scattered = ad.scatter_rows(item_rows, interaction.items, kg.n_nodes)
    return ad.add(k, scattered)
