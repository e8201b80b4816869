"""Top-k recommendation: scoring, loss, metrics, training, and ablations."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import (
    Conversation,
    EntityVocab,
    RecExample,
    Split,
    Vocab,
    derive_examples,
    split_view,
)
from .encoders import (
    NORM_CONSTANT,
    NORM_IN_DEGREE,
    GcnParams,
    RgcnParams,
    encode_items,
    gcn_forward,
    init_gcn_params,
    init_rgcn_params,
)
from .errors import ConfigurationError, NumericError, ValidationError
from .graphs import (
    InteractionGraph,
    TypedGraph,
    WordGraph,
    build_interaction_graph,
)
from .optim import AdamConfig, AdamState, ParamStore, adam_step
from .preference import (
    GATE_ELEMENTWISE,
    GATE_SCALAR,
    AttentionParams,
    build_user_representation,
    init_attention_params,
)
from .retrieval import Bm25Index, RetrievalResult, build_index, retrieve

DEFAULT_KS = (1, 10, 50)

# Finite stand-in for a -inf logit: exp(x - max) underflows to exactly 0,
# so masked items get probability 0 while gradients stay finite.
MASK_LOGIT = -1e9


@dataclass
class TrainConfig:
    """Everything that determines a training run, including ablation switches."""

    dim: int = 128
    layers: int = 2
    epochs: int = 30
    batch_size: int = 256
    lr: float = 0.001
    clip: float = 0.1
    top_n: int = 1
    seed: int = 0
    without_ig: bool = False
    without_rt: bool = False
    without_db: bool = False
    without_cn: bool = False
    candidate_masking: bool = True
    gate_mode: str = GATE_ELEMENTWISE
    normalization: str = NORM_CONSTANT
    z: float = 1.0

    def validate(self) -> None:
        if self.dim <= 0 or self.layers <= 0 or self.batch_size <= 0:
            raise ConfigurationError("dim, layers, and batch_size must be positive")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be non-negative")
        if self.lr < 0 or self.clip <= 0:
            raise ConfigurationError("lr must be non-negative and clip positive")
        if self.top_n < 1:
            raise ConfigurationError("top_n must be at least 1")
        if self.gate_mode not in (GATE_ELEMENTWISE, GATE_SCALAR):
            raise ConfigurationError(f"unknown gate mode {self.gate_mode!r}")
        if self.normalization not in (NORM_CONSTANT, NORM_IN_DEGREE):
            raise ConfigurationError(f"unknown normalization {self.normalization!r}")
        if self.z <= 0:
            raise ConfigurationError("z must be positive")

    def fingerprint(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()[:12]


@dataclass
class MetricsReport:
    """Recall@k / MRR@k averaged over (example, gold item) pairs."""

    split: str
    n_examples: int
    n_pairs: int
    recall: dict[int, float]
    mrr: dict[int, float]
    config_fingerprint: str

    def to_text(self) -> str:
        lines = [
            f"split={self.split}",
            f"examples={self.n_examples}",
            f"pairs={self.n_pairs}",
            f"config={self.config_fingerprint}",
        ]
        for k in sorted(self.recall):
            lines.append(f"recall@{k}={self.recall[k]!r}")
            lines.append(f"mrr@{k}={self.mrr[k]!r}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        payload = {
            "split": self.split,
            "examples": self.n_examples,
            "pairs": self.n_pairs,
            "config": self.config_fingerprint,
            "recall": {str(k): self.recall[k] for k in sorted(self.recall)},
            "mrr": {str(k): self.mrr[k] for k in sorted(self.mrr)},
        }
        return json.dumps(payload, sort_keys=True)


@dataclass
class Artifacts:
    """Immutable data-side inputs of a run: corpus, graphs, retrieval index."""

    vocab: Vocab
    conversations: list[Conversation]
    examples: list[RecExample]
    kg: TypedGraph
    word_graph: WordGraph | None
    interaction: InteractionGraph | None
    index: Bm25Index | None
    item_ids: list[int]


def build_artifacts(
    conversations: Sequence[Conversation],
    vocab: Vocab,
    kg: TypedGraph,
    word_graph: WordGraph | None = None,
) -> Artifacts:
    """Derive examples and training-split structures from a loaded corpus."""
    train_convs = [c for c in conversations if c.split == Split.TRAIN]
    interaction = build_interaction_graph(train_convs, vocab.entities) if train_convs else None
    index = build_index(train_convs) if train_convs else None
    examples = derive_examples(conversations, vocab.entities)
    return Artifacts(
        vocab=vocab,
        conversations=list(conversations),
        examples=examples,
        kg=kg,
        word_graph=word_graph,
        interaction=interaction,
        index=index,
        item_ids=vocab.entities.item_ids(),
    )


class Model:
    """Parameter groups bound to one Artifacts instance.

    All groups are created whenever their structure exists, independent of
    ablation flags; flags only gate the forward pass. With a fixed seed every
    ablation variant therefore starts from identical shared weights.
    """

    def __init__(self, artifacts: Artifacts, config: TrainConfig,
                 rng: np.random.Generator | None = None):
        config.validate()
        if not artifacts.item_ids:
            raise ConfigurationError("entity vocabulary contains no items")
        if rng is None:
            rng = np.random.default_rng(config.seed)
        self.artifacts = artifacts
        self.config = config
        self.store = ParamStore()
        d = config.dim

        self.kg_params = init_rgcn_params(
            self.store, "kg", artifacts.kg.n_nodes, artifacts.kg.relations, d, rng,
            layers=config.layers, z=config.z, normalization=config.normalization,
        )
        self.ig_params: RgcnParams | None = None
        ig = artifacts.interaction
        if ig is not None and ig.n_items > 0:
            self.ig_params = init_rgcn_params(
                self.store, "ig", ig.n_items + ig.n_users, ig.relations, d, rng,
                layers=config.layers, z=config.z, normalization=config.normalization,
            )
        self.gcn_params: GcnParams | None = None
        wg = artifacts.word_graph
        if wg is not None and wg.graph.n_nodes > 0:
            self.gcn_params = init_gcn_params(
                self.store, "word", wg.graph.n_nodes, d, rng, layers=config.layers,
            )
        self.att_params: AttentionParams = init_attention_params(
            self.store, "att", d, rng, gate_mode=config.gate_mode,
        )
        self.item_pos = {e: i for i, e in enumerate(artifacts.item_ids)}

    def encoder_outputs(self) -> tuple[Tensor, Tensor | None]:
        """One forward pass over each graph; shared by a whole batch."""
        cfg = self.config
        item_matrix = encode_items(
            self.artifacts.kg,
            self.artifacts.interaction,
            self.kg_params,
            self.ig_params,
            without_ig=cfg.without_ig,
            without_db=cfg.without_db,
        )
        word_matrix = None
        if self.gcn_params is not None and not cfg.without_cn:
            word_matrix = gcn_forward(self.artifacts.word_graph.adjacency, self.gcn_params)
        return item_matrix, word_matrix

    def retrieval_for(self, example: RecExample) -> RetrievalResult | None:
        cfg = self.config
        if cfg.without_rt or self.artifacts.index is None:
            return None
        return retrieve(
            self.artifacts.index,
            list(example.context_entities),
            cfg.top_n,
            exclude_id=example.conversation_id,
        )

    def user_representation(self, example: RecExample, item_matrix: Tensor,
                            word_matrix: Tensor | None):
        wg = self.artifacts.word_graph
        return build_user_representation(
            example,
            item_matrix,
            word_matrix,
            self.retrieval_for(example),
            self.att_params,
            wg.rows if wg is not None else None,
            without_rt=self.config.without_rt,
            without_cn=self.config.without_cn,
        )

    def mask_for(self, example: RecExample) -> list[int] | None:
        if not self.config.candidate_masking:
            return None
        masked = [self.item_pos[e] for e in example.context_entities if e in self.item_pos]
        return masked or None


def score_all(user_vec: Tensor, item_matrix: Tensor, item_ids: Sequence[int],
              masked_positions: Sequence[int] | None = None) -> Tensor:
    """Probability over all items: softmax of dot products with the user vector.

    ``masked_positions`` (already-mentioned items) get a MASK_LOGIT offset,
    pinning their probability to exactly zero.
    """
    item_rows = ad.lookup(item_matrix, list(item_ids))
    logits = ad.matmul(item_rows, user_vec)
    if masked_positions:
        offsets = np.zeros(len(item_ids))
        offsets[list(masked_positions)] = MASK_LOGIT
        logits = ad.add_const(logits, offsets)
    return ad.softmax(logits)


GUARD_EPS = 1e-12


def rec_loss(probs: Tensor, gold_positions: Sequence[int]) -> tuple[Tensor, bool]:
    """Mean over gold items of -log P(gold); flags the small-probability guard.

    The guard floors gold probabilities at GUARD_EPS. Exact zeros would make
    log diverge outright; subnormal values survive the forward pass but
    overflow its 1/p gradient, which gradient clipping cannot repair once it
    is infinite.
    """
    if not gold_positions:
        raise ValidationError("rec_loss requires at least one gold item")
    p_gold = ad.take(probs, list(gold_positions))
    tiny = p_gold.values < GUARD_EPS
    guarded = bool(np.any(tiny))
    if guarded:
        p_gold = ad.add_const(p_gold, np.where(tiny, GUARD_EPS - p_gold.values, 0.0))
    return ad.scale(ad.mean_all(ad.log(p_gold)), -1.0), guarded


def rank_order(probs: np.ndarray) -> np.ndarray:
    """Item positions sorted by descending probability, ties by ascending position."""
    return np.lexsort((np.arange(probs.shape[0]), -probs))


def rank_items(probs: np.ndarray, item_ids: Sequence[int]) -> list[int]:
    ids = np.asarray(item_ids)
    return [int(ids[i]) for i in rank_order(probs)]


def _gold_ranks(probs: np.ndarray, gold_positions: Iterable[int]) -> list[int]:
    order = rank_order(probs)
    rank_at = np.empty(order.shape[0], dtype=np.int64)
    rank_at[order] = np.arange(1, order.shape[0] + 1)
    return [int(rank_at[p]) for p in gold_positions]


def aggregate_metrics(rank_lists: Iterable[Sequence[int]],
                      ks: Sequence[int]) -> tuple[dict[int, float], dict[int, float], int]:
    """Average Recall@k and MRR@k over (example, gold item) pairs.

    Each element of ``rank_lists`` holds the 1-based ranks of one example's
    gold items; every rank is one pair.
    """
    ks = sorted(set(ks))
    hits = {k: 0.0 for k in ks}
    rrs = {k: 0.0 for k in ks}
    pairs = 0
    for ranks in rank_lists:
        for rank in ranks:
            pairs += 1
            for k in ks:
                if rank <= k:
                    hits[k] += 1.0
                    rrs[k] += 1.0 / rank
    if pairs == 0:
        raise ValidationError("no (example, gold item) pairs to aggregate")
    return ({k: hits[k] / pairs for k in ks},
            {k: rrs[k] / pairs for k in ks},
            pairs)


def evaluate(model: Model, examples: Sequence[RecExample],
             ks: Sequence[int] = DEFAULT_KS, *, split_label: str | None = None) -> MetricsReport:
    """Recall@k and MRR@k averaged over every (example, gold item) pair."""
    if not examples:
        raise ValidationError("cannot evaluate an empty example set")
    ks = sorted(set(ks))
    item_matrix, word_matrix = model.encoder_outputs()
    rank_lists: list[list[int]] = []
    for ex in examples:
        rep = model.user_representation(ex, item_matrix, word_matrix)
        probs = score_all(rep.vector, item_matrix, model.artifacts.item_ids,
                          model.mask_for(ex))
        gold_positions = [model.item_pos[g] for g in sorted(ex.gold_items)]
        rank_lists.append(_gold_ranks(probs.values, gold_positions))
    recall, mrr, pairs = aggregate_metrics(rank_lists, ks)
    label = split_label if split_label is not None else (
        examples[0].split.value if len({e.split for e in examples}) == 1 else "mixed"
    )
    return MetricsReport(
        split=label,
        n_examples=len(examples),
        n_pairs=pairs,
        recall=recall,
        mrr=mrr,
        config_fingerprint=model.config.fingerprint(),
    )


@dataclass
class TrainResult:
    model: Model
    best_epoch: int
    epoch_reports: list[MetricsReport]
    epoch_losses: list[float]
    guard_events: int = 0


def batch_loss(model: Model, batch: Sequence[RecExample],
               item_matrix: Tensor, word_matrix: Tensor | None) -> tuple[Tensor, int]:
    """Mean per-example loss over a batch on one shared encoder tape."""
    total: Tensor | None = None
    guards = 0
    for ex in batch:
        rep = model.user_representation(ex, item_matrix, word_matrix)
        probs = score_all(rep.vector, item_matrix, model.artifacts.item_ids,
                          model.mask_for(ex))
        gold_positions = [model.item_pos[g] for g in sorted(ex.gold_items)]
        loss, guarded = rec_loss(probs, gold_positions)
        guards += int(guarded)
        total = loss if total is None else ad.add(total, loss)
    assert total is not None, "empty batch"
    return ad.scale(total, 1.0 / len(batch)), guards


def _param_norms(store: ParamStore) -> dict[str, float]:
    return {name: float(np.linalg.norm(t.values)) for name, t in store.items()}


def train(artifacts: Artifacts, config: TrainConfig,
          ks: Sequence[int] = DEFAULT_KS) -> TrainResult:
    """Full training loop with per-epoch validation and best-R@50 selection.

    Validation metrics drive model selection; when the corpus has no
    validation examples the final epoch wins by default.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    model = Model(artifacts, config, rng)
    train_examples = split_view(artifacts.examples, Split.TRAIN)
    valid_examples = split_view(artifacts.examples, Split.VALID)
    if not train_examples:
        raise ValidationError("corpus yields no training examples")

    adam_cfg = AdamConfig(lr=config.lr, clip_norm=config.clip)
    state = AdamState.for_store(model.store)
    # Selection metric: recall at the largest requested cutoff, preferring 50.
    select_k = 50 if 50 in ks else max(ks)

    best_score = -1.0
    best_epoch = -1
    best_values: dict[str, np.ndarray] | None = None
    epoch_reports: list[MetricsReport] = []
    epoch_losses: list[float] = []
    guard_events = 0

    for epoch in range(config.epochs):
        order = rng.permutation(len(train_examples))
        running = 0.0
        n_batches = 0
        for start in range(0, len(order), config.batch_size):
            batch = [train_examples[i] for i in order[start:start + config.batch_size]]
            item_matrix, word_matrix = model.encoder_outputs()
            loss, guards = batch_loss(model, batch, item_matrix, word_matrix)
            guard_events += guards
            loss_value = float(loss.values)
            if not np.isfinite(loss_value):
                raise NumericError(
                    f"non-finite loss {loss_value} at epoch {epoch}, batch {n_batches}; "
                    f"parameter norms: {_param_norms(model.store)}"
                )
            model.store.zero_grads()
            ad.backward(loss)
            adam_step(model.store, state, adam_cfg)
            running += loss_value
            n_batches += 1
        epoch_losses.append(running / max(n_batches, 1))

        if valid_examples:
            report = evaluate(model, valid_examples, ks, split_label=Split.VALID.value)
            epoch_reports.append(report)
            score = report.recall.get(select_k, 0.0)
            if score > best_score:
                best_score = score
                best_epoch = epoch
                best_values = {name: t.values.copy() for name, t in model.store.items()}

    if best_values is not None:
        for name, values in best_values.items():
            model.store[name].values[...] = values
    else:
        best_epoch = config.epochs - 1
    return TrainResult(model=model, best_epoch=best_epoch,
                       epoch_reports=epoch_reports, epoch_losses=epoch_losses,
                       guard_events=guard_events)


ABLATION_FLAGS = ("ig", "rt", "db", "cn")


def ablation_config(config: TrainConfig, flags: Iterable[str]) -> TrainConfig:
    updates = {}
    for flag in flags:
        if flag not in ABLATION_FLAGS:
            raise ValueError(f"unknown ablation flag {flag!r}")
        updates[f"without_{flag}"] = True
    return replace(config, **updates)


def ablate(artifacts: Artifacts, config: TrainConfig, flags: Sequence[str],
           *, combined: bool = False, ks: Sequence[int] = DEFAULT_KS,
           split: Split = Split.TEST) -> dict[str, MetricsReport]:
    """Retrain and evaluate the full model and the requested ablation variants.

    By default each flag is knocked out on its own; ``combined`` disables all
    listed components in a single variant instead.
    """
    for flag in flags:
        if flag not in ABLATION_FLAGS:
            raise ValueError(f"unknown ablation flag {flag!r}")
    eval_examples = split_view(artifacts.examples, split)

    def run(cfg: TrainConfig) -> MetricsReport:
        result = train(artifacts, cfg, ks)
        return evaluate(result.model, eval_examples, ks, split_label=split.value)

    reports: dict[str, MetricsReport] = {"full": run(config)}
    if combined and flags:
        name = "wo_" + "+".join(flags)
        reports[name] = run(ablation_config(config, flags))
    else:
        for flag in flags:
            reports[f"wo_{flag}"] = run(ablation_config(config, [flag]))
    return reports


def comparison_table(reports: dict[str, MetricsReport], ks: Sequence[int] = DEFAULT_KS) -> str:
    """Fixed-width table of recall/MRR per variant, full model first."""
    ks = sorted(set(ks))
    headers = ["variant"] + [f"R@{k}" for k in ks] + [f"MRR@{k}" for k in ks]
    rows = []
    for name, report in reports.items():
        rows.append([name]
                    + [f"{report.recall[k]:.4f}" for k in ks]
                    + [f"{report.mrr[k]:.4f}" for k in ks])
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(headers))]
    for r in rows:
        lines.append("  ".join(r[i].ljust(widths[i]) for i in range(len(r))))
    return "\n".join(lines) + "\n"
