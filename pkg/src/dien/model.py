"""Model assembly: every variant from sum-pooling to the full two-stage
evolving-interest network, plus the losses and the end-to-end backward pass.

The BASE variant sum-pools behavior embeddings.  Recurrent variants first
run a gated cell over the behavior sequence (the interest extractor); the
two-layer baseline then attention-pools a second recurrence, while the
evolution variants feed attention scores into a fused cell and keep its
final state.  Either way the interest vector is concatenated with the
target embedding and pushed through a small ReLU network with one sigmoid
output.

Two losses drive training: the click loss on the final prediction, and the
optional next-behavior loss that asks each extractor state to rank the
user's actual next behavior above a sampled impostor.  The combined
objective is click loss plus alpha times the next-behavior loss.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass

import numpy as np

from .data import Instance
from .embedding import PAD_ID, EmbeddingTable
from .errors import ConfigError, ParseError, ShapeError, UsageError
from .numerics import log_sigmoid, sigmoid
from .recurrent import (
    AGRU,
    AIGRU,
    AUGRU,
    AttentionParams,
    EvolutionTrace,
    GruParams,
    InterestTrace,
    step_masks,
    attention_backward,
    attention_forward,
    attention_scores,
    evolve,
    evolve_backward,
    evolve_forward,
    gru_backward,
    gru_forward,
    gru_sequence,
)

PROB_FLOOR = 1e-12  # probabilities are clamped to [floor, 1 - floor] before logs


class ModelVariant(enum.Enum):
    """Which architecture to assemble.

    DIEN and GRU_AUGRU share weights and wiring; DIEN additionally trains
    with the next-behavior loss.
    """

    BASE = "base"
    TWO_LAYER_GRU_ATT = "two_layer_gru_att"
    GRU_AIGRU = "gru_aigru"
    GRU_AGRU = "gru_agru"
    GRU_AUGRU = "gru_augru"
    DIEN = "dien"

    @classmethod
    def parse(cls, text: str) -> "ModelVariant":
        try:
            return cls(text.strip().lower())
        except ValueError:
            known = ", ".join(v.value for v in cls)
            raise ConfigError(f"unknown variant {text!r}; choose one of {known}") from None

    @property
    def recurrent(self) -> bool:
        return self is not ModelVariant.BASE

    @property
    def evolution_cell(self) -> str | None:
        return {
            ModelVariant.GRU_AIGRU: AIGRU,
            ModelVariant.GRU_AGRU: AGRU,
            ModelVariant.GRU_AUGRU: AUGRU,
            ModelVariant.DIEN: AUGRU,
        }.get(self)

    @property
    def wants_aux(self) -> bool:
        return self is ModelVariant.DIEN


@dataclass
class MlpParams:
    """Fully connected ReLU layers ending in a single logit."""

    weights: list  # weights[i]: (widths[i + 1], widths[i])
    biases: list

    def __post_init__(self):
        if not self.weights or len(self.weights) != len(self.biases):
            raise ShapeError("need one bias per weight matrix")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            w = np.asarray(w, dtype=np.float64)
            b = np.asarray(b, dtype=np.float64)
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {i}: weight {w.shape} vs bias {b.shape}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeError(
                    f"layer {i} expects width {w.shape[1]} but layer {i - 1} "
                    f"produces {self.weights[i - 1].shape[0]}"
                )
            self.weights[i] = w
            self.biases[i] = b
        if self.weights[-1].shape[0] != 1:
            raise ShapeError("final layer must produce a single logit")

    @property
    def n_input(self) -> int:
        return self.weights[0].shape[1]

    @classmethod
    def init(cls, widths, rng: np.random.Generator) -> "MlpParams":
        """widths = [input, hidden..., 1], seeded uniform +-1/sqrt(fan_in)."""
        if len(widths) < 2 or widths[-1] != 1 or any(w < 1 for w in widths):
            raise ConfigError(f"bad layer widths {list(widths)}")
        weights, biases = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            biases.append(rng.uniform(-bound, bound, size=fan_out))
        return cls(weights=weights, biases=biases)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{i}"] = w
            out[f"b{i}"] = b
        return out


def mlp_forward(mlp: MlpParams, feats: np.ndarray):
    """ReLU stack over (B, n_input) features; returns ((B,) logits, cache)."""
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[1] != mlp.n_input:
        raise ConfigError(
            f"feature width {feats.shape[-1]} does not match head input {mlp.n_input}"
        )
    x = feats
    pre_acts, layer_ins = [], []
    last = len(mlp.weights) - 1
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        layer_ins.append(x)
        z = x @ w.T + b
        pre_acts.append(z)
        x = z if i == last else np.maximum(z, 0.0)
    cache = {"kind": "mlp", "ins": layer_ins, "pre": pre_acts}
    return x[:, 0], cache


def mlp_backward(mlp: MlpParams, cache, d_logits):
    """Backward through mlp_forward; returns (grads dict, d_features)."""
    if not isinstance(cache, dict) or cache.get("kind") != "mlp":
        raise UsageError("mlp_backward needs the cache produced by mlp_forward")
    grads = {}
    d = np.asarray(d_logits, dtype=np.float64)[:, None]
    last = len(mlp.weights) - 1
    for i in range(last, -1, -1):
        if i != last:
            d = d * (cache["pre"][i] > 0.0)
        grads[f"w{i}"] = d.T @ cache["ins"][i]
        grads[f"b{i}"] = d.sum(axis=0)
        d = d @ mlp.weights[i]
    return grads, d


@dataclass
class Prediction:
    """Click probability plus the recurrent traces when they exist."""

    p: float
    interest: InterestTrace | None = None
    evolution: EvolutionTrace | None = None


class DienModel:
    """Parameter bundle for one variant: embeddings, cells, attention, head."""

    def __init__(self, variant: ModelVariant, alpha: float, item_table, cat_table,
                 extractor, evolver, attention, mlp, embed_dim: int, hidden_size: int,
                 mlp_widths: list):
        if alpha < 0:
            raise ConfigError(f"alpha must be nonnegative, got {alpha}")
        self.variant = variant
        self.alpha = float(alpha)
        self.item_table = item_table
        self.cat_table = cat_table
        self.extractor = extractor
        self.evolver = evolver
        self.attention = attention
        self.mlp = mlp
        self.embed_dim = int(embed_dim)
        self.hidden_size = int(hidden_size)
        self.mlp_widths = list(mlp_widths)

    @classmethod
    def build(cls, variant: ModelVariant, item_vocab: int, cat_vocab: int,
              embed_dim: int, hidden_size: int, mlp_hidden, alpha: float,
              seed: int) -> "DienModel":
        """Seeded initialization of every parameter group.

        For recurrent variants the hidden width must equal the behavior
        embedding width (item plus category), because the next-behavior loss
        scores states against behavior embeddings by inner product.
        """
        if embed_dim < 1 or hidden_size < 1:
            raise ConfigError("embed_dim and hidden_size must be positive")
        behavior_width = 2 * embed_dim
        if variant.recurrent and hidden_size != behavior_width:
            raise ConfigError(
                f"hidden_size must equal the behavior width {behavior_width} "
                f"(item + category embedding), got {hidden_size}"
            )
        rng = np.random.default_rng(seed)
        item_table = EmbeddingTable(item_vocab, embed_dim, rng=rng)
        cat_table = EmbeddingTable(cat_vocab, embed_dim, rng=rng)
        extractor = evolver = attention = None
        if variant.recurrent:
            extractor = GruParams.init(behavior_width, hidden_size, rng)
            evolver = GruParams.init(hidden_size, hidden_size, rng)
            attention = AttentionParams.init(hidden_size, behavior_width, rng)
        interest_width = hidden_size if variant.recurrent else behavior_width
        widths = [interest_width + behavior_width, *mlp_hidden, 1]
        mlp = MlpParams.init(widths, rng)
        return cls(variant, alpha, item_table, cat_table, extractor, evolver,
                   attention, mlp, embed_dim, hidden_size, widths)

    def param_arrays(self) -> dict[str, np.ndarray]:
        """Live dense parameters, prefixed by component, in a fixed order."""
        out: dict[str, np.ndarray] = {}
        if self.variant.recurrent:
            for prefix, group in (("extractor", self.extractor), ("evolver", self.evolver),
                                  ("attention", self.attention)):
                for name, arr in group.arrays().items():
                    out[f"{prefix}.{name}"] = arr
        for name, arr in self.mlp.arrays().items():
            out[f"mlp.{name}"] = arr
        return out

    def all_arrays(self) -> dict[str, np.ndarray]:
        """param_arrays plus the two embedding matrices (for flattening)."""
        out = {"item_emb": self.item_table.weights, "cat_emb": self.cat_table.weights}
        out.update(self.param_arrays())
        return out

    # -- checkpoint io ------------------------------------------------------

    def save(self, path) -> None:
        """Write a deterministic checkpoint: a JSON header line, then the
        raw little-endian float64 bytes of every array in header order.

        The same model always produces byte-identical files; archive-style
        containers were rejected because they embed timestamps.
        """
        arrays = self.all_arrays()
        header = {
            "format": "dien-checkpoint",
            "version": 1,
            "variant": self.variant.value,
            "alpha": self.alpha,
            "embed_dim": self.embed_dim,
            "hidden_size": self.hidden_size,
            "mlp_widths": self.mlp_widths,
            "item_vocab": self.item_table.vocab_size,
            "cat_vocab": self.cat_table.vocab_size,
            "arrays": [[name, list(arr.shape)] for name, arr in arrays.items()],
        }
        with open(path, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode())
            fh.write(b"\n")
            for arr in arrays.values():
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "DienModel":
        with open(path, "rb") as fh:
            header_line = fh.readline()
            try:
                header = json.loads(header_line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}: bad checkpoint header: {exc}") from None
            if header.get("format") != "dien-checkpoint" or header.get("version") != 1:
                raise ParseError(f"{path}: not a version-1 checkpoint")
            blobs = {}
            for name, shape in header["arrays"]:
                count = int(np.prod(shape)) if shape else 1
                raw = fh.read(count * 8)
                if len(raw) != count * 8:
                    raise ParseError(f"{path}: truncated array {name!r}")
                blobs[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
            if fh.read(1):
                raise ParseError(f"{path}: trailing bytes after the last array")

        variant = ModelVariant.parse(header["variant"])
        embed_dim = int(header["embed_dim"])
        model = cls.build(
            variant, int(header["item_vocab"]), int(header["cat_vocab"]), embed_dim,
            int(header["hidden_size"]), header["mlp_widths"][1:-1],
            float(header["alpha"]), seed=0,
        )
        for name, arr in model.all_arrays().items():
            if name not in blobs:
                raise ParseError(f"{path}: missing array {name!r}")
            if blobs[name].shape != arr.shape:
                raise ParseError(
                    f"{path}: array {name!r} has shape {blobs[name].shape}, "
                    f"expected {arr.shape}"
                )
            arr[...] = blobs[name]
        return model


# ---------------------------------------------------------------------------
# batched training path
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    """Padded id arrays for a slice of instances."""

    item_ids: np.ndarray  # (B, T) with PAD_ID fill
    cat_ids: np.ndarray
    valid: np.ndarray  # (B,)
    target_items: np.ndarray
    target_cats: np.ndarray
    labels: np.ndarray  # (B,) float64


def make_batch(instances: list, pad_to: int | None = None) -> Batch:
    if not instances:
        raise UsageError("empty instance list")
    lens = [len(inst.history_items) for inst in instances]
    width = pad_to if pad_to is not None else max(lens)
    if width < max(lens):
        raise ShapeError(f"pad_to={width} shorter than longest history {max(lens)}")
    n = len(instances)
    item_ids = np.full((n, width), PAD_ID, dtype=np.int64)
    cat_ids = np.full((n, width), PAD_ID, dtype=np.int64)
    for row, inst in enumerate(instances):
        item_ids[row, :lens[row]] = inst.history_items
        cat_ids[row, :lens[row]] = inst.history_cats
    return Batch(
        item_ids=item_ids,
        cat_ids=cat_ids,
        valid=np.asarray(lens, dtype=np.int64),
        target_items=np.asarray([inst.target_item for inst in instances], dtype=np.int64),
        target_cats=np.asarray([inst.target_cat for inst in instances], dtype=np.int64),
        labels=np.asarray([inst.label for inst in instances], dtype=np.float64),
    )


def draw_negative_items(rng: np.random.Generator, vocab_size: int,
                        excluded: np.ndarray) -> np.ndarray:
    """Uniform non-pad item ids, elementwise different from `excluded`.

    Skipping the excluded id is done by drawing from a range one short and
    shifting draws at or above it, which keeps the draw count per element at
    exactly one for reproducibility.
    """
    if vocab_size < 3:
        raise ConfigError(f"need at least 2 real items to draw negatives, vocab {vocab_size}")
    excluded = np.asarray(excluded, dtype=np.int64)
    draws = rng.integers(0, vocab_size - 2, size=excluded.shape)
    return 1 + draws + (draws >= np.maximum(excluded, 1) - 1)


def forward_batch(model: DienModel, batch: Batch, negatives=None) -> dict:
    """Run the variant end to end over a batch.

    `negatives` is an (item ids, category ids) pair shaped (B, T-1) for the
    next-behavior loss; pass None to skip that loss.  Returns the context
    dict consumed by model_backward, with losses under "l_target"/"l_aux"
    and probabilities under "probs".
    """
    d = model.embed_dim
    items_e = model.item_table.lookup_many(batch.item_ids)
    cats_e = model.cat_table.lookup_many(batch.cat_ids)
    behaviors = np.concatenate([items_e, cats_e], axis=2)
    targets = np.concatenate([
        model.item_table.lookup_many(batch.target_items),
        model.cat_table.lookup_many(batch.target_cats),
    ], axis=1)
    n_rows, width = batch.item_ids.shape
    mask = step_masks(batch.valid, n_rows, width)
    ctx: dict = {"batch": batch, "behaviors": behaviors, "targets": targets,
                 "mask": mask, "variant": model.variant}

    if model.variant is ModelVariant.BASE:
        feats = np.concatenate([(behaviors * mask[:, :, None]).sum(axis=1), targets], axis=1)
    else:
        states1, cache1 = gru_forward(model.extractor, behaviors, batch.valid)
        ctx["states1"], ctx["cache1"] = states1, cache1
        if model.variant is ModelVariant.TWO_LAYER_GRU_ATT:
            states2, cache2 = gru_forward(model.evolver, states1, batch.valid)
            scores, acache = attention_forward(states2, targets, model.attention, batch.valid)
            interest = (scores[:, :, None] * states2).sum(axis=1)
            ctx.update(states2=states2, cache2=cache2, scores=scores, acache=acache)
        else:
            scores, acache = attention_forward(states1, targets, model.attention, batch.valid)
            evolved, final, ecache = evolve_forward(
                model.evolver, states1, scores, batch.valid, model.variant.evolution_cell
            )
            interest = final
            ctx.update(scores=scores, acache=acache, evolved=evolved, ecache=ecache)
        feats = np.concatenate([interest, targets], axis=1)

    logits, mcache = mlp_forward(model.mlp, feats)
    probs = sigmoid(logits)
    y = batch.labels
    l_target = -float(np.mean(y * log_sigmoid(logits) + (1.0 - y) * log_sigmoid(-logits)))
    ctx.update(feats=feats, mcache=mcache, logits=logits, probs=probs,
               l_target=l_target, l_aux=0.0, aux_active=False)

    if negatives is not None and model.variant.recurrent and width > 1:
        neg_items, neg_cats = negatives
        neg_e = np.concatenate([
            model.item_table.lookup_many(neg_items),
            model.cat_table.lookup_many(neg_cats),
        ], axis=2)
        h = ctx["states1"][:, :-1]
        pos_e = behaviors[:, 1:]
        mask_next = step_masks(np.maximum(batch.valid - 1, 0), n_rows, width - 1)
        s_pos = np.einsum("btn,btn->bt", h, pos_e)
        s_neg = np.einsum("btn,btn->bt", h, neg_e)
        per_step = log_sigmoid(s_pos) + log_sigmoid(-s_neg)
        ctx.update(
            l_aux=-float((per_step * mask_next).sum() / n_rows),
            aux_active=True, neg_items=neg_items, neg_cats=neg_cats,
            neg_e=neg_e, s_pos=s_pos, s_neg=s_neg, mask_next=mask_next,
        )
    return ctx


def _masked_accumulate(table: EmbeddingTable, ids, grads, keep) -> None:
    sel = keep.astype(bool)
    table.accumulate_grad_many(ids[sel], grads[sel])


def model_backward(model: DienModel, ctx: dict) -> dict[str, np.ndarray]:
    """Gradients of the combined loss for the whole parameter set.

    Dense gradients come back keyed like param_arrays(); embedding gradients
    accumulate into the tables' sparse buffers (zero them first).  Padding
    ids receive nothing.
    """
    batch: Batch = ctx["batch"]
    d = model.embed_dim
    n_rows, width = batch.item_ids.shape
    y = batch.labels
    d_logits = (ctx["probs"] - y) / n_rows
    mlp_grads, d_feats = mlp_backward(model.mlp, ctx["mcache"], d_logits)
    grads = {f"mlp.{k}": v for k, v in mlp_grads.items()}

    split = d_feats.shape[1] - 2 * d
    d_interest, d_targets = d_feats[:, :split], d_feats[:, split:].copy()

    if model.variant is ModelVariant.BASE:
        d_behaviors = ctx["mask"][:, :, None] * d_interest[:, None, :]
    else:
        if model.variant is ModelVariant.TWO_LAYER_GRU_ATT:
            states2, scores = ctx["states2"], ctx["scores"]
            d_scores = np.einsum("bn,btn->bt", d_interest, states2)
            d_states2 = scores[:, :, None] * d_interest[:, None, :]
            d_w, d_states2_att, d_targets_att = attention_backward(
                model.attention, ctx["acache"], d_scores
            )
            evolver_grads, d_states1, _ = gru_backward(
                model.evolver, ctx["cache2"], d_states2 + d_states2_att
            )
        else:
            d_evolved = np.zeros_like(ctx["evolved"])
            evolver_grads, d_states1, d_scores = evolve_backward(
                model.evolver, ctx["ecache"], d_evolved, d_interest
            )
            d_w, d_states1_att, d_targets_att = attention_backward(
                model.attention, ctx["acache"], d_scores
            )
            d_states1 = d_states1 + d_states1_att
        grads["attention.w"] = d_w
        d_targets += d_targets_att
        for name, arr in evolver_grads.items():
            grads[f"evolver.{name}"] = arr

        d_behaviors_extra = None
        if ctx["aux_active"]:
            scale = -model.alpha / n_rows
            m = ctx["mask_next"]
            d_spos = scale * sigmoid(-ctx["s_pos"]) * m
            d_sneg = -scale * sigmoid(ctx["s_neg"]) * m
            h = ctx["states1"][:, :-1]
            pos_e = ctx["behaviors"][:, 1:]
            d_states1[:, :-1] += d_spos[:, :, None] * pos_e + d_sneg[:, :, None] * ctx["neg_e"]
            d_behaviors_extra = d_spos[:, :, None] * h
            d_neg = d_sneg[:, :, None] * h
            _masked_accumulate(model.item_table, ctx["neg_items"], d_neg[..., :d], m)
            _masked_accumulate(model.cat_table, ctx["neg_cats"], d_neg[..., d:], m)

        extractor_grads, d_behaviors, _ = gru_backward(model.extractor, ctx["cache1"], d_states1)
        if d_behaviors_extra is not None:
            d_behaviors[:, 1:] += d_behaviors_extra
        for name, arr in extractor_grads.items():
            grads[f"extractor.{name}"] = arr

    keep = ctx["mask"]
    _masked_accumulate(model.item_table, batch.item_ids, d_behaviors[..., :d], keep)
    _masked_accumulate(model.cat_table, batch.cat_ids, d_behaviors[..., d:], keep)
    model.item_table.accumulate_grad_many(batch.target_items, d_targets[:, :d])
    model.cat_table.accumulate_grad_many(batch.target_cats, d_targets[:, d:])
    return grads


# ---------------------------------------------------------------------------
# single-instance surfaces
# ---------------------------------------------------------------------------


def _head_probability(mlp: MlpParams, feats: np.ndarray) -> float:
    logit, _ = mlp_forward(mlp, feats[None, :])
    return float(sigmoid(logit)[0])


def base_forward(embeddings, mlp: MlpParams) -> Prediction:
    """Sum-pool the valid behaviors and score against the target."""
    vecs = embeddings.behavior_vecs()
    valid = embeddings.valid_len
    pooled = vecs[:valid].sum(axis=0) if valid else np.zeros(vecs.shape[1])
    feats = np.concatenate([pooled, embeddings.target_vec, embeddings.profile_vec])
    return Prediction(p=_head_probability(mlp, feats))


def dien_forward(model: DienModel, embeddings, forced_scores=None) -> Prediction:
    """Two-stage forward for one instance, keeping the traces.

    `forced_scores` bypasses the attention softmax with caller-chosen
    relevance weights, which is how the no-attention diagnostic probes run.
    """
    if not model.variant.recurrent:
        raise UsageError("sum-pooling variant has no recurrent stages; use base_forward")
    trace = gru_sequence(model.extractor, embeddings.behavior_vecs(), None,
                         embeddings.valid_len)
    target = embeddings.target_vec
    if model.variant is ModelVariant.TWO_LAYER_GRU_ATT:
        second = gru_sequence(model.evolver, trace.hidden, None, trace.valid_len)
        if forced_scores is None:
            scores = attention_scores(second, target, model.attention)
        else:
            scores = np.asarray(forced_scores, dtype=np.float64)
        interest = (scores[:, None] * second.hidden).sum(axis=0)
        evolution = EvolutionTrace(scores=scores.copy(), evolved=second.hidden,
                                   final=interest)
    else:
        if forced_scores is None:
            scores = attention_scores(trace, target, model.attention)
        else:
            scores = np.asarray(forced_scores, dtype=np.float64)
        evolution = evolve(model.evolver, trace, scores, model.variant.evolution_cell)
        interest = evolution.final
    feats = np.concatenate([interest, target, embeddings.profile_vec])
    return Prediction(p=_head_probability(model.mlp, feats), interest=trace,
                      evolution=evolution)


def predict_instance(model: DienModel, instance: Instance) -> Prediction:
    """Embed one instance and run whichever forward its variant uses."""
    from .embedding import FeatureEmbeddings

    emb = FeatureEmbeddings.from_instance(model.item_table, model.cat_table, instance)
    if model.variant.recurrent:
        return dien_forward(model, emb)
    return base_forward(emb, model.mlp)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _prob(p) -> float:
    return p.p if isinstance(p, Prediction) else float(p)


def target_loss(preds, labels) -> float:
    """Mean negative log likelihood of the click labels.

    Probabilities are clamped to [1e-12, 1 - 1e-12] so a saturated
    prediction cannot produce an infinite loss.
    """
    if len(preds) == 0:
        raise UsageError("empty prediction batch")
    if len(preds) != len(labels):
        raise ShapeError(f"{len(preds)} predictions vs {len(labels)} labels")
    p = np.clip([_prob(x) for x in preds], PROB_FLOOR, 1.0 - PROB_FLOOR)
    y = np.asarray(labels, dtype=np.float64)
    if np.any((y != 0.0) & (y != 1.0)):
        raise UsageError("labels must be 0 or 1")
    return -float(np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def aux_loss(traces, pos_seqs, neg_seqs) -> float:
    """Next-behavior score loss over extractor states.

    For each instance and each step before the last valid one, the state
    must score the actual next behavior high (inner product through a
    sigmoid) and the sampled impostor low.  Normalized by the number of
    instances.
    """
    if len(traces) == 0:
        raise UsageError("empty trace batch")
    if not len(traces) == len(pos_seqs) == len(neg_seqs):
        raise ShapeError(
            f"{len(traces)} traces vs {len(pos_seqs)} positive and "
            f"{len(neg_seqs)} negative sequences"
        )
    total = 0.0
    for trace, pos, neg in zip(traces, pos_seqs, neg_seqs):
        steps = trace.valid_len - 1
        if steps <= 0:
            continue
        pos = np.asarray(pos, dtype=np.float64)
        neg = np.asarray(neg, dtype=np.float64)
        if pos.shape[-1] != trace.hidden.shape[1] or neg.shape[-1] != trace.hidden.shape[1]:
            raise ConfigError(
                f"behavior width {pos.shape[-1]} does not match state width "
                f"{trace.hidden.shape[1]}"
            )
        h = trace.hidden[:steps]
        s_pos = np.einsum("tn,tn->t", h, pos[:steps])
        s_neg = np.einsum("tn,tn->t", h, neg[:steps])
        total += float((log_sigmoid(s_pos) + log_sigmoid(-s_neg)).sum())
    return -total / len(traces)


def total_loss(l_target: float, l_aux: float, alpha: float) -> float:
    """Combined objective: click loss plus alpha times the next-behavior loss."""
    if alpha < 0:
        raise ConfigError(f"alpha must be nonnegative, got {alpha}")
    return float(l_target) + float(alpha) * float(l_aux)
