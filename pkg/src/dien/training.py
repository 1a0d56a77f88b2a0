"""Mini-batch training with an adaptive optimizer, plus the
finite-difference harness that keeps every analytic gradient honest.

A run is a pure function of (corpus, config): parameter init, batch order,
and negative behavior draws all come from the run seed, gradients are
reduced in fixed order, and embedding updates touch only the ids seen in
the batch.  Two runs with the same inputs produce bit-identical models.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Corpus, truncate_history
from .embedding import EmbeddingTable
from .errors import ConfigError, DivergenceError, ShapeError, UsageError
from .model import (
    DienModel,
    ModelVariant,
    draw_negative_items,
    forward_batch,
    make_batch,
    model_backward,
    total_loss,
)
from .numerics import finite_diff_grad, max_rel_error

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    variant: ModelVariant = ModelVariant.DIEN
    alpha: float = 1.0
    epochs: int = 2
    batch_size: int = 128
    learning_rate: float = 8e-4
    seed: int = 0
    embed_dim: int = 16
    hidden_size: int = 32
    mlp_hidden: tuple = (64, 32)
    max_history: int = 50

    def validate(self) -> None:
        if self.alpha < 0:
            raise ConfigError(f"alpha must be nonnegative, got {self.alpha}")
        for name in ("epochs",):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must not be negative")
        for name in ("batch_size", "embed_dim", "hidden_size", "max_history"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if any(w < 1 for w in self.mlp_hidden):
            raise ConfigError(f"mlp_hidden widths must be positive, got {self.mlp_hidden}")


@dataclass
class CurveRecord:
    """One optimizer step on the learning curve."""

    epoch: int
    step: int
    l_target: float
    l_aux: float
    l_total: float


def adam_step(params: dict, grads: dict, state: dict, lr: float,
              beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
              eps: float = ADAM_EPS) -> dict:
    """One bias-corrected adaptive update, in place over `params`.

    `state` holds first/second moment dicts keyed like params plus the step
    counter "t"; pass {} to start fresh.  Returns the state for chaining.
    """
    if "m" not in state:
        state["m"] = {k: np.zeros_like(v) for k, v in params.items()}
        state["v"] = {k: np.zeros_like(v) for k, v in params.items()}
        state["t"] = 0
    state["t"] += 1
    t = state["t"]
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(
                f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}"
            )
        m = state["m"][name]
        v = state["v"][name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


class Adam:
    """Adaptive updates for the dense parameters and lazy sparse updates for
    embedding tables: only ids that received gradient move, with moments
    kept per id and bias correction from the shared step counter.
    """

    def __init__(self, params: dict, tables: list, lr: float,
                 beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
                 eps: float = ADAM_EPS):
        self.params = params
        self.tables = list(tables)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state: dict = {}
        self._table_m = [np.zeros_like(t.weights) for t in self.tables]
        self._table_v = [np.zeros_like(t.weights) for t in self.tables]

    def step(self, grads: dict) -> None:
        """Apply one update; consumes and clears the tables' gradient buffers."""
        adam_step(self.params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)
        t = self.state["t"]
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for table, m, v in zip(self.tables, self._table_m, self._table_v):
            ids = table.touched_ids()
            if ids.size == 0:
                continue
            g = table.grad_columns()[:, ids]
            m[:, ids] = self.beta1 * m[:, ids] + (1.0 - self.beta1) * g
            v[:, ids] = self.beta2 * v[:, ids] + (1.0 - self.beta2) * g * g
            table.weights[:, ids] -= self.lr * (m[:, ids] / c1) / (
                np.sqrt(v[:, ids] / c2) + self.eps
            )
            table.zero_grad()


def train(corpus: Corpus, config: TrainConfig) -> tuple[DienModel, list[CurveRecord]]:
    """Train one model on the corpus's train split.

    Batch order is reshuffled per epoch and impostor behaviors are redrawn
    per batch, all from the run seed.  A non-finite loss aborts immediately
    rather than continuing from poisoned parameters.
    """
    config.validate()
    instances = [truncate_history(inst, config.max_history) for inst in corpus.train()]
    if not instances:
        raise UsageError("corpus has no training instances")
    model = DienModel.build(
        config.variant, len(corpus.item_vocab), len(corpus.cat_vocab),
        config.embed_dim, config.hidden_size, config.mlp_hidden,
        config.alpha, seed=config.seed,
    )
    opt = Adam(model.param_arrays(), [model.item_table, model.cat_table],
               config.learning_rate)
    rng = np.random.default_rng([config.seed, 1])
    want_aux = config.variant.wants_aux and config.alpha > 0
    vocab = model.item_table.vocab_size
    curves: list[CurveRecord] = []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(instances))
        for start in range(0, len(instances), config.batch_size):
            rows = order[start:start + config.batch_size]
            batch = make_batch([instances[i] for i in rows])
            negatives = None
            if want_aux and batch.item_ids.shape[1] > 1:
                neg_items = draw_negative_items(rng, vocab, batch.item_ids[:, 1:])
                negatives = (neg_items, corpus.item_cats[neg_items])
            ctx = forward_batch(model, batch, negatives)
            l_total = total_loss(ctx["l_target"], ctx["l_aux"], config.alpha)
            if not np.isfinite(l_total):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch} step {step}: "
                    f"target {ctx['l_target']}, aux {ctx['l_aux']}"
                )
            grads = model_backward(model, ctx)
            opt.step(grads)
            curves.append(CurveRecord(epoch, step, ctx["l_target"], ctx["l_aux"], l_total))
            step += 1
    return model, curves


def write_curves(path, curves: list) -> None:
    """CSV of the learning curve, one optimizer step per row."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,step,l_target,l_aux,l_total\n")
        for rec in curves:
            fh.write(f"{rec.epoch},{rec.step},{rec.l_target!r},{rec.l_aux!r},{rec.l_total!r}\n")


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

GRAD_CHECK_PARAM_LIMIT = 6000


@dataclass
class GradCheckReport:
    """Max relative error per parameter group against the numeric oracle."""

    groups: dict = field(default_factory=dict)
    tolerance: float = 1e-4

    def passed(self) -> bool:
        return all(err <= self.tolerance for err in self.groups.values())

    def worst(self) -> tuple[str, float]:
        name = max(self.groups, key=self.groups.get)
        return name, self.groups[name]

    def lines(self) -> list[str]:
        out = []
        for name in sorted(self.groups):
            err = self.groups[name]
            verdict = "ok" if err <= self.tolerance else "FAIL"
            out.append(f"{name}: max rel error {err:.3e} [{verdict}]")
        return out


def _toy_instances(rng: np.random.Generator, n_items: int, n_cats: int, steps: int):
    """A handful of mixed-length instances exercising the padding paths."""
    from .data import Instance

    lens = [steps, steps - 1, 2, steps, 1, 3]
    lens = [max(1, min(steps, l)) for l in lens]
    out = []
    for k, ln in enumerate(lens):
        items = tuple(int(rng.integers(1, n_items)) for _ in range(ln))
        cats = tuple(int(rng.integers(1, n_cats)) for _ in range(ln))
        out.append(Instance(items, cats, int(rng.integers(1, n_items)),
                            int(rng.integers(1, n_cats)), k % 2))
    return out


def grad_check(config: TrainConfig, tolerance: float = 1e-4,
               epsilon: float = 1e-5, steps: int = 5) -> GradCheckReport:
    """Compare the analytic backward pass against central differences.

    Builds one seeded batch at the config's dimensions, runs the combined
    loss both ways, and reports the max relative error per parameter group.
    Dimensions must stay toy-sized; perturbing every coordinate twice is
    quadratic in all the wrong places.
    """
    config.validate()
    n_items, n_cats = 9, 5
    model = DienModel.build(
        config.variant, n_items, n_cats, config.embed_dim, config.hidden_size,
        config.mlp_hidden, config.alpha, seed=config.seed,
    )
    n_params = sum(a.size for a in model.all_arrays().values())
    if n_params > GRAD_CHECK_PARAM_LIMIT:
        raise UsageError(
            f"{n_params} parameters is past the {GRAD_CHECK_PARAM_LIMIT} budget; "
            "shrink the dimensions"
        )
    rng = np.random.default_rng([config.seed, 2])
    batch = make_batch(_toy_instances(rng, n_items, n_cats, steps))
    negatives = None
    if config.variant.wants_aux and config.alpha > 0 and batch.item_ids.shape[1] > 1:
        neg_items = draw_negative_items(rng, n_items, batch.item_ids[:, 1:])
        neg_cats = (neg_items - 1) % (n_cats - 1) + 1
        negatives = (neg_items, neg_cats)

    model.item_table.zero_grad()
    model.cat_table.zero_grad()
    ctx = forward_batch(model, batch, negatives)
    analytic = model_backward(model, ctx)
    analytic["item_emb"] = model.item_table.grad_columns().copy()
    analytic["cat_emb"] = model.cat_table.grad_columns().copy()
    model.item_table.zero_grad()
    model.cat_table.zero_grad()

    # the numeric oracle works on one flat vector; scatter each probe into
    # the live arrays, then slice its gradient back apart per group
    arrays = model.all_arrays()
    base = np.concatenate([a.ravel() for a in arrays.values()])

    def scatter(flat: np.ndarray) -> None:
        offset = 0
        for arr in arrays.values():
            arr[...] = flat[offset:offset + arr.size].reshape(arr.shape)
            offset += arr.size

    def loss_at(flat: np.ndarray) -> float:
        scatter(flat)
        probe_ctx = forward_batch(model, batch, negatives)
        return total_loss(probe_ctx["l_target"], probe_ctx["l_aux"], config.alpha)

    numeric_flat = finite_diff_grad(loss_at, base, epsilon=epsilon)
    scatter(base)
    report = GradCheckReport(tolerance=tolerance)
    offset = 0
    for name, arr in arrays.items():
        numeric = numeric_flat[offset:offset + arr.size].reshape(arr.shape)
        offset += arr.size
        report.groups[name] = max_rel_error(numeric, analytic[name])
    return report
