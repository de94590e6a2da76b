"""Rule-weight learning from answer-only supervision."""

from __future__ import annotations

import dataclasses
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import (
    KINSHIP,
    ResultIC,
    Rule,
    RuleIC,
    RuleTemplate,
    TemplateKind,
    Vocabulary,
    composite,
    instantiate_template,
)
from .engine import DEFAULT_MAX_ITERS, backward, forward, predict
from .parser import Sample

log = logging.getLogger(__name__)

BCE_EPS = 1e-7
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Weights


@dataclass
class RuleWeightStore:
    """Dense composite weights indexed ``[r1, r2, r3]`` plus fixed templates."""

    composite: np.ndarray
    fixed: dict[RuleTemplate, float] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.composite.shape[0]

    @classmethod
    def zeros(cls, n: int = len(KINSHIP)) -> "RuleWeightStore":
        return cls(np.zeros((n, n, n)))

    @classmethod
    def from_priors(cls, priors: dict[RuleTemplate, float], n: int = len(KINSHIP)) -> "RuleWeightStore":
        """Listed entries at their weights, every other composite at 0."""
        store = cls.zeros(n)
        for t, w in priors.items():
            store[t] = w
        return store

    def __getitem__(self, t: RuleTemplate) -> float:
        if t.kind is TemplateKind.COMPOSITE:
            return float(self.composite[t.args])
        return self.fixed.get(t, 0.0)

    def __setitem__(self, t: RuleTemplate, w: float) -> None:
        if w < 0:
            raise ValueError("rule weights are nonnegative")
        if t.kind is TemplateKind.COMPOSITE:
            self.composite[t.args] = w
        else:
            self.fixed[t] = w

    def template(self, flat: int) -> RuleTemplate:
        return composite(*np.unravel_index(flat, self.composite.shape))

    def copy(self) -> "RuleWeightStore":
        return RuleWeightStore(self.composite.copy(), dict(self.fixed))


def init_rule_weights(
    priors: dict[RuleTemplate, float], rng: np.random.Generator, n: int = len(KINSHIP),
    low: float = 0.0, high: float = 0.1,
) -> RuleWeightStore:
    store = RuleWeightStore(rng.uniform(low, high, size=(n, n, n)))
    for t, w in priors.items():
        store[t] = w
    return store


def sample_rules(store: RuleWeightStore, n: int, rng: np.random.Generator) -> list[RuleTemplate]:
    """Draw ``n`` distinct composite templates, proportional to weight."""
    flat = store.composite.ravel()
    pos = np.flatnonzero(flat > 0)
    if pos.size == 0 or n <= 0:
        return []
    if n >= pos.size:
        picked = pos
    else:
        p = flat[pos] / flat[pos].sum()
        picked = np.sort(rng.choice(pos, size=n, replace=False, p=p))
    return [store.template(int(i)) for i in picked]


def top_rules(store: RuleWeightStore, n: int) -> list[tuple[RuleTemplate, float]]:
    """Highest-weight composites; ties go to the lexicographically smaller triple."""
    flat = store.composite.ravel()
    # lexsort keys run last-major: primary -weight, secondary flat index
    order = np.lexsort((np.arange(flat.size), -flat))[: max(n, 0)]
    return [(store.template(int(i)), float(flat[i])) for i in order]


def export_rules(store: RuleWeightStore, n: int, vocab: Vocabulary = KINSHIP) -> str:
    lines = []
    for t, w in top_rules(store, n):
        lines.append(f"{w:.3f}  {instantiate_template(t).render(vocab)}\n")
    return "".join(lines)


# ---------------------------------------------------------------------------
# Losses


def bce_loss(y_hat: np.ndarray, y: int) -> tuple[float, np.ndarray]:
    """Summed binary cross entropy against the one-hot target, and d/dy_hat."""
    y_hat = np.asarray(y_hat, dtype=float)
    target = np.zeros_like(y_hat)
    target[y] = 1.0
    clipped = np.clip(y_hat, BCE_EPS, 1.0 - BCE_EPS)
    loss = -np.sum(target * np.log(clipped) + (1.0 - target) * np.log(1.0 - clipped))
    inside = (y_hat > BCE_EPS) & (y_hat < 1.0 - BCE_EPS)
    grad = np.where(inside, -target / clipped + (1.0 - target) / (1.0 - clipped), 0.0)
    return float(loss), grad


def total_loss(bce, l_sl, w1: float = 1.0, w2: float = 1.0) -> float:
    """``w1 * bce + w2 * l_sl`` averaged over the batch (scalars are a batch of one)."""
    if w1 < 0 or w2 < 0:
        raise ValueError("loss weights must be nonnegative")
    bce = np.atleast_1d(np.asarray(bce, dtype=float))
    l_sl = np.atleast_1d(np.asarray(l_sl, dtype=float))
    return float(np.mean(w1 * bce + w2 * l_sl))


# ---------------------------------------------------------------------------
# Adam


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def like(cls, params: np.ndarray, lr: float, **kw) -> "OptimizerState":
        return cls(np.zeros_like(params, dtype=float), np.zeros_like(params, dtype=float), lr, **kw)


def adam_step(
    state: OptimizerState, params: np.ndarray, grads: np.ndarray,
    lower: float | None = None, upper: float | None = None,
) -> np.ndarray:
    """Bias-corrected Adam update in place; optional clamp of the result."""
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ValueError(f"shape mismatch: params {params.shape}, grads {grads.shape}, "
                         f"state {state.m.shape}")
    state.step += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grads
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    params -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    if lower is not None or upper is not None:
        np.clip(params, lower, upper, out=params)
    return params


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainConfig:
    w1: float = 1.0
    w2: float = 1.0
    w_result_ic: float = 0.1
    w_rule_ic: float = 0.01
    sample_n: int = 150
    top_n: int = 150
    batch_size: int = 16
    epochs: int = 20
    lr_rules: float = 1e-2
    lr_facts: float = 1e-5
    toggle_every: int = 10
    topk: int | None = 3
    max_iters: int = DEFAULT_MAX_ITERS
    init_high: float = 0.1
    learn_facts: bool = False
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        for name in ("w1", "w2", "w_result_ic", "w_rule_ic", "lr_rules", "lr_facts"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.batch_size < 1 or self.toggle_every < 1:
            raise ValueError("batch_size and toggle_every must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class Constraints:
    result_ics: Sequence[ResultIC] = ()
    rule_ics: Sequence[RuleIC] = ()


@dataclass
class TrainResult:
    store: RuleWeightStore
    metrics: list[dict]
    batch_losses: list[float]
    rule_opt: OptimizerState
    fact_opt: OptimizerState
    fact_probs: np.ndarray


def _weighted_rules(
    templates: Sequence[RuleTemplate], store: RuleWeightStore, fixed: Sequence[Rule]
) -> list[tuple[Rule, float | None]]:
    rules: list[tuple[Rule, float | None]] = [(r, None) for r in fixed]
    for t, w in sorted(store.fixed.items()):
        rules.append((instantiate_template(t), w))
    rules.extend((instantiate_template(t), store[t]) for t in templates)
    return rules


def _sample_step(args):
    """Forward + backward for one sample; module level so processes can run it."""
    sample, rules, constraints, config, want_grad, vocab = args
    y, l_sl, trace = forward(
        sample, rules, constraints.result_ics, constraints.rule_ics, config.topk,
        max_iters=config.max_iters, w_result_ic=config.w_result_ic,
        w_rule_ic=config.w_rule_ic, vocab=vocab,
    )
    bce, dy = bce_loss(y, sample.answer)
    fact_g, rule_g = {}, None
    if want_grad:
        fact_g, rule_g = backward(trace, config.w1 * dy, config.w2)
    return y, bce, l_sl, fact_g, rule_g


class _Runner:
    def __init__(self, threads: int):
        self.pool = ProcessPoolExecutor(threads) if threads > 1 else None

    def map(self, fn, items):
        if self.pool is None:
            return [fn(x) for x in items]
        return list(self.pool.map(fn, items, chunksize=max(1, len(items) // 8)))

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()


def _fact_layout(dataset: Sequence[Sample]) -> tuple[np.ndarray, list[slice]]:
    probs, slices, pos = [], [], 0
    for s in dataset:
        probs.extend(p for *_, p in s.facts)
        slices.append(slice(pos, pos + len(s.facts)))
        pos += len(s.facts)
    return np.array(probs, dtype=float), slices


def train(
    dataset: Sequence[Sample],
    config: TrainConfig,
    constraints: Constraints = Constraints(),
    priors: dict[RuleTemplate, float] | None = None,
    fixed_rules: Sequence[Rule] = (),
    on_epoch=None,
    vocab: Vocabulary = KINSHIP,
) -> TrainResult:
    """Alternate rule-weight and fact-probability Adam steps over batches.

    The two optimizers take turns every ``config.toggle_every`` batches,
    rules first.  Fact probabilities only move when ``learn_facts`` is set.
    """
    if not dataset:
        raise TrainingError("empty training set")
    rng = np.random.default_rng(config.seed)
    store = init_rule_weights(priors or {}, rng, len(vocab), high=config.init_high)
    params = store.composite.reshape(-1)
    rule_opt = OptimizerState.like(params, config.lr_rules)
    fact_probs, fact_slices = _fact_layout(dataset)
    fact_opt = OptimizerState.like(fact_probs, config.lr_facts)
    metrics: list[dict] = []
    batch_losses: list[float] = []
    runner = _Runner(config.threads)
    batch_no = 0
    try:
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(len(dataset))
            ep_loss, ep_hits = [], []
            ep_k: dict[int, list[int]] = {}
            for start in range(0, len(order), config.batch_size):
                idx = order[start : start + config.batch_size]
                rule_phase = (batch_no // config.toggle_every) % 2 == 0
                batch_no += 1
                templates = sample_rules(store, config.sample_n, rng)
                rules = _weighted_rules(templates, store, fixed_rules)
                batch = []
                for i in idx:
                    s = dataset[i]
                    if config.learn_facts:
                        ps = fact_probs[fact_slices[i]]
                        s = dataclasses.replace(
                            s, facts=tuple((r, a, b, float(p)) for (r, a, b, _), p in zip(s.facts, ps))
                        )
                    batch.append(s)
                want_grad = rule_phase or config.learn_facts
                outs = runner.map(
                    _sample_step, [(s, rules, constraints, config, want_grad, vocab) for s in batch]
                )
                losses = []
                rule_grad = np.zeros(len(rules))
                fact_grad = np.zeros_like(fact_probs)
                for i, s, (y, bce, l_sl, fg, rg) in zip(idx, batch, outs):
                    loss = config.w1 * bce + config.w2 * l_sl
                    if not math.isfinite(loss):
                        raise TrainingError(
                            f"non-finite loss at epoch {epoch}, batch {batch_no}: "
                            f"bce={bce}, l_sl={l_sl}, y_hat={y.tolist()}"
                        )
                    losses.append(loss)
                    hit = int(predict(y) == s.answer)
                    ep_hits.append(hit)
                    ep_k.setdefault(s.k, []).append(hit)
                    if rg is not None:
                        rule_grad += rg
                    if config.learn_facts and fg:
                        sl = fact_slices[i]
                        for j, (r, a, b, _) in enumerate(s.facts):
                            fact_grad[sl.start + j] += fg.get((r, a, b), 0.0)
                batch_loss = total_loss(losses, 0.0, 1.0, 0.0)
                batch_losses.append(batch_loss)
                ep_loss.extend(losses)
                n = len(batch)
                if rule_phase:
                    dense = np.zeros_like(params)
                    n_fixed = len(rules) - len(templates)
                    for t, g in zip(templates, rule_grad[n_fixed:]):
                        w = store[t]
                        if 0.0 < w < 1.0:
                            dense[np.ravel_multi_index(t.args, store.composite.shape)] += g / n
                    adam_step(rule_opt, params, dense, lower=0.0)
                elif config.learn_facts:
                    adam_step(fact_opt, fact_probs, fact_grad / n, lower=0.0, upper=1.0)
            record = {
                "epoch": epoch,
                "split": "train",
                "loss": float(np.mean(ep_loss)),
                "accuracy": float(np.mean(ep_hits)),
                "per_k": {str(k): float(np.mean(v)) for k, v in sorted(ep_k.items())},
            }
            metrics.append(record)
            log.info("epoch %d loss %.4f acc %.4f", epoch, record["loss"], record["accuracy"])
            if on_epoch is not None:
                on_epoch(record)
    finally:
        runner.close()
    return TrainResult(store, metrics, batch_losses, rule_opt, fact_opt, fact_probs)


def _eval_step(args):
    sample, rules, config, vocab = args
    y, _, _ = forward(sample, rules, (), (), config.topk, max_iters=config.max_iters, vocab=vocab)
    return y


def evaluate(
    dataset: Sequence[Sample],
    store: RuleWeightStore,
    config: TrainConfig = TrainConfig(),
    fixed_rules: Sequence[Rule] = (),
    vocab: Vocabulary = KINSHIP,
) -> dict:
    """Accuracy of the top ``config.top_n`` rules, overall and per chain length."""
    chosen = [t for t, w in top_rules(store, config.top_n) if w > 0]
    rules = _weighted_rules(chosen, store, fixed_rules)
    runner = _Runner(config.threads)
    try:
        ys = runner.map(_eval_step, [(s, rules, config, vocab) for s in dataset])
    finally:
        runner.close()
    per_k: dict[int, list[int]] = {}
    for s, y in zip(dataset, ys):
        per_k.setdefault(s.k, []).append(int(predict(y) == s.answer))
    hits = [h for v in per_k.values() for h in v]
    return {
        "overall": float(np.mean(hits)) if hits else float("nan"),
        "n": len(hits),
        "per_k": {k: float(np.mean(v)) for k, v in sorted(per_k.items())},
        "count_k": {k: len(v) for k, v in sorted(per_k.items())},
    }


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, store: RuleWeightStore, rule_opt: OptimizerState | None = None,
                    vocab: Vocabulary = KINSHIP) -> None:
    arrays = {
        "version": np.array(CHECKPOINT_VERSION),
        "relations": np.array(json.dumps(list(vocab.names))),
        "composite": store.composite,
        "fixed": np.array(json.dumps(
            [[t.kind.value, list(t.args), w] for t, w in sorted(store.fixed.items())]
        )),
    }
    if rule_opt is not None:
        arrays.update(
            opt_m=rule_opt.m, opt_v=rule_opt.v,
            opt_meta=np.array([rule_opt.lr, rule_opt.beta1, rule_opt.beta2, rule_opt.eps,
                               rule_opt.step]),
        )
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path, vocab: Vocabulary = KINSHIP) -> tuple[RuleWeightStore, OptimizerState | None]:
    with np.load(path, allow_pickle=False) as data:
        version = int(data["version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        names = json.loads(str(data["relations"]))
        if tuple(names) != vocab.names:
            raise ValueError("checkpoint relation vocabulary differs from the program's")
        store = RuleWeightStore(data["composite"].astype(float))
        for kind, args, w in json.loads(str(data["fixed"])):
            store.fixed[RuleTemplate(TemplateKind(kind), tuple(args))] = float(w)
        opt = None
        if "opt_m" in data:
            lr, b1, b2, eps, step = data["opt_meta"].tolist()
            opt = OptimizerState(data["opt_m"].copy(), data["opt_v"].copy(), lr, b1, b2, eps, int(step))
    return store, opt
