"""Ranking losses, click-through tuple sampling and the Adam training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .data import DatasetBundle
from .model import AmcHyperparams, AmcParams, forward_batch, init_params

log = logging.getLogger(__name__)

LOSS_MODES = ("pairwise", "bidirectional")


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name):
        super().__init__(f"non-finite gradient for parameter {name}; step aborted")
        self.name = name


class InsufficientNegativesError(ValueError):
    pass


@dataclass(frozen=True)
class ClickTuple:
    query: str
    positive: str
    negatives: tuple[str, ...]

    def __post_init__(self):
        if len(self.negatives) < 1:
            raise ValueError("a click tuple needs at least one negative")


@dataclass(frozen=True)
class CaptionTuple:
    caption: str
    image: str
    neg_captions: tuple[str, ...]
    neg_images: tuple[str, ...]


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 1.0
    t: int = 1
    batch_size: int = 128
    epochs: int = 10
    loss_mode: str = "pairwise"
    k_neg: int = 1
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    seed: int = 0
    clip_norm: float | None = None
    tuples_per_query: int = 1

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.t < 1 or self.k_neg < 1:
            raise ValueError("t and k_neg must be >= 1")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.batch_size < 1 or self.epochs < 0 or self.tuples_per_query < 1:
            raise ValueError("batch_size and tuples_per_query must be >= 1, epochs >= 0")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")
        if self.lr <= 0 or self.eps_adam <= 0:
            raise ValueError("lr and eps_adam must be positive")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive when set")


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------

def _by_query(click_log) -> dict[str, list[tuple[str, int]]]:
    if isinstance(click_log, Mapping):
        return {q: list(v) for q, v in click_log.items()}
    out: dict[str, list[tuple[str, int]]] = {}
    for qid, iid, c in click_log:
        out.setdefault(qid, []).append((iid, c))
    return out


def sample_tuples(click_log, t: int, seed: int, epoch: int,
                  image_pool: Sequence[str] | None = None) -> tuple[list[ClickTuple], int]:
    """One tuple per query: the most-clicked image against t lower-clicked ones.

    Negatives are drawn uniformly without replacement from the query's own
    images with strictly fewer clicks, topped up from ``image_pool`` (excluding
    everything listed for the query).  Returns (tuples, number of skipped queries).
    """
    rng = np.random.default_rng([seed, epoch])
    by_q = _by_query(click_log)
    pool = sorted(image_pool) if image_pool is not None else []
    tuples, skipped = [], 0
    for qid in sorted(by_q):
        rows = sorted(by_q[qid])
        top = max(c for _, c in rows)
        if top <= 0:
            skipped += 1
            continue
        positive = min(i for i, c in rows if c == top)
        lower = [i for i, c in rows if c < top]
        if len(lower) >= t:
            chosen = [lower[j] for j in rng.choice(len(lower), size=t, replace=False)]
        else:
            listed = {i for i, _ in rows}
            extra = [i for i in pool if i not in listed]
            need = t - len(lower)
            if len(extra) < need:
                skipped += 1
                continue
            chosen = lower + [extra[j] for j in rng.choice(len(extra), size=need, replace=False)]
        tuples.append(ClickTuple(qid, positive, tuple(chosen)))
    if skipped:
        log.warning("sample_tuples skipped %d queries without usable negatives", skipped)
    return tuples, skipped


def caption_pairs(bundle: DatasetBundle) -> list[tuple[str, str]]:
    """True (caption, image) matches: every click row with a positive count."""
    return sorted((q, i) for q, i, c in bundle.clicks if c > 0)


def sample_caption_negatives(pairs: Sequence[tuple[str, str]], k_neg: int, rng) -> list[CaptionTuple]:
    """k_neg non-matching captions and k_neg non-matching images per true pair."""
    captions = sorted({c for c, _ in pairs})
    images = sorted({i for _, i in pairs})
    match = set(pairs)
    out = []
    for cap, img in pairs:
        neg_c = [c for c in captions if (c, img) not in match]
        neg_i = [i for i in images if (cap, i) not in match]
        if len(neg_c) < k_neg or len(neg_i) < k_neg:
            raise InsufficientNegativesError(
                f"pair ({cap}, {img}) has only {len(neg_c)} negative captions and {len(neg_i)} "
                f"negative images; use k_neg <= {min(len(neg_c), len(neg_i))}")
        nc = tuple(neg_c[j] for j in rng.choice(len(neg_c), size=k_neg, replace=False))
        ni = tuple(neg_i[j] for j in rng.choice(len(neg_i), size=k_neg, replace=False))
        out.append(CaptionTuple(cap, img, nc, ni))
    return out


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def score_pairs(bundle: DatasetBundle, query_ids, image_ids, params, hp: AmcHyperparams):
    Q, V, K, act = bundle.gather(query_ids, image_ids)
    return forward_batch(Q, V, K, act, params, hp).score


def batch_ranking_loss(tuples: Sequence[ClickTuple], bundle: DatasetBundle, params, hp: AmcHyperparams,
                       margin: float):
    """Sum over tuples and negatives of max(0, margin - s(q, x+) + s(q, x-))."""
    if not tuples:
        raise ValueError("empty tuple batch")
    t = len(tuples[0].negatives)
    if any(len(tp.negatives) != t for tp in tuples):
        raise ValueError("all tuples in a batch need the same number of negatives")
    qs, ims = [], []
    for tp in tuples:
        qs.extend([tp.query] * (1 + t))
        ims.append(tp.positive)
        ims.extend(tp.negatives)
    B = len(tuples)
    S = T.reshape(score_pairs(bundle, qs, ims, params, hp), (B, 1 + t))
    pos = T.reshape(T.take(S, 0, axis=1), (B, 1))
    neg = T.take(S, np.arange(1, 1 + t), axis=1)
    slack = T.add(T.sub(neg, pos), margin)
    return T.sum_(T.hinge(slack))


def ranking_loss(tp: ClickTuple, bundle: DatasetBundle, params, hp: AmcHyperparams, margin: float):
    return batch_ranking_loss([tp], bundle, params, hp, margin)


def caption_ranking_loss(tuples: Sequence[CaptionTuple], bundle: DatasetBundle, params,
                         hp: AmcHyperparams, margin: float):
    """Both hinge directions: negative captions against each image, negative images against each caption."""
    if not tuples:
        raise ValueError("empty caption batch")
    k = len(tuples[0].neg_captions)
    B = len(tuples)
    qs, ims = [], []
    for tp in tuples:
        if len(tp.neg_captions) != k or len(tp.neg_images) != k:
            raise ValueError("all caption tuples need the same k_neg")
        qs.append(tp.caption)
        ims.append(tp.image)
        qs.extend(tp.neg_captions)
        ims.extend([tp.image] * k)
        qs.extend([tp.caption] * k)
        ims.extend(tp.neg_images)
    S = T.reshape(score_pairs(bundle, qs, ims, params, hp), (B, 1 + 2 * k))
    pos = T.reshape(T.take(S, 0, axis=1), (B, 1))
    neg = T.take(S, np.arange(1, 1 + 2 * k), axis=1)
    return T.sum_(T.hinge(T.add(T.sub(neg, pos), margin)))


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: AmcParams) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in params.tensors.items()},
                   {k: np.zeros_like(a) for k, a in params.tensors.items()}, 0)


def adam_step(params: AmcParams, grads: Mapping[str, np.ndarray], state: AdamState,
              config: TrainConfig) -> tuple[AmcParams, AdamState]:
    """Bias-corrected Adam; returns new params and state, inputs untouched."""
    for name in params.tensors:
        g = grads[name]
        if g.shape != params[name].shape:
            raise T.DimensionError(f"gradient for {name} has shape {g.shape}, expected {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    if config.clip_norm is not None:
        total = np.sqrt(sum(float(np.sum(grads[n] ** 2)) for n in params.tensors))
        factor = min(1.0, config.clip_norm / total) if total > 0 else 1.0
        grads = {n: grads[n] * factor for n in params.tensors}
    step = state.step + 1
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1 ** step
    bc2 = 1.0 - b2 ** step
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.tensors.items():
        g = grads[name]
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        new_m[name], new_v[name] = m, v
        new_p[name] = p - config.lr * (m / bc1) / (np.sqrt(v / bc2) + config.eps_adam)
    return AmcParams(new_p), AdamState(new_m, new_v, step)


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------

def loss_and_grads(loss_fn: Callable, params: AmcParams):
    """Evaluate ``loss_fn(tracked_params)`` on a fresh tape; returns (loss, grads by name)."""
    tape = T.Tape()
    tracked = {name: tape.leaf(arr) for name, arr in params.tensors.items()}
    loss = loss_fn(tracked)
    grads = T.backward(tape, loss)
    return float(loss.value), {name: grads[v] for name, v in tracked.items()}


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    held_out_loss: float | None = None

    def line(self) -> str:
        cols = [str(self.epoch), repr(self.train_loss)]
        if self.held_out_loss is not None:
            cols.append(repr(self.held_out_loss))
        return "\t".join(cols)


@dataclass
class TrainResult:
    params: AmcParams
    log: list[EpochLog] = field(default_factory=list)
    skipped: int = 0

    def loss_log_text(self) -> str:
        return "".join(e.line() + "\n" for e in self.log)


def epoch_tuples(bundle: DatasetBundle, config: TrainConfig, epoch: int, click_log=None):
    """Tuples (or caption tuples) used in one epoch, in training order."""
    clicks = bundle.clicks if click_log is None else click_log
    if config.loss_mode == "bidirectional":
        pairs = caption_pairs(replace_clicks(bundle, clicks))
        rng = np.random.default_rng([config.seed, epoch, 2])
        items = sample_caption_negatives(pairs, config.k_neg, rng)
        skipped = 0
    else:
        items, skipped = [], 0
        for rep in range(config.tuples_per_query):
            batch, sk = sample_tuples(clicks, config.t, config.seed + 7919 * rep, epoch, list(bundle.images))
            items.extend(batch)
            skipped += sk
    order = np.random.default_rng([config.seed, epoch, 1]).permutation(len(items))
    return [items[i] for i in order], skipped


def replace_clicks(bundle: DatasetBundle, clicks) -> DatasetBundle:
    if clicks is bundle.clicks:
        return bundle
    return DatasetBundle(bundle.dims, bundle.queries, bundle.images, bundle.keywords, list(clicks), bundle.judgments)


def _batch_loss(items, bundle, params, hp, config):
    if config.loss_mode == "bidirectional":
        return caption_ranking_loss(items, bundle, params, hp, config.margin)
    return batch_ranking_loss(items, bundle, params, hp, config.margin)


def dataset_loss(bundle, params: AmcParams, hp, config: TrainConfig, epoch: int, click_log=None) -> float:
    """Mean per-tuple loss over one epoch's sample, without updating anything."""
    items, _ = epoch_tuples(bundle, config, epoch, click_log)
    if not items:
        return 0.0
    total = 0.0
    for start in range(0, len(items), config.batch_size):
        total += float(_batch_loss(items[start:start + config.batch_size], bundle, params.tensors, hp, config))
    return total / len(items)


def train(bundle: DatasetBundle, config: TrainConfig, hp: AmcHyperparams, seed: int | None = None,
          params: AmcParams | None = None, train_clicks=None, held_out_clicks=None,
          on_epoch: Callable[[int, AmcParams, EpochLog], None] | None = None) -> TrainResult:
    """Mini-batch Adam on the summed batch loss, one step per batch.

    The logged train loss is the mean per-tuple loss seen during the epoch.
    ``on_epoch`` runs after every epoch (checkpointing lives there).
    """
    if seed is not None:
        config = replace(config, seed=seed)
    if params is None:
        params = init_params(hp, config.seed)
    params.validate(hp)
    state = AdamState.zeros_like(params)
    result = TrainResult(params)
    for epoch in range(1, config.epochs + 1):
        items, skipped = epoch_tuples(bundle, config, epoch, train_clicks)
        result.skipped = skipped
        if not items:
            raise ValueError("no training tuples could be sampled")
        total = 0.0
        for start in range(0, len(items), config.batch_size):
            chunk = items[start:start + config.batch_size]
            loss, grads = loss_and_grads(lambda p: _batch_loss(chunk, bundle, p, hp, config), params)
            params, state = adam_step(params, grads, state, config)
            total += loss
        entry = EpochLog(epoch, total / len(items))
        if held_out_clicks is not None:
            entry.held_out_loss = dataset_loss(bundle, params, hp, config, epoch, held_out_clicks)
        result.log.append(entry)
        result.params = params
        log.info("epoch %d train_loss %.6f", epoch, entry.train_loss)
        if on_epoch is not None:
            on_epoch(epoch, params, entry)
    return result


def fit_items(items: Sequence, bundle: DatasetBundle, config: TrainConfig, hp: AmcHyperparams,
              params: AmcParams | None = None, stop_below: float | None = None) -> TrainResult:
    """Full-batch Adam on a fixed list of tuples (or caption tuples).

    Logs the summed loss per epoch and stops early once it drops below
    ``stop_below``.  Used for overfit sanity checks.
    """
    if params is None:
        params = init_params(hp, config.seed)
    params.validate(hp)
    state = AdamState.zeros_like(params)
    result = TrainResult(params)
    for epoch in range(1, config.epochs + 1):
        loss, grads = loss_and_grads(lambda p: _batch_loss(items, bundle, p, hp, config), params)
        result.log.append(EpochLog(epoch, loss))
        if stop_below is not None and loss < stop_below:
            break
        params, state = adam_step(params, grads, state, config)
        result.params = params
    return result


def split_clicks(clicks: Iterable[tuple[str, str, int]], held_out_fraction: float, seed: int):
    """Split a click log by query into (train, held-out) lists."""
    clicks = list(clicks)
    qids = sorted({q for q, _, _ in clicks})
    rng = np.random.default_rng([seed, 3])
    n_hold = int(round(held_out_fraction * len(qids)))
    held = set(np.array(qids)[rng.permutation(len(qids))[:n_hold]].tolist()) if n_hold else set()
    return [c for c in clicks if c[0] not in held], [c for c in clicks if c[0] in held]
