"""Finite-difference checks for every tape op and for the full ranking loss.

Inputs whose ReLU pre-activations or hinge slacks sit within ``kink`` of zero
are resampled, since central differences straddling a kink are meaningless.
So are samples whose loss is inactive or whose embeddings have a single live
unit, where the true gradient is zero and only round-off would be compared.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .data import DatasetBundle
from .model import PARAM_NAMES, AmcHyperparams, AmcParams, forward_batch, init_params
from .tensor import FeatureTensor, numeric_gradient, relative_error
from .training import ClickTuple, batch_ranking_loss, loss_and_grads

H = 1e-5
TOL = 1e-4
KINK = 1e-3


# --------------------------------------------------------------------------
# per-op checks
# --------------------------------------------------------------------------

def _away_from_zero(rng, shape, kink=KINK):
    x = rng.standard_normal(shape)
    # push entries out of the kink band, keeping sign
    return np.where(np.abs(x) < 10 * kink, np.sign(x + 1e-300) * (10 * kink + np.abs(x)), x)


def _op_cases(rng) -> dict[str, tuple[list[np.ndarray], Callable]]:
    """op name -> (inputs, builder taking tracked/untracked inputs to an output)."""
    a, b, c = (int(v) for v in rng.integers(1, 5, size=3))
    mask = rng.random((a, b)) < 0.7
    mask[:, 0] = True
    return {
        "matmul": ([rng.standard_normal((a, b)), rng.standard_normal((b, c))], lambda x, y: T.matmul(x, y)),
        "add": ([rng.standard_normal((a, b)), rng.standard_normal((1, b))], lambda x, y: T.add(x, y)),
        "add_bias": ([rng.standard_normal((a, b)), rng.standard_normal(b)], lambda x, y: T.add_bias(x, y)),
        "sub": ([rng.standard_normal((a, b)), rng.standard_normal((a, 1))], lambda x, y: T.sub(x, y)),
        "mul": ([rng.standard_normal((a, b, c)), rng.standard_normal((a, 1, c))], lambda x, y: T.mul(x, y)),
        "scale": ([rng.standard_normal((a, b))], lambda x: T.scale(x, 2.5)),
        "relu": ([_away_from_zero(rng, (a, b))], lambda x: T.relu(x)),
        "hinge": ([_away_from_zero(rng, (a, b))], lambda x: T.hinge(x)),
        "reshape": ([rng.standard_normal((a, b))], lambda x: T.reshape(x, (a * b,))),
        "sum": ([rng.standard_normal((a, b, c))], lambda x: T.sum_(x, axis=1)),
        "avg_pool": ([rng.standard_normal((a, b, c))], lambda x: T.avg_pool(x, axis=1)),
        "softmax": ([rng.standard_normal((a, b))], lambda x: T.softmax(x, axis=1, mask=mask)),
        "cosine": ([rng.standard_normal((a, c + 1)), rng.standard_normal((a, c + 1))],
                   lambda x, y: T.cosine(x, y, axis=1)),
        "take": ([rng.standard_normal((a, b + 1))], lambda x: T.take(x, np.arange(b), axis=1)),
        "stack": ([rng.standard_normal((a, b)), rng.standard_normal((a, b))],
                  lambda x, y: T.stack([x, y], axis=1)),
        "combine": ([rng.standard_normal(()), rng.standard_normal(()), rng.standard_normal(a),
                     rng.standard_normal(a)], lambda w1, w2, x, y: T.combine([w1, w2], [x, y])),
    }


OP_NAMES = tuple(_op_cases(np.random.default_rng(0)))


def check_op(name: str, seed: int, h: float = H) -> float:
    """Worst relative error over all inputs of one op at one random shape."""
    rng = np.random.default_rng([seed, OP_NAMES.index(name)])
    inputs, build = _op_cases(rng)[name]
    out_shape = np.shape(T.value_of(build(*inputs)))
    probe = rng.standard_normal(out_shape)

    def objective(*xs):
        return T.sum_(T.mul(build(*xs), probe))

    tape = T.Tape()
    leaves = [tape.leaf(x) for x in inputs]
    grads = T.backward(tape, objective(*leaves))
    worst = 0.0
    for i, x in enumerate(inputs):
        def f(xi, i=i):
            args = list(inputs)
            args[i] = xi
            return float(objective(*args))
        worst = max(worst, relative_error(grads[leaves[i]], numeric_gradient(f, x, h)))
    return worst


@dataclass
class OpReport:
    worst: dict[str, float]
    tol: float

    @property
    def failing(self) -> list[str]:
        return [name for name, err in self.worst.items() if not err < self.tol]

    @property
    def ok(self) -> bool:
        return not self.failing


def check_ops(n_shapes: int = 10, seed: int = 0, tol: float = TOL) -> OpReport:
    worst = {}
    for name in OP_NAMES:
        worst[name] = max(check_op(name, seed * 100_003 + s) for s in range(n_shapes))
    return OpReport(worst, tol)


# --------------------------------------------------------------------------
# full-model check
# --------------------------------------------------------------------------

GRADCHECK_HP = AmcHyperparams(d_q=7, d_v=5, d_k=6, d=4, r=3, modality="full")


def _tiny_bundle(rng, hp: AmcHyperparams, n: int, t: int) -> tuple[DatasetBundle, ClickTuple]:
    images = {f"i{j}": FeatureTensor(rng.standard_normal((hp.r, hp.r, hp.d_v))) for j in range(1 + t)}
    keywords = {iid: FeatureTensor(rng.standard_normal((n, hp.d_k))) for iid in images}
    queries = {"q": FeatureTensor(rng.standard_normal(hp.d_q))}
    clicks = [("q", iid, 1 + t - j) for j, iid in enumerate(images)]
    dims = {"d_q": hp.d_q, "d_v": hp.d_v, "d_k": hp.d_k, "r": hp.r}
    bundle = DatasetBundle(dims, queries, images, keywords, clicks)
    return bundle, ClickTuple("q", "i0", tuple(f"i{j}" for j in range(1, 1 + t)))


def _degenerate(bundle: DatasetBundle, tp: ClickTuple, params: AmcParams, hp: AmcHyperparams,
                margin: float, kink: float) -> bool:
    q = bundle.queries[tp.query].numpy()
    pre = [q @ params["W_qm"] + params["b_qm"], q @ params["W_qm_intent"] + params["b_qm_intent"],
           q @ params["W_qs"] + params["b_qs"]]
    if min(float(np.min(np.abs(p))) for p in pre) < kink:
        return True
    # a single live unit makes cosine scale-invariant in it: the true gradient is ~0
    # and the check would only compare round-off
    if min(int(np.count_nonzero(p > 0)) for p in pre) < 2:
        return True
    ids = [tp.positive, *tp.negatives]
    Q, V, K, act = bundle.gather([tp.query] * len(ids), ids)
    s = forward_batch(Q, V, K, act, params.tensors, hp).score
    slack = margin - s[0] + s[1:]
    # an all-inactive hinge would make every gradient trivially zero
    return bool(np.min(np.abs(slack)) < kink or np.max(slack) <= 0)


@dataclass
class ModelReport:
    worst: dict[str, float]
    worst_index: dict[str, tuple[int, ...]]
    tol: float
    seeds: int
    resampled: int = 0
    per_seed: list[dict[str, float]] = field(default_factory=list)

    @property
    def failing(self) -> list[str]:
        return [name for name, err in self.worst.items() if not err < self.tol]

    @property
    def ok(self) -> bool:
        return not self.failing

    def text(self) -> str:
        lines = ["tensor\tworst_rel_error\tindex\tstatus"]
        for name in self.worst:
            status = "ok" if self.worst[name] < self.tol else "FAIL"
            idx = ",".join(str(i) for i in self.worst_index[name]) or "-"
            lines.append(f"{name}\t{self.worst[name]:.3e}\t{idx}\t{status}")
        lines.append(f"seeds\t{self.seeds}\tresampled\t{self.resampled}")
        return "\n".join(lines) + "\n"


def check_model_seed(seed: int, hp: AmcHyperparams = GRADCHECK_HP, n: int = 3, t: int = 2,
                     margin: float = 1.0, h: float = H, kink: float = KINK, max_tries: int = 100):
    """(rel error per tensor, index of the worst entry per tensor, resample count) for one seed."""
    for attempt in range(max_tries):
        rng = np.random.default_rng([seed, attempt])
        bundle, tp = _tiny_bundle(rng, hp, n, t)
        params = init_params(hp, int(rng.integers(2**31)))
        # nonzero biases so the check exercises their adjoints too
        tensors = dict(params.tensors)
        for name in ("b_qm", "b_qm_intent", "b_qs"):
            tensors[name] = 0.1 * rng.standard_normal(tensors[name].shape)
        params = AmcParams(tensors)
        if not _degenerate(bundle, tp, params, hp, margin, kink):
            break
    else:
        raise RuntimeError(f"seed {seed}: no kink-free sample in {max_tries} tries")

    def loss(p):
        return batch_ranking_loss([tp], bundle, p, hp, margin)

    _, grads = loss_and_grads(loss, params)
    errs, where = {}, {}
    for name in PARAM_NAMES:
        def f(x, name=name):
            t_ = dict(params.tensors)
            t_[name] = x
            return float(loss(t_))
        num = numeric_gradient(f, params[name], h)
        errs[name] = relative_error(grads[name], num)
        diff = np.abs(grads[name] - num)
        where[name] = tuple(int(i) for i in np.unravel_index(np.argmax(diff), diff.shape)) if diff.size else ()
    return errs, where, attempt


def check_model(seeds: int = 20, base_seed: int = 0, tol: float = TOL, **kw) -> ModelReport:
    worst = {name: 0.0 for name in PARAM_NAMES}
    worst_index = {name: () for name in PARAM_NAMES}
    report = ModelReport(worst, worst_index, tol, seeds)
    for s in range(seeds):
        errs, where, resampled = check_model_seed(base_seed + s, **kw)
        report.resampled += resampled
        report.per_seed.append(errs)
        for name, e in errs.items():
            if e > worst[name]:
                worst[name], worst_index[name] = e, where[name]
    return report
