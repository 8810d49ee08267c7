"""The AMC attention hierarchy: query embeddings, VAN, LAN, MTN and the score.

All network functions operate on a leading batch axis of P (query, image)
pairs so training and evaluation stay vectorised; the single-pair helpers at
the bottom wrap them for direct use.  Parameters may be plain arrays (fast,
untracked) or :class:`~amc.tensor.Var` leaves on a tape.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import DimensionError

MODALITIES = ("img-only", "key-only", "late-fusion", "full")

PARAM_NAMES = ("W_qm", "b_qm", "W_qm_intent", "b_qm_intent", "W_v",
               "W_qs", "b_qs", "W_ql", "W_kl", "W_l")
FUSION_NAMES = ("w_1", "w_2")


@dataclass(frozen=True)
class AmcHyperparams:
    d_q: int
    d_v: int
    d_k: int
    d: int = 80
    r: int = 3
    modality: str = "full"

    def __post_init__(self):
        for name in ("d_q", "d_v", "d_k", "d", "r"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not (self.d < self.d_q and self.d < self.d_k):
            raise ValueError(f"embedding dim d={self.d} must be below d_q={self.d_q} and d_k={self.d_k}")
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality config {self.modality!r}; expected one of {MODALITIES}")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        d = self.d
        shapes = {
            "W_qm": (self.d_q, d), "b_qm": (d,),
            "W_qm_intent": (self.d_q, d), "b_qm_intent": (d,),
            "W_v": (self.d_v, d),
            "W_qs": (self.d_q, d), "b_qs": (d,),
            "W_ql": (self.d_q, d), "W_kl": (self.d_k, d), "W_l": (d, d),
        }
        if self.modality == "late-fusion":
            shapes["w_1"] = ()
            shapes["w_2"] = ()
        return shapes

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class AmcParams:
    """Named trainable tensors; ``tensors`` keeps PARAM_NAMES order (+ fusion weights)."""

    tensors: dict[str, np.ndarray]

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def copy(self) -> "AmcParams":
        return AmcParams({k: v.copy() for k, v in self.tensors.items()})

    def validate(self, hp: AmcHyperparams) -> None:
        shapes = hp.param_shapes()
        if list(self.tensors) != list(shapes):
            raise ValueError(f"parameter names {list(self.tensors)} != expected {list(shapes)}")
        for name, shape in shapes.items():
            arr = self.tensors[name]
            if arr.shape != shape:
                raise DimensionError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")

    def equal(self, other: "AmcParams") -> bool:
        """Bit-identical comparison."""
        if list(self.tensors) != list(other.tensors):
            return False
        return all(a.shape == b.shape and a.tobytes() == b.tobytes()
                   for a, b in zip(self.tensors.values(), other.tensors.values()))


def init_params(hp: AmcHyperparams, seed: int) -> AmcParams:
    """Glorot-uniform weights, zero biases, fusion weights at 0.5."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in hp.param_shapes().items():
        if name in FUSION_NAMES:
            tensors[name] = np.array(0.5)
        elif len(shape) == 1:
            tensors[name] = np.zeros(shape)
        else:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            tensors[name] = rng.uniform(-limit, limit, size=shape)
    return AmcParams(tensors)


@dataclass(frozen=True)
class KeywordMask:
    """Which rows of a (possibly padded) keyword matrix are real keywords."""

    active: np.ndarray  # bool, shape (n,) or (P, n)

    @property
    def n_active(self):
        return self.active.sum(axis=-1)

    @classmethod
    def full(cls, n: int) -> "KeywordMask":
        return cls(np.ones(n, dtype=bool))


# --------------------------------------------------------------------------
# batched network pieces
# --------------------------------------------------------------------------

def _check(arr, shape, what):
    if arr.shape != shape:
        raise DimensionError(f"{what} has shape {arr.shape}, expected {shape}")


def embed_query_batch(Q, params, which="main"):
    if which == "main":
        W, b = params["W_qm"], params["b_qm"]
    elif which == "intent":
        W, b = params["W_qm_intent"], params["b_qm_intent"]
    else:
        raise ValueError(f"which must be 'main' or 'intent', got {which!r}")
    return T.relu(T.add_bias(T.matmul(Q, W), b))


def van_batch(Q, V, params, hp: AmcHyperparams):
    """Visual intra-attention.  V is (P, r*r, d_v); returns (v_q, M) with M (P, r*r)."""
    P, cells, _ = V.shape
    _check(V, (P, hp.r * hp.r, hp.d_v), "image map")
    v_proj = T.reshape(T.matmul(V.reshape(P * cells, hp.d_v), params["W_v"]), (P, cells, hp.d))
    kernel = T.relu(T.add_bias(T.matmul(Q, params["W_qs"]), params["b_qs"]))
    logits = T.sum_(T.mul(v_proj, T.reshape(kernel, (P, 1, hp.d))), axis=2)
    M = T.softmax(logits, axis=1)
    v_q = T.avg_pool(T.mul(v_proj, T.reshape(M, (P, cells, 1))), axis=1)
    return v_q, M


def lan_batch(Q, K, active, params, hp: AmcHyperparams):
    """Language intra-attention.  K is (P, n, d_k) with boolean ``active`` (P, n)."""
    P, n, _ = K.shape
    _check(K, (P, n, hp.d_k), "keyword matrix")
    if n == 0:
        return np.zeros((P, hp.d)), np.zeros((P, 0))
    k_proj = T.reshape(T.matmul(K.reshape(P * n, hp.d_k), params["W_kl"]), (P, n, hp.d))
    q_bil = T.matmul(T.matmul(Q, params["W_ql"]), params["W_l"])
    s = T.sum_(T.mul(k_proj, T.reshape(q_bil, (P, 1, hp.d))), axis=2)
    p = T.softmax(s, axis=1, mask=active)
    k_q = T.sum_(T.mul(k_proj, T.reshape(p, (P, n, 1))), axis=1)
    return k_q, p


def mtn_batch(q_intent, v_q, k_q, k_present):
    """Inter-attention over the two modalities.

    ``k_present`` (P,) bool; when False the keyword modality is absent and gets
    zero weight.  Returns (x_q, p_v, p_k, c_v, c_k).
    """
    c_v = T.cosine(q_intent, v_q, axis=1)
    c_k = T.cosine(q_intent, k_q, axis=1)
    c = T.stack([c_v, c_k], axis=1)
    present = np.stack([np.ones_like(k_present, dtype=bool), np.asarray(k_present, dtype=bool)], axis=1)
    pm = T.softmax(c, axis=1, mask=present)
    P = present.shape[0]
    p_v = T.take(pm, 0, axis=1)
    p_k = T.take(pm, 1, axis=1)
    x_q = T.add(T.mul(v_q, T.reshape(p_v, (P, 1))), T.mul(k_q, T.reshape(p_k, (P, 1))))
    return x_q, p_v, p_k, c_v, c_k


@dataclass
class BatchForward:
    """Everything a batched forward produced; entries are arrays or Vars."""

    score: object
    q_m: object = None
    q_intent: object = None
    v_q: object = None
    M: object = None
    k_q: object = None
    p: object = None
    c_v: object = None
    c_k: object = None
    p_v: object = None
    p_k: object = None
    x_q: object = None
    extras: dict = field(default_factory=dict)


def forward_batch(Q, V, K, active, params, hp: AmcHyperparams) -> BatchForward:
    """Score P (query, image) pairs under the configured modality set.

    Q (P, d_q), V (P, r*r, d_v), K (P, n, d_k), active (P, n) bool.
    Branches unused by the configuration are never evaluated.
    """
    Q = np.asarray(Q, dtype=np.float64)
    P = Q.shape[0]
    _check(Q, (P, hp.d_q), "query batch")
    q_m = embed_query_batch(Q, params, "main")
    out = BatchForward(score=None, q_m=q_m)
    mode = hp.modality
    if mode in ("img-only", "late-fusion", "full"):
        out.v_q, out.M = van_batch(Q, np.asarray(V, dtype=np.float64), params, hp)
    if mode in ("key-only", "late-fusion", "full"):
        K = np.asarray(K, dtype=np.float64)
        active = np.asarray(active, dtype=bool)
        out.k_q, out.p = lan_batch(Q, K, active, params, hp)
    if mode == "img-only":
        out.score = T.cosine(q_m, out.v_q, axis=1)
    elif mode == "key-only":
        out.score = T.cosine(q_m, out.k_q, axis=1)
    elif mode == "late-fusion":
        s_v = T.cosine(q_m, out.v_q, axis=1)
        s_k = T.cosine(q_m, out.k_q, axis=1)
        out.extras.update(s_v=s_v, s_k=s_k)
        out.score = T.combine([params["w_1"], params["w_2"]], [s_v, s_k])
    else:
        out.q_intent = embed_query_batch(Q, params, "intent")
        present = active.any(axis=1) if active.ndim == 2 else np.full(P, bool(active.any()))
        out.x_q, out.p_v, out.p_k, out.c_v, out.c_k = mtn_batch(out.q_intent, out.v_q, out.k_q, present)
        out.score = T.cosine(q_m, out.x_q, axis=1)
    return out


# --------------------------------------------------------------------------
# single-pair API
# --------------------------------------------------------------------------

@dataclass
class ForwardTrace:
    """Every intermediate of one (query, image) forward pass (None if unused)."""

    q_m: np.ndarray
    q_intent: np.ndarray | None
    v_proj: np.ndarray | None
    s_q: np.ndarray | None
    M: np.ndarray | None
    v_q: np.ndarray | None
    keyword_scores: np.ndarray | None
    p: np.ndarray | None
    k_q: np.ndarray | None
    c_v: float | None
    c_k: float | None
    p_v: float | None
    p_k: float | None
    x_q: np.ndarray | None


def _vec(x, n, what):
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape != (n,):
        raise DimensionError(f"{what} has shape {arr.shape}, expected ({n},)")
    return arr


def embed_query(q, params, which="main"):
    q = np.asarray(q, dtype=np.float64)
    W = params["W_qm"] if which == "main" else params["W_qm_intent"]
    q = _vec(q, T.value_of(W).shape[0], "query")
    out = embed_query_batch(q[None, :], params, which)
    return out[0] if isinstance(out, np.ndarray) else T.reshape(out, (out.shape[1],))


def _grid(v, hp):
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (hp.r, hp.r, hp.d_v):
        raise DimensionError(f"image map has shape {v.shape}, expected {(hp.r, hp.r, hp.d_v)}")
    return v.reshape(1, hp.r * hp.r, hp.d_v)


def van_forward(q, v, params, hp: AmcHyperparams):
    """Returns (v_q (d,), M (r, r))."""
    q = _vec(q, hp.d_q, "query")
    v_q, M = van_batch(q[None, :], _grid(v, hp), params, hp)
    return T.value_of(v_q)[0], T.value_of(M)[0].reshape(hp.r, hp.r)


def _keywords(K, mask, hp):
    K = np.asarray(K, dtype=np.float64)
    if K.ndim != 2 or K.shape[1] != hp.d_k:
        raise DimensionError(f"keyword matrix has shape {K.shape}, expected (n, {hp.d_k})")
    active = np.ones(K.shape[0], dtype=bool) if mask is None else np.asarray(mask.active, dtype=bool)
    if active.shape != (K.shape[0],):
        raise DimensionError(f"mask length {active.shape} != keyword rows {K.shape[0]}")
    return K, active


def lan_forward(q, K, mask: KeywordMask | None, params, hp: AmcHyperparams):
    """Returns (k_q (d,), p (n,), present).

    With no active keyword, k_q is the zero vector, p is empty and ``present``
    is False so the inter-attention can drop the modality.
    """
    q = _vec(q, hp.d_q, "query")
    K, active = _keywords(K, mask, hp)
    if not active.any():
        return np.zeros(hp.d), np.zeros(0), False
    k_q, p = lan_batch(q[None, :], K[None], active[None], params, hp)
    return T.value_of(k_q)[0], T.value_of(p)[0], True


def mtn_forward(q_intent, v_q, k_q, k_present: bool = True):
    """Returns (x_q, p_v, p_k)."""
    q_intent, v_q, k_q = (np.asarray(a, dtype=np.float64) for a in (q_intent, v_q, k_q))
    if not (q_intent.shape == v_q.shape == k_q.shape and q_intent.ndim == 1):
        raise DimensionError(f"MTN inputs must be equal-length vectors: {q_intent.shape}, {v_q.shape}, {k_q.shape}")
    x_q, p_v, p_k, _, _ = mtn_batch(q_intent[None], v_q[None], k_q[None], np.array([k_present]))
    return x_q[0], float(p_v[0]), float(p_k[0])


def score(q, v, K, params, hp: AmcHyperparams, mask: KeywordMask | None = None):
    """Relevance of one image (map ``v`` with keywords ``K``) to query ``q``.

    Returns (score, ForwardTrace).
    """
    params = params.tensors if isinstance(params, AmcParams) else params
    q = _vec(q, hp.d_q, "query")
    Vb = _grid(v, hp)
    K, active = _keywords(K, mask, hp)
    fb = forward_batch(q[None], Vb, K[None], active[None], params, hp)
    s = float(fb.score[0])
    Q1 = q[None]

    def first(x):
        return None if x is None else np.asarray(x)[0]

    v_proj = s_q = kw_scores = None
    if fb.v_q is not None:
        v_proj = (Vb[0] @ params["W_v"]).reshape(hp.r, hp.r, hp.d)
        s_q = np.maximum(Q1 @ params["W_qs"] + params["b_qs"], 0.0)[0]
    if fb.k_q is not None and K.shape[0]:
        kw_scores = ((q @ params["W_ql"]) @ params["W_l"]) @ (K @ params["W_kl"]).T
    trace = ForwardTrace(
        q_m=first(fb.q_m), q_intent=first(fb.q_intent), v_proj=v_proj, s_q=s_q,
        M=None if fb.M is None else fb.M[0].reshape(hp.r, hp.r),
        v_q=first(fb.v_q), keyword_scores=kw_scores, p=first(fb.p), k_q=first(fb.k_q),
        c_v=None if fb.c_v is None else float(fb.c_v[0]),
        c_k=None if fb.c_k is None else float(fb.c_k[0]),
        p_v=None if fb.p_v is None else float(fb.p_v[0]),
        p_k=None if fb.p_k is None else float(fb.p_k[0]),
        x_q=first(fb.x_q),
    )
    return s, trace


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

CHECKPOINT_MAGIC = "AMC-CHECKPOINT-1"


def save_checkpoint(path, params: AmcParams, hp: AmcHyperparams) -> None:
    """One JSON manifest line followed by little-endian float64 payloads."""
    params.validate(hp)
    entries, offset, blobs = [], 0, []
    for name, arr in params.tensors.items():
        blob = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        offset += len(blob)
        blobs.append(blob)
    manifest = {"format": CHECKPOINT_MAGIC, "hyperparams": hp.to_dict(), "tensors": entries}
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=True).encode("utf-8") + b"\n")
        for blob in blobs:
            fh.write(blob)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[AmcParams, AmcHyperparams]:
    raw = Path(path).read_bytes()
    head, sep, payload = raw.partition(b"\n")
    if not sep:
        raise ValueError(f"{path}: missing checkpoint manifest")
    try:
        manifest = json.loads(head.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: unreadable checkpoint manifest ({exc})") from None
    if manifest.get("format") != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an AMC checkpoint")
    hp = AmcHyperparams(**manifest["hyperparams"])
    tensors = {}
    for e in manifest["tensors"]:
        chunk = payload[e["offset"]:e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise ValueError(f"{path}: truncated payload for {e['name']}")
        tensors[e["name"]] = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(e["shape"])
    params = AmcParams(tensors)
    params.validate(hp)
    return params, hp
