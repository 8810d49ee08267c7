"""Dataset bundles on disk and a synthetic click-log generator with planted relevance.

Bundle directory layout::

    header.txt      d_q / d_v / d_k / r, one ``key value`` per line
    queries.txt     <query id> <d_q decimals>
    images.txt      <image id> <r*r*d_v decimals, row-major (row, col, channel)>
    keywords.txt    <image id> <d_k decimals>, one keyword per line, grouped by image
    clicks.tsv      query id <TAB> image id <TAB> click count
    judgments.tsv   query id <TAB> image id <TAB> grade   (may be empty)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import FeatureTensor

HEADER_KEYS = ("d_q", "d_v", "d_k", "r")
BUNDLE_FILES = ("header.txt", "queries.txt", "images.txt", "keywords.txt", "clicks.tsv", "judgments.tsv")


class BundleError(ValueError):
    """A bundle file is missing or malformed."""

    def __init__(self, message, file=None, line=None):
        where = ""
        if file is not None:
            where = f"{file}:{line}: " if line is not None else f"{file}: "
        super().__init__(where + message)
        self.file = file
        self.line = line


@dataclass
class DatasetBundle:
    dims: dict[str, int]
    queries: dict[str, FeatureTensor]
    images: dict[str, FeatureTensor]
    keywords: dict[str, FeatureTensor]
    clicks: list[tuple[str, str, int]]
    judgments: list[tuple[str, str, int]] = field(default_factory=list)

    def __post_init__(self):
        self._cache = {}

    def __eq__(self, other):
        if not isinstance(other, DatasetBundle):
            return NotImplemented
        return (self.dims == other.dims and self.queries == other.queries
                and self.images == other.images and self.keywords == other.keywords
                and self.clicks == other.clicks and self.judgments == other.judgments)

    def n_keywords(self, image_id: str) -> int:
        kw = self.keywords.get(image_id)
        return 0 if kw is None else kw.shape[0]

    def validate(self) -> None:
        d_q, d_v, d_k, r = (self.dims[k] for k in HEADER_KEYS)
        for qid, q in self.queries.items():
            if q.shape != (d_q,):
                raise BundleError(f"query {qid} has shape {q.shape}, expected ({d_q},)")
        for iid, v in self.images.items():
            if v.shape != (r, r, d_v):
                raise BundleError(f"image {iid} has shape {v.shape}, expected {(r, r, d_v)}")
        for iid, kw in self.keywords.items():
            if iid not in self.images:
                raise BundleError(f"dangling reference: keywords for unknown image {iid}")
            if kw.ndim != 2 or kw.shape[1] != d_k:
                raise BundleError(f"keywords for {iid} have shape {kw.shape}, expected (n, {d_k})")
        for name, rows in (("clicks", self.clicks), ("judgments", self.judgments)):
            for qid, iid, n in rows:
                if qid not in self.queries:
                    raise BundleError(f"dangling reference: {name} cites unknown query {qid}")
                if iid not in self.images:
                    raise BundleError(f"dangling reference: {name} cites unknown image {iid}")
                if n < 0:
                    raise BundleError(f"negative count in {name} for ({qid}, {iid})")

    # -- stacked views for batched scoring --------------------------------

    def image_index(self) -> dict[str, int]:
        if "iidx" not in self._cache:
            self._cache["iidx"] = {iid: i for i, iid in enumerate(self.images)}
        return self._cache["iidx"]

    def query_index(self) -> dict[str, int]:
        if "qidx" not in self._cache:
            self._cache["qidx"] = {qid: i for i, qid in enumerate(self.queries)}
        return self._cache["qidx"]

    def query_matrix(self) -> np.ndarray:
        if "Q" not in self._cache:
            d_q = self.dims["d_q"]
            self._cache["Q"] = np.stack([np.asarray(q) for q in self.queries.values()]) \
                if self.queries else np.zeros((0, d_q))
        return self._cache["Q"]

    def image_stack(self) -> np.ndarray:
        """(n_images, r*r, d_v)."""
        if "V" not in self._cache:
            r, d_v = self.dims["r"], self.dims["d_v"]
            self._cache["V"] = np.stack([np.asarray(v).reshape(r * r, d_v) for v in self.images.values()]) \
                if self.images else np.zeros((0, r * r, d_v))
        return self._cache["V"]

    def keyword_stack(self) -> tuple[np.ndarray, np.ndarray]:
        """Zero-padded (n_images, n_max, d_k) keywords plus the (n_images, n_max) active mask."""
        if "K" not in self._cache:
            d_k = self.dims["d_k"]
            ids = list(self.images)
            n_max = max([self.n_keywords(i) for i in ids] + [1])
            K = np.zeros((len(ids), n_max, d_k))
            act = np.zeros((len(ids), n_max), dtype=bool)
            for row, iid in enumerate(ids):
                kw = self.keywords.get(iid)
                if kw is not None:
                    K[row, :kw.shape[0]] = np.asarray(kw)
                    act[row, :kw.shape[0]] = True
            self._cache["K"] = (K, act)
        return self._cache["K"]

    def gather(self, query_ids, image_ids):
        """Batched model inputs (Q, V, K, active) for aligned id lists."""
        qi = self.query_index()
        ii = self.image_index()
        qrows = np.array([qi[q] for q in query_ids], dtype=np.intp)
        irows = np.array([ii[i] for i in image_ids], dtype=np.intp)
        K, act = self.keyword_stack()
        return self.query_matrix()[qrows], self.image_stack()[irows], K[irows], act[irows]

    def clicks_by_query(self) -> dict[str, list[tuple[str, int]]]:
        out: dict[str, list[tuple[str, int]]] = {}
        for qid, iid, c in self.clicks:
            out.setdefault(qid, []).append((iid, c))
        return out

    def judgments_by_query(self) -> dict[str, list[tuple[str, int]]]:
        out: dict[str, list[tuple[str, int]]] = {}
        for qid, iid, g in self.judgments:
            out.setdefault(qid, []).append((iid, g))
        return out


# --------------------------------------------------------------------------
# text I/O
# --------------------------------------------------------------------------

def _fmt(values) -> str:
    # repr of a Python float is the shortest string that round-trips exactly
    return " ".join(repr(float(x)) for x in values)


def write_bundle(bundle: DatasetBundle, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / "header.txt", "w") as fh:
        for key in HEADER_KEYS:
            fh.write(f"{key} {bundle.dims[key]}\n")
    with open(path / "queries.txt", "w") as fh:
        for qid, q in bundle.queries.items():
            fh.write(f"{qid} {_fmt(q.data)}\n")
    with open(path / "images.txt", "w") as fh:
        for iid, v in bundle.images.items():
            fh.write(f"{iid} {_fmt(v.data)}\n")
    with open(path / "keywords.txt", "w") as fh:
        for iid, kw in bundle.keywords.items():
            for row in np.asarray(kw):
                fh.write(f"{iid} {_fmt(row)}\n")
    with open(path / "clicks.tsv", "w") as fh:
        for qid, iid, c in bundle.clicks:
            fh.write(f"{qid}\t{iid}\t{c}\n")
    with open(path / "judgments.tsv", "w") as fh:
        for qid, iid, g in bundle.judgments:
            fh.write(f"{qid}\t{iid}\t{g}\n")


def _lines(path: Path):
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if line and not line.startswith("#"):
                yield lineno, line


def _vector_records(path: Path, width: int):
    for lineno, line in _lines(path):
        parts = line.split()
        if len(parts) - 1 != width:
            raise BundleError(f"expected {width} values after id, found {len(parts) - 1}", path.name, lineno)
        try:
            vals = [float(x) for x in parts[1:]]
        except ValueError as exc:
            raise BundleError(f"bad number ({exc})", path.name, lineno) from None
        if not all(math.isfinite(x) for x in vals):
            raise BundleError("non-finite value", path.name, lineno)
        yield lineno, parts[0], vals


def _triples(path: Path, known_q, known_i, what):
    rows = []
    for lineno, line in _lines(path):
        parts = line.split("\t")
        if len(parts) != 3:
            raise BundleError("expected 3 tab-separated fields", path.name, lineno)
        qid, iid, count = parts
        if qid not in known_q:
            raise BundleError(f"dangling reference to query {qid!r}", path.name, lineno)
        if iid not in known_i:
            raise BundleError(f"dangling reference to image {iid!r}", path.name, lineno)
        try:
            n = int(count)
        except ValueError:
            raise BundleError(f"{what} must be an integer, got {count!r}", path.name, lineno) from None
        if n < 0:
            raise BundleError(f"{what} must be nonnegative", path.name, lineno)
        rows.append((qid, iid, n))
    return rows


def load_bundle(path) -> DatasetBundle:
    path = Path(path)
    if not path.is_dir():
        raise BundleError(f"bundle directory not found: {path}")
    for name in BUNDLE_FILES:
        if not (path / name).is_file():
            raise BundleError("missing file", name)

    dims = {}
    for lineno, line in _lines(path / "header.txt"):
        parts = line.split()
        if len(parts) != 2 or parts[0] not in HEADER_KEYS:
            raise BundleError(f"expected one of {HEADER_KEYS} and a value", "header.txt", lineno)
        try:
            dims[parts[0]] = int(parts[1])
        except ValueError:
            raise BundleError(f"dimension must be an integer, got {parts[1]!r}", "header.txt", lineno) from None
        if dims[parts[0]] < 1:
            raise BundleError("dimension must be positive", "header.txt", lineno)
    missing = [k for k in HEADER_KEYS if k not in dims]
    if missing:
        raise BundleError(f"header lacks {missing}", "header.txt")
    d_q, d_v, d_k, r = (dims[k] for k in HEADER_KEYS)

    queries = {}
    for lineno, qid, vals in _vector_records(path / "queries.txt", d_q):
        if qid in queries:
            raise BundleError(f"duplicate query id {qid!r}", "queries.txt", lineno)
        queries[qid] = FeatureTensor(vals, (d_q,))
    images = {}
    for lineno, iid, vals in _vector_records(path / "images.txt", r * r * d_v):
        if iid in images:
            raise BundleError(f"duplicate image id {iid!r}", "images.txt", lineno)
        images[iid] = FeatureTensor(vals, (r, r, d_v))
    rows: dict[str, list] = {}
    last = None
    for lineno, iid, vals in _vector_records(path / "keywords.txt", d_k):
        if iid not in images:
            raise BundleError(f"dangling reference to image {iid!r}", "keywords.txt", lineno)
        if iid != last and iid in rows:
            raise BundleError(f"keyword rows for {iid!r} are not contiguous", "keywords.txt", lineno)
        rows.setdefault(iid, []).append(vals)
        last = iid
    keywords = {iid: FeatureTensor(v, (len(v), d_k)) for iid, v in rows.items()}
    clicks = _triples(path / "clicks.tsv", queries, images, "click count")
    judgments = _triples(path / "judgments.tsv", queries, images, "grade")
    return DatasetBundle(dims, queries, images, keywords, clicks, judgments)


# --------------------------------------------------------------------------
# synthetic generator
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    n_queries: int = 200
    n_images: int = 1000
    keywords_per_image: int = 10
    d_q: int = 16
    d_v: int = 16
    d_k: int = 16
    r: int = 3
    latent_dim: int = 2
    rho: float = 0.5
    noise: float = 0.1
    candidates_per_query: int = 20
    owned_per_query: int = 5
    signal_scale: float = 4.0
    background_scale: float = 1.0
    intent_scale: float = 2.0
    salience_scale: float = 8.0
    keyword_signal_fraction: float = 0.2
    distractor_scale: float = 1.0
    image_gain: float | None = None
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        if self.latent_dim + 1 > min(self.d_v, self.d_k):
            raise ValueError("d_v and d_k must exceed latent_dim (room for the salience direction)")
        if self.latent_dim + 2 > self.d_q:
            raise ValueError("d_q must leave room for two intent directions beside the latent")
        if self.owned_per_query * self.n_queries > self.n_images:
            raise ValueError("not enough images for owned_per_query * n_queries")
        if not self.owned_per_query <= self.candidates_per_query <= self.n_images:
            raise ValueError("candidates_per_query must lie between owned_per_query and n_images")
        if self.noise < 0 or self.background_scale < 0:
            raise ValueError("noise levels must be nonnegative")
        if self.keywords_per_image < 1:
            raise ValueError("keywords_per_image must be >= 1")
        if self.distractor_scale < 0 or (self.image_gain is not None and self.image_gain <= 0):
            raise ValueError("distractor_scale must be nonnegative and image_gain positive")

    @property
    def gain(self) -> float:
        """Image feature scale; defaults to r*r, offsetting the 1/r^2 of visual pooling."""
        return float(self.r * self.r) if self.image_gain is None else self.image_gain


@dataclass
class SynthTruth:
    """Planted ground truth behind a synthetic bundle."""

    query_type: dict[str, str]              # "visual" or "keyword"
    query_latent: dict[str, np.ndarray]
    primary: dict[str, str]                 # modality of each image's unit-norm latent
    visual_latent: dict[str, np.ndarray]    # primary latents and distractors alike
    keyword_latent: dict[str, np.ndarray]
    signal_cell: dict[str, tuple[int, int]]
    signal_rows: dict[str, np.ndarray]      # indices of planted keyword rows
    relevance: dict[tuple[str, str], float]  # noise-free planted relevance per judged pair
    proj_q: np.ndarray
    proj_v: np.ndarray
    proj_k: np.ndarray
    intent: dict[str, np.ndarray]
    salience: dict[str, np.ndarray]         # unit salience direction per modality

    def oracle_score(self, qid: str, iid: str) -> float:
        """Dot product of the query latent with the image's latent in the query's modality.

        Zero when the image carries nothing in that modality.
        """
        source = self.visual_latent if self.query_type[qid] == "visual" else self.keyword_latent
        w = source.get(iid)
        return 0.0 if w is None else float(self.query_latent[qid] @ w)


def _unit(x):
    return x / np.linalg.norm(x)


def _orthonormal(rng, n, k):
    q, _ = np.linalg.qr(rng.standard_normal((n, k)))
    return q[:, :k]


def generate_synthetic_with_truth(spec: SynthSpec) -> tuple[DatasetBundle, SynthTruth]:
    rng = np.random.default_rng(spec.seed)
    L, dz = spec.latent_dim, spec.owned_per_query
    nq, ni = spec.n_queries, spec.n_images
    r, cells = spec.r, spec.r * spec.r

    # query space: latent block + two intent directions, mutually orthogonal
    basis_q = _orthonormal(rng, spec.d_q, L + 2)
    proj_q = basis_q[:, :L]
    intent = {"visual": spec.intent_scale * basis_q[:, L], "keyword": spec.intent_scale * basis_q[:, L + 1]}
    basis_v = _orthonormal(rng, spec.d_v, L + 1)
    basis_k = _orthonormal(rng, spec.d_k, L + 1)
    proj_v, proj_k = basis_v[:, :L], basis_k[:, :L]
    # planted cells/rows also share a fixed salience direction orthogonal to the latent block
    salience_v = spec.salience_scale * basis_v[:, L]
    salience_k = spec.salience_scale * basis_k[:, L]
    # clutter lives in the orthogonal complement of the latent subspace
    clutter_v = np.eye(spec.d_v) - proj_v @ proj_v.T
    clutter_k = np.eye(spec.d_k) - proj_k @ proj_k.T

    qids = [f"q{i:04d}" for i in range(nq)]
    iids = [f"img{j:05d}" for j in range(ni)]
    n_visual = int(round(spec.rho * nq))
    types = np.array(["visual"] * n_visual + ["keyword"] * (nq - n_visual))
    rng.shuffle(types)
    query_type = dict(zip(qids, types.tolist()))
    query_latent = {qid: _unit(rng.standard_normal(L)) for qid in qids}

    # every image has a primary latent in one modality: aligned with its owner query for the
    # owned images, random for the rest
    primary: dict[str, str] = {}
    visual_latent: dict[str, np.ndarray] = {}
    keyword_latent: dict[str, np.ndarray] = {}
    order = rng.permutation(ni)
    candidates = {}
    for qi, qid in enumerate(qids):
        owned = [iids[j] for j in order[qi * dz:(qi + 1) * dz]]
        z = query_latent[qid]
        for iid in owned:
            # planted relevance: a controlled angle to the query latent
            cos_t = rng.uniform(0.55, 1.0)
            perp = rng.standard_normal(L)
            perp = _unit(perp - (perp @ z) * z)
            aligned = cos_t * z + math.sqrt(max(0.0, 1.0 - cos_t ** 2)) * perp
            primary[iid] = query_type[qid]
            (visual_latent if primary[iid] == "visual" else keyword_latent)[iid] = aligned
        owned_set = set(owned)
        others = [iids[j] for j in rng.permutation(ni) if iids[j] not in owned_set]
        candidates[qid] = owned + others[:spec.candidates_per_query - dz]
    for j in order[nq * dz:]:
        iid = iids[j]
        primary[iid] = "visual" if rng.random() < spec.rho else "keyword"
        (visual_latent if primary[iid] == "visual" else keyword_latent)[iid] = _unit(rng.standard_normal(L))

    # the other modality carries a distractor latent of random strength, planted the same way;
    # it only matters to queries of that modality, so the query's intent decides which to trust
    if spec.distractor_scale > 0:
        for iid in iids:
            strength = spec.distractor_scale * rng.uniform(0.0, 1.0)
            target = keyword_latent if primary[iid] == "visual" else visual_latent
            target[iid] = strength * _unit(rng.standard_normal(L))

    signal_cell: dict[str, tuple[int, int]] = {}
    signal_rows: dict[str, np.ndarray] = {}
    images = {}
    keywords = {}
    n_sig = max(1, int(round(spec.keyword_signal_fraction * spec.keywords_per_image)))
    for iid in iids:
        grid = spec.background_scale * rng.standard_normal((cells, spec.d_v)) @ clutter_v
        if iid in visual_latent:
            cell = int(rng.integers(cells))
            grid[cell] = spec.signal_scale * (proj_v @ visual_latent[iid]) + salience_v
            signal_cell[iid] = divmod(cell, r)
        grid += spec.noise * rng.standard_normal((cells, spec.d_v))
        images[iid] = FeatureTensor(spec.gain * grid.reshape(r, r, spec.d_v))

        kw = spec.background_scale * rng.standard_normal((spec.keywords_per_image, spec.d_k)) @ clutter_k
        if iid in keyword_latent:
            rows = np.sort(rng.choice(spec.keywords_per_image, size=n_sig, replace=False))
            kw[rows] = spec.signal_scale * (proj_k @ keyword_latent[iid]) + salience_k
            signal_rows[iid] = rows
        kw += spec.noise * rng.standard_normal((spec.keywords_per_image, spec.d_k))
        keywords[iid] = FeatureTensor(kw)

    queries = {}
    for qid in qids:
        q = proj_q @ query_latent[qid] + intent[query_type[qid]] + spec.noise * rng.standard_normal(spec.d_q)
        queries[qid] = FeatureTensor(q)

    truth = SynthTruth(query_type, query_latent, primary, visual_latent, keyword_latent, signal_cell,
                       signal_rows, {}, proj_q, proj_v, proj_k, intent,
                       {"visual": basis_v[:, L], "keyword": basis_k[:, L]})
    for qid in qids:
        for iid in candidates[qid]:
            truth.relevance[(qid, iid)] = truth.oracle_score(qid, iid)

    # grade 0 for no planted relevance; positive relevance split into three equal-mass bands
    rel_all = np.array(list(truth.relevance.values()))
    positive = rel_all[rel_all > 0]
    cuts = np.quantile(positive, [1 / 3, 2 / 3]) if positive.size else np.zeros(2)
    clicks, judgments = [], []
    for qid in qids:
        cands = candidates[qid]
        rel = np.array([truth.relevance[(qid, iid)] for iid in cands])
        noisy = rel + spec.noise * rng.standard_normal(len(cands))
        # clicks descend with the (noisy) relevance rank; non-positive relevance gets none
        rank = np.argsort(-noisy, kind="stable")
        n = len(cands)
        cnt = np.zeros(n, dtype=int)
        for pos, j in enumerate(rank):
            cnt[j] = (n - pos) if noisy[j] > 0 else 0
        for j, iid in enumerate(cands):
            clicks.append((qid, iid, int(cnt[j])))
            judgments.append((qid, iid, 0 if rel[j] <= 0 else 1 + int(np.searchsorted(cuts, rel[j], side="right"))))

    dims = {"d_q": spec.d_q, "d_v": spec.d_v, "d_k": spec.d_k, "r": spec.r}
    bundle = DatasetBundle(dims, queries, images, keywords, clicks, judgments)
    bundle.validate()
    return bundle, truth


def random_pairs_bundle(n_pairs: int, d_q: int = 16, d_v: int = 16, d_k: int = 16, r: int = 3,
                        keywords_per_image: int = 5, seed: int = 0) -> DatasetBundle:
    """Unstructured Gaussian features with query i matched (one click) to image i.

    Serves as a caption-style bundle and as a structure-free null.
    """
    rng = np.random.default_rng(seed)
    queries, images, keywords, clicks = {}, {}, {}, []
    for j in range(n_pairs):
        qid, iid = f"c{j:04d}", f"img{j:05d}"
        queries[qid] = FeatureTensor(rng.standard_normal(d_q))
        images[iid] = FeatureTensor(rng.standard_normal((r, r, d_v)))
        keywords[iid] = FeatureTensor(rng.standard_normal((keywords_per_image, d_k)))
        clicks.append((qid, iid, 1))
    dims = {"d_q": d_q, "d_v": d_v, "d_k": d_k, "r": r}
    return DatasetBundle(dims, queries, images, keywords, clicks)


def generate_synthetic(spec: SynthSpec) -> DatasetBundle:
    return generate_synthetic_with_truth(spec)[0]


def oracle_dim(latent_dim: int) -> int:
    """Embedding size the hand-built oracle needs."""
    return 4 * latent_dim + 2


def oracle_params(truth: SynthTruth, hp, sharpness: float = 20.0, gate: float = 2.0, ballast: float = 10.0):
    """Hand-built full-configuration parameters that score by the planted latents.

    The embedding space holds a visual block and a keyword block, each the
    split [z, -z] of the latent, plus one ballast unit per modality.  The
    query's intent direction switches its own block on (offset by ``gate``,
    which exceeds any latent coordinate) and drives the other below the ReLU
    threshold; offsets cancel in the dot product with the image side.  Both
    attention kernels key on the salience direction alone, so they find the
    planted cell and rows, and the salience maps onto the ballast units with
    weight ``ballast``.  Large ballast keeps both modality embeddings at a
    nearly constant norm, so on noiseless data the score is a per-query
    multiple of the planted relevance up to a relative error of order
    1/ballast^2.  Requires ``hp.d == oracle_dim(latent_dim)``.
    """
    from .model import AmcParams, init_params

    L = truth.proj_q.shape[1]
    if hp.d != oracle_dim(L):
        raise ValueError(f"oracle parameters need d = 4 * latent_dim + 2 = {oracle_dim(L)}, got {hp.d}")
    t = {k: np.zeros_like(v) for k, v in init_params(hp, 0).tensors.items()}
    bv, bk = 4 * L, 4 * L + 1
    sal_v, sal_k = truth.salience["visual"], truth.salience["keyword"]

    split_q = np.hstack([truth.proj_q, -truth.proj_q])
    ones = np.ones(2 * L)
    u_vis = truth.intent["visual"] / np.linalg.norm(truth.intent["visual"]) ** 2
    u_key = truth.intent["keyword"] / np.linalg.norm(truth.intent["keyword"]) ** 2
    W_qm = np.zeros((truth.proj_q.shape[0], hp.d))
    W_qm[:, :4 * L] = np.hstack([split_q, split_q])
    W_qm[:, :4 * L] += gate * np.outer(u_vis, np.concatenate([ones, -ones]))
    W_qm[:, :4 * L] += gate * np.outer(u_key, np.concatenate([-ones, ones]))
    t["W_qm"] = W_qm
    # intent embedding: the ballast unit of the query's own modality
    t["W_qm_intent"][:, bv] = u_vis
    t["W_qm_intent"][:, bk] = u_key

    t["W_v"][:, :L] = truth.proj_v
    t["W_v"][:, L:2 * L] = -truth.proj_v
    t["W_v"][:, bv] = ballast * sal_v
    t["W_kl"][:, 2 * L:3 * L] = truth.proj_k
    t["W_kl"][:, 3 * L:4 * L] = -truth.proj_k
    t["W_kl"][:, bk] = ballast * sal_k
    # attention kernels: a constant on the ballast unit
    t["b_qs"][bv] = sharpness
    t["W_ql"][:, bk] = sharpness * (u_vis + u_key)
    t["W_l"] = np.eye(hp.d)
    if "w_1" in t:
        t["w_1"], t["w_2"] = np.array(1.0), np.array(1.0)
    return AmcParams(t)

