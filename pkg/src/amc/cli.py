"""Command-line entry point: ``amc {train,eval,rank,gradcheck,synth}``.

Every command is deterministic given its config file, overrides and seed.
Outputs go under the report directory only; a lock file there keeps two
runs from writing into the same directory.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import difflib
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
from filelock import FileLock, Timeout

from . import gradcheck as G
from . import metrics as M
from .data import (BundleError, DatasetBundle, SynthSpec, generate_synthetic_with_truth, load_bundle,
                   oracle_dim, oracle_params, write_bundle)
from .evaluation import metric_suite, score_candidates, score_judged
from .model import AmcHyperparams, AmcParams, load_checkpoint, save_checkpoint
from .tensor import ContractError, DimensionError
from .training import TrainConfig, split_clicks, train

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# run configuration
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    # paths
    bundle: str = ""
    report_dir: str = "amc-report"
    checkpoint: str = ""
    # model; input dims and r default to the bundle header
    d_q: int | None = None
    d_v: int | None = None
    d_k: int | None = None
    d: int = 8
    r: int | None = None
    modality: str = "full"
    # training
    margin: float = 1.0
    t: int = 1
    batch_size: int = 128
    epochs: int = 20
    loss_mode: str = "pairwise"
    k_neg: int = 1
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    seed: int = 0
    clip_norm: float | None = None
    tuples_per_query: int = 1
    held_out_fraction: float = 0.0
    # ranking
    top_k: int = 10

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})

    def hyperparams(self, bundle: DatasetBundle) -> AmcHyperparams:
        dims = dict(bundle.dims)
        for key in ("d_q", "d_v", "d_k", "r"):
            want = getattr(self, key)
            if want is not None and want != dims[key]:
                raise ConfigError(f"config sets {key}={want} but the bundle header declares {dims[key]}")
        return AmcHyperparams(dims["d_q"], dims["d_v"], dims["d_k"], self.d, dims["r"], self.modality)


_NONE = {"none", "null", ""}


def _field_types(cls) -> dict[str, str]:
    return {f.name: f.type if isinstance(f.type, str) else f.type.__name__ for f in fields(cls)}


def _coerce(cls, key: str, raw: str):
    types = _field_types(cls)
    if key not in types:
        close = difflib.get_close_matches(key, types, n=3)
        hint = f" (did you mean {', '.join(close)}?)" if close else ""
        raise ConfigError(f"unknown config key {key!r}{hint}")
    kind = types[key]
    raw = raw.strip()
    if "None" in kind and raw.lower() in _NONE:
        return None
    try:
        if kind.startswith("int"):
            return int(raw)
        if kind.startswith("float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r} expects {kind.split(' ')[0]}, got {raw!r}") from None
    return raw


def parse_pairs(cls, lines: Sequence[str], origin: str) -> dict:
    """``key = value`` lines (``#`` comments) to a dict of typed values."""
    out = {}
    for lineno, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{origin}:{lineno}: expected key=value, got {text!r}")
        key, value = (s.strip() for s in text.split("=", 1))
        try:
            out[key] = _coerce(cls, key, value)
        except ConfigError as exc:
            raise ConfigError(f"{origin}:{lineno}: {exc}") from None
    return out


def build_config(cls, config_path: str | None, overrides: Sequence[str]):
    values = {}
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        values.update(parse_pairs(cls, path.read_text().splitlines(), str(path)))
    values.update(parse_pairs(cls, overrides, "--set"))
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def format_config(cfg) -> str:
    return "".join(f"{f.name} = {'none' if getattr(cfg, f.name) is None else getattr(cfg, f.name)}\n"
                   for f in fields(cfg))


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _report_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create report directory {out}: {exc.strerror}") from None
    probe = out / ".write-probe"
    try:
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"report directory {out} is not writable: {exc.strerror}") from None
    return out


def _lock(out: Path):
    """Acquire the report-dir lock; use the result as a context manager to release it."""
    try:
        return FileLock(str(out / ".lock")).acquire(timeout=0)
    except Timeout:
        raise ConfigError(f"report directory {out} is locked by another run") from None


def _bundle(cfg: RunConfig) -> DatasetBundle:
    if not cfg.bundle:
        raise ConfigError("no bundle given; set bundle=PATH")
    return load_bundle(cfg.bundle)


def _checkpoint(cfg: RunConfig, bundle: DatasetBundle) -> tuple[AmcParams, AmcHyperparams]:
    if not cfg.checkpoint:
        raise ConfigError("no checkpoint given; use --checkpoint PATH")
    if not Path(cfg.checkpoint).is_file():
        raise ConfigError(f"checkpoint not found: {cfg.checkpoint}")
    params, hp = load_checkpoint(cfg.checkpoint)
    for key in ("d_q", "d_v", "d_k", "r"):
        if getattr(hp, key) != bundle.dims[key]:
            raise DimensionError(f"checkpoint {key}={getattr(hp, key)} does not match bundle {key}={bundle.dims[key]}")
    return params, hp


def _say(*cols) -> None:
    print("\t".join(str(c) for c in cols), flush=True)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_train(cfg: RunConfig) -> int:
    bundle = _bundle(cfg)
    hp = cfg.hyperparams(bundle)
    tc = cfg.train_config()
    out = _report_dir(cfg.report_dir)
    start = None
    if cfg.checkpoint:
        start, ck_hp = _checkpoint(cfg, bundle)
        if ck_hp != hp:
            raise ConfigError(f"warm-start checkpoint hyperparams {ck_hp.to_dict()} differ from config {hp.to_dict()}")
    with _lock(out):
        (out / "config.txt").write_text(format_config(cfg))
        ck_dir = out / "checkpoints"
        ck_dir.mkdir(exist_ok=True)
        train_clicks = held = None
        if cfg.held_out_fraction > 0:
            train_clicks, held = split_clicks(bundle.clicks, cfg.held_out_fraction, cfg.seed)
        log_path = out / "loss.tsv"
        with open(log_path, "w") as log_fh:
            log_fh.write("epoch\ttrain_loss" + ("\theld_out_loss" if held is not None else "") + "\n")

            def on_epoch(epoch, params, entry):
                save_checkpoint(ck_dir / f"epoch_{epoch:04d}.ckpt", params, hp)
                log_fh.write(entry.line() + "\n")
                log_fh.flush()
                _say("epoch", epoch, "train_loss", f"{entry.train_loss:.6f}")

            result = train(bundle, tc, hp, params=start, train_clicks=train_clicks,
                           held_out_clicks=held, on_epoch=on_epoch)
        save_checkpoint(out / "final.ckpt", result.params, hp)
        _say("checkpoint", out / "final.ckpt")
    return EXIT_OK


def _caption_reports(bundle: DatasetBundle, params, hp) -> list[M.MetricReport]:
    """Caption recall (captions ranked per image) and image recall (images ranked per caption)."""
    pairs = {(q, i) for q, i, c in bundle.clicks if c > 0}
    caps = sorted({q for q, _ in pairs})
    ims = sorted({i for _, i in pairs})
    qs = [q for i in ims for q in caps]
    iis = [i for i in ims for _ in caps]
    S = score_candidates(bundle, params, hp, qs, iis).score.reshape(len(ims), len(caps))
    truth = np.array([[(q, i) in pairs for q in caps] for i in ims])
    rows = []
    for k in (1, 5, 10):
        rows.append(M.MetricReport("caption_R", k, M.caption_recall(zip(S, truth), k), len(ims), 0))
    for k in (1, 5, 10):
        rows.append(M.MetricReport("image_R", k, M.caption_recall(zip(S.T, truth.T), k), len(caps), 0))
    return rows


def cmd_eval(cfg: RunConfig) -> int:
    bundle = _bundle(cfg)
    params, hp = _checkpoint(cfg, bundle)
    out = _report_dir(cfg.report_dir)
    with _lock(out):
        reports, roc = metric_suite(score_judged(bundle, params, hp))
        if cfg.loss_mode == "bidirectional":
            reports.extend(_caption_reports(bundle, params, hp))
        text = M.format_report(reports)
        (out / "metrics.tsv").write_text(text)
        if roc is not None:
            (out / "roc.tsv").write_text("fpr\ttpr\n" + roc.polyline())
        sys.stdout.write(text)
    return EXIT_OK


def cmd_rank(cfg: RunConfig, query: str, top_k: int | None, explain: bool) -> int:
    bundle = _bundle(cfg)
    params, hp = _checkpoint(cfg, bundle)
    if query not in bundle.queries:
        near = difflib.get_close_matches(query, sorted(bundle.queries), n=5, cutoff=0.0)
        raise ConfigError(f"unknown query id {query!r}; nearest ids: {', '.join(near)}")
    k = cfg.top_k if top_k is None else top_k
    if k < 1:
        raise ConfigError("top_k must be >= 1")
    ims = sorted(bundle.images)
    fb = score_candidates(bundle, params, hp, [query] * len(ims), ims)
    order = np.lexsort((np.arange(len(ims)), -fb.score))[:k]
    header = ["rank", "image", "score", "p_v", "p_k"]
    if explain:
        header += ["M", "keywords"]
    _say(*header)
    for rank, j in enumerate(order, start=1):
        p_v, p_k = _modality_weights(fb, j, hp)
        cols = [rank, ims[j], f"{fb.score[j]:.6f}", f"{p_v:.6f}", f"{p_k:.6f}"]
        if explain:
            grid = "-" if fb.M is None else ",".join(f"{m:.6f}" for m in fb.M[j])
            cols += [grid, _top_keywords(fb, j, bundle.n_keywords(ims[j]))]
        _say(*cols)
    return EXIT_OK


def _modality_weights(fb, j: int, hp: AmcHyperparams) -> tuple[float, float]:
    if fb.p_v is not None:
        return float(fb.p_v[j]), float(fb.p_k[j])
    # configurations without the inter-attention use a single modality or fixed weights
    if hp.modality == "img-only":
        return 1.0, 0.0
    if hp.modality == "key-only":
        return 0.0, 1.0
    return 0.5, 0.5


def _top_keywords(fb, j: int, n: int, k: int = 10) -> str:
    if fb.p is None or n == 0:
        return "-"
    p = fb.p[j][:n]
    idx = np.lexsort((np.arange(n), -p))[:k]
    return ",".join(f"{i}:{p[i]:.6f}" for i in idx)


def cmd_gradcheck(seed: int, seeds: int = 20) -> int:
    ops = G.check_ops(n_shapes=10, seed=seed)
    _say("op", "worst_rel_error", "status")
    for name, err in ops.worst.items():
        _say(name, f"{err:.3e}", "ok" if err < ops.tol else "FAIL")
    model = G.check_model(seeds=seeds, base_seed=seed)
    sys.stdout.write(model.text())
    if not (ops.ok and model.ok):
        bad = ops.failing + [f"{n}[{','.join(map(str, model.worst_index[n]))}]" for n in model.failing]
        print(f"gradcheck FAILED: {' '.join(bad)}", file=sys.stderr)
        return EXIT_INVALID
    _say("gradcheck", "passed", f"tol={G.TOL:g}")
    return EXIT_OK


def cmd_synth(spec: SynthSpec, out_dir: str) -> int:
    out = _report_dir(out_dir)
    with _lock(out):
        bundle, truth = generate_synthetic_with_truth(spec)
        write_bundle(bundle, out / "bundle")
        d = oracle_dim(spec.latent_dim)
        if d < min(spec.d_q, spec.d_v, spec.d_k):
            hp = AmcHyperparams(spec.d_q, spec.d_v, spec.d_k, d, spec.r, "full")
            save_checkpoint(out / "oracle.ckpt", oracle_params(truth, hp), hp)
        (out / "synth.txt").write_text(format_config(spec))
        _say("bundle", out / "bundle")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage errors are validation errors
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key=value config file")
    common.add_argument("--set", metavar="KEY=VALUE", action="append", default=[],
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, help="seed (overrides the config)")
    common.add_argument("--out", metavar="DIR", help="report directory (overrides the config)")

    parser = _Parser(prog="amc", description="Attention-based multi-modal image ranking.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = sub.add_parser("train", parents=[common], help="train a model and write checkpoints plus a loss log")
    p.add_argument("--checkpoint", metavar="PATH", help="warm-start checkpoint")
    p = sub.add_parser("eval", parents=[common], help="score judged candidates and write a metric report")
    p.add_argument("--checkpoint", metavar="PATH")
    p = sub.add_parser("rank", parents=[common], help="rank all images for one query")
    p.add_argument("query")
    p.add_argument("--checkpoint", metavar="PATH")
    p.add_argument("--top-k", type=int)
    p.add_argument("--explain", action="store_true", help="add attention maps and modality weights")
    p = sub.add_parser("gradcheck", help="finite-difference check of every op and the full loss")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=20)
    p = sub.add_parser("synth", parents=[common], help="write a synthetic bundle (keys: generator fields)")
    return parser


def _run_config(args) -> RunConfig:
    cfg = build_config(RunConfig, args.config, args.set)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out:
        changes["report_dir"] = args.out
    if getattr(args, "checkpoint", None):
        changes["checkpoint"] = args.checkpoint
    return dataclasses.replace(cfg, **changes) if changes else cfg


def _dispatch(args) -> int:
    if args.command == "gradcheck":
        return cmd_gradcheck(args.seed, args.seeds)
    if args.command == "synth":
        spec = build_config(SynthSpec, args.config, args.set)
        if args.seed is not None:
            spec = dataclasses.replace(spec, seed=args.seed)
        if not args.out:
            raise ConfigError("synth needs --out DIR")
        return cmd_synth(spec, args.out)
    cfg = _run_config(args)
    if args.command == "train":
        return cmd_train(cfg)
    if args.command == "eval":
        return cmd_eval(cfg)
    return cmd_rank(cfg, args.query, args.top_k, args.explain)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except (ConfigError, BundleError, DimensionError, ContractError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
