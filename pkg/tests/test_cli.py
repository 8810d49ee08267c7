import filecmp

import numpy as np
import pytest
from filelock import FileLock

from amc import metrics as M
from amc import tensor as T
from amc.cli import RunConfig, build_config, main, parse_pairs
from amc.data import SynthSpec, generate_synthetic_with_truth, load_bundle, random_pairs_bundle, write_bundle
from amc.evaluation import score_candidates
from amc.model import AmcHyperparams, init_params, load_checkpoint, save_checkpoint

SMALL = ["--set", "n_queries=20", "--set", "n_images=120"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--out", str(out), *SMALL, "--seed", "3"]) == 0
    return out


def rows(text):
    return [line.split("\t") for line in text.strip().splitlines()]


# --------------------------------------------------------------------------
# config
# --------------------------------------------------------------------------

def test_config_file_then_overrides(tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("# comment\nlr = 0.01\nepochs=3  # trailing\nclip_norm = none\n")
    cfg = build_config(RunConfig, str(cfg_file), ["epochs=5"])
    assert (cfg.lr, cfg.epochs, cfg.clip_norm) == (0.01, 5, None)


def test_unknown_key_suggests_a_match():
    with pytest.raises(ValueError, match="did you mean margin"):
        parse_pairs(RunConfig, ["margn = 1"], "x")


def test_unknown_key_exits_1(capsys, synth_dir):
    code, _, err = run(capsys, "train", "--set", f"bundle={synth_dir / 'bundle'}", "--set", "epochz=1",
                       "--out", synth_dir / "r0")
    assert code == 1 and "epochz" in err


def test_missing_bundle_exits_1(capsys, tmp_path):
    code, _, err = run(capsys, "train", "--set", f"bundle={tmp_path / 'none'}", "--out", tmp_path / "r")
    assert code == 1 and "not found" in err


def test_bad_usage_exits_1(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["rank"])
    assert exc.value.code == 1


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------

def test_zero_epochs_writes_init_params(capsys, synth_dir, tmp_path):
    code, _, _ = run(capsys, "train", "--set", f"bundle={synth_dir / 'bundle'}", "--set", "epochs=0",
                     "--seed", 17, "--out", tmp_path)
    assert code == 0
    params, hp = load_checkpoint(tmp_path / "final.ckpt")
    assert params.equal(init_params(hp, 17))


def test_rerun_gives_bit_identical_checkpoint(capsys, synth_dir, tmp_path):
    args = ["train", "--set", f"bundle={synth_dir / 'bundle'}", "--set", "epochs=2", "--set", "batch_size=8"]
    assert run(capsys, *args, "--out", tmp_path / "a")[0] == 0
    assert run(capsys, *args, "--out", tmp_path / "b")[0] == 0
    assert (tmp_path / "a" / "final.ckpt").read_bytes() == (tmp_path / "b" / "final.ckpt").read_bytes()
    assert (tmp_path / "a" / "loss.tsv").read_text() == (tmp_path / "b" / "loss.tsv").read_text()
    assert sorted(p.name for p in (tmp_path / "a" / "checkpoints").iterdir()) == \
        ["epoch_0001.ckpt", "epoch_0002.ckpt"]


def test_default_config_loss_decreases(capsys, tmp_path):
    assert run(capsys, "synth", "--out", tmp_path / "s")[0] == 0
    code, out, _ = run(capsys, "train", "--set", f"bundle={tmp_path / 's' / 'bundle'}", "--out", tmp_path / "r")
    assert code == 0
    log = rows((tmp_path / "r" / "loss.tsv").read_text())
    assert log[0] == ["epoch", "train_loss"]
    losses = [float(r[1]) for r in log[1:]]
    assert len(losses) == RunConfig().epochs
    assert np.mean(losses[-10:]) < np.mean(losses[:10])
    # progress lines are machine-parseable
    assert out.splitlines()[0].split("\t")[:3] == ["epoch", "1", "train_loss"]


def test_held_out_column(capsys, synth_dir, tmp_path):
    code, _, _ = run(capsys, "train", "--set", f"bundle={synth_dir / 'bundle'}", "--set", "epochs=1",
                     "--set", "held_out_fraction=0.25", "--out", tmp_path)
    assert code == 0
    assert rows((tmp_path / "loss.tsv").read_text())[0] == ["epoch", "train_loss", "held_out_loss"]


def test_locked_report_dir_refuses_second_writer(capsys, synth_dir, tmp_path):
    with FileLock(str(tmp_path / ".lock")):
        code, _, err = run(capsys, "train", "--set", f"bundle={synth_dir / 'bundle'}", "--set", "epochs=0",
                           "--out", tmp_path)
    assert code == 1 and "locked" in err


# --------------------------------------------------------------------------
# eval
# --------------------------------------------------------------------------

def test_oracle_checkpoint_on_noiseless_bundle(capsys, tmp_path):
    assert run(capsys, "synth", "--out", tmp_path / "s", "--set", "noise=0", *SMALL)[0] == 0
    code, out, _ = run(capsys, "eval", "--set", f"bundle={tmp_path / 's' / 'bundle'}",
                       "--checkpoint", tmp_path / "s" / "oracle.ckpt", "--out", tmp_path / "e")
    assert code == 0
    reports = {(r.metric, r.k): r for r in M.parse_report((tmp_path / "e" / "metrics.tsv").read_text())}
    assert reports[("NDCG", 5)].value > 0.95
    assert out == (tmp_path / "e" / "metrics.tsv").read_text()


def test_metric_rows_follow_report_format(capsys, synth_dir, tmp_path):
    hp = AmcHyperparams(16, 16, 16, 8, 3, "full")
    save_checkpoint(tmp_path / "init.ckpt", init_params(hp, 0), hp)
    code, out, _ = run(capsys, "eval", "--set", f"bundle={synth_dir / 'bundle'}",
                       "--checkpoint", tmp_path / "init.ckpt", "--out", tmp_path / "e")
    assert code == 0
    reports = M.parse_report(out)
    assert M.format_report(reports) == out
    names = [(r.metric, r.k) for r in reports]
    assert names == [("NDCG", k) for k in (5, 10, 15, 20, 25)] + [("P", 5), ("MAP", None), ("MRR", None),
                                                                  ("AUC", None)] + \
        [("R", k) for k in (1, 5, 10, 15, 20)]
    roc = rows((tmp_path / "e" / "roc.tsv").read_text())
    assert roc[0] == ["fpr", "tpr"] and roc[1] == ["0.000000", "0.000000"] and roc[-1] == ["1.000000", "1.000000"]


def test_random_init_auc_near_half(capsys, tmp_path):
    assert run(capsys, "synth", "--out", tmp_path / "s")[0] == 0
    hp = AmcHyperparams(16, 16, 16, 8, 3, "full")
    save_checkpoint(tmp_path / "init.ckpt", init_params(hp, 0), hp)
    code, out, _ = run(capsys, "eval", "--set", f"bundle={tmp_path / 's' / 'bundle'}",
                       "--checkpoint", tmp_path / "init.ckpt", "--out", tmp_path / "e")
    auc = next(r for r in M.parse_report(out) if r.metric == "AUC")
    assert code == 0 and abs(auc.value - 0.5) <= 0.05


def test_dimension_mismatch_is_named(capsys, synth_dir, tmp_path):
    hp = AmcHyperparams(12, 16, 16, 8, 3, "full")
    save_checkpoint(tmp_path / "bad.ckpt", init_params(hp, 0), hp)
    code, _, err = run(capsys, "eval", "--set", f"bundle={synth_dir / 'bundle'}",
                       "--checkpoint", tmp_path / "bad.ckpt", "--out", tmp_path / "e")
    assert code == 1 and "d_q=12" in err


def test_caption_mode_adds_recall_rows(capsys, tmp_path):
    write_bundle(random_pairs_bundle(12, seed=0), tmp_path / "b")
    hp = AmcHyperparams(16, 16, 16, 8, 3, "full")
    save_checkpoint(tmp_path / "c.ckpt", init_params(hp, 0), hp)
    code, out, _ = run(capsys, "eval", "--set", f"bundle={tmp_path / 'b'}", "--set", "loss_mode=bidirectional",
                       "--checkpoint", tmp_path / "c.ckpt", "--out", tmp_path / "e")
    assert code == 0
    names = {(r.metric, r.k) for r in M.parse_report(out)}
    assert {("caption_R", 1), ("caption_R", 10), ("image_R", 5)} <= names


# --------------------------------------------------------------------------
# rank
# --------------------------------------------------------------------------

def test_rank_single_image_bundle(capsys, tmp_path):
    b = random_pairs_bundle(1, seed=0)
    write_bundle(b, tmp_path / "b")
    hp = AmcHyperparams(16, 16, 16, 8, 3, "full")
    save_checkpoint(tmp_path / "c.ckpt", init_params(hp, 0), hp)
    code, out, _ = run(capsys, "rank", "c0000", "--top-k", 1, "--set", f"bundle={tmp_path / 'b'}",
                       "--checkpoint", tmp_path / "c.ckpt")
    table = rows(out)
    assert code == 0 and len(table) == 2 and table[1][:2] == ["1", "img00000"]


def test_rank_matches_score_then_sort_oracle(capsys, synth_dir, tmp_path):
    bundle = load_bundle(synth_dir / "bundle")
    hp = AmcHyperparams(16, 16, 16, 8, 3, "full")
    params = init_params(hp, 5)
    save_checkpoint(tmp_path / "c.ckpt", params, hp)
    code, out, _ = run(capsys, "rank", "q0003", "--top-k", 1000, "--explain", "--set", f"bundle={synth_dir / 'bundle'}",
                       "--checkpoint", tmp_path / "c.ckpt", "--out", tmp_path / "r")
    assert code == 0
    table = rows(out)
    assert table[0] == ["rank", "image", "score", "p_v", "p_k", "M", "keywords"]
    ims = sorted(bundle.images)
    s = score_candidates(bundle, params, hp, ["q0003"] * len(ims), ims).score
    want = sorted(range(len(ims)), key=lambda j: (-s[j], ims[j]))
    assert [r[1] for r in table[1:]] == [ims[j] for j in want]
    for r in table[1:]:
        assert abs(float(r[3]) + float(r[4]) - 1.0) <= 2e-6
        M_grid = np.array(r[5].split(","), dtype=float)
        assert M_grid.shape == (9,) and abs(M_grid.sum() - 1) < 1e-5
        assert len(r[6].split(",")) == 10


def test_unknown_query_lists_nearest_ids(capsys, synth_dir, tmp_path):
    hp = AmcHyperparams(16, 16, 16, 8, 3, "full")
    save_checkpoint(tmp_path / "c.ckpt", init_params(hp, 0), hp)
    code, _, err = run(capsys, "rank", "q003", "--set", f"bundle={synth_dir / 'bundle'}",
                       "--checkpoint", tmp_path / "c.ckpt")
    assert code == 1 and "nearest ids" in err and "q0003" in err


# --------------------------------------------------------------------------
# gradcheck
# --------------------------------------------------------------------------

def test_gradcheck_passes_and_is_deterministic(capsys):
    code, out, _ = run(capsys, "gradcheck", "--seeds", 3)
    assert code == 0 and out.strip().endswith("tol=0.0001")
    tensor_rows = [r for r in rows(out) if r[0].startswith(("W_", "b_"))]
    assert len(tensor_rows) == 10 and all(r[-1] == "ok" for r in tensor_rows)
    assert run(capsys, "gradcheck", "--seeds", 3)[1] == out


def test_gradcheck_names_corrupted_op(capsys):
    with T.inject_adjoint_fault("softmax", 1.5):
        code, _, err = run(capsys, "gradcheck", "--seeds", 2)
    assert code == 1 and "softmax" in err.split("FAILED:")[1]


# --------------------------------------------------------------------------
# synth
# --------------------------------------------------------------------------

def test_synth_is_byte_identical(capsys, tmp_path):
    for name in ("a", "b"):
        assert run(capsys, "synth", "--out", tmp_path / name, *SMALL, "--seed", 8)[0] == 0
    cmp = filecmp.dircmp(tmp_path / "a" / "bundle", tmp_path / "b" / "bundle")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    _, mismatch, errors = filecmp.cmpfiles(tmp_path / "a" / "bundle", tmp_path / "b" / "bundle",
                                           sorted(p.name for p in (tmp_path / "a" / "bundle").iterdir()),
                                           shallow=False)
    assert not mismatch and not errors


def test_synth_bundle_has_planted_oracle_ndcg(capsys, tmp_path):
    assert run(capsys, "synth", "--out", tmp_path, "--set", "rho=0.5")[0] == 0
    bundle = load_bundle(tmp_path / "bundle")
    regenerated, truth = generate_synthetic_with_truth(SynthSpec(rho=0.5))
    assert regenerated == bundle
    lists = [M.JudgedList([truth.oracle_score(q, i) for i, _ in rs], [g for _, g in rs])
             for q, rs in sorted(bundle.judgments_by_query().items())]
    assert M.mean_metric("NDCG", lists, lambda l: M.ndcg_at_k(l, 5), 5).value > 0.95


def test_synth_unwritable_path(capsys, tmp_path):
    (tmp_path / "file").write_text("")
    code, _, err = run(capsys, "synth", "--out", tmp_path / "file" / "sub")
    assert code == 1 and "cannot create" in err


def test_synth_unknown_key(capsys, tmp_path):
    code, _, err = run(capsys, "synth", "--out", tmp_path, "--set", "n_querys=3")
    assert code == 1 and "n_queries" in err
