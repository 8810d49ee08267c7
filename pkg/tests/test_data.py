import numpy as np
import pytest

from amc import metrics as M
from amc.data import (BundleError, DatasetBundle, SynthSpec, generate_synthetic,
                      generate_synthetic_with_truth, load_bundle, oracle_dim, oracle_params,
                      random_pairs_bundle, write_bundle)
from amc.evaluation import mean_ndcg
from amc.model import AmcHyperparams
from amc.tensor import FeatureTensor


@pytest.fixture(scope="module")
def synth():
    return generate_synthetic_with_truth(SynthSpec(n_queries=40, n_images=300, seed=9))


def varied_bundle():
    rng = np.random.default_rng(0)
    dims = {"d_q": 3, "d_v": 2, "d_k": 4, "r": 2}
    queries = {f"q{i}": FeatureTensor(rng.standard_normal(3)) for i in range(2)}
    images = {f"i{j}": FeatureTensor(rng.standard_normal((2, 2, 2))) for j in range(5)}
    keywords = {f"i{j}": FeatureTensor(rng.standard_normal((j + 1, 4))) for j in range(5)}
    clicks = [("q0", "i0", 3), ("q0", "i4", 0), ("q1", "i2", 1)]
    judgments = [("q0", "i0", 2), ("q1", "i3", 0)]
    return DatasetBundle(dims, queries, images, keywords, clicks, judgments)


# --------------------------------------------------------------------------
# bundle I/O
# --------------------------------------------------------------------------

def test_round_trip_is_bit_identical(tmp_path, synth):
    bundle = synth[0]
    write_bundle(bundle, tmp_path / "b")
    back = load_bundle(tmp_path / "b")
    assert back == bundle
    for iid in bundle.images:
        assert back.images[iid].data.tobytes() == bundle.images[iid].data.tobytes()
        assert back.keywords[iid].data.tobytes() == bundle.keywords[iid].data.tobytes()


def test_variable_keyword_counts_load(tmp_path):
    write_bundle(varied_bundle(), tmp_path)
    back = load_bundle(tmp_path)
    assert [back.n_keywords(f"i{j}") for j in range(5)] == [1, 2, 3, 4, 5]
    K, act = back.keyword_stack()
    assert K.shape == (5, 5, 4)
    np.testing.assert_array_equal(act.sum(axis=1), [1, 2, 3, 4, 5])


def test_dangling_click_reports_file_and_line(tmp_path):
    write_bundle(varied_bundle(), tmp_path)
    with open(tmp_path / "clicks.tsv", "a") as fh:
        fh.write("q1\tnope\t2\n")
    with pytest.raises(BundleError, match="dangling reference") as err:
        load_bundle(tmp_path)
    assert err.value.file == "clicks.tsv" and err.value.line == 4


def test_missing_file_is_named(tmp_path):
    write_bundle(varied_bundle(), tmp_path)
    (tmp_path / "judgments.tsv").unlink()
    with pytest.raises(BundleError, match="judgments.tsv"):
        load_bundle(tmp_path)
    with pytest.raises(BundleError, match="not found"):
        load_bundle(tmp_path / "absent")


def test_dimension_mismatch_is_reported(tmp_path):
    write_bundle(varied_bundle(), tmp_path)
    lines = (tmp_path / "queries.txt").read_text().splitlines()
    lines[1] += " 0.5"
    (tmp_path / "queries.txt").write_text("\n".join(lines) + "\n")
    with pytest.raises(BundleError) as err:
        load_bundle(tmp_path)
    assert err.value.file == "queries.txt" and err.value.line == 2


@pytest.mark.parametrize("row, msg", [
    ("q0\ti0\tmany", "integer"),
    ("q0\ti0\t-1", "nonnegative"),
    ("q0 i0 1", "3 tab-separated"),
])
def test_malformed_click_rows(tmp_path, row, msg):
    write_bundle(varied_bundle(), tmp_path)
    (tmp_path / "clicks.tsv").write_text(row + "\n")
    with pytest.raises(BundleError, match=msg):
        load_bundle(tmp_path)


def test_non_contiguous_keywords_rejected(tmp_path):
    write_bundle(varied_bundle(), tmp_path)
    lines = (tmp_path / "keywords.txt").read_text().splitlines()
    # move an i1 row after the i2 block
    lines.append(lines.pop(1))
    (tmp_path / "keywords.txt").write_text("\n".join(lines) + "\n")
    with pytest.raises(BundleError, match="contiguous"):
        load_bundle(tmp_path)


# --------------------------------------------------------------------------
# synthetic generator
# --------------------------------------------------------------------------

def test_generator_is_deterministic():
    spec = SynthSpec(n_queries=20, n_images=120, seed=3)
    assert generate_synthetic(spec) == generate_synthetic(spec)
    assert generate_synthetic(spec) != generate_synthetic(SynthSpec(n_queries=20, n_images=120, seed=4))


@pytest.mark.parametrize("rho", [0.0, 0.3, 1.0])
def test_generated_bundles_pass_validation(tmp_path, rho):
    bundle = generate_synthetic(SynthSpec(n_queries=20, n_images=120, rho=rho, seed=1))
    write_bundle(bundle, tmp_path)
    assert load_bundle(tmp_path) == bundle


def test_rho_one_relevance_comes_from_images_alone():
    bundle, truth = generate_synthetic_with_truth(SynthSpec(n_queries=20, n_images=120, rho=1.0, seed=1))
    assert set(truth.query_type.values()) == {"visual"}
    assert set(truth.primary.values()) == {"visual"}
    for q, i, _ in bundle.judgments:
        assert truth.relevance[(q, i)] == float(truth.query_latent[q] @ truth.visual_latent[i])
    # keyword content is only distractors, never longer than the primary latents
    assert max(np.linalg.norm(w) for w in truth.keyword_latent.values()) <= 1.0


def test_rho_one_without_distractors_leaves_keywords_bare():
    bundle, truth = generate_synthetic_with_truth(
        SynthSpec(n_queries=20, n_images=120, rho=1.0, distractor_scale=0.0, seed=1))
    assert not truth.keyword_latent and not truth.signal_rows
    K, _ = bundle.keyword_stack()
    assert np.max(np.abs(K @ truth.proj_k)) < 6 * SynthSpec().noise


def test_rho_zero_relevance_comes_from_keywords_alone():
    bundle, truth = generate_synthetic_with_truth(SynthSpec(n_queries=20, n_images=120, rho=0.0, seed=1))
    assert set(truth.primary.values()) == {"keyword"}
    for q, i, _ in bundle.judgments:
        assert truth.relevance[(q, i)] == float(truth.query_latent[q] @ truth.keyword_latent[i])


def test_every_image_carries_both_modalities():
    _, truth = generate_synthetic_with_truth(SynthSpec(n_queries=20, n_images=120, seed=1))
    assert set(truth.signal_cell) == set(truth.signal_rows) == set(truth.primary)
    for iid, kind in truth.primary.items():
        own = truth.visual_latent if kind == "visual" else truth.keyword_latent
        other = truth.keyword_latent if kind == "visual" else truth.visual_latent
        assert np.linalg.norm(own[iid]) == pytest.approx(1.0)
        assert np.linalg.norm(other[iid]) <= SynthSpec().distractor_scale


def test_image_gain_defaults_to_grid_size():
    assert SynthSpec().gain == 9.0
    assert SynthSpec(r=2).gain == 4.0
    assert SynthSpec(image_gain=1.5).gain == 1.5


def test_planted_oracle_ndcg(synth):
    bundle, truth = synth
    lists = []
    for qid, rows in sorted(bundle.judgments_by_query().items()):
        scores = [truth.oracle_score(qid, iid) for iid, _ in rows]
        lists.append(M.JudgedList(scores, [g for _, g in rows]))
    rep = M.mean_metric("NDCG", lists, lambda l: M.ndcg_at_k(l, 5), 5)
    assert rep.value > 0.95


def test_noiseless_oracle_ranking_is_click_ranking():
    bundle, truth = generate_synthetic_with_truth(SynthSpec(n_queries=30, n_images=200, noise=0.0, seed=2))
    for qid, rows in bundle.clicks_by_query().items():
        rel = {iid: truth.relevance[(qid, iid)] for iid, _ in rows}
        clicked = sorted((iid for iid, c in rows if c > 0), key=lambda i: -dict(rows)[i])
        by_oracle = sorted((iid for iid in rel if rel[iid] > 0), key=lambda i: -rel[i])
        assert clicked == by_oracle
        assert all(rel[iid] <= 0 for iid, c in rows if c == 0)


def test_noise_cells_are_zero_mean(synth):
    bundle, truth = synth
    r = bundle.dims["r"]
    cells = []
    for iid, v in bundle.images.items():
        grid = v.numpy().reshape(r * r, -1)
        planted = truth.signal_cell.get(iid)
        skip = None if planted is None else planted[0] * r + planted[1]
        cells.extend(grid[c] for c in range(r * r) if c != skip)
    x = np.concatenate(cells)
    assert abs(x.mean()) <= 4 * x.std() / np.sqrt(x.size)


def test_noise_keyword_rows_are_zero_mean(synth):
    bundle, truth = synth
    rows = []
    for iid, kw in bundle.keywords.items():
        planted = set(truth.signal_rows.get(iid, []))
        rows.extend(kw.numpy()[j] for j in range(kw.shape[0]) if j not in planted)
    x = np.concatenate(rows)
    assert abs(x.mean()) <= 4 * x.std() / np.sqrt(x.size)


def test_grades_band_planted_relevance(synth):
    bundle, truth = synth
    rel = np.array([truth.relevance[(q, i)] for q, i, _ in bundle.judgments])
    grades = np.array([g for _, _, g in bundle.judgments])
    assert set(grades.tolist()) <= {0, 1, 2, 3}
    np.testing.assert_array_equal(grades == 0, rel <= 0)
    # positive relevance splits into three equal-mass bands, monotone in relevance
    counts = np.bincount(grades[grades > 0], minlength=4)[1:] / np.sum(grades > 0)
    np.testing.assert_allclose(counts, 1 / 3, atol=0.02)
    order = np.argsort(rel)
    assert np.all(np.diff(grades[order]) >= 0)


def test_oracle_parameters_rank_noiseless_data():
    spec = SynthSpec(n_queries=40, n_images=300, noise=0.0, seed=6)
    bundle, truth = generate_synthetic_with_truth(spec)
    hp = AmcHyperparams(spec.d_q, spec.d_v, spec.d_k, oracle_dim(spec.latent_dim), spec.r, "full")
    assert mean_ndcg(bundle, oracle_params(truth, hp), hp) > 0.95


@pytest.mark.parametrize("bad", [
    dict(rho=1.5), dict(latent_dim=16), dict(latent_dim=15, d_q=16),
    dict(n_images=10), dict(candidates_per_query=2), dict(noise=-0.1), dict(keywords_per_image=0),
    dict(distractor_scale=-1.0), dict(image_gain=0.0),
])
def test_spec_validation(bad):
    with pytest.raises(ValueError):
        SynthSpec(**bad)


def test_random_pairs_bundle_shape():
    b = random_pairs_bundle(5, seed=0)
    b.validate()
    assert len(b.queries) == len(b.images) == len(b.clicks) == 5
    assert b.judgments == []
