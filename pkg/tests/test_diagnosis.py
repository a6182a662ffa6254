import numpy as np
import pytest

from cfdiag import diagnosis as dg
from cfdiag import directions as dx
from cfdiag import engine as eng
from cfdiag import world as tw
from cfdiag.errors import DuplicateAttributeError, EmptyDirectionError, PreconditionError
from test_engine import constant_model

QUICK = eng.SearchConfig(iterations=15)
DIAG_WEIGHTS = eng.LossWeights(target=1.0, structure=0.5, attribute=4.0)


@pytest.fixture(scope="module")
def space3(world42, relevance42, space42):
    return space42.subspace(["stripes", "dots", "glow"])


# --- sensitivity histograms -----------------------------------------------------

def test_constant_model_gives_degenerate_uniform(world42, space3):
    rep = dg.sensitivity_histogram(
        world42, constant_model(0.7, attribute="stripes"), space3, n_samples=2, config=QUICK
    )
    assert rep.degenerate
    assert np.array_equal(rep.raw, np.zeros(3))
    assert np.allclose(rep.normalized, 1.0 / 3.0)


def test_histogram_single_sample_equals_single_search(world42, space3, balanced_clf):
    rep = dg.sensitivity_histogram(world42, balanced_clf, space3, n_samples=1, config=QUICK)
    s = tw.sample_style(world42, 0, stream=tw.STREAM_DIAGNOSIS)
    for i, attr in enumerate(space3.names):
        res = eng.search_counterfactual(
            world42, balanced_clf, space3.subspace([attr]), s, QUICK, sample_index=0
        )
        assert rep.raw[i] == dg.output_change(res)


def test_histogram_normalization_invariants(world42, space3, balanced_clf):
    rep = dg.sensitivity_histogram(world42, balanced_clf, space3, n_samples=4, config=QUICK)
    assert abs(rep.normalized.sum() - 1.0) <= 1e-9
    assert int(np.argmax(rep.raw)) == int(np.argmax(rep.normalized))
    assert np.all(rep.raw >= 0)
    assert rep.flip_flags.shape == (3, 4)


def test_histogram_deterministic(world42, space3, balanced_clf):
    r1 = dg.sensitivity_histogram(world42, balanced_clf, space3, n_samples=3, config=QUICK)
    r2 = dg.sensitivity_histogram(world42, balanced_clf, space3, n_samples=3, config=QUICK)
    assert np.array_equal(r1.raw, r2.raw)
    assert r1.content_hash() == r2.content_hash()


def test_confounded_classifier_ranks_confound_first(world42, space42, confounded_clf):
    cfg = eng.SearchConfig(iterations=40, weights=DIAG_WEIGHTS)
    rep = dg.sensitivity_histogram(world42, confounded_clf, space42, n_samples=20, config=cfg)
    assert rep.top1() == "dots"


# --- combination histograms -------------------------------------------------------

def test_combination_duplicate_pair_rejected(world42, space3, balanced_clf):
    with pytest.raises(DuplicateAttributeError):
        dg.combination_histogram(
            world42, balanced_clf, space3, [("dots", "dots")], n_samples=1, config=QUICK
        )


def test_combination_single_pair_matches_joint_search(world42, space3, balanced_clf):
    rep = dg.combination_histogram(
        world42, balanced_clf, space3, [("stripes", "dots")], n_samples=1, config=QUICK
    )
    s = tw.sample_style(world42, 0, stream=tw.STREAM_DIAGNOSIS)
    res = eng.search_counterfactual(
        world42, balanced_clf, space3.subspace(["stripes", "dots"]), s, QUICK, sample_index=0
    )
    assert rep.names == ("stripes+dots",)
    assert rep.raw[0] == dg.output_change(res)


def test_pair_scores_dominate_singletons(world42, space42, confounded_clf):
    # a richer search space cannot do worse than its parts, up to optimizer noise
    cfg = eng.SearchConfig(iterations=25)
    n = 12
    singles = dg.sensitivity_histogram(world42, confounded_clf, space42, n_samples=n, config=cfg)
    pairs = [("stripes", "dots"), ("dots", "glow"), ("rings", "haze")]
    combo = dg.combination_histogram(world42, confounded_clf, space42, pairs, n_samples=n, config=cfg)
    by_name = dict(zip(singles.names, singles.raw))
    for (a, b), score in zip(pairs, combo.raw):
        assert score >= max(by_name[a], by_name[b]) - 0.02


# --- confusion matrix ----------------------------------------------------------------

def test_confusion_zero_step_gives_zero_matrix(world42, space3, balanced_clf):
    cm = dg.confusion_matrix(
        world42, balanced_clf, space3, n_samples=2,
        config=eng.SearchConfig(step_size=0.0, iterations=3),
    )
    assert np.array_equal(cm.matrix, np.zeros((3, 3)))


def test_confusion_matrix_reproducible(world42, space3, balanced_clf):
    kw = dict(n_samples=2, config=QUICK)
    c1 = dg.confusion_matrix(world42, balanced_clf, space3, **kw)
    c2 = dg.confusion_matrix(world42, balanced_clf, space3, **kw)
    assert np.array_equal(c1.matrix, c2.matrix)
    assert c1.content_hash() == c2.content_hash()


def test_confusion_diagonal_dominance(world42, space42, confounded_clf):
    cm = dg.confusion_matrix(
        world42, confounded_clf, space42, n_samples=25, config=eng.SearchConfig(iterations=30)
    )
    assert cm.diagonally_dominant_columns(2.0) >= int(0.8 * len(cm.col_names))


# --- flip statistics -------------------------------------------------------------------

def test_flip_stats_all_flipped():
    fake = [
        eng.CounterfactualResult(
            style=None, original_image=None, original_output=0.9,
            best_weights=None, best_image=None, best_output=0.1, best_index=0,
            best_loss=0.0, flipped=True, ssim_to_original=1.0, psnr_to_original=1.0,
            trace=[eng.TraceEntry(0, np.zeros(1), 0, 0, 0, 0, output=0.2)],
            space_names=("a",), kind="classifier", flip_threshold=0.5,
            keypoint_displacement=0.25,
        )
        for _ in range(4)
    ]
    stats = dg.flip_stats(fake, budget=1)
    assert stats.flip_rate == 1.0
    assert stats.flip_resistance == 0.0


def test_flip_stats_prefix_monotonicity(world42, space42, confounded_clf):
    cfg = eng.SearchConfig(iterations=40)
    results = [
        eng.search_counterfactual(
            world42, confounded_clf, space42,
            tw.sample_style(world42, 400 + i, stream=tw.STREAM_DIAGNOSIS), cfg, sample_index=i,
        )
        for i in range(10)
    ]
    r25 = dg.flip_stats(results, budget=25)
    r40 = dg.flip_stats(results, budget=40)
    assert r40.flip_rate >= r25.flip_rate
    assert r25.flip_resistance == 1.0 - r25.flip_rate


def test_flip_stats_empty_rejected():
    with pytest.raises(PreconditionError):
        dg.flip_stats([], budget=10)


# --- quality table ------------------------------------------------------------------------

def test_quality_table_empty_population(world42, space3, balanced_clf):
    table = dg.quality_table(world42, balanced_clf, space3, n_samples=0, config=QUICK)
    assert [r.n_samples for r in table.rows] == [0, 0]
    assert table.attribute_not_worse is None


def test_quality_table_deterministic_and_flagged(world42, space42, confounded_clf):
    cfg = eng.SearchConfig(iterations=30)
    t1 = dg.quality_table(world42, confounded_clf, space42, n_samples=8, config=cfg)
    t2 = dg.quality_table(world42, confounded_clf, space42, n_samples=8, config=cfg)
    assert t1.to_dict() == t2.to_dict()
    attr_row = next(r for r in t1.rows if r.space == "attribute")
    raw_row = next(r for r in t1.rows if r.space == "raw-style")
    if attr_row.n_flipped and raw_row.n_flipped:
        assert table_flag_consistent(t1)


def table_flag_consistent(table):
    attr_row = next(r for r in table.rows if r.space == "attribute")
    raw_row = next(r for r in table.rows if r.space == "raw-style")
    return table.attribute_not_worse == (attr_row.ssim_mean >= raw_row.ssim_mean)


# --- oracle histogram ---------------------------------------------------------------------

def test_oracle_constant_model_degenerate(world42):
    rep = dg.oracle_histogram(
        world42, constant_model(0.3, attribute="stripes"), ["stripes", "dots"],
        n_samples=2, config=QUICK,
    )
    assert rep.degenerate and rep.mode == "oracle-knob"


def test_oracle_histogram_agrees_on_top1(world42, confounded_clf):
    cfg = eng.SearchConfig(iterations=40, weights=DIAG_WEIGHTS, step_size=0.05)
    rep = dg.oracle_histogram(
        world42, confounded_clf, list(world42.config.attributes), n_samples=20, config=cfg
    )
    assert rep.top1() == "dots"


# --- lambda sweep -------------------------------------------------------------------------

def test_lambda_sweep_monotone_survivors(world42, relevance42):
    raw = relevance42.matrix @ dx.text_delta(world42, "stripes")
    lams = sorted(float(v) for v in np.linspace(0.0, raw.max() * 0.99, 6))
    sweep = dg.lambda_sweep(world42, relevance42, "stripes", lams)
    counts = [r.survivors for r in sweep.rows]
    assert all(a >= b for a, b in zip(counts, counts[1:]))
    assert counts[0] > 0


def test_lambda_sweep_zero_weight_strips_identical(world42, relevance42):
    raw = relevance42.matrix @ dx.text_delta(world42, "dots")
    sweep = dg.lambda_sweep(world42, relevance42, "dots", [0.0, float(raw.max()) * 0.5])
    strips = [r.strip for r in sweep.rows if r.strip is not None]
    assert len(strips) >= 2
    mid = sweep.strip_weights.index(0.0)
    assert np.array_equal(strips[0][mid], strips[1][mid])


def test_lambda_sweep_strip_difference_bounded_by_dropped_channels(world42, relevance42):
    # squash is 1/4-Lipschitz and templates are orthonormal, so the pixel L2
    # difference is bounded by a quarter of the intensity-vector difference
    attr = "stripes"
    raw = relevance42.matrix @ dx.text_delta(world42, attr)
    lam_hi = float(np.quantile(raw, 0.95))
    sweep = dg.lambda_sweep(world42, relevance42, attr, [0.0, lam_hi])
    d0 = dx.edit_direction(relevance42, dx.text_delta(world42, attr), lam=0.0, attribute=attr)
    d1 = dx.edit_direction(relevance42, dx.text_delta(world42, attr), lam=lam_hi, attribute=attr)
    style = tw.sample_style(world42, 0, stream=tw.STREAM_DIAGNOSIS)
    for k, w in enumerate(sweep.strip_weights):
        img0, img1 = sweep.rows[0].strip[k], sweep.rows[1].strip[k]
        a0 = tw.oracle_intensities(world42, style + w * d0.unit)
        a1 = tw.oracle_intensities(world42, style + w * d1.unit)
        bound = 0.25 * np.linalg.norm(a0 - a1) + 1e-12
        assert np.linalg.norm(img0 - img1) <= bound


def test_lambda_sweep_all_empty_raises(world42, relevance42):
    with pytest.raises(EmptyDirectionError):
        dg.lambda_sweep(world42, relevance42, "stripes", [1e6, 2e6])


def test_lambda_sweep_unsorted_rejected(world42, relevance42):
    with pytest.raises(PreconditionError):
        dg.lambda_sweep(world42, relevance42, "stripes", [0.5, 0.1])


# --- prompt stability -----------------------------------------------------------------------

def test_stability_identical_sets_have_unit_correlation(world42, relevance42, balanced_clf):
    canon = {a: tw.join_prompt("a canvas", a) for a in ("stripes", "dots", "glow")}
    rep = dg.prompt_stability(
        world42, balanced_clf, relevance42, [canon, dict(canon)], n_samples=3, config=QUICK
    )
    assert rep.spearman_to_first == [1.0, 1.0]
    assert rep.top1_agreement == [True, True]
    assert not rep.degenerate


def test_stability_single_attribute_degenerate(world42, relevance42, balanced_clf):
    sets = [
        {"stripes": tw.join_prompt("a canvas", "stripes")},
        {"stripes": world42.prompts.synonyms["stripes"][0]},
    ]
    rep = dg.prompt_stability(world42, balanced_clf, relevance42, sets, n_samples=2, config=QUICK)
    assert rep.degenerate
    assert rep.spearman_to_first == [1.0, 1.0]


def test_stability_synonyms_agree(world42, relevance42, confounded_clf):
    attrs = list(world42.config.attributes)
    canon = {a: world42.prompts.canonical[a] for a in attrs}
    syn = {a: world42.prompts.synonyms[a][0] for a in attrs}
    cfg = eng.SearchConfig(iterations=30, weights=DIAG_WEIGHTS)
    rep = dg.prompt_stability(
        world42, confounded_clf, relevance42, [canon, syn], n_samples=10, config=cfg
    )
    assert rep.top1_agreement[1]
    assert rep.spearman_to_first[1] >= 0.8


def test_stability_needs_two_sets(world42, relevance42, balanced_clf):
    with pytest.raises(PreconditionError):
        dg.prompt_stability(world42, balanced_clf, relevance42, [{}], n_samples=1)
