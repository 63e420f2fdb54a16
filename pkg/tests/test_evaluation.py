import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from viplface.errors import DataError, UsageError
from viplface.evaluation import (
    EvalReport,
    GalleryProbeSplit,
    PairFolds,
    best_threshold,
    build_split,
    cosine,
    extract_feature,
    extract_features,
    identify_closed,
    identify_open,
    load_features,
    read_labels,
    read_pairs,
    save_features,
    verify_10fold,
)
from viplface.graph import Network, builtin
from viplface.train import initialize


def pair_with_similarity(s, dim=3):
    """Two unit vectors whose cosine is exactly ``s`` (up to rounding)."""
    a = np.zeros(dim)
    a[0] = 1.0
    b = np.zeros(dim)
    b[0], b[1] = s, math.sqrt(1 - s * s)
    return a, b


def separable_set(n_folds=10, per_fold=20, intra=0.9, inter=0.1):
    feats, folds = {}, []
    for k in range(n_folds):
        fold = []
        for i in range(per_fold):
            same = i % 2 == 0
            a, b = pair_with_similarity(intra if same else inter)
            na, nb = f"k{k}p{i}a", f"k{k}p{i}b"
            feats[na], feats[nb] = a, b
            fold.append((na, nb, same))
        folds.append(fold)
    return PairFolds(folds), feats


# -- cosine ------------------------------------------------------------------

def test_cosine_examples():
    a = np.array([0.3, -1.2, 2.0])
    assert cosine(a, a) == pytest.approx(1.0)
    assert cosine([1, 0], [0, 1]) == 0.0
    assert cosine(a, 2 * a) == pytest.approx(1.0)


def test_cosine_zero_vector():
    with pytest.raises(DataError):
        cosine([0, 0], [1, 0])


@given(st.lists(st.floats(-100, 100), min_size=3, max_size=3),
       st.lists(st.floats(-100, 100), min_size=3, max_size=3))
def test_cosine_bounded(a, b):
    if np.linalg.norm(a) < 1e-6 or np.linalg.norm(b) < 1e-6:
        return
    assert -1.0 <= cosine(a, b) <= 1.0


# -- verification ------------------------------------------------------------

def test_separable_pairs_give_perfect_accuracy():
    folds, feats = separable_set()
    rep = verify_10fold(folds, feats)
    assert rep.mean_accuracy == 1.0
    assert "mean_accuracy 1.0000" in rep.to_text()
    assert all(0.1 < t <= 0.9 for t in rep.thresholds)


def test_shuffled_labels_give_chance_accuracy():
    rng = np.random.default_rng(0)
    folds, feats = separable_set(per_fold=600)
    flags = rng.permutation([s for fold in folds.folds for _, _, s in fold])
    it = iter(flags)
    shuffled = PairFolds([[(a, b, bool(next(it))) for a, b, _ in fold] for fold in folds.folds])
    assert 0.45 <= verify_10fold(shuffled, feats).mean_accuracy <= 0.55


def test_random_features_give_chance_accuracy():
    rng = np.random.default_rng(1)
    feats = {f"s{i}": rng.standard_normal(16) for i in range(2000)}
    names = list(feats)
    folds = [[(names[rng.integers(2000)], names[rng.integers(2000)], bool(rng.integers(2)))
              for _ in range(600)] for _ in range(10)]
    acc = verify_10fold(PairFolds(folds), feats).mean_accuracy
    assert 0.45 <= acc <= 0.55


def brute_best(sims, same, grid):
    best_t, best_acc = None, -1.0
    for t in sorted(grid):
        correct = sum(1 for s, y in zip(sims, same) if (s >= t) == y)
        if correct / len(sims) > best_acc:
            best_t, best_acc = t, correct / len(sims)
    return best_t, best_acc


def test_miniature_threshold_matches_exhaustive_sweep():
    sims = [0.9, 0.8, 0.7, 0.1]
    same = [True, True, False, False]
    grid = [0.0, 0.05, 0.1, 0.5, 0.75, 0.8, 0.85, 1.0]
    assert best_threshold(sims, same, grid) == brute_best(sims, same, grid) == (0.75, 1.0)
    # default candidates: distinct similarities plus one above the largest
    assert best_threshold(sims, same) == (0.8, 1.0)


def test_miniature_cross_validation_matches_hand_loop():
    feats, folds = {}, []
    for k, (s, y) in enumerate([(0.9, True), (0.8, True), (0.7, False), (0.1, False)]):
        a, b = pair_with_similarity(s)
        feats[f"a{k}"], feats[f"b{k}"] = a, b
        folds.append([(f"a{k}", f"b{k}", y)])
    grid = [0.05, 0.5, 0.75, 0.85, 0.95]
    rep = verify_10fold(PairFolds(folds), feats, thresholds=grid)
    sims = [0.9, 0.8, 0.7, 0.1]
    same = [True, True, False, False]
    for k in range(4):
        rest = [i for i in range(4) if i != k]
        t, _ = brute_best([sims[i] for i in rest], [same[i] for i in rest], grid)
        assert rep.thresholds[k] == t
        assert rep.fold_accuracies[k] == float((sims[k] >= t) == same[k])


def test_threshold_ties_prefer_lowest():
    t, acc = best_threshold([0.2, 0.8], [False, True], [0.3, 0.5, 0.7])
    assert (t, acc) == (0.3, 1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 100))
def test_verification_scale_invariant(seed, scale):
    rng = np.random.default_rng(seed)
    feats = {f"s{i}": rng.standard_normal(4) for i in range(30)}
    folds = [[(f"s{rng.integers(30)}", f"s{rng.integers(30)}", bool(rng.integers(2)))
              for _ in range(6)] for _ in range(10)]
    pf = PairFolds(folds)
    a = verify_10fold(pf, feats)
    b = verify_10fold(pf, {k: v * scale for k, v in feats.items()})
    assert a.fold_accuracies == b.fold_accuracies
    assert abs(a.mean_accuracy - sum(a.fold_accuracies) / 10) < 1e-12


def test_missing_feature_named():
    folds, feats = separable_set(n_folds=2, per_fold=2)
    del feats["k1p1b"]
    with pytest.raises(DataError, match="k1p1b"):
        verify_10fold(folds, feats)


def test_read_pairs():
    pf = read_pairs("0,a,b,1\n1,c,d,0\n# note\n0,e,f,0\n")
    assert pf.folds == [[("a", "b", True), ("e", "f", False)], [("c", "d", False)]]
    with pytest.raises(DataError):
        read_pairs("0,a,b,2\n1,a,b,0\n")
    with pytest.raises(DataError, match="fold"):
        read_pairs("0,a,b,1\n2,a,b,0\n")


def test_report_std_is_sample_std():
    rep = EvalReport(fold_accuracies=[1.0, 0.0], thresholds=[0.0, 0.0])
    assert rep.std_accuracy == pytest.approx(math.sqrt(0.5))


# -- identification ----------------------------------------------------------

def basis(n, dim):
    return np.eye(dim)[:n]


def probe_at(j, score, dim):
    """Probe whose best gallery match is basis vector ``j`` with cosine ``score``."""
    v = np.zeros(dim)
    v[j] = score
    v[-1] = math.sqrt(1 - score * score)
    return v


def test_rank1_identical_probes():
    g = np.random.default_rng(2).standard_normal((5, 8))
    split = GalleryProbeSplit(g, list("abcde"), g.copy(), list("abcde"), np.zeros((0, 8)))
    assert identify_closed(split) == 1.0


def test_rank1_single_identity_is_forced():
    rng = np.random.default_rng(3)
    split = GalleryProbeSplit(rng.standard_normal((3, 4)), ["x"] * 3, rng.standard_normal((6, 4)),
                              ["x"] * 6, np.zeros((0, 4)))
    assert identify_closed(split) == 1.0


def test_rank1_hand_matrix():
    # gallery rows are the basis; probe rows are similarity rows directly
    sim = np.array([[0.9, 0.2, 0.1],
                    [0.3, 0.1, 0.8],
                    [0.2, 0.7, 0.6]])
    labels = ["p", "q", "r"]
    expect = sum(labels[int(np.argmax(row))] == labels[i] for i, row in enumerate(sim)) / 3
    split = GalleryProbeSplit(np.eye(3), labels, sim, labels, np.zeros((0, 3)))
    assert identify_closed(split) == pytest.approx(expect) == pytest.approx(1 / 3)


def test_rank1_ties_go_to_first_gallery_entry():
    g = np.array([[1.0, 0.0], [1.0, 0.0]])
    split = GalleryProbeSplit(g, ["a", "b"], [[2.0, 0.0]], ["a"], np.zeros((0, 2)))
    assert identify_closed(split) == 1.0
    split = GalleryProbeSplit(g, ["b", "a"], [[2.0, 0.0]], ["a"], np.zeros((0, 2)))
    assert identify_closed(split) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_rank1_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((6, 5))
    labels = np.array([0, 0, 1, 2, 3, 3])
    p = rng.standard_normal((10, 5))
    pl = rng.choice(labels, 10)
    perm = rng.permutation(6)
    a = identify_closed(GalleryProbeSplit(g, labels, p, pl, np.zeros((0, 5))))
    b = identify_closed(GalleryProbeSplit(g[perm], labels[perm], p, pl, np.zeros((0, 5))))
    assert a == b


def test_empty_gallery_rejected():
    with pytest.raises(DataError):
        GalleryProbeSplit(np.zeros((0, 2)), [], np.zeros((0, 2)), [], np.zeros((0, 2)))


def test_unknown_probe_identity_must_not_be_enrolled():
    with pytest.raises(DataError, match="share"):
        GalleryProbeSplit(np.eye(2), ["a", "b"], np.eye(2), ["a", "b"], np.eye(2), ["c", "a"])


def test_open_set_perfectly_separated():
    dim = 5
    g = basis(3, dim)
    unknown = np.stack([probe_at(0, 0.0, dim) for _ in range(10)])
    known = np.stack([probe_at(j, 0.9, dim) for j in range(3)])
    split = GalleryProbeSplit(g, [0, 1, 2], known, [0, 1, 2], unknown)
    dir_, tau = identify_open(split, 0.01)
    assert dir_ == 1.0 and tau == pytest.approx(0.0)


def test_open_set_known_below_threshold():
    dim = 5
    g = basis(3, dim)
    unknown = np.stack([probe_at(0, 0.95, dim) for _ in range(10)])
    known = np.stack([probe_at(j, 0.5, dim) for j in range(3)])
    split = GalleryProbeSplit(g, [0, 1, 2], known, [0, 1, 2], unknown)
    assert identify_open(split, 0.05)[0] == 0.0


def brute_dir(unknown_scores, known_table, far):
    """Scan candidate thresholds upward; take the first meeting the FAR bound."""
    u = len(unknown_scores)
    for t in sorted(set(unknown_scores)):
        alarms = sum(1 for s in unknown_scores if s > t)
        if alarms / u <= far:
            break
    hits = sum(1 for score, correct in known_table if correct and score > t)
    return hits / len(known_table), t


def open_instance(seed=4, n_known=100):
    rng = np.random.default_rng(seed)
    dim = 12
    g = basis(10, dim)
    unknown_scores = rng.uniform(0.001, 1.0, 100)
    unknown = np.stack([probe_at(0, s, dim) for s in unknown_scores])
    # known table: score on its best match and whether that match is right
    table = [(round(float(s), 3) + 0.0005, bool(c))
             for s, c in zip(rng.uniform(0.5, 1.0, n_known), rng.random(n_known) < 0.8)]
    known, labels = [], []
    for i, (s, correct) in enumerate(table):
        j = i % 10
        known.append(probe_at(j, s, dim))
        labels.append(j if correct else (j + 1) % 10)
    split = GalleryProbeSplit(g, list(range(10)), np.stack(known), labels, unknown)
    return split, unknown_scores, table


def test_open_set_matches_sort_and_count_oracle():
    split, unknown_scores, table = open_instance()
    dir_, tau = identify_open(split, 0.01)
    expect, t = brute_dir(list(unknown_scores), table, 0.01)
    assert tau == pytest.approx(t, abs=1e-12)
    assert tau == pytest.approx(np.sort(unknown_scores)[-2], abs=1e-12)
    assert dir_ == expect


@settings(max_examples=20, deadline=None)
@given(st.floats(0.001, 0.5), st.floats(0.001, 0.5))
def test_dir_monotone_in_far(f1, f2):
    split, _, _ = open_instance(seed=5, n_known=40)
    lo, hi = sorted((f1, f2))
    assert identify_open(split, lo)[0] <= identify_open(split, hi)[0]


def test_open_set_errors():
    split = GalleryProbeSplit(np.eye(2), [0, 1], np.eye(2), [0, 1], np.zeros((0, 2)))
    with pytest.raises(DataError):
        identify_open(split, 0.1)
    with pytest.raises(UsageError):
        identify_open(split, 0.0)


def test_build_split_partitions_by_enrolment():
    feats = {n: np.eye(3)[i % 3] for i, n in enumerate("abcdef")}
    split = build_split(feats, read_labels("a,x\nb,y\n", "gallery"),
                        read_labels("c,x\nd,z\ne,y\n", "probes"))
    assert len(split.known) == 2 and len(split.unknown) == 1
    with pytest.raises(DataError, match="nope"):
        build_split(feats, [("nope", "x")], [("a", "x")])


# -- features ----------------------------------------------------------------

@pytest.fixture(scope="module")
def small_vipl():
    d = builtin("viplfacenet", input_shape=(3, 67, 67), num_classes=4)
    return initialize(Network(d), np.random.default_rng(0))


def test_feature_dimension_and_determinism(small_vipl):
    img = np.random.default_rng(1).uniform(0, 255, (3, 67, 67)).astype(np.float32)
    f1 = extract_feature(small_vipl, img)
    f2 = extract_feature(small_vipl, img)
    assert f1.shape == (2048,)
    assert f1.tobytes() == f2.tobytes()
    assert np.all(f1 >= 0)
    pre = extract_feature(small_vipl, img, pre_relu=True)
    np.testing.assert_array_equal(np.maximum(pre, 0), f1)


def test_alexnet_feature_is_4096():
    d = builtin("alexnet", input_shape=(3, 67, 67), num_classes=4)
    net = Network.zeros(d)
    assert net.shapes[d.feature] == (4096,)


def test_feature_center_crop(small_vipl):
    rng = np.random.default_rng(2)
    big = rng.uniform(0, 255, (3, 71, 71)).astype(np.float32)
    np.testing.assert_array_equal(extract_features(small_vipl, [big]),
                                  extract_features(small_vipl, [big[:, 2:69, 2:69]]))


def test_feature_file_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    names = ["x/1.pgm", "y/2.pgm"]
    feats = rng.standard_normal((2, 7)).astype(np.float32)
    save_features(tmp_path / "f.bin", names, feats)
    back = load_features(tmp_path / "f.bin")
    assert list(back) == names
    np.testing.assert_array_equal(np.stack(list(back.values())), feats)
