import csv
import math
import re
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capsrem import rem
from capsrem.capsnet import CapsNetConfig, CapsNetModel
from capsrem.data import Dataset, synth_shapes
from capsrem.errors import ConfigError, DataError


@pytest.fixture
def tiny_model():
    cfg = CapsNetConfig(image_height=12, image_width=12, conv1_channels=4, conv1_kernel=3, primary_kernel=3,
                        primary_stride=2, num_types=2, primary_dim=2, class_dim=3, num_classes=3,
                        routing_iterations=3)
    model = CapsNetModel(cfg, seed=0)
    model.params["caps.W"].data *= 40
    return model


@pytest.fixture
def glyphs():
    return synth_shapes(60, 3, size=12, seed=4)


# -- quantizer -------------------------------------------------------------------------

@pytest.mark.parametrize("c, K, idx", [(0.5, 11, 5), (0.0, 11, 0), (1.0, 11, 10), (0.05, 11, 1),
                                       (0.049, 11, 0), (1.0, 2, 1), (0.5, 2, 1), (0.25, 3, 1)])
def test_quantize_examples(c, K, idx):
    assert rem.quantize(c, K) == idx


@pytest.mark.parametrize("K", [1, 0, -3])
def test_quantize_needs_two_levels(K):
    with pytest.raises(ConfigError):
        rem.quantize(0.5, K)
    with pytest.raises(ConfigError):
        rem.Quantizer(K)


def test_quantize_clamps_and_flags():
    idx, clamped = rem.quantize(np.array([-0.2, 0.3, 1.7]), 11, return_clamped=True)
    np.testing.assert_array_equal(idx, [0, 3, 10])
    np.testing.assert_array_equal(clamped, [True, False, True])


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 1000))
def test_quantize_idempotent_on_levels(K):
    idx = np.arange(K)
    np.testing.assert_array_equal(rem.quantize(rem.level_value(idx, K), K), idx)
    q = rem.Quantizer(K)
    assert q.levels[0] == 0.0 and q.levels[-1] == 1.0


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.integers(2, 64))
def test_quantize_monotone_and_nearest(a, b, K):
    lo, hi = min(a, b), max(a, b)
    assert rem.quantize(lo, K) <= rem.quantize(hi, K)
    assert abs(rem.level_value(rem.quantize(a, K), K) - a) <= 0.5 / (K - 1) + 1e-12


# -- entropy ------------------------------------------------------------------------------

def _dict(*tables):
    d = rem.ParseTreeDictionary(len(tables))
    for j, table in enumerate(tables):
        for key, n in table.items():
            d.add(j, key, n)
    return d


@pytest.mark.parametrize("counts, bits", [({"a": 2, "b": 2}, 1.0), ({"a": 5}, 0.0),
                                          ({"a": 1, "b": 1, "c": 2}, 1.5)])
def test_class_entropy_examples(counts, bits):
    assert rem.class_entropy(_dict(counts), 0) == pytest.approx(bits, abs=1e-12)


def test_mean_entropy_examples():
    assert rem.mean_entropy([2.0, 4.0]) == 3.0
    assert rem.mean_entropy([1.25]) == 1.25
    report = rem.entropy_report(_dict({"a": 1, "b": 1}, {}, {"x": 3}))
    assert report.per_class[1] is None
    assert report.mean == pytest.approx(0.5)


def test_all_empty_classes_is_data_error():
    with pytest.raises(DataError):
        rem.entropy_report(_dict({}, {})).mean


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 50), min_size=1, max_size=30))
def test_entropy_bounds_and_relabel_invariance(counts):
    table = {f"k{i}": c for i, c in enumerate(counts)}
    h = rem.entropy_from_counts(table)
    assert 0 <= h <= math.log2(len(counts)) + 1e-9
    relabelled = {f"other-{len(counts) - i}": c for i, c in enumerate(counts)}
    assert rem.entropy_from_counts(relabelled) == pytest.approx(h, abs=1e-12)
    shuffled = dict(zip(table, reversed(list(table.values()))))
    assert rem.entropy_from_counts(shuffled) == pytest.approx(h, abs=1e-12)


def test_all_distinct_keys_give_log2_n():
    N = 13
    d = _dict({str(i): 1 for i in range(N)})
    assert d.keys(0) == N
    assert rem.class_entropy(d, 0) == pytest.approx(math.log2(N))


# -- dictionaries -----------------------------------------------------------------------------

def test_key_encoding_order():
    c = np.zeros((1, 4, 2))
    c[0, :, 1] = [0.0, 0.31, 0.96, 1.0]
    c[0, :, 0] = 1 - c[0, :, 1]
    d = rem.dictionary_from_couplings(c, [1], 2)
    assert list(d.counts[1]) == ["0-3-10-10"]


def test_identical_inputs_share_a_key(tiny_model, glyphs):
    twice = Dataset(np.repeat(glyphs.images[:1], 2, axis=0), np.repeat(glyphs.labels[:1], 2), 3)
    d = rem.build_dictionary(tiny_model, twice)
    j = int(np.flatnonzero([d.samples(k) for k in range(3)])[0])
    assert d.samples(j) == 2 and d.keys(j) == 1


def test_untrained_r1_has_one_key_per_class_and_zero_entropy(glyphs):
    cfg = CapsNetConfig(image_height=12, image_width=12, conv1_channels=4, conv1_kernel=3, primary_kernel=3,
                        primary_stride=2, num_classes=3)
    d = rem.build_dictionary(CapsNetModel(cfg, seed=1), glyphs, r=1, label_source="true")
    assert all(d.keys(j) == 1 for j in range(3))
    report = rem.entropy_report(d)
    assert report.mean == 0.0


@pytest.mark.parametrize("source", ["predicted", "true"])
def test_dictionary_invariants(tiny_model, glyphs, source):
    d = rem.build_dictionary(tiny_model, glyphs, label_source=source)
    assert sum(d.samples(j) for j in range(3)) == len(glyphs)
    for j in range(3):
        assert d.keys(j) <= d.samples(j)
    if source == "true":
        np.testing.assert_array_equal([d.samples(j) for j in range(3)], glyphs.class_counts())


def test_bad_label_source(tiny_model, glyphs):
    with pytest.raises(ConfigError):
        rem.build_dictionary(tiny_model, glyphs, label_source="guess")


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 40), st.integers(2, 12))
def test_merge_of_parts_equals_whole(seed, n, K):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((n, 5, 3)) * 2
    c = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
    labels = rng.integers(0, 3, n)
    cut = sorted(rng.integers(0, n + 1, 2))
    parts = [rem.dictionary_from_couplings(c[a:b], labels[a:b], 3, K)
             for a, b in ((0, cut[0]), (cut[0], cut[1]), (cut[1], n))]
    whole = rem.dictionary_from_couplings(c, labels, 3, K)
    assert parts[0].merge(parts[1]).merge(parts[2]) == whole
    assert parts[2].merge(parts[0].merge(parts[1])) == whole


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 12), st.integers(1, 40), st.integers(1, 30), st.sampled_from([2, 5, 11, 101]))
def test_uniform_couplings_give_one_key_and_zero_entropy(J, I, n, K):
    c = np.full((n, I, J), 1.0 / J)
    labels = np.arange(n) % J
    d = rem.dictionary_from_couplings(c, labels, J, K)
    report = rem.entropy_report(d, K)
    assert all(k <= 1 for k in report.keys)
    assert report.mean == 0.0


# -- independent recomputation from the coupling dump ------------------------------------------

def entropy_from_csv(path, labels, K):
    """Stand-alone recomputation: read rows, quantize, key, count, average."""
    cols = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            cols.setdefault(int(row["sample"]), {}).setdefault(int(row["j"]), {})[int(row["i"])] = float(row["c"])
    tables = {}
    for sample, per_class in cols.items():
        j = int(labels[sample])
        col = per_class[j]
        key = "-".join(str(math.floor(min(max(col[i], 0.0), 1.0) * (K - 1) + 0.5)) for i in sorted(col))
        tables.setdefault(j, Counter())[key] += 1
    hs = []
    for table in tables.values():
        n = sum(table.values())
        hs.append(-sum(v / n * math.log2(v / n) for v in table.values()))
    return sum(hs) / len(hs)


@pytest.mark.parametrize("K", [2, 5, 11])
def test_pipeline_matches_recomputation_from_csv(tiny_model, glyphs, tmp_path, K):
    dump = rem.collect_couplings(tiny_model, glyphs)
    rem.write_coupling_csv(tmp_path / "c.csv", dump.couplings)
    report = rem.entropy_report(rem.dictionary_from_couplings(dump.couplings, dump.predictions, 3, K), K)
    assert report.mean == pytest.approx(entropy_from_csv(tmp_path / "c.csv", dump.predictions, K), abs=1e-12)
    np.testing.assert_array_equal(rem.read_coupling_csv(tmp_path / "c.csv"), dump.couplings.astype(np.float64))


def test_entropy_csv_format(tmp_path):
    report = rem.entropy_report(_dict({"a": 1, "b": 1}, {}), 11, 0.25)
    rem.write_entropy_csv(tmp_path / "e.csv", report)
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[0] == "class,samples,keys,entropy_bits"
    assert lines[1] == "0,2,2,1.0"
    assert lines[2] == "1,0,0,"
    assert lines[3].startswith("# mean_entropy_bits=1.0")


# -- saliency -------------------------------------------------------------------------------

def test_saliency_single_cell():
    grid = rem.saliency_grid(np.array([0.5]), np.array([1.0]), (1, 1), 1)
    assert grid[0, 0] == 0.5


def test_saliency_zero_poses():
    grid = rem.saliency_grid(np.zeros(8), np.full(8, 0.7), (2, 2), 2)
    assert np.all(grid == 0)


def test_saliency_two_by_two_two_types_by_hand():
    norms = np.array([0.2, 0.4, 0.6, 0.8, 0.1, 0.3, 0.5, 0.9])          # (m, n, o) order
    couplings = np.array([1.0, 0.5, 0.33, 0.0, 0.26, 0.74, 0.05, 0.96])  # levels 1, .5, .3, 0, .3, .7, .1, 1
    expected = np.array([[(0.2 * 1.0 + 0.4 * 0.5) / 2, (0.6 * 0.3 + 0.8 * 0.0) / 2],
                         [(0.1 * 0.3 + 0.3 * 0.7) / 2, (0.5 * 0.1 + 0.9 * 1.0) / 2]])
    np.testing.assert_allclose(rem.saliency_grid(norms, couplings, (2, 2), 2), expected, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 4))
def test_saliency_invariant_to_type_permutation(seed, O):
    rng = np.random.default_rng(seed)
    norms, c = rng.random((3, 2, O)), rng.random((3, 2, O))
    perm = rng.permutation(O)
    a = rem.saliency_grid(norms.ravel(), c.ravel(), (3, 2), O)
    b = rem.saliency_grid(norms[..., perm].ravel(), c[..., perm].ravel(), (3, 2), O)
    np.testing.assert_allclose(a, b, atol=1e-15)
    assert np.all(a >= 0)


def test_bilinear_upsample_corner_aligned():
    grid = np.array([[0.0, 1.0], [2.0, 3.0]])
    up = rem.bilinear_upsample(grid, (3, 5))
    np.testing.assert_allclose(up[[0, 0, -1, -1], [0, -1, 0, -1]], [0, 1, 2, 3])
    np.testing.assert_allclose(up[1, 2], 1.5)
    np.testing.assert_allclose(up[0], [0, 0.25, 0.5, 0.75, 1.0])
    np.testing.assert_allclose(rem.bilinear_upsample(np.full((6, 6), 0.4), (28, 28)), 0.4)


def test_saliency_map_on_model(tiny_model, glyphs):
    smap = rem.saliency_map(tiny_model, glyphs.images[0])
    assert smap.grid.shape == tiny_model.config.grid_shape()
    assert smap.upsampled.shape == (12, 12)
    assert np.all(smap.grid >= 0)
    assert smap.upsampled.max() <= smap.grid.max() + 1e-12


# -- parse trees ------------------------------------------------------------------------------

def _edges(dot):
    return re.findall(r'"p_(\d+)" -> "class_(\d+)" \[weight=([0-9.]+)\]', dot)


def test_parse_tree_threshold_above_one_keeps_only_class_node(tiny_model, glyphs):
    g = rem.parse_tree_graph(tiny_model, glyphs.images[0], 1.0 + 1e-9)
    dot = g.to_dot()
    assert g.edges == [] and _edges(dot) == []
    assert dot.startswith("digraph {") and f'"class_{g.predicted}"' in dot
    assert '"p_' not in dot


def test_parse_tree_threshold_zero_has_every_edge(tiny_model, glyphs):
    g = rem.parse_tree_graph(tiny_model, glyphs.images[0], 0.0)
    assert len(_edges(g.to_dot())) == tiny_model.config.num_primary


@pytest.mark.parametrize("J", [2, 3, 4, 5, 10])
@pytest.mark.parametrize("K", [None, 11])
def test_parse_tree_uniform_couplings(J, K):
    I = 9
    col = np.full(I, 1.0 / J)
    g = rem.parse_tree_from(col, np.full(I, 0.3), 0, 0.5, 1.0 / (J + 1), K)
    assert len(g.edges) == I
    assert len({w for _, w, _ in g.edges}) == 1


def test_parse_tree_dot_is_parseable():
    g = rem.parse_tree_from(np.array([0.9, 0.02, 0.5]), np.array([0.8, 0.1, 0.4]), 2, 0.7, 0.3)
    dot = g.to_dot()
    assert _edges(dot) == [("0", "2", "0.900000"), ("2", "2", "0.500000")]
    assert dot.strip().endswith("}")


# -- sparsity and quantized inference ---------------------------------------------------------

def test_sparsity_examples(tiny_model):
    assert rem.sparsity(tiny_model) == 0.0
    model = CapsNetModel(tiny_model.config)
    for n in model.prunable_names():
        model.params[n].data[...] = 0
    assert rem.sparsity(model) == 1.0


def test_sparsity_half_of_two_tensor_model():
    class Two:
        def __init__(self):
            from capsrem.tensor import Tensor
            self.params = {"a": Tensor(np.array([0.0, 0.0, 1.0, 2.0])), "b": Tensor(np.array([0.0, 3.0]))}

        def prunable_names(self):
            return ["a", "b"]

    m = Two()
    assert rem.sparsity(m) == 0.5
    assert rem.sparsity(m, tau=1.5) == pytest.approx(4 / 6)


def test_quantized_predictions_mostly_agree(tiny_model, glyphs):
    cont, quant = rem.quantized_predict(tiny_model, glyphs.images, K=101)
    assert np.mean(cont == quant) >= 0.9
    cont2, _ = rem.quantized_predict(tiny_model, glyphs.images)
    np.testing.assert_array_equal(cont, cont2)


# -- PGM export ----------------------------------------------------------------------------

@pytest.mark.parametrize("binary", [False, True])
def test_pgm_round_trip(tmp_path, binary):
    values = np.array([[0.0, 0.5, 1.0], [0.25, 0.75, 0.1]])
    rem.write_pgm(tmp_path / "s.pgm", values, binary=binary)
    raw = (tmp_path / "s.pgm").read_bytes()
    assert raw.startswith(b"P5\n3 2\n255\n" if binary else b"P2\n3 2\n255\n")
    np.testing.assert_array_equal(rem.read_pgm(tmp_path / "s.pgm"), np.rint(values * 255))
