import numpy as np
import pytest
from hypothesis import given, strategies as st

from metareg.domain import StudyRecord
from metareg.network import (CoauthorNetwork, build_adjacency, network_summary, read_edge_list, read_matrix,
                             row_standardize, write_edge_list, write_matrix)


def studies(*specs):
    return {sid: StudyRecord(sid, authors, year) for sid, authors, year in specs}


def w_of(net, h, k):
    return net.raw_w[net.study_order.index(h), net.study_order.index(k)]


def test_directed_link_later_receives():
    net = build_adjacency(studies(("A", {"x"}, 2005), ("B", {"x", "y"}, 2010)))
    assert w_of(net, "B", "A") == 1 and w_of(net, "A", "B") == 0


def test_same_year_bidirected():
    net = build_adjacency(studies(("A", {"x"}, 2008), ("B", {"x"}, 2008)))
    assert w_of(net, "A", "B") == 1 and w_of(net, "B", "A") == 1


def test_one_year_lag_bidirected_two_years_not():
    net = build_adjacency(studies(("A", {"x"}, 2008), ("B", {"x"}, 2009), ("C", {"x"}, 2011)))
    assert w_of(net, "A", "B") == w_of(net, "B", "A") == 1
    assert w_of(net, "C", "B") == 1 and w_of(net, "B", "C") == 0


def test_no_shared_author():
    net = build_adjacency(studies(("A", {"x"}, 2008), ("B", {"y"}, 2008)))
    assert not net.raw_w.any()


def test_row_standardize_examples():
    out = row_standardize(np.array([[0, 1, 1, 0], [0, 0, 0, 0], [0, 1, 0, 0], [1, 1, 0, 0]], dtype=float))
    assert out[0].tolist() == [0, 0.5, 0.5, 0]
    assert out[1].tolist() == [0, 0, 0, 0]
    assert out[2].tolist() == [0, 1, 0, 0]
    with pytest.raises(ValueError):
        row_standardize(np.zeros((2, 3)))


def test_summary_examples():
    s = studies(("A", {"x"}, 2000), ("B", {"y"}, 2000))
    summ = network_summary(build_adjacency(s), s)
    assert (summ.n_authors, summ.n_edges) == (2, 0)

    s = studies(("S1", {"a"}, 2000), ("S2", {"a"}, 2005), ("S3", {"a"}, 2010))
    net = build_adjacency(s)
    # oracle: enumerate ordered pairs; the later study receives from each earlier one
    expected = sum(1 for h in s for k in s if s[h].year > s[k].year)
    assert network_summary(net, s).n_edges == expected == 3
    assert net.raw_w.sum(axis=1).tolist() == [0, 1, 2]

    k = 5
    s = studies(*[(f"S{i}", {"a"}, 2003) for i in range(k)])
    assert network_summary(build_adjacency(s), s).n_edges == k * (k - 1)


def test_summary_counts_authors():
    s = studies(("A", {"x", "y"}, 2000), ("B", {"y"}, 2002), ("C", {"z"}, 2001))
    summ = network_summary(build_adjacency(s), s)
    assert summ.studies_per_author == {"x": 1, "y": 2, "z": 1}
    assert summ.multi_study_authors == 1
    assert summ.n_no_influence == 2


def test_from_raw_rejects_self_loops():
    with pytest.raises(ValueError):
        CoauthorNetwork.from_raw(["a", "b"], np.eye(2))


study_lists = st.lists(st.tuples(st.sets(st.sampled_from("abcdef"), min_size=1, max_size=3),
                                 st.integers(2000, 2010)), min_size=1, max_size=9)


def _to_studies(items):
    return {f"S{i}": StudyRecord(f"S{i}", a, y) for i, (a, y) in enumerate(items)}


@given(study_lists)
def test_network_invariants(items):
    s = _to_studies(items)
    net = build_adjacency(s)
    W, R = net.raw_w, net.row_std_w
    assert np.all(np.diag(W) == 0)
    assert set(np.unique(W)) <= {0.0, 1.0}
    sums = R.sum(axis=1)
    assert np.all(np.isclose(sums, 1) | (sums == 0))
    order = net.study_order
    for h in range(len(order)):
        for k in range(len(order)):
            if W[h, k]:
                assert s[order[h]].authors & s[order[k]].authors
            if abs(s[order[h]].year - s[order[k]].year) > 1:
                assert W[h, k] * W[k, h] == 0
    # zero pattern preserved; standardizing again changes nothing
    assert np.array_equal(R != 0, W != 0)
    assert np.allclose(row_standardize(R), R)


@given(study_lists, st.randoms())
def test_relabelling_permutes_conjugately(items, rnd):
    s = _to_studies(items)
    perm = list(s)
    rnd.shuffle(perm)
    net = build_adjacency(s)
    net2 = build_adjacency({k: s[k] for k in perm})
    P = np.zeros((len(perm), len(perm)))
    for i, sid in enumerate(perm):
        P[i, net.study_order.index(sid)] = 1
    assert np.array_equal(net2.raw_w, P @ net.raw_w @ P.T)
    assert np.array_equal(net.reorder(perm).raw_w, net2.raw_w)


@given(study_lists)
def test_export_roundtrip(tmp_path_factory, items):
    d = tmp_path_factory.mktemp("net")
    net = build_adjacency(_to_studies(items))
    write_edge_list(net, d / "e.csv", header="h")
    write_matrix(net, d / "m.csv")
    e = read_edge_list(d / "e.csv", net.study_order)
    m = read_matrix(d / "m.csv")
    for other in (e, m):
        assert other.study_order == net.study_order
        assert np.array_equal(other.raw_w, net.raw_w)
        assert np.array_equal(other.row_std_w, net.row_std_w)
