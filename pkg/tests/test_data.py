import numpy as np
import pytest

from fedmspc.data import (
    FAULT,
    NOC,
    STAWFD_FRACTIONS,
    DataWarning,
    FaultSpec,
    LabeledDataset,
    VerticalSplit,
    generate_synthetic,
    load_secom,
    load_snapshot,
    load_stawfd,
    load_vertical_split,
    make_split,
    partition_columns,
    save_snapshot,
    split_columns,
    standardize_apply,
    standardize_fit,
)
from fedmspc.errors import InvalidInputError
from fedmspc.mspc import fit_pca, statistics


def test_bundled_secom_split():
    split = load_vertical_split()
    assert [len(c) for c in split.holder_columns] == [21, 17]
    assert len(set(split.all_columns)) == 38


def test_load_secom(tmp_path):
    feats = tmp_path / "secom.data"
    labels = tmp_path / "secom_labels.data"
    feats.write_text("1 2 3\n4 NaN 6\n7 8 NaN\n10 11 12\n")
    labels.write_text('-1 "19/07/2008 11:55:00"\n1 "19/07/2008 12:32:00"\n-1 "x"\n1 "y"\n')
    ds = load_secom(feats, labels, ["S1", "S2"])
    assert ds.variable_names == ["S1", "S2"]
    assert ds.x.tolist() == [[1, 2], [7, 8], [10, 11]]  # select, then drop the NaN row
    assert ds.labels.tolist() == [NOC, NOC, FAULT]
    with pytest.raises(InvalidInputError, match="S1"):
        load_secom(feats, labels, ["S99"])


def test_secom_row_mismatch(tmp_path):
    (tmp_path / "f").write_text("1 2\n3 4\n")
    (tmp_path / "l").write_text("-1 a\n")
    with pytest.raises(InvalidInputError):
        load_secom(tmp_path / "f", tmp_path / "l")


def test_secom_all_missing(tmp_path):
    (tmp_path / "f").write_text("1 NaN\n")
    (tmp_path / "l").write_text("-1 a\n")
    with pytest.warns(DataWarning):
        ds = load_secom(tmp_path / "f", tmp_path / "l", ["S2"])
    assert ds.n_samples == 0


def _stawfd_csv(path, lengths, steps=(6, 4), drop_step=None):
    rng = np.random.default_rng(0)
    lines = ["batch,step,label,v1,v2"]
    for b, n in enumerate(lengths):
        for t in range(n):
            step = "1" if t < steps[0] else "2"
            if drop_step == b and t == 0:
                step = ""
            lines.append(f"b{b},{step},{'fault' if b % 2 else 'normal'},{rng.normal()},{rng.normal()}")
    path.write_text("\n".join(lines) + "\n")


def test_load_stawfd(tmp_path):
    p = tmp_path / "st.csv"
    _stawfd_csv(p, [10, 10, 9, 10, 10], drop_step=3)
    with pytest.warns(DataWarning):
        data = load_stawfd(p, required_length=10, step_lengths=(6, 4))
    assert [b.shape for b in data.blocks] == [(3, 2, 6), (3, 2, 4)]
    assert data.labels.tolist() == [NOC, FAULT, NOC]
    assert data.meta["skipped_length"] == 1 and data.meta["skipped_annotation"] == 1


def test_standardize():
    x = np.array([[1.0, 5.0, 2.0], [2.0, 5.0, 4.0], [3.0, 5.0, 9.0]])
    std = standardize_fit(x, ["a", "b", "c"])
    assert std.dropped == ("b",)
    xs = standardize_apply(x, std, ["a", "b", "c"])
    assert xs.shape == (3, 2)
    assert np.allclose(xs.mean(axis=0), 0, atol=1e-12)
    assert np.allclose(xs.std(axis=0, ddof=1), 1, atol=1e-10)
    assert np.array_equal(standardize_apply(x, std), xs)
    with pytest.raises(InvalidInputError):
        standardize_apply(x, std, ["a", "c", "b"])


def test_make_split_stawfd_counts():
    labels = np.array([NOC] * 648 + [FAULT] * 318)
    sp = make_split(labels, STAWFD_FRACTIONS, seed=3)
    assert sp.train.size == 482
    for part in (sp.validation, sp.test):
        assert np.sum(labels[part] == NOC) == 83
        assert np.sum(labels[part] == FAULT) == 159
    assert np.all(labels[sp.train] == NOC)
    again = make_split(labels, STAWFD_FRACTIONS, seed=3)
    assert np.array_equal(sp.test, again.test)
    all_idx = np.concatenate([sp.train, sp.validation, sp.test])
    assert np.array_equal(np.sort(all_idx), np.arange(966))


def test_make_split_edge_cases():
    with pytest.warns(DataWarning):
        sp = make_split(np.zeros(10, dtype=int), (1, 0, 0))
    assert sp.test.size == 0
    with pytest.raises(InvalidInputError):
        make_split(np.ones(5, dtype=int), (1, 0, 0))


def test_shared_indices_across_holders():
    ds = generate_synthetic(40, 6, 2, seed=1)
    data = split_columns(ds, [3, 3])
    sp = make_split(data.labels, (0.5, 0.25, 0.25), seed=2)
    sub = data.take(sp.test)
    assert np.array_equal(sub.blocks[0], ds.x[sp.test, :3])
    assert np.array_equal(sub.blocks[1], ds.x[sp.test, 3:])


@pytest.mark.filterwarnings("ignore::fedmspc.mspc.DegenerateLimitWarning")
def test_synthetic_noiseless():
    ds = generate_synthetic(50, 8, 3, noise_sd=0.0, seed=4)
    model = fit_pca(ds.x, 1.0, strict_limits=False)
    assert model.n_components == 3
    _, q = statistics(model, ds.x)
    assert np.max(np.abs(q)) < 1e-10


def test_synthetic_deterministic_and_faults():
    spec = [FaultSpec("residual_spike", 5, columns=(2,)), FaultSpec("score_excursion", 3)]
    a = generate_synthetic(20, 6, 2, seed=9, fault_spec=spec)
    b = generate_synthetic(20, 6, 2, seed=9, fault_spec=spec)
    assert a.x.tobytes() == b.x.tobytes()
    assert a.labels.sum() == 8
    assert a.meta["fault_columns"][20:25] == [2] * 5
    with pytest.raises(InvalidInputError):
        generate_synthetic(20, 6, 7)


def test_synthetic_batch_shape():
    ds = generate_synthetic(0, (12, 3, 5), 2, seed=1)
    assert ds.x.shape == (12, 3, 5) and len(ds.variable_names) == 3


def test_labeled_dataset_invariants():
    with pytest.raises(InvalidInputError):
        LabeledDataset(np.zeros((2, 2)), [0], ["a", "b"])
    with pytest.raises(InvalidInputError):
        LabeledDataset(np.zeros((1, 2)), [0], ["a", "a"])


def test_snapshot_round_trip(tmp_path):
    ds = generate_synthetic(10, 4, 2, seed=0, names=["p", "q", "r", "s"])
    data = partition_columns(ds, VerticalSplit([["p", "q"], ["r", "s"]]))
    save_snapshot(data, tmp_path / "d.json")
    back = load_snapshot(tmp_path / "d.json")
    assert all(a.tobytes() == b.tobytes() for a, b in zip(back.blocks, data.blocks))
    assert back.holder_names == [["p", "q"], ["r", "s"]]

