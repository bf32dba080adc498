import numpy as np
import pytest

from lfrclab.analysis import (BatchDiagnostic, UNDEFINED, accuracy, accuracy_difference, ds_da_scatter,
                              export_heatmap, grouping_order, least_squares_line, pearson, read_heatmap_csv, read_pgm,
                              read_scatter_csv, robust_accuracy, scatter_summary, similarity_difference, to_gray,
                              transfer_eval, write_scatter_csv)
from lfrclab.attacks import AttackConfig, UNBOUNDED
from lfrclab.data import synthetic_gaussians
from lfrclab.errors import ConfigError, DimensionError, InputError, UndefinedCorrelationError
from lfrclab.lfrc import SimilarityMatrix
from lfrclab.models import init_model, mlp_spec
from lfrclab.tensor import Tensor


def mpmath_pearson(x, y):
    import mpmath
    mpmath.mp.dps = 60
    xs = [mpmath.mpf(float(v)) for v in x]
    ys = [mpmath.mpf(float(v)) for v in y]
    mx, my = sum(xs) / len(xs), sum(ys) / len(ys)
    sxy = sum((a - mx) * (b - my) for a, b in zip(xs, ys))
    sxx = sum((a - mx) ** 2 for a in xs)
    syy = sum((b - my) ** 2 for b in ys)
    return float(sxy / mpmath.sqrt(sxx * syy))


def test_pearson_matches_extended_precision():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(2, 40))
        x = rng.normal(size=n) * 10 ** rng.uniform(-3, 3)
        y = 0.3 * x + rng.normal(size=n)
        assert abs(pearson(x, y) - mpmath_pearson(x, y)) < 1e-12


def test_pearson_edge_cases():
    assert pearson([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
    assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    with pytest.raises(UndefinedCorrelationError):
        pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(InputError):
        pearson([1.0], [2.0])
    with pytest.raises(InputError):
        pearson([1, 2], [1, 2, 3])


def test_least_squares_line():
    slope, intercept = least_squares_line([0, 1, 2], [1, 3, 5])
    assert slope == pytest.approx(2.0) and intercept == pytest.approx(1.0)


def test_similarity_difference():
    a, b = np.eye(2), np.array([[1.0, 0.5], [0.5, 1.0]])
    assert similarity_difference(a, b) == 0.25
    with pytest.raises(DimensionError):
        similarity_difference(np.eye(2), np.eye(3))


def trained_like_model():
    return init_model(mlp_spec([2, 8, 2]), 0, np.float64)


def test_accuracy_difference_counts():
    model = trained_like_model()
    x = np.random.default_rng(0).normal(size=(10, 2))
    y = np.zeros(10, dtype=int)
    assert accuracy_difference(model, x, x, y) == 0


def test_robust_accuracy_identity_and_eps_zero():
    ds = synthetic_gaussians(2, 30, 2, 4.0, 0)
    model = trained_like_model()
    clean = accuracy(model, ds)
    assert robust_accuracy(model, ds, None) == clean
    assert robust_accuracy(model, ds, AttackConfig(0.0, 0.1, 5, True, data_range=UNBOUNDED)) == clean
    with pytest.raises(InputError):
        accuracy(model, (np.zeros((0, 2)), np.zeros(0, dtype=int)))


def test_transfer_eval_self_equals_white_box():
    ds = synthetic_gaussians(2, 30, 2, 4.0, 0)
    model = trained_like_model()
    atk = AttackConfig(0.5, 0.1, 5, True, data_range=UNBOUNDED)
    assert transfer_eval(model, model, ds, atk) == robust_accuracy(model, ds, atk)
    with pytest.raises(ConfigError):
        transfer_eval(model, init_model(mlp_spec([2, 4, 3]), 0), ds, atk)


def test_scatter_rows_and_summary(tmp_path):
    ds = synthetic_gaussians(2, 50, 2, 3.0, 1)
    model = trained_like_model()
    diags = ds_da_scatter(model, ds, AttackConfig(0.5, 0.1, 5, True, data_range=UNBOUNDED), batch_size=30)
    assert [d.batch_index for d in diags] == [0, 1, 2]
    with pytest.raises(InputError):
        ds_da_scatter(model, ds, None, batch_size=1)
    with pytest.raises(InputError):
        ds_da_scatter(model, ds, None, batch_size=101)


def test_scatter_csv_footer_round_trip(tmp_path):
    diags = [BatchDiagnostic(i, "h", ds, da) for i, (ds, da) in enumerate([(0.1, 1), (0.2, 3), (0.15, 1)])]
    write_scatter_csv(diags, tmp_path / "s.csv")
    rows, footer = read_scatter_csv(tmp_path / "s.csv")
    assert [r[0] for r in rows] == [0, 1, 2]
    assert float(footer["pcc"]) == pytest.approx(pearson([r[1] for r in rows], [r[2] for r in rows]), abs=1e-11)
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "batch_index,ds,da"


def test_constant_series_reports_undefined(tmp_path):
    diags = [BatchDiagnostic(i, "h", 0.0, 0) for i in range(3)]
    assert scatter_summary(diags) == {"pcc": None, "slope": None, "intercept": None}
    write_scatter_csv(diags, tmp_path / "s.csv")
    _, footer = read_scatter_csv(tmp_path / "s.csv")
    assert footer["pcc"] == UNDEFINED


def test_grouping_order_is_stable():
    np.testing.assert_array_equal(grouping_order([1, 0, 1, 0]), [1, 3, 0, 2])


def test_gray_map():
    np.testing.assert_array_equal(to_gray([-1.0, 0.0, 1.0]), [0, 128, 255])


def test_identity_heatmap(tmp_path):
    m = SimilarityMatrix(Tensor(np.eye(3)), np.array([0, 1, 2]), "hidden1")
    pgm, csv_path = export_heatmap(m, tmp_path / "eye")
    img = read_pgm(pgm)
    assert np.all(np.diag(img) == 255)
    assert set(img[~np.eye(3, dtype=bool)].tolist()) <= {127, 128}
    assert pgm.read_text().startswith("P2")


def test_heatmap_csv_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    a = rng.uniform(-1, 1, size=(4, 4))
    vals = (a + a.T) / 2
    labels = np.array([1, 0, 1, 0])
    _, csv_path = export_heatmap(SimilarityMatrix(Tensor(vals), labels, "x"), tmp_path / "m.csv")
    back, back_labels = read_heatmap_csv(csv_path)
    np.testing.assert_allclose(back, vals, rtol=1e-11)
    np.testing.assert_array_equal(back_labels, labels)
    header = csv_path.read_text().splitlines()[0]
    assert header == "index,label,1,3,0,2"
