import pytest

from pq_multilabel.data_io import write_csv
from visualisations.shift_curves import ShiftCurveVisualizer

HEADER = [
    "suite",
    "condition",
    "head",
    "seed",
    "shift",
    "parameter",
    "entropy",
    "accuracy",
]


@pytest.fixture
def breakdown(tmp_path):
    path = tmp_path / "breakdown.csv"
    rows = [
        ["rotation", "clean", "vanilla", 0, "rotation_15", "15", 0.2, 0.9],
        ["rotation", "clean", "vanilla", 1, "rotation_15", "15", 0.4, 0.7],
        ["rotation", "clean", "vanilla", 0, "rotation_90", "90", 1.0, 0.3],
        ["rotation", "clean", "vanilla", 1, "rotation_90", "90", 1.2, 0.1],
        ["corruption", "clean", "vanilla", 0, "contrast_1", "contrast:1", 0.1, 0.95],
    ]
    write_csv(path, HEADER, rows, {"config_digest": "x"})
    return path


def test_curves_average_seeds(breakdown, tmp_path):
    visualizer = ShiftCurveVisualizer(breakdown, tmp_path / "plots")
    shifts, curves = visualizer.curves("rotation", "entropy")
    assert shifts == ["rotation_15", "rotation_90"]
    assert curves[("clean", "vanilla")] == pytest.approx([0.3, 1.1])


def test_plot_writes_png(breakdown, tmp_path):
    visualizer = ShiftCurveVisualizer(breakdown, tmp_path / "plots")
    path = visualizer.plot("corruption", "accuracy")
    assert path == tmp_path / "plots" / "corruption_accuracy.png"
    assert path.read_bytes().startswith(b"\x89PNG")


def test_empty_suite(breakdown, tmp_path):
    visualizer = ShiftCurveVisualizer(breakdown, tmp_path / "plots")
    with pytest.raises(ValueError):
        visualizer.plot("blur")
