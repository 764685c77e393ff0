import pytest

from splatengine.outputs.evaluation import MetricSummary
from splatengine.utils.calculations import get_change


class TestGetChange:
    def test__given_nested_dicts__then_nested_differences(self):
        x = {"a": 1.0, "b": {"c": 2.0}}
        y = {"a": 3.0, "b": {"c": 1.0}}

        change = get_change(x, y, relative=False)

        assert change == {"a": 2.0, "b": {"c": -1.0}}

    def test__given_relative__then_fraction_of_baseline(self):
        change = get_change({"a": 4.0, "z": 0.0}, {"a": 5.0, "z": 1.0}, True)

        assert change["a"] == pytest.approx(0.25)
        assert change["z"] == 0

    def test__given_model__then_same_model_class(self):
        x = MetricSummary(psnr=30.0, ssim=0.9, depth_acc=0.5, depth_rmse=0.2)
        y = MetricSummary(psnr=31.0, ssim=0.9, depth_acc=0.6, depth_rmse=0.1)

        change = get_change(x, y, relative=False)

        assert isinstance(change, MetricSummary)
        assert change.psnr == pytest.approx(1.0)
        assert change.depth_rmse == pytest.approx(-0.1)

    def test__given_lists__then_element_wise(self):
        change = get_change({"a": [1.0, 2.0]}, {"a": [2.0, 4.0]}, False)

        assert change["a"] == [1.0, 2.0]

    def test__given_one_sided_none__then_raises(self):
        with pytest.raises(ValueError, match="None in x only"):
            get_change({"a": None}, {"a": 1.0}, relative=False)

    def test__given_one_sided_none_and_skip__then_none(self):
        change = get_change(
            {"a": None}, {"a": 1.0}, relative=False, skip_mismatch=True
        )

        assert change == {"a": None}

    def test__given_strings__then_zero_when_equal(self):
        change = get_change(
            {"s": "eval", "t": "eval"},
            {"s": "eval", "t": "train"},
            relative=False,
        )

        assert change == {"s": 0, "t": "eval -> train"}
