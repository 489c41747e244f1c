import json

import numpy as np
import pytest

from bccseg import tensor as T
from bccseg.model import ModelConfig, build_model, forward, parameter_count
from bccseg.opcount import count_ops, regular_conv_macs, separable_conv_macs, separable_ratio
from bccseg.tensor import ShapeError, Tensor


class TestFormulas:
    def test_worked_example(self):
        regular = regular_conv_macs(32, 32, 3, 64, 128)
        separable = separable_conv_macs(32, 32, 3, 64, 128)
        assert regular == 75_497_472
        assert separable == 589_824 + 8_388_608 == 8_978_432
        assert abs(separable / regular - (1 / 128 + 1 / 9)) <= 1e-12
        assert abs(separable_ratio(128, 3) - 0.1189) < 1e-4

    def test_unit_conv(self):
        assert regular_conv_macs(1, 1, 1, 1, 1) == 1

    def test_grouped(self):
        assert regular_conv_macs(4, 4, 3, 8, 8, groups=8) == 16 * 9 * 8


def instrumented(config, h, w):
    model = build_model(config)
    with T.count_macs() as box:
        forward(model, Tensor(np.zeros((1, 3, h, w), np.float32)))
    return box[0]


class TestReport:
    @pytest.mark.parametrize(
        "config,h,w",
        [
            (ModelConfig(), 144, 192),
            (ModelConfig(stem_channels=4, block_channels=(8,), middle_blocks=0, aspp_channels=4), 64, 48),
            (ModelConfig(stem_channels=6, block_channels=(8, 12, 16), middle_blocks=1, aspp_channels=8, aspp_rates=(2, 3, 5)), 32, 80),
        ],
    )
    def test_matches_instrumented_forward(self, config, h, w):
        report = count_ops(config, h, w)
        assert report.total_macs == instrumented(config, h, w)
        assert report.total_params == parameter_count(config)

    def test_rates_do_not_change_cost(self):
        rows = {r.name: r for r in count_ops(ModelConfig(), 432, 576).rows}
        macs = {rows[f"aspp.branch_r{r}"].macs for r in (6, 12, 18)}
        assert len(macs) == 1
        assert {(rows[f"aspp.branch_r{r}"].out_h, rows[f"aspp.branch_r{r}"].out_w) for r in (6, 12, 18)} == {(27, 36)}
        a = count_ops(ModelConfig(aspp_rates=(1, 2, 3)), 432, 576).total_macs
        b = count_ops(ModelConfig(aspp_rates=(6, 12, 18)), 432, 576).total_macs
        assert a == b

    def test_separable_rows_follow_closed_form(self):
        for c in count_ops(ModelConfig(), 144, 192).comparisons:
            assert c.separable_macs == c.out_h * c.out_w * c.c_in * 9 + c.out_h * c.out_w * c.c_in * c.c_out
            assert c.regular_macs == c.out_h * c.out_w * 9 * c.c_in * c.c_out
            assert abs(c.ratio - (c.separable_macs / c.regular_macs)) <= 1e-15
            assert abs(c.ratio - c.formula_ratio) <= 1e-12

    def test_totals_are_row_sums(self):
        report = count_ops(ModelConfig(), 144, 192)
        d = report.to_dict()
        assert d["total_macs"] == sum(r["macs"] for r in d["rows"])
        assert d["total_params"] == sum(r["params"] for r in d["rows"])
        json.dumps(d)

    def test_table_mentions_every_layer(self):
        report = count_ops(ModelConfig(), 144, 192)
        text = report.format_table()
        for r in report.rows:
            assert r.name in text
        assert f"{report.total_macs:,}" in text

    @pytest.mark.parametrize("h,w", [(100, 96), (96, 0), (8, 16)])
    def test_invalid_dims(self, h, w):
        with pytest.raises(ShapeError):
            count_ops(ModelConfig(), h, w)
