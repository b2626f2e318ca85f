import json

import numpy as np
import pytest

from moganet.errors import ShapeError
from moganet.model import (build, count_macs, count_params, forward,
                           layer_inventory, moga_flops_by_layer,
                           moga_flops_closed_form, moga_mac_rows,
                           named_buffers, named_parameters, preset,
                           preset_names)
from moganet.tensor import Tensor

# published totals for the six published configurations
TABLE_PARAMS_M = {"xt": 2.97, "t": 5.20, "s": 25.3, "b": 43.8, "l": 82.5, "xl": 180.8}
TABLE_MACS_G = {"xt": 0.80, "t": 1.10, "s": 4.97, "b": 9.93, "l": 15.9, "xl": 34.5}


class TestPresets:
    def test_published_configs(self):
        assert preset("s").dims == (64, 128, 320, 512)
        assert preset("s").depths == (2, 3, 12, 2)
        assert preset("xl").depths == (6, 6, 44, 4)
        assert preset("xt").dims == (32, 64, 96, 192)
        assert preset("t").dims == (32, 64, 128, 256)
        assert preset("b").depths == (4, 6, 22, 3)
        assert preset("l").dims == (64, 160, 320, 640)
        for name in ("xt", "t", "s", "b", "l", "xl"):
            assert preset(name).mlp_ratios == (8, 8, 4, 4)

    def test_nano_preset(self):
        cfg = preset("nano")
        assert cfg.dims == (8, 16, 32, 64)
        assert cfg.depths == (1, 1, 2, 1)
        assert cfg.num_classes == 10

    def test_unknown_name_lists_valid(self):
        with pytest.raises(ValueError, match="nano"):
            preset("huge")

    def test_names_cover_all(self):
        assert set(preset_names()) == {"xt", "t", "s", "b", "l", "xl", "nano"}


class TestBuildForward:
    def test_nano_smoke(self):
        m = build(preset("nano"), seed=0)
        x = Tensor(np.random.default_rng(0).uniform(-1, 1, (1, 3, 32, 32)).astype(np.float32))
        logits = forward(m, x, training=False)
        assert logits.shape == (1, 10)
        assert np.isfinite(logits.data).all()

    def test_batch_shape(self):
        m = build(preset("nano"), seed=0)
        x = Tensor(np.zeros((2, 3, 32, 32), dtype=np.float32))
        assert forward(m, x, training=False).shape == (2, 10)

    def test_same_seed_bit_identical(self):
        a, b = build(preset("nano"), seed=7), build(preset("nano"), seed=7)
        for (pa, ta), (pb, tb) in zip(named_parameters(a), named_parameters(b)):
            assert pa == pb
            assert np.array_equal(ta.data, tb.data)

    def test_different_seeds_differ(self):
        a, b = build(preset("nano"), seed=1), build(preset("nano"), seed=2)
        diff = any(not np.array_equal(ta.data, tb.data)
                   for (_, ta), (_, tb) in zip(named_parameters(a), named_parameters(b)))
        assert diff

    def test_gamma_vectors_zero_after_build(self):
        m = build(preset("nano"), seed=3)
        gammas = [t for p, t in named_parameters(m) if p.endswith(("gamma_s", "gamma_c"))]
        assert gammas and all(not t.data.any() for t in gammas)

    def test_eval_forward_deterministic(self):
        m = build(preset("nano"), seed=4)
        x = Tensor(np.random.default_rng(1).uniform(-1, 1, (2, 3, 32, 32)).astype(np.float32))
        a = forward(m, x, training=False).data
        b = forward(m, x, training=False).data
        assert np.array_equal(a, b)

    def test_undersized_input_rejected(self):
        m = build(preset("nano"), seed=5)
        with pytest.raises(ShapeError, match="minimum"):
            forward(m, Tensor(np.zeros((1, 3, 16, 16), dtype=np.float32)), False)

    def test_forward_shapes_across_presets(self):
        # resolution sweep kept small: the forward contract is
        # resolution-uniform, larger presets only scale runtime
        for name, res in (("nano", 32), ("nano", 64), ("xt", 32), ("xt", 64),
                          ("t", 32), ("s", 32)):
            m = build(preset(name), seed=0)
            x = Tensor(np.zeros((1, 3, res, res), dtype=np.float32))
            assert forward(m, x, training=False).shape == (1, m.cfg.num_classes)

    def test_xt_at_224(self):
        m = build(preset("xt"), seed=0)
        x = Tensor(np.zeros((1, 3, 224, 224), dtype=np.float32))
        assert forward(m, x, training=False).shape == (1, 1000)

    def test_split_divisibility_enforced(self):
        from moganet.model import ArchConfig
        bad = ArchConfig("bad", (12, 24, 48, 96), (1, 1, 1, 1), (2, 2, 2, 2))
        with pytest.raises(ShapeError, match="divisible"):
            build(bad, seed=0)

    def test_end_to_end_gradcheck(self):
        from moganet.cli import end_to_end_gradcheck
        assert end_to_end_gradcheck("nano", seed=0) <= 1e-3


class TestParameterTree:
    def test_path_count_matches_hand_enumeration(self):
        # stems: stage 1 has 2 conv(w,b)+norm(gamma,beta) = 8 leaves, stages
        # 2..4 have 4 each; per SA block 14 leaves, per CA block 10; four
        # stage norms at 2; head w+b
        m = build(preset("nano"), seed=0)
        paths = [p for p, _ in named_parameters(m)]
        depths = preset("nano").depths
        want = (8 + 3 * 4) + sum(depths) * (14 + 10) + 4 * 2 + 2
        assert len(paths) == want == 150
        assert len(set(paths)) == len(paths)

    def test_buffers_are_running_stats_only(self):
        m = build(preset("nano"), seed=0)
        for p, b in named_buffers(m):
            assert p.endswith(("running_mean", "running_var"))
            assert isinstance(b, np.ndarray)

    def test_analytic_inventory_matches_realized_tree(self):
        for name in ("nano", "xt", "t"):
            cfg = preset(name)
            m = build(cfg, seed=0)
            real = {r.path: r.params for r in count_params(m).rows}
            analytic = {r.path: r.params for r in layer_inventory(cfg, 32, 32)
                        if r.params}
            assert real == analytic


class TestCounts:
    @pytest.mark.parametrize("name", ["xt", "t", "s", "b", "l", "xl"])
    def test_params_within_two_percent(self, name):
        total = count_macs(preset(name), 224, 224).total_params
        want = TABLE_PARAMS_M[name] * 1e6
        assert abs(total - want) / want <= 0.02

    @pytest.mark.parametrize("name", ["xt", "t", "s", "b", "l", "xl"])
    def test_macs_within_five_percent(self, name):
        total = count_macs(preset(name), 224, 224).total_macs
        want = TABLE_MACS_G[name] * 1e9
        assert abs(total - want) / want <= 0.05

    def test_pointwise_conv_row(self):
        rows = {r.path: r for r in layer_inventory(preset("nano"), 32, 32)}
        r = rows["stages.0.0.sa.moga.gate"]  # 1x1 conv 8->8 at 8x8
        assert r.params == 8 * 8 + 8
        assert r.macs == 8 * 8 * 8 * 8

    def test_totals_equal_row_sums(self):
        rep = count_macs(preset("t"), 224, 224)
        assert rep.total_params == sum(r.params for r in rep.rows)
        assert rep.total_macs == sum(r.macs for r in rep.rows)

    def test_count_params_excludes_running_stats(self):
        m = build(preset("nano"), seed=0)
        total = count_params(m).total_params
        by_hand = sum(t.data.size for _, t in named_parameters(m))
        assert total == by_hand

    def test_csv_and_json_agree(self):
        rep = count_macs(preset("nano"), 32, 32)
        js = json.loads(rep.to_json())
        lines = rep.to_csv().strip().splitlines()
        assert lines[0] == "layer,path,params,macs"
        body = [ln.split(",") for ln in lines[1:-1]]
        assert len(body) == len(js["rows"])
        for cells, jr in zip(body, js["rows"]):
            assert cells[1] == jr["path"]
            assert int(cells[2]) == jr["params"]
            assert int(cells[3]) == jr["macs"]
        total_line = lines[-1].split(",")
        assert int(total_line[2]) == js["totals"]["params"]
        assert int(total_line[3]) == js["totals"]["macs"]


class TestMogaFlops:
    def test_closed_form_equals_layer_sum_on_sweep(self):
        for h in (1, 7, 14, 56):
            for c in (8, 32, 64, 512):
                cf = moga_flops_closed_form(h, h, c)
                bl = moga_flops_by_layer(h, h, c)
                assert cf == bl
                assert isinstance(cf, int)

    def test_worked_examples(self):
        # 3136 * (117.75 + 384) and 8 * 165.75, both exact integers
        assert moga_flops_closed_form(7, 7, 64) == 1_573_488
        assert moga_flops_closed_form(1, 1, 8) == 1326

    def test_fractional_widths_stay_exact(self):
        from fractions import Fraction
        v = moga_flops_closed_form(1, 1, 2)
        assert v == moga_flops_by_layer(1, 1, 2)
        assert isinstance(v, Fraction)

    def test_double_mac_count_cross_module(self):
        # the 2-ops-per-MAC closed form equals twice the per-layer MAC rows
        for name, res in (("nano", 32), ("t", 224)):
            cfg = preset(name)
            rep = count_macs(cfg, res, res)
            stage_res = [res // 4 // (2 ** i) for i in range(4)]
            want = sum(d * moga_flops_closed_form(r, r, c)
                       for d, r, c in zip(cfg.depths, stage_res, cfg.dims))
            assert 2 * moga_mac_rows(rep) == want
