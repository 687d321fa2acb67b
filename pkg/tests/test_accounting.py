from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sret.accounting import (
    attention_core_cost,
    count_macs,
    count_params,
    verify_theorem1,
)
from sret.model import GroupSchedule, build_model, preset
from sret.tensor import ConfigError


class TestAttentionCoreCost:
    def test_formula_instantiation(self):
        assert attention_core_cost(196, 64, [1]) == 2 * 196**2 * 64 == 4_917_248

    @pytest.mark.parametrize("groups", [1, 2, 4, 7, 14, 28])
    def test_slicing_divides_cost_exactly(self, groups):
        vanilla = attention_core_cost(196, 64, [1])
        assert attention_core_cost(196, 64, [groups]) * groups == vanilla

    def test_n_copies_of_group_n_equal_vanilla(self):
        for n in (2, 4, 7):
            assert attention_core_cost(196, 64, [n] * n) == attention_core_cost(196, 64, [1])

    def test_divisibility_required(self):
        with pytest.raises(ConfigError):
            attention_core_cost(196, 64, [5])


class TestTheorem1:
    def test_full_grid_holds(self):
        results = [
            verify_theorem1(196, 64, n, g) for n in (1, 2, 4, 8) for g in (1, 2, 4, 8)
        ]
        assert len(results) == 16 and all(r.holds for r in results)
        assert all(r.ratio == Fraction(n, g)
                   for r, (n, g) in zip(results, [(n, g) for n in (1, 2, 4, 8) for g in (1, 2, 4, 8)]))

    def test_equal_counts_reproduce_vanilla(self):
        r = verify_theorem1(64, 32, 4, 4)
        assert r.holds and r.ratio == 1

    def test_cheaper_when_groups_exceed_recursions(self):
        r = verify_theorem1(196, 64, 2, 8)
        assert r.holds and r.ratio == Fraction(1, 4)

    def test_dearer_when_recursions_exceed_groups(self):
        r = verify_theorem1(196, 64, 3, 2)
        assert r.holds and r.ratio == Fraction(3, 2)

    def test_agrees_with_integer_cost_when_divisible(self):
        for n, g in [(1, 2), (2, 4), (3, 7), (4, 14)]:
            r = verify_theorem1(196, 64, n, g)
            integer_ratio = Fraction(
                attention_core_cost(196, 64, [g] * n), attention_core_cost(196, 64, [1])
            )
            assert r.ratio == integer_ratio

    def test_rejects_nonsense(self):
        with pytest.raises(ConfigError):
            verify_theorem1(196, 64, 0, 2)
        with pytest.raises(ConfigError):
            verify_theorem1(196, 64, 2, 0)


class TestParamReproduction:
    @pytest.mark.parametrize(
        "name,target,tol",
        [
            ("deit_t", 5.7e6, 0.02),
            ("sret_t", 4.76e6, 0.02),
            ("sret_tl", 4.99e6, 0.02),
            ("sret_s", 20.9e6, 0.03),
        ],
    )
    def test_published_totals(self, name, target, tol):
        model = build_model(preset(name), np.random.default_rng(0))
        count = count_params(model)
        assert abs(count - target) / target < tol

    def test_symbolic_report_matches_registry_exactly(self):
        for name in ("sret_t", "deit_t", "sret_desk"):
            cfg = preset(name)
            model = build_model(cfg, np.random.default_rng(0))
            assert count_macs(cfg).total_params == count_params(model)

    def test_group_schedule_never_changes_parameters(self):
        # slicing shares the global attention's weights: any schedule, same count
        counts = set()
        for stages in ([[1, 1]] * 3, [[8, 2], [4, 1], [1, 1]], [[2, 2], [2, 2], [1, 1]]):
            cfg = replace(preset("sret_t"), group_schedule=GroupSchedule(stages))
            counts.add(count_macs(cfg).total_params)
        assert len(counts) == 1

    def test_count_macs_accepts_built_models(self):
        model = build_model(preset("sret_desk"), np.random.default_rng(0))
        assert count_macs(model).total_macs == count_macs(model.config).total_macs
        assert count_macs(model, input_resolution=64).total_macs > count_macs(model).total_macs

    def test_recursion_invariance_without_nll(self):
        base = preset("deit_t")
        counts = set()
        for recs in (1, 2, 3):
            cfg = replace(
                base, recursions_per_block=recs, group_schedule=GroupSchedule([[1] * recs])
            )
            counts.add(count_params(build_model(cfg, np.random.default_rng(0))))
        assert len(counts) == 1

    def test_total_grows_by_exact_nll_formula_per_recursion(self):
        base = preset("sret_desk")
        totals = {}
        for recs in (1, 2):
            cfg = replace(
                base, recursions_per_block=recs,
                group_schedule=GroupSchedule([[1] * recs] * 3),
            )
            totals[recs] = count_macs(cfg).total_params
        from sret.blocks import hidden_dim

        expected = 0
        for d, blocks in zip(base.stage_dims, base.stage_blocks):
            nh = hidden_dim(base.nll_ratio, d)
            expected += blocks * (2 * d + d * nh + nh + nh * d + d + 2)
        assert totals[2] - totals[1] == expected


class TestMacReproduction:
    def test_deit_t(self):
        macs = count_macs(preset("deit_t")).total_macs
        assert abs(macs - 1.3e9) / 1.3e9 < 0.05

    def test_sret_t_sliced_schedule(self):
        macs = count_macs(preset("sret_t")).total_macs
        assert abs(macs - 1.12e9) / 1.12e9 < 0.05

    def test_sret_t_vanilla_schedule(self):
        cfg = replace(preset("sret_t"), group_schedule=GroupSchedule([[1, 1]] * 3))
        macs = count_macs(cfg).total_macs
        assert abs(macs - 1.38e9) / 1.38e9 < 0.05

    def test_slicing_saves_at_least_point_two_billion(self):
        sliced = count_macs(preset("sret_t")).total_macs
        vanilla = count_macs(
            replace(preset("sret_t"), group_schedule=GroupSchedule([[1, 1]] * 3))
        ).total_macs
        assert vanilla - sliced >= 0.2e9

    def test_attention_core_entries_match_cost_function(self):
        cfg = preset("sret_t")
        report = count_macs(cfg)
        tokens = cfg.stage_tokens()
        for s, (d, blocks) in enumerate(zip(cfg.stage_dims, cfg.stage_blocks)):
            expected = attention_core_cost(tokens[s], d, cfg.group_schedule.stages[s])
            for k in range(blocks):
                row = next(
                    l for l in report.layers if l.name == f"stage{s + 1}.block{k}.attn.core"
                )
                assert row.attn_core_macs == expected == row.macs

    def test_core_total_is_consistent(self):
        report = count_macs(preset("sret_t"))
        assert report.attention_core_macs == sum(l.attn_core_macs for l in report.layers)
        assert report.total_macs == sum(l.macs for l in report.layers)

    @given(
        dim_unit=st.integers(1, 4),
        blocks=st.integers(1, 2),
        g1=st.sampled_from([1, 2, 4]),
        g2=st.sampled_from([1, 2, 4]),
    )
    @settings(max_examples=25, deadline=None)
    def test_group_one_never_decreases_total(self, dim_unit, blocks, g1, g2):
        d = 8 * dim_unit
        cfg = replace(
            preset("sret_desk"),
            stage_dims=[d, 2 * d, 4 * d],
            stem_channels=[8, d, d],
            heads_per_stage=[1, 2, 4],
            stage_blocks=[blocks, 1, 1],
            group_schedule=GroupSchedule([[g1, g2], [2, 1], [1, 1]]),
        )
        flat = replace(cfg, group_schedule=GroupSchedule([[1, 1], [1, 1], [1, 1]]))
        assert count_macs(flat).total_macs >= count_macs(cfg).total_macs

    def test_mixer_report_sanity(self):
        report = count_macs(preset("mixer_b16_recursive"))
        assert report.total_params > 50e6  # B/16-scale
        assert report.attention_core_macs == 0


class TestCsv:
    def test_rows_sum_to_total(self, tmp_path):
        import csv as csv_mod

        report = count_macs(preset("sret_desk"))
        out = tmp_path / "layers.csv"
        report.write_csv(out)
        with open(out) as fh:
            rows = list(csv_mod.reader(fh))
        assert rows[0] == ["layer", "params", "macs"]
        body, total = rows[1:-1], rows[-1]
        assert total[0] == "total"
        assert sum(int(r[1]) for r in body) == int(total[1]) == report.total_params
        assert sum(int(r[2]) for r in body) == int(total[2]) == report.total_macs

    def test_table_renders(self):
        text = count_macs(preset("sret_desk")).format_table()
        assert "total" in text and "params" in text
