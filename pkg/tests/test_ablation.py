import os
from dataclasses import replace

import pytest

from rsmoe.ablation import (
    BASE_DECODER,
    AblationCell,
    Finding,
    ablation_threads,
    cell_config,
    directional_findings,
    format_findings,
    grid,
    read_report,
    run_ablation_suite,
    write_findings,
    write_report,
)
from rsmoe.config import RunConfig
from rsmoe.errors import ConfigError
from rsmoe.recording import read_records


def _row(seed, n, router, strategy, bleu1, cider, decoder=BASE_DECODER):
    return {
        "seed": seed,
        "num_experts": n,
        "use_router": router,
        "strategy": strategy,
        "decoder": decoder,
        "bleu1": bleu1,
        "cider": cider,
    }


@pytest.fixture
def rows():
    out = []
    for seed, jitter in zip((0, 1, 2), (-1.0, 0.0, 1.0)):
        out.append(_row(seed, 3, True, "two-stage", 60.0 + jitter, 90.0 + jitter))
        out.append(_row(seed, 3, False, "two-stage", 40.0 + jitter, 70.0))
        out.append(_row(seed, 1, True, "two-stage", 55.0, 89.5 + jitter))
        out.append(_row(seed, 3, True, "one-stage", 60.0 + jitter, 50.0))
    return out


class TestThreads:
    def test_environment(self, monkeypatch):
        monkeypatch.setenv("RSMOE_THREADS", "3")
        assert ablation_threads() == 3
        monkeypatch.delenv("RSMOE_THREADS")
        assert ablation_threads() == (os.cpu_count() or 1)

    @pytest.mark.parametrize("raw", ["0", "-2", "many"])
    def test_bad_values(self, monkeypatch, raw):
        monkeypatch.setenv("RSMOE_THREADS", raw)
        with pytest.raises(ConfigError, match="RSMOE_THREADS"):
            ablation_threads()


class TestGrid:
    def test_size_and_order(self):
        cells = grid([0, 1], experts=(1, 3), strategies=("two-stage",))
        assert len(cells) == 2 * 2 * 2
        assert cells[0] == AblationCell(seed=0, num_experts=1, use_router=True, strategy="two-stage")
        assert cells[1].use_router is False
        assert cells[-1].seed == 1

    def test_cell_id(self):
        cell = AblationCell(seed=2, num_experts=3, use_router=False, strategy="one-stage", decoder="large")
        assert cell.cell_id == "one-stage/N3/norouter/large/seed2"

    def test_cell_config(self, tiny_run):
        cfg = cell_config(tiny_run, 5, "large", use_router=False)
        assert cfg.seed == 5 and cfg.use_router is False
        assert cfg.model.decoder_layers == 3
        assert cell_config(tiny_run, 5, BASE_DECODER).model == tiny_run.model


class TestFindings:
    def test_directions(self, rows):
        findings = {f.name: f for f in directional_findings(rows)}
        assert set(findings) == {"router_on_vs_off", "experts_3_vs_1", "two_stage_vs_one_stage"}
        router = findings["router_on_vs_off"]
        assert router.margin == pytest.approx(20.0)
        assert router.std_a == pytest.approx(1.0)
        assert router.holds
        experts = findings["experts_3_vs_1"]
        assert experts.margin == pytest.approx(0.5)
        assert not experts.holds
        strategy = findings["two_stage_vs_one_stage"]
        assert strategy.margin == pytest.approx(0.0) and strategy.holds
        assert strategy.seeds == 3

    def test_missing_side_is_skipped(self, rows):
        kept = [r for r in rows if r["strategy"] == "two-stage"]
        names = [f.name for f in directional_findings(kept)]
        assert "two_stage_vs_one_stage" not in names

    def test_per_decoder(self, rows):
        more = rows + [dict(r, decoder="large") for r in rows]
        findings = directional_findings(more)
        assert [f.decoder for f in findings].count("large") == 3

    def test_single_seed_has_zero_std(self):
        rows = [_row(0, 3, True, "two-stage", 50.0, 1.0), _row(0, 3, False, "two-stage", 49.0, 1.0)]
        (finding,) = directional_findings(rows)
        assert finding.std_a == 0.0 and finding.holds

    def test_format(self, rows):
        text = format_findings(directional_findings(rows))
        assert "router_on_vs_off [config] bleu1" in text
        assert "does not hold" in text

    def test_files(self, tmp_path, rows):
        path = write_report(tmp_path / "ablation.tsv", rows, seeds="0,1,2")
        assert read_report(path) == rows
        findings = directional_findings(rows)
        header, records = read_records(write_findings(tmp_path / "findings.tsv", findings), schema="rsmoe.findings.v1")
        assert header["findings"] == "3"
        assert [r["holds"] for r in records] == [str(f.holds) for f in findings]

    def test_margin_rules(self):
        f = Finding("x", "bleu1", BASE_DECODER, 10.0, 2.0, 9.0, 0.5, 3, "std")
        assert not f.holds
        assert replace(f, margin_rule="nonneg").holds


class TestSuite:
    def test_needs_seeds(self, tiny_run):
        with pytest.raises(ConfigError):
            run_ablation_suite(tiny_run, [])

    def test_small_grid(self, tiny_run, tmp_path):
        base = replace(tiny_run, train_size=4, test_size=2, epochs=1, batch_size=2)
        rows = run_ablation_suite(
            base,
            [0],
            experts=(3,),
            strategies=("two-stage", "one-stage"),
            threads=2,
            out_dir=tmp_path,
        )
        assert [(r["strategy"], r["use_router"]) for r in rows] == [
            ("two-stage", True),
            ("two-stage", False),
            ("one-stage", True),
            ("one-stage", False),
        ]
        assert all(0.0 <= r["bleu1"] <= 100.0 for r in rows)
        assert len(read_report(tmp_path / "ablation.tsv")) == 4
        _, findings = read_records(tmp_path / "findings.tsv", schema="rsmoe.findings.v1")
        assert sorted(f["name"] for f in findings) == ["router_on_vs_off", "two_stage_vs_one_stage"]


@pytest.mark.slow
class TestDirectionalReproduction:
    def test_three_seeds_on_500_100(self, tmp_path):
        base = RunConfig(train_size=500, test_size=100, epochs=8, base_lr=1e-3, min_lr=1e-5)
        seeds = [0, 1, 2]
        rows = run_ablation_suite(base, seeds, experts=(1, 3), strategies=("two-stage",), out_dir=tmp_path / "two")
        rows += run_ablation_suite(
            base, seeds, experts=(3,), routers=(True,), strategies=("one-stage",), out_dir=tmp_path / "one"
        )
        findings = {f.name: f for f in directional_findings(rows)}
        assert set(findings) == {"router_on_vs_off", "experts_3_vs_1", "two_stage_vs_one_stage"}
        for finding in findings.values():
            assert finding.seeds == 3
            assert finding.holds, format_findings([finding])
