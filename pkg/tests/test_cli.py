import csv
import os
from pathlib import Path

import numpy as np
import pytest

from ere.cli import build_parser, main
from ere.tensor_archive import read_archive, write_archive

from conftest import planted_lowrank_pair

HELP_DIR = Path(__file__).parent / "data" / "help"
SUBCOMMANDS = ["encode", "decode", "stats", "allocate", "spectra", "verify",
               "perturb", "alpha-sweep"]


@pytest.fixture
def pair_files(tmp_path):
    base, finetuned = planted_lowrank_pair(100)
    base_path = tmp_path / "base.tsa"
    ft_path = tmp_path / "ft.tsa"
    write_archive(base, base_path)
    write_archive(finetuned, ft_path)
    return base_path, ft_path, base, finetuned


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestEncodeDecode:
    def test_round_trip_on_identical_inputs(self, tmp_path, pair_files):
        base_path, _, base, _ = pair_files
        out = tmp_path / "m.ere"
        restored = tmp_path / "restored.tsa"
        assert main(["encode", "--base", str(base_path), "--finetuned", str(base_path),
                     "--rank", "4", "--out", str(out)]) == 0
        assert main(["decode", "--base", str(base_path), "--ere", str(out),
                     "--out", str(restored)]) == 0
        assert read_archive(restored) == base

    def test_identical_invocations_identical_files(self, tmp_path, pair_files):
        base_path, ft_path, _, _ = pair_files
        for name in ("a.ere", "b.ere"):
            assert main(["encode", "--base", str(base_path), "--finetuned", str(ft_path),
                         "--rank", "4", "--out", str(tmp_path / name)]) == 0
        assert (tmp_path / "a.ere").read_bytes() == (tmp_path / "b.ere").read_bytes()

    def test_thread_count_does_not_change_bytes(self, tmp_path, pair_files):
        base_path, ft_path, _, _ = pair_files
        for threads, name in (("1", "t1.ere"), ("8", "t8.ere")):
            assert main(["encode", "--base", str(base_path), "--finetuned", str(ft_path),
                         "--rank", "4", "--threads", threads,
                         "--out", str(tmp_path / name)]) == 0
        assert (tmp_path / "t1.ere").read_bytes() == (tmp_path / "t8.ere").read_bytes()

    def test_threads_env_fallback(self, tmp_path, pair_files, monkeypatch):
        base_path, ft_path, _, _ = pair_files
        monkeypatch.setenv("ERE_THREADS", "4")
        out = tmp_path / "env.ere"
        assert main(["encode", "--base", str(base_path), "--finetuned", str(ft_path),
                     "--rank", "4", "--out", str(out)]) == 0
        ref = tmp_path / "ref.ere"
        monkeypatch.delenv("ERE_THREADS")
        assert main(["encode", "--base", str(base_path), "--finetuned", str(ft_path),
                     "--rank", "4", "--out", str(ref)]) == 0
        assert out.read_bytes() == ref.read_bytes()

    def test_missing_file_is_validation_failure(self, tmp_path):
        assert main(["encode", "--base", str(tmp_path / "nope.tsa"),
                     "--finetuned", str(tmp_path / "nope.tsa"),
                     "--rank", "4", "--out", str(tmp_path / "m.ere")]) == 1

    def test_alpha_out_of_range_is_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["encode", "--base", "x", "--finetuned", "y", "--rank", "4",
                  "--alpha", "1.5", "--out", "z"])
        assert exc.value.code == 2


class TestStats:
    def test_total_matches_file_size(self, tmp_path, pair_files, capsys):
        base_path, ft_path, _, _ = pair_files
        out = tmp_path / "m.ere"
        main(["encode", "--base", str(base_path), "--finetuned", str(ft_path),
              "--rank", "4", "--out", str(out)])
        csv_path = tmp_path / "stats.csv"
        assert main(["stats", "--ere", str(out), "--csv", str(csv_path)]) == 0
        printed = capsys.readouterr().out
        assert f"= {out.stat().st_size} bytes" in printed
        rows = read_rows(csv_path)
        assert {row["kind"] for row in rows} <= {"lowrank", "raw", "zero"}


class TestAllocate:
    def test_plan_csv_columns(self, tmp_path, pair_files):
        base_path, ft_path, _, _ = pair_files
        plan_path = tmp_path / "plan.csv"
        assert main(["allocate", "--base", str(base_path), "--finetuned", str(ft_path),
                     "--rank", "4", "--out", str(plan_path)]) == 0
        rows = read_rows(plan_path)
        assert rows
        assert set(rows[0]) == {"layer", "n", "m", "continuous_rank", "rank",
                                "param_cost", "tail_energy_at_rank"}
        budget = sum(4 * (int(r["n"]) + int(r["m"])) for r in rows)
        spent = sum(int(r["param_cost"]) for r in rows)
        assert spent <= budget


class TestSpectra:
    def test_outputs_and_columns(self, tmp_path, pair_files):
        base_path, ft_path, _, _ = pair_files
        out_dir = tmp_path / "spectra"
        assert main(["spectra", "--base", str(base_path), "--finetuned", str(ft_path),
                     "--out", str(out_dir)]) == 0
        spec_rows = read_rows(out_dir / "spectra.csv")
        assert set(spec_rows[0]) == {"layer", "index", "sigma_normalized", "erank",
                                     "erank_ratio", "mp_reference"}
        first = [r for r in spec_rows if r["index"] == "0"]
        assert all(float(r["sigma_normalized"]) == 1.0 for r in first)
        erank_rows = read_rows(out_dir / "erank.csv")
        assert all(0 < float(r["erank_ratio"]) for r in erank_rows)


class TestVerify:
    def test_pass_and_fail_paths(self, tmp_path, pair_files):
        base_path, ft_path, _, _ = pair_files
        out = tmp_path / "m.ere"
        main(["encode", "--base", str(base_path), "--finetuned", str(ft_path),
              "--rank", "6", "--bits", "8", "--out", str(out)])
        assert main(["verify", "--base", str(base_path), "--finetuned", str(ft_path),
                     "--ere", str(out), "--tol", "1e-2"]) == 0
        blob = bytearray(out.read_bytes())
        blob[-1] ^= 0xFF
        out.write_bytes(bytes(blob))
        assert main(["verify", "--base", str(base_path), "--finetuned", str(ft_path),
                     "--ere", str(out)]) == 1


class TestExperiments:
    def test_perturb_noise_csv(self, tmp_path):
        out = tmp_path / "noise.csv"
        assert main(["perturb", "--kind", "noise", "--seeds", "1",
                     "--sigmas", "0.1", "--out", str(out)]) == 0
        rows = read_rows(out)
        assert len(rows) == 2  # one seed x one sigma x two modes
        assert {r["mode"] for r in rows} == {"full", "residual"}

    def test_perturb_lowrank_csv(self, tmp_path):
        out = tmp_path / "lowrank.csv"
        assert main(["perturb", "--kind", "lowrank", "--seeds", "1",
                     "--keep-fractions", "0.8", "--out", str(out)]) == 0
        rows = read_rows(out)
        assert len(rows) == 2
        assert all(-1.0 <= float(r["feature_cosine"]) <= 1.0 for r in rows)

    def test_alpha_sweep_csv(self, tmp_path):
        out = tmp_path / "alpha.csv"
        assert main(["alpha-sweep", "--alphas", "0,1", "--rank", "4",
                     "--seed", "0", "--out", str(out)]) == 0
        rows = read_rows(out)
        assert [r["alpha"] for r in rows] == ["0.0", "1.0"]


class TestHelp:
    @pytest.fixture(autouse=True)
    def fixed_width(self, monkeypatch):
        monkeypatch.setenv("COLUMNS", "100")

    def test_top_level_help_golden(self):
        expected = (HELP_DIR / "ere.txt").read_text()
        assert build_parser().format_help() == expected

    @pytest.mark.parametrize("name", SUBCOMMANDS)
    def test_subcommand_help_golden(self, name):
        parser = build_parser()
        sub = parser._subparsers._group_actions[0].choices[name]
        expected = (HELP_DIR / f"{name}.txt").read_text()
        assert sub.format_help() == expected

    @pytest.mark.parametrize("name", SUBCOMMANDS)
    def test_every_flag_documented(self, name):
        parser = build_parser()
        sub = parser._subparsers._group_actions[0].choices[name]
        text = sub.format_help()
        for action in sub._actions:
            for opt in action.option_strings:
                assert opt in text
