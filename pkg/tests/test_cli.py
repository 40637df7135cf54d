import csv

import pytest

from spde_mlmc.cli import main, parse_range


def read_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    return rows[0], rows[1:]


def test_parse_range():
    assert parse_range("3..7") == (3, 7)
    assert parse_range("4") == (4, 4)
    for bad in ("0..3", "5..2", "x", "1..y"):
        with pytest.raises(Exception):
            parse_range(bad)


def test_seed_is_mandatory(tmp_path):
    assert main(["det-conv", "--levels", "3..4", "--out", str(tmp_path)]) == 2


def test_unknown_flag_is_usage_error(tmp_path):
    assert main(["det-conv", "--levels", "3..4", "--seed", "1",
                 "--out", str(tmp_path), "--bogus", "2"]) == 2


def test_det_conv_output(tmp_path):
    out = tmp_path / "d"
    assert main(["det-conv", "--levels", "3..5", "--seed", "1", "--out", str(out)]) == 0
    header, rows = read_rows(out / "det_conv.csv")
    assert header == ["level", "h", "dt", "l2_error"]
    assert [r[0] for r in rows] == ["3", "4", "5", "slope"]
    slope = float(rows[-1][3])
    assert -2.3 <= slope <= -1.6


def test_det_conv_single_level_has_no_slope_row(tmp_path):
    out = tmp_path / "d"
    assert main(["det-conv", "--levels", "4", "--seed", "1", "--out", str(out)]) == 0
    _, rows = read_rows(out / "det_conv.csv")
    assert [r[0] for r in rows] == ["4"]


def test_det_conv_rerun_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["det-conv", "--levels", "3..5", "--seed", "9",
                     "--out", str(out)]) == 0
    assert (a / "det_conv.csv").read_bytes() == (b / "det_conv.csv").read_bytes()


def test_variance_zero_noise(tmp_path):
    out = tmp_path / "v"
    assert main(["variance", "--levels", "2..3", "--pairs", "8", "--seed", "3",
                 "--out", str(out), "--zero-noise"]) == 0
    _, rows = read_rows(out / "variance.csv")
    assert [r[0] for r in rows] == ["2", "3"]  # no slope row for zero variances
    # identical samples leave only the cancellation residual of the
    # streaming sum-of-squares formula
    assert all(float(r[1]) <= 1e-18 and float(r[2]) <= 1e-18 for r in rows)


def test_variance_output_and_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["variance", "--levels", "2..3", "--pairs", "64", "--seed", "5",
                     "--out", str(out)]) == 0
    assert (a / "variance.csv").read_bytes() == (b / "variance.csv").read_bytes()
    header, rows = read_rows(a / "variance.csv")
    assert header == ["level", "var_difference", "var_level"]
    assert rows[-1][0] == "slope"
    assert all(float(r[1]) > 0.0 for r in rows[:-1])


def test_run_outputs(tmp_path):
    out = tmp_path / "r"
    assert main(["run", "--mode", "strong", "--L", "1..2", "--reps", "2",
                 "--seed", "11", "--out", str(out)]) == 0
    header, rows = read_rows(out / "run_summary.csv")
    assert header == ["mode", "L", "rms_error_agg", "op_work_total",
                      "replicates", "outside_theory"]
    assert [(r[0], r[1]) for r in rows] == [("strong", "1"), ("strong", "2")]
    assert all(r[5] == "0" for r in rows)
    _, reps = read_rows(out / "run_replicates.csv")
    assert len(reps) == 4
    _, levels = read_rows(out / "run_levels.csv")
    assert [(r[1], r[2]) for r in levels] == [("1", "1"), ("2", "1"), ("2", "2")]
    assert (out / "plot_run.gp").exists()
    assert (out / "timings.csv").exists()


def test_run_border_case_flagged(tmp_path):
    out = tmp_path / "r"
    assert main(["run", "--mode", "strong", "--L", "1..1", "--reps", "1",
                 "--eps", "0", "--seed", "11", "--out", str(out)]) == 0
    text = (out / "run_summary.csv").read_text(encoding="utf-8")
    assert "outside the theory" in text
    _, rows = read_rows(out / "run_summary.csv")
    assert rows[0][5] == "1"


def test_run_rerun_and_workers_are_byte_identical(tmp_path):
    outs = [tmp_path / n for n in ("a", "b", "c")]
    for out, workers in zip(outs, ("1", "1", "2")):
        assert main(["run", "--mode", "weak", "--L", "2..3", "--reps", "2",
                     "--seed", "21", "--workers", workers, "--out", str(out)]) == 0
    for name in ("run_summary.csv", "run_replicates.csv", "run_levels.csv"):
        ref = (outs[0] / name).read_bytes()
        assert (outs[1] / name).read_bytes() == ref
        assert (outs[2] / name).read_bytes() == ref


def test_run_general_mode_requires_sequence(tmp_path):
    out = tmp_path / "g"
    assert main(["run", "--mode", "general", "--L", "1..2", "--reps", "1",
                 "--seed", "2", "--out", str(out)]) == 2
    assert main(["run", "--mode", "general", "--L", "1..2", "--reps", "1",
                 "--seed", "2", "--a-seq", "1,0.5,0.25", "--eta", "1.0",
                 "--out", str(out)]) == 0


def test_run_squared_norm_functional(tmp_path):
    out = tmp_path / "f"
    assert main(["run", "--mode", "strong", "--L", "1..1", "--reps", "2",
                 "--functional", "squared-norm", "--seed", "4",
                 "--out", str(out)]) == 0
    _, rows = read_rows(out / "run_replicates.csv")
    assert all(r[3] == "" and r[4] != "" for r in rows)
    _, summary = read_rows(out / "run_summary.csv")
    assert summary[0][2] == ""


def test_compare_requires_both_modes(tmp_path):
    out = tmp_path / "c"
    assert main(["compare", "--L", "1..2", "--modes", "weak", "--reps", "1",
                 "--seed", "3", "--out", str(out)]) == 2


def test_compare_small(tmp_path):
    out = tmp_path / "c"
    assert main(["compare", "--L", "1..2", "--strong-L", "1..4", "--reps", "3",
                 "--seed", "13", "--out", str(out)]) == 0
    header, rows = read_rows(out / "compare.csv")
    assert header[:4] == ["mode", "L", "rms_error_agg", "op_work_total"]
    assert len(rows) == 6  # strong 1..4 plus weak 1..2
    mheader, matched = read_rows(out / "compare_matched.csv")
    assert mheader == ["weak_L", "strong_L", "weak_rms", "strong_rms",
                       "weak_op_work", "strong_op_work", "work_ratio"]
    for r in matched:
        assert float(r[3]) <= float(r[2])  # strong partner at least as accurate


def test_config_file_merging(tmp_path):
    cfg = tmp_path / "cfg.txt"
    cfg.write_text("levels=3..4\nseed=77\n", encoding="utf-8")
    out = tmp_path / "o"
    assert main(["det-conv", "--config", str(cfg), "--out", str(out)]) == 0
    # flags override the file
    out2 = tmp_path / "o2"
    assert main(["det-conv", "--config", str(cfg), "--levels", "3..3",
                 "--out", str(out2)]) == 0
    _, rows = read_rows(out2 / "det_conv.csv")
    assert [r[0] for r in rows] == ["3"]


def test_config_file_rejects_unknown_keys(tmp_path):
    cfg = tmp_path / "cfg.txt"
    cfg.write_text("bogus=1\n", encoding="utf-8")
    assert main(["det-conv", "--config", str(cfg), "--levels", "3..3",
                 "--seed", "1", "--out", str(tmp_path / "o")]) == 2
