import json
import os

import numpy as np
import pytest

from tse.cli import main

EXAMPLES = os.path.join(os.path.dirname(__file__), "..", "job_examples")


def write_job(tmp_path, payload, name="job.json"):
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return str(path)


def run_cli(capsys, *args):
    code = main(list(args))
    out = capsys.readouterr()
    return code, out.out, out.err


class TestExitCodes:
    def test_missing_file(self, capsys):
        code, _, err = run_cli(capsys, "prob", "--spec", "/nonexistent.json")
        assert code == 2 and "not found" in err

    def test_malformed_json(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        code, _, err = run_cli(capsys, "prob", "--spec", str(path))
        assert code == 2 and "line" in err

    def test_unknown_family(self, tmp_path, capsys):
        job = {"distribution": {"family": "weird", "mu": [0], "sigma": [[1]]},
               "box": {"lower": [0], "upper": [1]}}
        code, _, err = run_cli(capsys, "prob", "--spec", write_job(tmp_path, job))
        assert code == 2 and "family" in err

    def test_nonexistent_moment_is_exit_three(self, tmp_path, capsys):
        # an explicitly requested moment that does not exist
        job = {"distribution": {"family": "t", "mu": [0.0], "sigma": [[1.0]],
                                "nu": 1.0},
               "order": [1]}
        code, _, err = run_cli(capsys, "moments", "--spec", write_job(tmp_path, job),
                               "--seed", "1")
        assert code == 3

    def test_nonexistent_tce_is_exit_three(self, tmp_path, capsys):
        job = {"distribution": {"family": "t", "mu": [0.0], "sigma": [[1.0]],
                                "nu": 1.0},
               "alpha": 0.05}
        code, _, _ = run_cli(capsys, "tce", "--spec", write_job(tmp_path, job))
        assert code == 3

    def test_command_mismatch(self, tmp_path, capsys):
        job = {"command": "prob",
               "distribution": {"family": "normal", "mu": [0.0], "sigma": [[1.0]]}}
        code, _, err = run_cli(capsys, "moments", "--spec", write_job(tmp_path, job))
        assert code == 2


class TestJobs:
    def test_prob_full_space(self, tmp_path, capsys):
        job = {"distribution": {"family": "normal", "mu": [0.0], "sigma": [[1.0]]},
               "box": {"lower": ["-inf"], "upper": ["inf"]}}
        code, out, _ = run_cli(capsys, "prob", "--spec", write_job(tmp_path, job))
        assert code == 0
        payload = json.loads(out)
        assert payload["values"]["prob"] == 1.0
        assert payload["version"]

    def test_moments_emit_existence_flags(self, tmp_path, capsys):
        job = {"distribution": {"family": "t", "mu": [0.0], "sigma": [[1.0]],
                                "nu": 1.5},
               "box": {"lower": [0.0], "upper": ["inf"]}}
        code, out, _ = run_cli(capsys, "moments", "--spec", write_job(tmp_path, job))
        assert code == 0
        payload = json.loads(out)
        assert payload["values"]["mean"] is not None
        assert payload["values"]["covariance"] is None
        assert payload["diagnostics"]["existence"] == {"mean": True, "second": False}

    def test_moments_product_order(self, tmp_path, capsys):
        job = {"distribution": {"family": "normal", "mu": [0.0], "sigma": [[1.0]]},
               "box": {"lower": [0.0], "upper": ["inf"]},
               "order": [2]}
        code, out, _ = run_cli(capsys, "moments", "--spec", write_job(tmp_path, job))
        payload = json.loads(out)
        assert code == 0
        assert payload["values"]["moment"] == pytest.approx(1.0, abs=1e-9)

    def test_deterministic_output_bytes(self, tmp_path, capsys):
        path = os.path.join(EXAMPLES, "t_moments.json")
        code1, out1, _ = run_cli(capsys, "moments", "--spec", path, "--seed", "5")
        code2, out2, _ = run_cli(capsys, "moments", "--spec", path, "--seed", "5")
        assert code1 == code2 == 0
        assert out1 == out2

    def test_deterministic_across_processes(self, tmp_path):
        import subprocess
        import sys

        path = os.path.join(EXAMPLES, "t_moments.json")
        cmd = [sys.executable, "-c",
               "from tse.cli import main; raise SystemExit(main("
               f"['moments', '--spec', {path!r}, '--seed', '5']))"]
        runs = [subprocess.run(cmd, capture_output=True, text=True)
                for _ in range(2)]
        assert all(r.returncode == 0 for r in runs)
        assert runs[0].stdout == runs[1].stdout
        assert runs[0].stdout  # nonempty payload

    def test_threads_flag_validated(self, tmp_path, capsys):
        path = os.path.join(EXAMPLES, "normal_prob.json")
        with pytest.raises(SystemExit) as exc:
            main(["prob", "--spec", path, "--threads", "0"])
        assert exc.value.code == 2
        capsys.readouterr()

    def test_result_json_roundtrip(self, tmp_path, capsys):
        path = os.path.join(EXAMPLES, "sun_moments.json")
        code, out, _ = run_cli(capsys, "moments", "--spec", path)
        assert code == 0
        payload = json.loads(out)
        assert set(payload) >= {"values", "method", "diagnostics", "version"}
        json.loads(json.dumps(payload))

    def test_out_file(self, tmp_path, capsys):
        job = {"distribution": {"family": "normal", "mu": [0.0], "sigma": [[1.0]]},
               "box": {"lower": [0.0], "upper": [1.0]}}
        out_path = tmp_path / "result.json"
        code, out, _ = run_cli(capsys, "prob", "--spec", write_job(tmp_path, job),
                               "--out", str(out_path))
        assert code == 0 and out == ""
        payload = json.loads(out_path.read_text())
        assert 0.0 < payload["values"]["prob"] < 0.5

    def test_tce_job(self, tmp_path, capsys):
        path = os.path.join(EXAMPLES, "st_tce.json")
        code, out, _ = run_cli(capsys, "tce", "--spec", path)
        payload = json.loads(out)
        assert code == 0
        assert payload["values"]["tce"] > payload["values"]["quantile"]

    def test_tce_sum_additivity(self, tmp_path, capsys):
        path = os.path.join(EXAMPLES, "st_tce_sum.json")
        code, out, _ = run_cli(capsys, "tce-sum", "--spec", path)
        payload = json.loads(out)
        assert code == 0
        contributions = payload["values"]["contributions"]
        assert sum(contributions) == pytest.approx(payload["values"]["total"],
                                                   abs=1e-8)

    def test_mtce_job(self, tmp_path, capsys):
        path = os.path.join(EXAMPLES, "est_mtce.json")
        code, out, _ = run_cli(capsys, "mtce", "--spec", path)
        payload = json.loads(out)
        assert code == 0
        assert len(payload["values"]["mtce"]) == 2

    def test_validate_job(self, capsys):
        path = os.path.join(EXAMPLES, "esn_validate.json")
        code, out, _ = run_cli(capsys, "validate", "--spec", path)
        payload = json.loads(out)
        assert code == 0
        assert payload["values"]["pass"] is True
        assert payload["values"]["worst_abs_z"] <= 4.0

    def test_validate_student_kernel(self, capsys):
        path = os.path.join(EXAMPLES, "est_validate.json")
        code, out, _ = run_cli(capsys, "validate", "--spec", path)
        payload = json.loads(out)
        assert code == 0
        assert payload["values"]["pass"] is True


class TestPdfGrid:
    def test_standard_normal_grid(self, tmp_path, capsys):
        job = {"distribution": {"family": "normal", "mu": [0.0], "sigma": [[1.0]]},
               "grid": {"lower": [-4.0], "upper": [4.0], "num": [161]}}
        code, out, _ = run_cli(capsys, "pdf-grid", "--spec", write_job(tmp_path, job))
        assert code == 0
        lines = out.strip().split("\n")
        assert lines[0] == "x,density"
        rows = np.array([[float(v) for v in line.split(",")] for line in lines[1:]])
        peak = rows[np.argmax(rows[:, 1])]
        assert peak[0] == pytest.approx(0.0, abs=1e-12)
        assert peak[1] == pytest.approx(0.3989422804014327, abs=1e-9)

    def test_truncated_grid_normalizes(self, tmp_path, capsys):
        job = {"distribution": {"family": "SN", "mu": [0.0], "sigma": [[1.0]],
                                "lambda": [1.5]},
               "box": {"lower": [-0.5], "upper": [1.5]},
               "grid": {"lower": [-0.5], "upper": [1.5], "num": [2001]}}
        code, out, _ = run_cli(capsys, "pdf-grid", "--spec", write_job(tmp_path, job))
        rows = np.array([[float(v) for v in line.split(",")]
                         for line in out.strip().split("\n")[1:]])
        dx = rows[1, 0] - rows[0, 0]
        riemann = rows[:, 1].sum() * dx
        assert abs(riemann - 1.0) < 1e-3

    def test_skew_t_equals_zero_extension(self, tmp_path, capsys):
        base = {"mu": [0.0], "sigma": [[1.0]], "lambda": [1.2], "nu": 5.0}
        st_job = {"distribution": dict(family="ST", **base),
                  "grid": {"lower": [-3.0], "upper": [3.0], "num": [101]}}
        est_job = {"distribution": dict(family="EST", tau=0.0, **base),
                   "grid": {"lower": [-3.0], "upper": [3.0], "num": [101]}}
        _, out1, _ = run_cli(capsys, "pdf-grid", "--spec", write_job(tmp_path, st_job, "a.json"))
        _, out2, _ = run_cli(capsys, "pdf-grid", "--spec", write_job(tmp_path, est_job, "b.json"))
        r1 = np.array([[float(v) for v in line.split(",")]
                       for line in out1.strip().split("\n")[1:]])
        r2 = np.array([[float(v) for v in line.split(",")]
                       for line in out2.strip().split("\n")[1:]])
        assert np.max(np.abs(r1 - r2)) < 1e-12

    def test_two_dim_grid_shape(self, tmp_path, capsys):
        job = {"distribution": {"family": "t", "mu": [0.0, 0.0],
                                "sigma": [[1.0, 0.2], [0.2, 1.0]], "nu": 5.0},
               "grid": {"lower": [-2.0, -2.0], "upper": [2.0, 2.0], "num": [11, 13]}}
        code, out, _ = run_cli(capsys, "pdf-grid", "--spec", write_job(tmp_path, job))
        lines = out.strip().split("\n")
        assert lines[0] == "x,y,density"
        assert len(lines) == 1 + 11 * 13

    def test_dimension_cap(self, tmp_path, capsys):
        job = {"distribution": {"family": "normal", "mu": [0.0, 0.0, 0.0],
                                "sigma": np.eye(3).tolist()},
               "grid": {"lower": [-1, -1, -1], "upper": [1, 1, 1], "num": [5, 5, 5]}}
        code, _, err = run_cli(capsys, "pdf-grid", "--spec", write_job(tmp_path, job))
        assert code == 2
