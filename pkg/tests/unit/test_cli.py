import io
import json

import pytest

from switching_pcem import cli
from switching_pcem.cli import build_parser, estimated_work, guard_resources, load_experiment, run
from switching_pcem.config import CONFIG_DIR, ConfigManager
from switching_pcem.errors import ResourceGuardError, ValidationError
from switching_pcem.schemes import SchemePreset


SMALL = {
    "model": {"family": "linear", "a": [0.15, 0.05], "b": [0.1, 0.1]},
    "generator": [[-0.5, 0.5], [0.5, -0.5]],
    "initial": {"y0": 10.0, "r0": 1},
    "horizon": 1.0,
    "deltas": [0.1, 0.01, 0.001],
    "schemes": ["EM"],
    "replications": 4,
    "seed": 42,
}


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL))
    return str(path)


@pytest.fixture
def invoke(tmp_path):
    """Run the CLI with results under tmp_path/out; returns (code, stdout lines)"""

    def _invoke(*argv):
        stdout = io.StringIO()
        code = run([*argv, "--out", str(tmp_path / "out"), "--no-header", "--log-level", "WARNING"], stdout)
        return code, stdout.getvalue().splitlines()

    return _invoke


class TestParser:
    """Test suite for argument parsing"""

    def test_subcommands(self):
        """Test every command is registered"""
        for command in cli.COMMANDS:
            args = build_parser().parse_args(
                [command, "ex2"] if command == "reproduce" else [command]
            )
            assert args.command == command

    def test_lattice_axis(self):
        """Test low,high,count parsing"""
        args = build_parser().parse_args(["stability", "--lambda-range=-2,-0.5,4"])
        assert args.lambda_range == [-2.0, -0.5, 4]

    def test_missing_command(self):
        """Test argparse failures return 2"""
        assert run([]) == 2

    def test_help(self, capsys):
        """Test --help exits cleanly"""
        assert run(["compare", "--help"]) == 0
        assert "--allow-long" in capsys.readouterr().out


class TestLoadExperiment:
    """Test suite for command-line overrides"""

    def parse(self, *argv):
        return build_parser().parse_args(["compare", *argv])

    def test_overrides(self, small_config):
        """Test seed, replications, deltas and output directory"""
        args = self.parse("--config", small_config, "--seed", "9", "--replications", "6", "--delta", "0.5,0.25")
        experiment = load_experiment(args)
        assert experiment.seed == 9
        assert experiment.replications == 6
        assert experiment.deltas == (0.5, 0.25)

    def test_scheme_all(self):
        """Test 'all' expands to every preset"""
        experiment = load_experiment(self.parse("--scheme", "all"))
        assert [label for label, _ in experiment.schemes] == [p.value for p in SchemePreset]

    def test_theta_eta_start_from_preset(self):
        """Test --eta alone keeps the named preset's theta"""
        experiment = load_experiment(self.parse("--scheme", "drift-implicit-PCEM", "--eta", "0.5"))
        ((label, params),) = experiment.schemes
        assert label == "custom[1.0|0.5]"
        assert params.theta == (1.0,)

    def test_custom_without_degrees(self):
        """Test 'custom' needs --theta or --eta"""
        with pytest.raises(ValidationError):
            load_experiment(self.parse("--scheme", "custom"))

    def test_degrees_with_several_schemes(self):
        """Test --theta cannot apply to a list of schemes"""
        with pytest.raises(ValidationError):
            load_experiment(self.parse("--scheme", "EM,symmetric-PCEM", "--theta", "0.5"))


class TestResourceGuard:
    """Test suite for the work estimate"""

    def test_estimate(self):
        """Test steps x replications x schemes"""
        experiment = ConfigManager().to_experiment()
        assert estimated_work(experiment, [0.1]) == 100 * 200 * 6

    def test_guard(self, monkeypatch):
        """Test the guard trips above WORK_LIMIT unless allowed"""
        experiment = ConfigManager().to_experiment()
        monkeypatch.setattr(cli, "WORK_LIMIT", 10)
        with pytest.raises(ResourceGuardError):
            guard_resources(experiment, False)
        guard_resources(experiment, True)


class TestCompare:
    """Test suite for the compare command"""

    def test_single_cell(self, invoke, small_config, tmp_path):
        """Test one scheme and one step give one row, also written to errors.csv"""
        code, lines = invoke("compare", "--config", small_config, "--delta", "0.1")
        assert code == 0
        assert lines[0].startswith("scheme,theta,eta,delta")
        assert len(lines) == 2
        assert lines[1].startswith("EM,0.0,0.0,0.1,4,")
        assert (tmp_path / "out" / "errors.csv").read_text().splitlines() == lines

    def test_scheme_names(self, invoke, small_config):
        """Test --scheme all lists every preset"""
        code, lines = invoke("compare", "--config", small_config, "--delta", "0.1", "--scheme", "all")
        assert code == 0
        assert [line.split(",")[0] for line in lines[1:]] == [p.value for p in SchemePreset]

    def test_resolved_experiment_is_recorded(self, invoke, small_config, tmp_path):
        """Test experiment.json holds the overrides and reruns to the same table"""
        code, lines = invoke("compare", "--config", small_config, "--seed", "7", "--delta", "0.1,0.05")
        assert code == 0
        record = tmp_path / "out" / cli.EXPERIMENT_RECORD
        experiment = ConfigManager(str(record)).to_experiment()
        assert experiment.seed == 7
        assert experiment.deltas == (0.1, 0.05)
        assert experiment.output_dir == str(tmp_path / "out")

        _, rerun = invoke("compare", "--config", str(record))
        assert rerun == lines

    def test_custom_label(self, invoke, small_config):
        """Test explicit degrees are labelled custom[theta|eta]"""
        code, lines = invoke(
            "compare", "--config", small_config, "--delta", "0.1", "--theta", "0.5", "--eta", "0.5"
        )
        assert code == 0
        assert lines[1].startswith("custom[0.5|0.5],0.5,0.5,")

    def test_custom_without_degrees(self, invoke, small_config):
        """Test usage errors map to exit code 2"""
        code, _ = invoke("compare", "--config", small_config, "--scheme", "custom")
        assert code == 2

    def test_unknown_scheme(self, invoke, small_config, capsys):
        """Test an unknown preset is reported with its position"""
        code, _ = invoke("compare", "--config", small_config, "--scheme", "heun")
        assert code == 2
        assert "schemes.0" in capsys.readouterr().err

    def test_missing_config(self, invoke, tmp_path):
        """Test a missing config file exits with 2"""
        code, _ = invoke("compare", "--config", str(tmp_path / "nope.json"))
        assert code == 2

    def test_threads_must_be_positive(self, invoke, small_config):
        """Test --threads 0 is rejected"""
        code, _ = invoke("compare", "--config", small_config, "--threads", "0")
        assert code == 2

    def test_all_overflowed_cell(self, invoke, tmp_path):
        """Test a cell where every replication overflows gives nan and exit 3"""
        path = tmp_path / "blowup.json"
        path.write_text(json.dumps({
            "model": {"family": "linear", "a": [-1000.0], "b": [0.0]},
            "generator": [[0.0]],
            "initial": {"y0": 1.0, "r0": 1},
            "horizon": 100.0,
            "deltas": [0.1],
            "schemes": ["EM"],
            "replications": 2,
        }))
        code, lines = invoke("compare", "--config", str(path))
        assert code == 3
        assert lines[1] == "EM,0.0,0.0,0.1,2,nan,nan,2"


class TestConvergence:
    """Test suite for the convergence command"""

    def test_fit_rows_and_points_file(self, invoke, small_config, tmp_path):
        """Test one fit row per scheme and the error table written alongside"""
        code, lines = invoke("convergence", "--config", small_config, "--scheme", "EM,symmetric-PCEM")
        assert code == 0
        assert lines[0] == "scheme,theta,eta,slope,intercept,r_squared,strong_order"
        assert [line.split(",")[0] for line in lines[1:]] == ["EM", "symmetric-PCEM"]
        points = (tmp_path / "out" / "convergence_points.csv").read_text().splitlines()
        assert len(points) == 1 + 2 * 3

    def test_short_ladder(self, invoke, small_config):
        """Test two step sizes are not enough for a fit"""
        code, _ = invoke("convergence", "--config", small_config, "--delta", "0.1,0.01")
        assert code == 2

    def test_points_match_compare(self, invoke, small_config, tmp_path):
        """Test a shared step gives the same cell in compare and convergence"""
        invoke("convergence", "--config", small_config)
        points = (tmp_path / "out" / "convergence_points.csv").read_text().splitlines()
        _, lines = invoke("compare", "--config", small_config, "--delta", "0.01")
        assert lines[1] in points


class TestSimulate:
    """Test suite for the simulate command"""

    def test_all_schemes_with_dumps(self, invoke, tmp_path):
        """Test one summary row and one dump file per scheme"""
        code, lines = invoke("simulate", "--scheme", "all", "--dump-paths", "--delta", "0.1")
        assert code == 0
        assert lines[0] == "scheme,theta,eta,delta,sup_sq_error,overflow_index"
        assert len(lines) == 1 + len(SchemePreset)
        for preset in SchemePreset:
            dump = (tmp_path / "out" / f"path_{preset.value}.txt").read_text().splitlines()
            assert dump[0] == "# time regime dW_1 y_1 ref_1"
            assert len(dump) == 1 + 101
        assert (tmp_path / "out" / "simulate.csv").exists()

    def test_overflow_is_reported(self, invoke, tmp_path):
        """Test an overflowing path fills the overflow_index column"""
        path = tmp_path / "blowup.json"
        path.write_text(json.dumps({
            "model": {"family": "linear", "a": [-1000.0], "b": [0.0]},
            "generator": [[0.0]],
            "initial": {"y0": 1.0, "r0": 1},
            "horizon": 100.0,
            "deltas": [0.1],
            "schemes": ["EM"],
        }))
        code, lines = invoke("simulate", "--config", str(path))
        assert code == 0
        assert lines[1].split(",")[-1] != ""


class TestStability:
    """Test suite for the stability command"""

    def test_region_file(self, invoke, tmp_path):
        """Test the EM alpha = 0 column is stable for -2 < lambda dt < 0"""
        code, lines = invoke(
            "stability", "--scheme", "EM", "--lambda-range=-1.5,-0.5,3", "--alpha-range=0,0.5,2"
        )
        assert code == 0
        assert lines[1].split(",")[4:] == ["3", "6", ""]
        rows = (tmp_path / "out" / "region_EM.csv").read_text().splitlines()[1:]
        assert len(rows) == 6
        zero_alpha = [r.split(",") for r in rows if r.split(",")[1] == "0.0"]
        assert [r[-1] for r in zero_alpha] == ["1", "1", "1"]

    def test_two_regime_model(self, invoke, tmp_path):
        """Test per-regime verdicts for a switching test model"""
        code, lines = invoke(
            "stability",
            "--config", str(CONFIG_DIR / "stability_two_regime.json"),
            "--scheme", "EM",
            "--lambda-range=-1,-0.1,2",
            "--alpha-range=0,0.5,2",
        )
        assert code == 0
        assert lines[1].split(",")[-1] == "1"
        states = (tmp_path / "out" / "state_EM.csv").read_text().splitlines()
        assert len(states) == 3

    def test_p_override(self, invoke):
        """Test --p reaches the summary"""
        code, lines = invoke("stability", "--scheme", "EM", "--p", "4", "--lambda-range=-1,-0.1,2",
                             "--alpha-range=0,0.5,2")
        assert code == 0
        assert lines[1].split(",")[3] == "4.0"

    def test_fractional_p(self, invoke, tmp_path):
        """Test --p 1 scans the lattice instead of failing on the kinks of |G|"""
        code, lines = invoke("stability", "--scheme", "EM,symmetric-PCEM", "--p", "1",
                             "--lambda-range=-3,-0.01,6", "--alpha-range=0,0.97,6")
        assert code == 0
        assert [line.split(",")[3] for line in lines[1:]] == ["1.0", "1.0"]
        saved = json.loads((tmp_path / "out" / cli.EXPERIMENT_RECORD).read_text())
        assert saved["stability"]["p"] == 1.0


class TestReproduce:
    """Test suite for the reproduce command"""

    def test_unknown_example(self, invoke):
        """Test names outside the committed set exit with 2"""
        code, _ = invoke("reproduce", "ex9")
        assert code == 2

    def test_paper_scale_needs_consent(self, invoke):
        """Test paper scale without --allow-long hits the resource guard"""
        code, _ = invoke("reproduce", "ex1-case1", "--scale", "paper")
        assert code == 4

    def test_rejects_config(self, invoke, small_config):
        """Test the committed configuration cannot be replaced"""
        code, _ = invoke("reproduce", "ex2", "--config", small_config)
        assert code == 2

    def test_desk_run_with_overrides(self, invoke, tmp_path):
        """Test a shortened desk run writes the error and fit tables"""
        code, lines = invoke(
            "reproduce", "ex2", "--scheme", "EM", "--replications", "3", "--delta", "0.1,0.01,0.001"
        )
        assert code == 0
        assert len(lines) == 1 + 3
        assert (tmp_path / "out" / "ex2_desk_errors.csv").exists()
        assert (tmp_path / "out" / "ex2_desk_fit.csv").exists()
