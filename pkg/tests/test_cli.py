# 🧭 ls-discretize - Command Line Tests
# Exit codes, run-directory layout and reproducibility

import csv
import json

import pytest

from ls_discretize.cli import (EXIT_FAIL, EXIT_INCONCLUSIVE, EXIT_PASS, EXIT_USAGE, exit_code_for, list_catalog,
                               main, write_tallies)
from ls_discretize.debug_utils import ConfigError, LeakageError, PreconditionError
from ls_discretize.verify import FAIL, INCONCLUSIVE, PASS, CheckReport


def report(verdict):
    return CheckReport("discrete-exactness", "claim", "cycle", verdict, "tolerance", 0.0, 1e-9, 0.0, 0, 1)


@pytest.fixture
def small_manifest(tmp_path):
    """Two cheap exact checks"""
    path = tmp_path / "small_suite.json"
    path.write_text(json.dumps({
        "name": "small",
        "entries": [
            {"check": "discrete-exactness", "model": "zd-lattice", "params": {"radius": 4}},
            {"check": "discrete-exactness", "model": "cycle"},
        ],
    }), encoding="utf-8")
    return path


def write_config(tmp_path, text, name="config.toml"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path

# ============================================================================
# EXIT CODES
# ============================================================================


@pytest.mark.unit
class TestExitCodes:
    """0 pass, 1 fail, 2 inconclusive, 3 usage or precondition"""

    def test_verdict_mapping(self):
        """The combined verdict picks the code"""
        assert exit_code_for([report(PASS)], []) == EXIT_PASS
        assert exit_code_for([report(PASS), report(INCONCLUSIVE)], []) == EXIT_INCONCLUSIVE
        assert exit_code_for([report(INCONCLUSIVE), report(FAIL)], []) == EXIT_FAIL
        assert exit_code_for([], []) == EXIT_PASS

    def test_errors(self):
        """Precondition errors are usage errors; numerical ones count as failures"""
        assert exit_code_for([report(PASS)], [("c", "m", PreconditionError("no"))]) == EXIT_USAGE
        assert exit_code_for([report(PASS)], [("c", "m", LeakageError("leak"))]) == EXIT_FAIL

    def test_parser_errors(self):
        """Bad arguments are usage errors; --version is not"""
        assert main([]) == EXIT_USAGE
        assert main(["list", "everything"]) == EXIT_USAGE
        assert main(["--version"]) == EXIT_PASS


@pytest.mark.unit
class TestListing:
    """list prints catalog entries"""

    def test_list_checks(self, capsys):
        """Every registered check is printed with its property"""
        assert main(["list", "checks"]) == EXIT_PASS
        out = capsys.readouterr().out
        assert "discrete-exactness" in out
        assert "calibration" in out

    def test_list_catalog(self):
        """Models, suites and operations are listed by name"""
        assert any(line.startswith("free-group-tree:") for line in list_catalog("models"))
        assert any(line.startswith("acceptance:") for line in list_catalog("suites"))
        assert any(line.startswith("hitting-measure:") for line in list_catalog("operations"))
        with pytest.raises(ConfigError):
            list_catalog("colours")

    def test_list_suites(self, capsys):
        """The named suites are all listed"""
        assert main(["list", "suites"]) == EXIT_PASS
        names = {line.split(":")[0] for line in capsys.readouterr().out.splitlines()}
        assert {"lsm-properties", "green-ratio", "markov", "tail-agreement", "discrete-section6"} <= names

    def test_list_models(self, capsys):
        """The torus covers and the discrete families are listed"""
        assert main(["list", "models"]) == EXIT_PASS
        names = {line.split(":")[0] for line in capsys.readouterr().out.splitlines()}
        assert {"torus-cover-d1", "torus-cover-d2", "torus-cover-d3", "zd-lattice", "free-group-tree",
                "sublattice-orbit"} <= names


@pytest.mark.unit
class TestTallies:
    """Plot-ready CSV tallies"""

    def test_estimate_columns_last(self, tmp_path):
        """Label columns lead and floats keep full precision"""
        path = tmp_path / "t.csv"
        write_tallies(path, [{"estimate": 0.1, "site": (0, 1), "se": 0.0, "n": 5},
                             {"site": (1, 1), "estimate": 1 / 3, "n": 5, "se": 0.01}])
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["site", "estimate", "se", "n"]
        assert rows[1][0] == "0 1"
        assert float(rows[2][1]) == 1 / 3

# ============================================================================
# RUNS
# ============================================================================


@pytest.mark.e2e
class TestRuns:
    """run writes a reproducible run directory"""

    def test_suite_manifest_run(self, tmp_path, small_manifest):
        """A JSON manifest runs every entry and writes the layout"""
        out = tmp_path / "run"
        code = main(["run", "--suite", str(small_manifest), "--seed", "3", "--out", str(out)])
        assert code == EXIT_PASS
        manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["suite"] == "small"
        assert manifest["seed"] == 3
        assert [r["verdict"] for r in manifest["results"]] == [PASS, PASS]
        lines = (out / "reports.jsonl").read_text(encoding="utf-8").splitlines()
        assert [json.loads(line)["model"] for line in lines] == ["zd-lattice", "cycle"]
        assert (out / "tallies" / "00-discrete-exactness-zd-lattice-identities.csv").exists()
        for name in ("timestamps.json", "timings.json", "errors.json", "metrics.prom"):
            assert (out / "meta" / name).exists()

    def test_runs_reproduce_byte_for_byte(self, tmp_path, small_manifest):
        """Same seed, same files outside meta/"""
        for name in ("a", "b"):
            assert main(["run", "--suite", str(small_manifest), "--seed", "9", "--out", str(tmp_path / name)]) == 0
        for rel in ("manifest.json", "reports.jsonl", "tallies/01-discrete-exactness-cycle-identities.csv"):
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_operation_from_config(self, tmp_path):
        """A config with an operation writes that operation's tallies"""
        config = write_config(tmp_path, 'operation = "hitting-measure"\nseed = 1\n\n'
                                        '[model]\nfamily = "cycle"\nn = 5\n\n[params]\nsample = false\n')
        out = tmp_path / "op"
        assert main(["run", "--config", str(config), "--out", str(out)]) == EXIT_PASS
        manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["operation"] == "hitting-measure"
        assert (out / "tallies" / "00-hitting-measure-cycle-exact.csv").exists()

    def test_override_changes_config(self, tmp_path):
        """Dotted overrides reach the validated config"""
        config = write_config(tmp_path, 'operation = "hitting-measure"\n\n[model]\nfamily = "cycle"\n')
        out = tmp_path / "ov"
        assert main(["run", "--config", str(config), "--out", str(out), "--override", "model.n=9",
                     "--override", "params.sample=false"]) == EXIT_PASS
        manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["config"]["model"]["n"] == 9

    def test_precondition_failure_is_recorded(self, tmp_path):
        """A continuous operation on a discrete model exits 3 and lists the error"""
        config = write_config(tmp_path, 'operation = "ls-measure"\n\n[model]\nfamily = "cycle"\n')
        out = tmp_path / "pre"
        assert main(["run", "--config", str(config), "--out", str(out)]) == EXIT_USAGE
        manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["errors"][0]["type"] == "PreconditionError"

    @pytest.mark.parametrize("text", [
        '[model]\nfamily = "cycle"\n',
        'suite = "acceptance"\n\n[model]\nfamily = "moebius"\n',
        'suite = "acceptance"\nn_paths = 0\n\n[model]\nfamily = "cycle"\n',
        'suite = "acceptance"\n[model\n',
        'operation = "no-such-operation"\n\n[model]\nfamily = "cycle"\n',
    ])
    def test_bad_configs_are_usage_errors(self, tmp_path, text):
        """Invalid or malformed configs exit 3 before running anything"""
        config = write_config(tmp_path, text)
        assert main(["run", "--config", str(config), "--out", str(tmp_path / "bad")]) == EXIT_USAGE

    def test_usage_errors_without_config(self, tmp_path):
        """Missing files, stray overrides and bad worker counts exit 3"""
        out = str(tmp_path / "x")
        assert main(["run", "--config", str(tmp_path / "missing.toml"), "--out", out]) == EXIT_USAGE
        assert main(["run", "--override", "seed=1", "--out", out]) == EXIT_USAGE
        assert main(["run", "--suite", "no-such-suite", "--out", out]) == EXIT_USAGE
        assert main(["run", "--model", "cycle", "--suite", "markov", "--workers", "0", "--out", out]) == EXIT_USAGE

    def test_green_ratio_needs_a_transient_model(self, tmp_path):
        """green-ratio on the plane cover stops at the transience gate"""
        out = tmp_path / "green"
        code = main(["run", "--suite", "green-ratio", "--model", "torus-cover-d2", "--out", str(out)])
        assert code == EXIT_USAGE
        manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
        (error,) = manifest["errors"]
        assert error["type"] == "PreconditionError"
        assert "transient" in error["message"]
        assert manifest["results"] == []

    @pytest.mark.statistical
    @pytest.mark.slow
    def test_lsm_properties_on_the_line_cover(self, tmp_path):
        """The LS-measure suite passes on the default one-dimensional model"""
        config = write_config(tmp_path, 'suite = "lsm-properties"\nn_paths = 2000\nseed = 1\n\n'
                                        '[model]\nfamily = "torus-cover-d1"\n')
        out = tmp_path / "lsm"
        assert main(["run", "--config", str(config), "--out", str(out)]) == EXIT_PASS
        manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["suite"] == "lsm-properties"
        assert [r["model"] for r in manifest["results"]] == ["torus-cover-d1"]
