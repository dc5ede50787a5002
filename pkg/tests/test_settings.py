# 🧭 ls-discretize - Settings Tests
# Numerics from YAML and environment, experiment configs and seeds

import sys

import pytest

from ls_discretize.debug_utils import ConfigError
from ls_discretize.settings import (LSDataSpec, ModelSpec, Settings, apply_overrides, load_experiment_config,
                                    load_suite_manifest, phi_terms, resolve_seed, tomllib)

from . import TEST_CONFIG


@pytest.mark.unit
class TestNumerics:
    """Settings read the numerics block and LS_NUMERICS_* variables"""

    def test_class_defaults(self, tmp_path, monkeypatch):
        """Without a file the class defaults apply"""
        monkeypatch.delenv("LS_NUMERICS_Z_SIGMA", raising=False)
        s = Settings(tmp_path / "absent.yaml")
        assert s.LEAK_TOLERANCE == 1e-6
        assert s.HARNACK_MARGIN == 1.05
        assert s.default_dt(3) == s.DT_D3
        assert s.default_dt(1) == s.DT_LOW_DIM

    def test_yaml_numerics(self, tmp_path):
        """Keys are case-insensitive and keep the default's type"""
        path = tmp_path / "n.yaml"
        path.write_text("numerics:\n  z_sigma: 4\n  block_size: 256\n", encoding="utf-8")
        s = Settings(path)
        assert s.Z_SIGMA == 4.0 and isinstance(s.Z_SIGMA, float)
        assert s.BLOCK_SIZE == 256
        assert s.source == str(path)

    def test_unknown_key(self, tmp_path):
        """Unknown numerics are rejected with their field"""
        path = tmp_path / "n.yaml"
        path.write_text("numerics:\n  warp_factor: 9\n", encoding="utf-8")
        with pytest.raises(ConfigError, match="warp_factor"):
            Settings(path)

    def test_environment_wins(self, tmp_path, monkeypatch):
        """LS_NUMERICS_<KEY> overrides the file"""
        path = tmp_path / "n.yaml"
        path.write_text("numerics:\n  alpha: 0.05\n", encoding="utf-8")
        monkeypatch.setenv("LS_NUMERICS_ALPHA", "0.001")
        assert Settings(path).ALPHA == 0.001

    def test_shipped_config_matches_defaults(self):
        """The repository config restates the class defaults"""
        path = TEST_CONFIG["experiments_dir"].parent / "ls_discretize_config.yaml"
        shipped = Settings(path).as_dict()
        for key, value in shipped.items():
            if key not in ("WORKERS", "SEED"):
                assert value == getattr(Settings, key)


@pytest.mark.unit
class TestModelSpecs:
    """Pydantic validation of model and LS-data specs"""

    def test_torus_family_fixes_dimension(self):
        """torus-cover-dN presets set d"""
        assert ModelSpec(family="torus-cover-d2").d == 2
        with pytest.raises(ValueError):
            ModelSpec(family="torus-cover-d2", d=3)
        with pytest.raises(ValueError):
            ModelSpec(family="torus-cover")

    def test_invalid_values(self):
        """Unknown families, dimensions and phi shapes are rejected"""
        with pytest.raises(ValueError):
            ModelSpec(family="hyperbolic-plane")
        with pytest.raises(ValueError):
            ModelSpec(family="zd-lattice", d=4)
        with pytest.raises(ValueError):
            ModelSpec(family="torus-cover-d2", phi=[[1, 0.3]])

    def test_phi_terms(self):
        """Rows split into integer wave vectors and amplitudes"""
        spec = ModelSpec(family="torus-cover-d2", phi=[[1, 0, 0.3], [0, 2, -0.1]])
        assert phi_terms(spec) == (((1, 0), 0.3), ((0, 2), -0.1))
        assert ModelSpec(family="torus-cover-d1").is_continuous
        assert not ModelSpec(family="cycle").is_continuous

    def test_ls_data_spec(self):
        """Radii and spacing must be positive"""
        assert LSDataSpec().v_radius == 0.3
        with pytest.raises(ValueError):
            LSDataSpec(v_radius=0.0)
        with pytest.raises(ValueError):
            LSDataSpec(spacing=0)


@pytest.mark.unit
class TestExperimentConfigs:
    """TOML, JSON and YAML configs with dotted overrides"""

    def test_toml_config(self, tmp_path):
        """A TOML config loads into an ExperimentConfig"""
        path = tmp_path / "c.toml"
        path.write_text('suite = "markov"\nseed = 4\n\n[model]\nfamily = "torus-cover-d1"\n', encoding="utf-8")
        config = load_experiment_config(path)
        assert config.suite == "markov"
        assert config.model.d == 1
        assert config.ls_data is None

    def test_toml_reader_for_the_running_python(self):
        """tomllib from 3.11 on, the tomli backport before"""
        expected = "tomllib" if sys.version_info >= (3, 11) else "tomli"
        assert tomllib.__name__ == expected

    def test_yaml_and_json_configs(self, tmp_path):
        """The same config in YAML and JSON validates the same way"""
        yaml_path = tmp_path / "c.yaml"
        yaml_path.write_text("operation: exit-measure\nmodel:\n  family: torus-cover-d2\nls_data: auto-balanced\n",
                             encoding="utf-8")
        json_path = tmp_path / "c.json"
        json_path.write_text('{"operation": "exit-measure", "model": {"family": "torus-cover-d2"}, '
                             '"ls_data": "auto-balanced"}', encoding="utf-8")
        assert load_experiment_config(yaml_path) == load_experiment_config(json_path)

    def test_overrides(self, tmp_path):
        """Dotted keys create nested tables and parse JSON values"""
        path = tmp_path / "c.toml"
        path.write_text('suite = "markov"\n\n[model]\nfamily = "torus-cover-d1"\n', encoding="utf-8")
        config = load_experiment_config(path, ["n_paths=500", "ls_data.f_radius=0.05", "params.label=abc"])
        assert config.n_paths == 500
        assert config.ls_data.f_radius == 0.05
        assert config.params["label"] == "abc"
        with pytest.raises(ConfigError):
            apply_overrides({}, ["no-equals-sign"])

    def test_validation_error_names_field(self, tmp_path):
        """Invalid values are reported with their dotted path"""
        path = tmp_path / "c.toml"
        path.write_text('suite = "markov"\nworkers = 0\n\n[model]\nfamily = "cycle"\n', encoding="utf-8")
        with pytest.raises(ConfigError, match="workers"):
            load_experiment_config(path)

    def test_malformed_files(self, tmp_path):
        """Parse errors and unknown formats are ConfigErrors"""
        bad = tmp_path / "c.json"
        bad.write_text("{", encoding="utf-8")
        with pytest.raises(ConfigError) as info:
            load_experiment_config(bad)
        assert info.value.context["line"] == 1
        ini = tmp_path / "c.ini"
        ini.write_text("[x]\n", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_experiment_config(ini)
        with pytest.raises(ConfigError):
            load_experiment_config(tmp_path / "missing.toml")

    def test_shipped_experiments_load(self):
        """Every experiment file in the repository validates"""
        directory = TEST_CONFIG["experiments_dir"]
        for path in sorted(directory.glob("*.toml")):
            load_experiment_config(path)
        manifest = load_suite_manifest(directory / "discrete_suite.json")
        assert manifest.entries[0].check == "discrete-exactness"


@pytest.mark.unit
class TestSeeds:
    """Seed precedence: flag, config, environment, zero"""

    def test_precedence(self, monkeypatch):
        """The first given source wins"""
        monkeypatch.setenv("LS_DISCRETIZE_SEED", "77")
        assert resolve_seed(5, 6) == 5
        assert resolve_seed(None, 6) == 6
        assert resolve_seed(None, None) == 77
        monkeypatch.delenv("LS_DISCRETIZE_SEED")
        assert resolve_seed(None, None) == 0

    def test_bad_environment_seed(self, monkeypatch):
        """A non-integer environment seed is a ConfigError"""
        monkeypatch.setenv("LS_DISCRETIZE_SEED", "seven")
        with pytest.raises(ConfigError):
            resolve_seed(None, None)
