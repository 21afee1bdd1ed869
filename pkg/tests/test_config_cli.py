import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from qfluct.cli import EXIT_CAP, EXIT_CONFIG, EXIT_FAIL, EXIT_PASS, main
from qfluct.config import DEFAULT_TOLERANCES, ExperimentConfig, load_config
from qfluct.errors import ConfigError
from qfluct.states import FCSSpec, FCSState, GibbsState, ProductState

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def write(tmp_path, text, name="run.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def run(tmp_path, command, text, *extra, out="out"):
    cfg = write(tmp_path, text)
    code = main([command, "--config", str(cfg), "--out", str(tmp_path / out), *extra])
    report = tmp_path / out / f"{command}.json"
    return code, (json.loads(report.read_text()) if report.exists() else None)


PRODUCT_CLT = """
[state]
kind = "product"
density = { probs = [0.8, 0.2] }
[generators]
list = ["z"]
[grid]
T = [0.5, 1.0, 1.5]
N = [10, 100, 1000]
"""


# configuration ------------------------------------------------------------------

def test_config_defaults():
    cfg = ExperimentConfig.from_dict({})
    assert cfg.state["kind"] == "product" and cfg.generators == ("z",)
    assert cfg.tolerances == DEFAULT_TOLERANCES
    assert isinstance(cfg.build_state(), ProductState)


@pytest.mark.parametrize("doc", [
    {"state": {"kind": "thermal"}},
    {"state": {"kind": "gibbs", "preset": "tfim"}},
    {"state": {"kind": "gibbs", "preset": "tfim", "beta": -1}},
    {"state": {"kind": "gibbs", "preset": "potts", "beta": 1}},
    {"grid": {"N": [3, 2]}},
    {"grid": {"N": [1.5]}},
    {"grid": {"T": ["a"]}},
    {"tolerances": {"tail": 0}},
    {"tolerances": {"clt_slack": -1}},
    {"run": {"seed": "x"}},
    {"run": {"workers": 0}},
    {"generators": {"list": []}},
], ids=lambda d: json.dumps(d, sort_keys=True)[:40])
def test_config_validation(doc):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(doc)


def test_config_hash_stable_and_sensitive():
    a = ExperimentConfig.from_dict({"run": {"seed": 1}}, base_dir="/x")
    b = ExperimentConfig.from_dict({"run": {"seed": 1}}, base_dir="/y")
    c = ExperimentConfig.from_dict({"run": {"seed": 2}})
    assert a.hash == b.hash != c.hash


def test_config_replace():
    cfg = ExperimentConfig.from_dict({}).replace(seed=5, workers=3, out="elsewhere")
    assert (cfg.seed, cfg.workers, cfg.out) == (5, 3, "elsewhere")
    assert cfg.raw["run"]["seed"] == 5 and "workers" not in cfg.raw["run"]
    assert cfg.hash == ExperimentConfig.from_dict({"run": {"seed": 5}}).hash


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, "[state\nkind="))


def test_config_builders(tmp_path):
    cfg = ExperimentConfig.from_dict({"state": {"kind": "gibbs", "preset": "tfim", "beta": 0.5,
                                                "params": {"h": 0.5}, "buffer": 1}})
    state = cfg.build_state()
    assert isinstance(state, GibbsState) and state.buffer == 1
    custom = ExperimentConfig.from_dict({"state": {"kind": "gibbs", "beta": 1, "terms": [[-1, "z z"], [-0.5, "x"]]}})
    assert custom.interaction() == state.psi
    bad = ExperimentConfig.from_dict({"state": {"kind": "gibbs", "preset": "tfim", "beta": 1, "params": {"K": 1}}})
    with pytest.raises(ConfigError):
        bad.interaction()
    gens = cfg.build_generators(["x", {"word": "z z", "site": 2, "coeff": 0.5}])
    assert gens[1].support.lo == 2 and np.allclose(gens[1].norm(), 0.5)
    with pytest.raises(ConfigError):
        cfg.build_generators(["raising"])


def test_config_fcs_from_json(tmp_path):
    spec = FCSSpec.random(2, 2, seed=4)
    (tmp_path / "spec.json").write_text(spec.to_json())
    cfg = load_config(write(tmp_path, '[state]\nkind = "fcs"\npath = "spec.json"\n'))
    state = cfg.build_state()
    assert isinstance(state, FCSState) and np.allclose(state.spec.kraus, spec.kraus)
    missing = ExperimentConfig.from_dict({"state": {"kind": "fcs", "path": "nope.json"}}, str(tmp_path))
    with pytest.raises(ConfigError):
        missing.build_state()


# command line ----------------------------------------------------------------------

def test_clt_product_passes(tmp_path):
    code, rep = run(tmp_path, "clt", PRODUCT_CLT)
    assert code == EXIT_PASS and rep["status"] == "PASS"
    assert rep["results"]["rate"] == pytest.approx(-0.5, abs=0.05)
    for key in ("schema", "config", "config_hash", "tolerances", "phase_convention",
                "tail_certificates", "assertions"):
        assert key in rep
    header = (tmp_path / "out" / "clt.csv").read_text().splitlines()[0]
    assert header == "T,N,re,im,abs_err"
    meta = json.loads((tmp_path / "out" / "clt.meta.json").read_text())
    assert meta["config_hash"] == rep["config_hash"] and "runtime_s" in meta


def test_clt_kernel_direction(tmp_path):
    text = """
[generators]
list = ["z", { word = "z", site = 1, coeff = -1.0 }]
[grid]
T = [0.5, 1.0, 2.0]
N = [1, 2, 3, 4]
"""
    code, rep = run(tmp_path, "clt", text)
    assert code == EXIT_PASS
    assert np.allclose(np.array(rep["results"]["prediction"])[:, 0], 1)
    # only the two boundary sites survive: cos(T / sqrt(2N + 1)) ** 2
    T, N = np.array([0.5, 1.0, 2.0]), 4
    vals = np.array(rep["results"]["values"])[-1]
    assert np.allclose(vals[:, 0], np.cos(T / np.sqrt(2 * N + 1)) ** 2, atol=1e-12)


def test_clt_single_N_skipped(tmp_path):
    code, rep = run(tmp_path, "clt", PRODUCT_CLT.replace("N = [10, 100, 1000]", "N = [10]"))
    assert code == EXIT_PASS
    assert rep["assertions"][0]["status"] == "SKIPPED"


def test_clt_failure_exit_code(tmp_path):
    # at T = 5 the tracial values cos(T / sqrt(2N + 1)) ** (2N + 1) move away from
    # the Gaussian limit between N = 0 and N = 1 (0.28 -> 0.91)
    text = """
[generators]
list = ["z"]
[grid]
T = [5.0]
N = [0, 1]
"""
    code, rep = run(tmp_path, "clt", text)
    sup = rep["results"]["sup_errors"]
    assert sup == pytest.approx([0.2837, 0.9062], abs=1e-4)
    assert code == EXIT_FAIL and rep["status"] == "FAIL"


def test_reports_deterministic(tmp_path):
    text = (CONFIGS / "weyl_product.toml").read_text()
    a, _ = run(tmp_path, "weyl", text, "--seed", "3", out="a")
    b, _ = run(tmp_path, "weyl", text, "--seed", "3", "--workers", "2", out="b")
    assert a == b == EXIT_PASS
    assert (tmp_path / "a" / "weyl.json").read_bytes() == (tmp_path / "b" / "weyl.json").read_bytes()
    assert (tmp_path / "a" / "weyl.csv").read_bytes() == (tmp_path / "b" / "weyl.csv").read_bytes()
    run(tmp_path, "weyl", text, "--seed", "4", out="c")
    assert (tmp_path / "a" / "weyl.json").read_bytes() != (tmp_path / "c" / "weyl.json").read_bytes()


def test_config_error_exit_code(tmp_path):
    code, rep = run(tmp_path, "clt", '[state]\nkind = "gibbs"\npreset = "potts"\nbeta = 1\n')
    assert code == EXIT_CONFIG and rep is None
    assert main(["clt", "--config", str(tmp_path / "absent.toml")]) == EXIT_CONFIG


def test_resource_cap_exit_code(tmp_path):
    text = (CONFIGS / "kms_gibbs.toml").read_text()
    code, rep = run(tmp_path, "kms", text, "--max-window-dim", "64")
    assert code == EXIT_CAP and rep is None


def test_mixing_infinite_temperature(tmp_path):
    text = """
[state]
kind = "gibbs"
preset = "tfim"
beta = 0.0
[grid]
separations = [1, 2, 3]
"""
    code, rep = run(tmp_path, "mixing", text)
    assert code == EXIT_PASS
    assert rep["results"]["M"] == "inf"
    assert max(rep["results"]["correlations"]) == 0


def test_fcs_classical_rate(tmp_path):
    code, rep = run(tmp_path, "fcs", (CONFIGS / "fcs_classical.toml").read_text())
    assert code == EXIT_PASS
    assert rep["results"]["M"] == pytest.approx(np.log(2), abs=1e-12)
    assert rep["results"]["rank"] <= 4


def test_fcs_periodic_not_mixing(tmp_path):
    code, rep = run(tmp_path, "fcs", '[state]\nkind = "fcs"\npreset = "periodic"\n')
    assert code == EXIT_PASS
    assert rep["results"]["is_mixing"] is False
    assert any(a["status"] == "SKIPPED" for a in rep["assertions"])


def test_kms_infinite_temperature(tmp_path):
    text = """
[state]
kind = "gibbs"
preset = "tfim"
beta = 0.0
buffer = 1
[generators]
list = ["z", "x"]
[grid]
window_sites = 6
pairs = 5
N = [1, 2]
"""
    code, rep = run(tmp_path, "kms", text)
    assert code == EXIT_PASS
    assert max(rep["results"]["local_residuals"]) <= 1e-10
    assert rep["results"]["fluctuation"]["max_residual"] <= 1e-10


def test_weyl_continuity_needs_invariant_state(tmp_path):
    text = (CONFIGS / "weyl_product.toml").read_text() + "\n[grid]\nu = [0.2, 0.1]\n"
    code, _ = run(tmp_path, "weyl", text)
    assert code == EXIT_CONFIG


def test_locality_run(tmp_path):
    code, rep = run(tmp_path, "locality", (CONFIGS / "locality_tfim.toml").read_text())
    assert code == EXIT_PASS and rep["results"]["rate"] > 0
    rows = (tmp_path / "out" / "locality.csv").read_text().splitlines()
    assert rows[0] == "buffer,deviation" and len(rows) == 6


def test_module_entry_point_help():
    out = subprocess.run([sys.executable, "-m", "qfluct", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("clt", "mixing", "fcs", "kms", "weyl", "locality"):
        assert cmd in out.stdout
