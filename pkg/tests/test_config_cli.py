import numpy as np
import pytest

from fracpme import cli
from fracpme.config import DEFAULT_INI, load_config, parse_config, with_seed
from fracpme.errors import ConfigError
from fracpme.spectral import read_field

SMALL = """\
[grid]
n = 64
[run]
horizon = 0.05
dt = 0.005
snapshot_times = 0.0, 0.05
replicas = 4
[schedule]
n_values = 64, 128, 256
exact_check = false
[sweep]
betas = 1.0, 0.5, 0.25
zetas = 1.0, 0.5, 0.25
zeta_n = 64
[continuation]
sigmas = 0.2, 0.1, 0.05
"""


@pytest.fixture
def small_ini(tmp_path):
    p = tmp_path / "small.ini"
    p.write_text(SMALL)
    return p


def test_defaults_parse():
    cfg = parse_config("")
    assert cfg.problem.sigma == 0.1 and cfg.grid.n == 128
    assert cfg.nsteps == 250 and cfg.n_values == [256, 512, 1024, 2048]
    assert cfg.initial_kw == {"variance": 0.25}
    assert load_config().source_text == cfg.source_text
    assert parse_config(DEFAULT_INI).source_text == cfg.source_text


@pytest.mark.parametrize(
    "text",
    [
        "[grid]\nn = 100\n",
        "[run]\ndt = 0.003\n",
        "[run]\norder = 3\n",
        "[run]\nwhich = other\n",
        "[run]\ndrift_mode = fast\n",
        "[problem]\ns = 1.5\n",
        "[problem]\nsigma = abc\n",
        "[continuation]\nsigmas = 0.1, 0.2\n",
        "[nonlinearity]\nm = 0.5\n",
        "not an ini file",
    ],
)
def test_invalid_configs(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_missing_file_and_with_seed(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.ini")
    cfg = with_seed(parse_config(SMALL), 7)
    assert cfg.seed == 7 and cfg.n_grid == 64


def test_cli_config_error_exit(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[grid]\nn = 100\n")
    assert cli.main(["solve-pde", "--config", str(bad), "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    assert cli.main(["solve-pde", "--threads", "0", "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG


def test_cli_runtime_error_exit(tmp_path):
    ini = tmp_path / "cfl.ini"
    ini.write_text("[run]\nhorizon = 1.0\ndt = 1.0\nsnapshot_times = 0.0\n")
    assert cli.main(["solve-pde", "--config", str(ini), "--out", str(tmp_path / "o")]) == cli.EXIT_RUNTIME


def test_cli_strict_failure_exit(tmp_path, small_ini):
    # three coarse sweep points cannot reproduce the rates
    args = ["converge-beta-zeta", "--config", str(small_ini), "--out", str(tmp_path / "o")]
    assert cli.main(args) == cli.EXIT_OK
    assert cli.main(args + ["--strict"]) == cli.EXIT_ACCEPTANCE
    rows = (tmp_path / "o" / "gaps.csv").read_text().splitlines()
    assert len(rows) >= 4


def _strip_timestamp(text):
    return [ln for ln in text.splitlines() if not ln.startswith("timestamp")]


def test_cli_outputs_reproducible_and_confined(tmp_path, small_ini, monkeypatch):
    monkeypatch.chdir(tmp_path)
    before = set(p.name for p in tmp_path.iterdir())
    for name in ("a", "b"):
        assert cli.main(["solve-pde", "--config", str(small_ini), "--out", name, "--seed", "3"]) == 0
    assert set(p.name for p in tmp_path.iterdir()) == before | {"a", "b"}
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files == sorted(p.name for p in (tmp_path / "b").iterdir())
    for f in files:
        ta, tb = (tmp_path / "a" / f).read_bytes(), (tmp_path / "b" / f).read_bytes()
        if f == "manifest.txt":
            assert _strip_timestamp(ta.decode()) == _strip_timestamp(tb.decode())
        else:
            assert ta == tb, f
    man = (tmp_path / "a" / "manifest.txt").read_text()
    assert "config_sha256" in man and "seed = 3" in man


def test_solve_pde_constant_density(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text(SMALL + "[initial]\nname = constant\n")
    assert cli.main(["solve-pde", "--config", str(ini), "--out", str(tmp_path / "o")]) == 0
    lines = (tmp_path / "o" / "diagnostics.csv").read_text().splitlines()
    header = lines[0].split(",")
    rows = np.array([[float(x) for x in ln.split(",")] for ln in lines[1:]])
    mass = rows[:, header.index("mass")]
    assert np.all(mass == mass[0])
    assert np.all(np.abs(rows[:, header.index("dissipation_visc")]) == 0)
    assert np.all(np.abs(rows[:, header.index("dissipation_frac")]) < 1e-20)
    snap = read_field(tmp_path / "o" / "rho_step000000.bin")
    assert snap.grid.n == 64 and np.all(snap.values == 1.0)


def test_verify_operators_writes_table(tmp_path):
    ini = tmp_path / "v.ini"
    ini.write_text("[grid]\nn = 64\n")
    assert cli.main(["verify-operators", "--config", str(ini), "--out", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "verify_operators.csv").exists()
