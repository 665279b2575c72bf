import math

import numpy as np
import pytest

from causal_sdro.cli import ConfigError, config_hash, load_config, portfolio_metrics, run
from causal_sdro.io import data_rows, fmt
from causal_sdro.policies import SoftRegressionForest, save_policy


def write(tmp_path, text, name="cfg.ini"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_config_errors(tmp_path, capsys):
    with pytest.raises(ConfigError):
        load_config(text="[nope]\na = 1\n")
    with pytest.raises(ConfigError):
        load_config(text="[data]\nbogus = 1\n")
    with pytest.raises(ConfigError):
        load_config(text="[data]\nN = many\n")
    assert run(["generate", "--config", str(tmp_path / "missing.ini"), "--out", str(tmp_path / "o")]) == 1
    out = tmp_path / "bad"
    assert run(["generate", "--config", write(tmp_path, "[data]\nd_x = 0\n"), "--out", str(out)]) == 1
    assert not out.exists()
    assert "error" in capsys.readouterr().err


def test_config_hash_depends_on_content_and_command():
    a, b = load_config(text="[data]\nN = 10\n"), load_config(text="[data]\nN = 11\n")
    assert config_hash(a, "generate") == config_hash(load_config(text="[data]\nN = 10\n"), "generate")
    assert config_hash(a, "generate") != config_hash(b, "generate")
    assert config_hash(a, "generate") != config_hash(a, "train")


def test_generate_shape_and_determinism(tmp_path):
    cfg = write(tmp_path, "[data]\nN = 200\nd_x = 5\n")
    assert run(["generate", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert run(["generate", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    rows = data_rows(tmp_path / "a" / "data.csv")
    assert rows[0] == "x0,x1,x2,x3,x4,y0"
    assert len(rows) == 201 and all(len(r.split(",")) == 6 for r in rows)
    assert rows == data_rows(tmp_path / "b" / "data.csv")
    assert (tmp_path / "a" / "data.provenance.json").exists()


TRAIN = """
[data]
N = 40
d_x = 1
[policy]
n_trees = 2
depth = 2
[sinkhorn]
lam = 10
eps = 0.1
n2 = 4
n3 = 4
[train]
K = 200
cadence = 20
"""


def test_train_is_deterministic_and_descends(tmp_path):
    cfg = write(tmp_path, TRAIN)
    for d in ("a", "b"):
        assert run(["train", "--config", cfg, "--out", str(tmp_path / d)]) == 0
    ta, tb = data_rows(tmp_path / "a" / "trace.csv"), data_rows(tmp_path / "b" / "trace.csv")
    assert ta == tb and len(ta) == 11
    assert (tmp_path / "a" / "policy.txt").read_text() == (tmp_path / "b" / "policy.txt").read_text()
    obj = [float(r.split(",")[1]) for r in ta[1:]]
    assert obj[-1] < obj[0]
    assert all(r.split(",")[3] == "" for r in ta[1:])


def test_erm_model_trains(tmp_path):
    text = TRAIN.replace("[train]\n", "[train]\ngd_steps = 20\n") + "[experiment]\nmodel = erm\n"
    cfg = write(tmp_path, text)
    assert run(["train", "--config", cfg, "--out", str(tmp_path / "e")]) == 0
    assert len(data_rows(tmp_path / "e" / "trace.csv")) == 2


BENCH = """
[data]
test_size = 300
[policy]
n_trees = 2
depth = 2
[benchmark]
N = 30
d_x = 2
lambda = 10
eps = 0.2
seeds = 0,1
K = 100
erm_steps = 50
"""


def test_benchmark_single_cell(tmp_path):
    cfg = write(tmp_path, BENCH)
    assert run(["benchmark", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    rows = [r.split(",") for r in data_rows(tmp_path / "a" / "benchmark.csv")[1:]]
    assert len(rows) == 4  # ERM plus one model per seed
    for r in rows:
        assert r[-1] == "ok" and float(r[10]) == 0.0
        if r[5] == "erm":
            assert float(r[9]) == 0.0 and r[3] == ""
        else:
            assert (r[3], r[4]) == ("10.0", "0.2")
    text = (tmp_path / "a" / "benchmark.csv").read_text()
    assert "# summary model=causal-sdro n=2" in text
    assert run(["benchmark", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    assert data_rows(tmp_path / "a" / "benchmark.csv") == data_rows(tmp_path / "b" / "benchmark.csv")


def one_d_setup(tmp_path, policy):
    assert run(["generate", "--config", write(tmp_path, "[data]\nN = 30\nd_x = 1\n", "g.ini"),
                "--out", str(tmp_path / "d")]) == 0
    save_policy(policy, tmp_path / "pol.txt")
    return tmp_path / "d" / "data.csv", tmp_path / "pol.txt"


def test_worstcase_grid_output(tmp_path):
    pol = SoftRegressionForest(1, 1, [2])
    pol.theta[:] = np.random.default_rng(0).normal(size=pol.dim)
    data, pfile = one_d_setup(tmp_path, pol)
    cfg = write(tmp_path, f"[worstcase]\npolicy_file = {pfile}\ndata_file = {data}\nlam = 2\nrho = 1.0\n"
                          "[sinkhorn]\neps = 0.2\nn2 = 8\nn3 = 8\n")
    assert run(["worstcase", "--config", cfg, "--out", str(tmp_path / "w")]) == 0
    rows = data_rows(tmp_path / "w" / "density.csv")
    assert len(rows) == 40_001
    footer = [ln for ln in (tmp_path / "w" / "density.csv").read_text().splitlines() if ln.startswith("# integral")]
    assert abs(float(footer[0].split("=")[1]) - 1.0) <= 1e-3
    assert len(data_rows(tmp_path / "w" / "dual_curve.csv")) == 21


def test_missing_policy_or_dataset(tmp_path):
    cfg = write(tmp_path, f"[worstcase]\npolicy_file = {tmp_path / 'none.txt'}\n")
    assert run(["worstcase", "--config", cfg, "--out", str(tmp_path / "w")]) == 1
    pfile = tmp_path / "p.txt"
    save_policy(SoftRegressionForest(1, 1, [1]), pfile)
    cfg = write(tmp_path, f"[interpret]\npolicy_file = {pfile}\ndata_file = {tmp_path / 'none.csv'}\n")
    assert run(["interpret", "--config", cfg, "--out", str(tmp_path / "i")]) == 1


def test_interpret_flags_constant_forest(tmp_path):
    pol = SoftRegressionForest(1, 1, [2])
    pol.views(pol.blocks[0])[2][:] = 1.0
    data, pfile = one_d_setup(tmp_path, pol)
    cfg = write(tmp_path, f"[interpret]\npolicy_file = {pfile}\ndata_file = {data}\nM = 8\n")
    assert run(["interpret", "--config", cfg, "--out", str(tmp_path / "i")]) == 0
    for name in ("importance_gradient.csv", "importance_permutation.csv"):
        text = (tmp_path / "i" / name).read_text()
        assert "# degenerate=true" in text and "nan" in text
    for name in ("eig.csv", "routes.csv", "hessian.csv"):
        assert (tmp_path / "i" / name).exists()


def test_portfolio_metrics():
    r = -np.arange(1.0, 21.0)
    m = portfolio_metrics(r, np.zeros(20))
    assert m["cvar5"] == 20.0  # one tail day out of twenty
    flat = portfolio_metrics(np.full(10, 0.01), np.zeros(10))
    assert flat["std"] == 0.0 and math.isnan(flat["sharpe"]) and flat["sharpe_flag"] == "zero-std"
    m = portfolio_metrics(np.array([0.01, 0.03]), np.array([1.0, 3.0]))
    assert m["mean"] == pytest.approx(0.02) and m["loss"] == 2.0
    assert m["sharpe"] == pytest.approx(math.sqrt(252) * 0.02 / np.std([0.01, 0.03], ddof=1))


PORT = """
[experiment]
application = portfolio
[data]
N = 200
d_x = 2
n_assets = 4
[portfolio]
N = 200
n_assets = 4
d_x = 2
window = 100
hold = 20
step = 40
sample_assets = 3
models = ew,mv,pt
"""


def test_portfolio_equal_weights_and_run(tmp_path):
    cfg = write(tmp_path, PORT)
    assert run(["portfolio", "--config", cfg, "--out", str(tmp_path / "p")]) == 0
    rows = [r.split(",") for r in data_rows(tmp_path / "p" / "portfolio.csv")[1:]]
    assert len(rows) == 3 * len(range(100, 200 - 20 + 1, 40))
    # the clairvoyant weights minimise the in-sample loss over the holding window
    by = {}
    for r in rows:
        by.setdefault(r[0], {})[r[2]] = float(r[-1])
    for k in by.values():
        assert k["pt"] <= min(k["ew"], k["mv"]) + 1e-9


def test_fmt_round_trips_numpy_floats():
    rng = np.random.default_rng(0)
    for v in rng.normal(size=20):
        assert float(fmt(v)) == v and fmt(v) == repr(float(v))
    assert fmt(np.int64(3)) == "3" and fmt(0.1) == "0.1"
