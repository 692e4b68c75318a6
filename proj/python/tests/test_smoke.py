import json
import math
import os
from pathlib import Path

import pytest

import iqn

SRC = Path(os.environ.get("IQN_SOURCE_DIR", Path(__file__).resolve().parents[2]))


def test_car_on_hill_step_reward_and_bounds():
    p, v, r, terminal = iqn.car_on_hill_step(-0.5, 0.0, 1)
    assert p > -0.5 and v > 0.0
    assert r == 0.0 and not terminal
    with pytest.raises(ValueError):
        iqn.car_on_hill_step(-0.5, 0.0, 2)


def test_dataset_is_seeded():
    a = iqn.collect_dataset(50, 3)
    assert len(a) == 50 and len(a[0]) == 7
    assert a == iqn.collect_dataset(50, 3)
    assert a[0][:2] == [-0.5, 0.0]


def test_mlp_roundtrip():
    params = iqn.mlp_init(2, [5], 2, 0)
    assert len(params) == 2 * 5 + 5 + 5 * 2 + 2
    q = iqn.mlp_forward(2, [5], 2, params, [0.1, -0.2])
    assert len(q) == 2 and all(math.isfinite(x) for x in q)


def test_oracles():
    q, residual = iqn.chain_value_iteration(5, 0.9)
    assert residual <= 1e-8
    assert q[2 * 3 + 1] == pytest.approx(1.0)
    assert q[0 * 2 + 1] == pytest.approx(0.9 ** 3)
    a, b, c = iqn.lqr_q_star()
    assert c < 0.0


def test_schedule_and_stats():
    assert iqn.ifqi_shift_period(20000, 40, 1) == 500
    assert iqn.iqm([8, 1, 7, 2, 6, 3, 5, 4]) == pytest.approx(4.5)


def test_config_hash_ignores_key_order():
    a = iqn.config_hash('{"kind": "table1", "seeds": [0, 1]}')
    b = iqn.config_hash('{"seeds": [0, 1], "kind": "table1"}')
    assert a == b
    assert json.loads(iqn.canonical_config('{"kind": "table1"}'))["train"]["batch_size"] == 100
    with pytest.raises(ValueError):
        iqn.config_hash('{"kind": "table1", "typo": 1}')


def test_small_run(tmp_path):
    summary = iqn.run_experiment(str(SRC / "configs" / "smoke.json"), str(tmp_path / "run"))
    assert len(summary["runs"]) == 4
    ks = {r["k"] for r in summary["runs"]}
    assert ks == {1, 3}
    assert (tmp_path / "run" / "summary.csv").exists()
    plot = iqn.plot_data(str(tmp_path / "run"))
    assert Path(plot).read_text().startswith("series,x,y,seed\n")
