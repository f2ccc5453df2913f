import pytest
from hypothesis import given
from hypothesis import strategies as st

from tmslab import config
from tmslab.config import LabConfig
from tmslab.errors import ConfigError


def test_defaults_round_trip():
    cfg = LabConfig()
    assert config.loads(config.dumps(cfg)) == cfg


@given(lr=st.floats(0.0, 1.0), steps=st.integers(10, 5000), ckpt=st.integers(1, 10),
       alpha=st.floats(0.0, 1.0), kind=st.sampled_from(["uniform", "early", "late"]),
       methods=st.lists(st.sampled_from(config.METHODS), min_size=1, max_size=6, unique=True),
       reps=st.integers(1, 5), K=st.integers(1, 200))
def test_round_trip_is_identity(lr, steps, ckpt, alpha, kind, methods, reps, K):
    if kind != "uniform" and ckpt < 3:
        kind = "uniform"
    cfg = (LabConfig()
           .replace("lab", methods=tuple(methods), replicates=reps)
           .replace("train", lr=lr, steps=steps, ckpt_count=ckpt)
           .replace("mixture", alpha=alpha, ckpt_dist=kind)
           .replace("eval", K=K, ks=(1, K)))
    text = config.dumps(cfg)
    again = config.loads(text)
    assert again == cfg
    assert config.dumps(again) == text


def test_partial_file_fills_defaults():
    cfg = config.loads("[train]\nlr = 0.01\n")
    assert cfg.train.lr == 0.01
    assert cfg.mixture == LabConfig().mixture


@pytest.mark.parametrize("text", [
    "[nope]\nx = 1\n",
    "[train]\nlearning_rate = 0.1\n",
    "[train]\nlr = fast\n",
    "[train]\nlr = -1\n",
    "[train]\nsteps = 5\nckpt_count = 10\n",
    "[lab]\nmethods = sft, dpo\n",
    "[lab]\nmethods = sft, sft\n",
    "[lab]\nreplicates = 0\n",
    "[mixture]\nalpha = 1.5\n",
    "[mixture]\nckpt_dist = early\n[train]\nckpt_count = 2\nsteps = 10\n",
    "[eval]\nK = 10\nks = 1, 100\n",
    "[eval]\nkl_mode = guess\n",
    "[task]\nkind = sudoku\n",
    "[task]\nretention = copy, poetry\n",
    "[policy]\nmax_len = 4\n",
    "[rl]\ngroup_size = 1\n",
    "[eval]\ntemperature = 0\n",
    "not a config",
])
def test_bad_configs_fail_at_load(text):
    with pytest.raises(ConfigError):
        config.loads(text)


def test_unreadable_path(tmp_path):
    with pytest.raises(ConfigError):
        config.load(tmp_path / "missing.ini")


def test_replicate_seeds():
    assert config.loads("[lab]\nseed = 7\nreplicates = 3\n").lab.seeds == [7, 8, 9]
