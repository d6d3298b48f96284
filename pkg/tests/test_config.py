import json

import pytest

from visaware.config import RunConfig, config_from_dict, load_config
from visaware.errors import ConfigError


def test_defaults_are_valid():
    run = RunConfig()
    assert run.m == 8 and run.alpha == 0.2 and run.d == 64 and not run.symmetric_triplet


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="lerning_rate"):
        config_from_dict({"lerning_rate": 0.1})


@pytest.mark.parametrize("doc", [{"d": 0}, {"d": 30, "h": 4}, {"m": -1}, {"h_f": 3},
                                 {"k_plus": 10, "k_minus": 10}, {"task": "parse"}, {"lr": 0.0},
                                 {"d": "64"}, {"symmetric_triplet": 1}, {"seed": 1.5}, {"alpha": True}])
def test_invalid_values_rejected(doc):
    with pytest.raises(ConfigError):
        config_from_dict(doc)


def test_ints_accepted_for_floats():
    assert config_from_dict({"alpha": 1}).alpha == 1


def test_load_from_file(tmp_path):
    p = tmp_path / "run.json"
    p.write_text(json.dumps({"seed": 3, "m": 4, "data_dir": "x"}))
    run = load_config(p)
    assert (run.seed, run.m, run.data_dir) == (3, 4, "x")
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(p)
    p.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_config(p)


def test_derived_configs_carry_fields():
    run = RunConfig(d=32, h=2, h_f=2, m=3, seed=5, k_plus=2, weldon_beta=0.5)
    task = run.task_config("nli")
    assert (task.d, task.n_heads, task.m, task.seed, task.task) == (32, 2, 3, 5, "nli")
    assert run.task_config("tag", 0).m == 0
    emb = run.embedding(100)
    assert (emb.vocab_size, emb.k_plus, emb.beta) == (100, 2, 0.5)
    assert run.synthetic().regions == run.R
