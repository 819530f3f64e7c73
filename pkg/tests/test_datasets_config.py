import json

import numpy as np
import pytest

from dfm.config import ExperimentConfig, apply_overrides, from_dict, load_config
from dfm.datasets import (
    banded_chain,
    gaussian_mixture_labeled,
    iid_uniform,
    make_dataset,
    markov_chain,
    mixture_heads,
    parity,
    point_mass,
)
from dfm.flows import TabularDistribution
from dfm.multimodal import JointDataset


def test_parity_example():
    d = parity(2, 4)
    assert len(d.probs) == 8 and np.allclose(d.probs, 0.125)
    assert np.all(d.tokens.sum(axis=1) % 2 == 0)


def test_point_mass_and_uniform():
    d = point_mass(5, 3, x=[1, 2, 3])
    assert d.tokens.tolist() == [[1, 2, 3]] and d.probs.tolist() == [1.0]
    with pytest.raises(ValueError):
        point_mass(5, 3, x=[1, 2])
    u = iid_uniform(3, 2)
    assert len(u.probs) == 9 and np.allclose(u.probs, 1 / 9)


def test_markov_chain_marginal_matches_transition():
    T = np.array([[0.9, 0.1], [0.3, 0.7]])
    d = markov_chain(2, 2, transition=T, initial=[0.5, 0.5])
    table = dict(zip(map(tuple, d.tokens.tolist()), d.probs))
    assert table[(0, 1)] == pytest.approx(0.05) and table[(1, 1)] == pytest.approx(0.35)


def test_banded_chain_support():
    d = banded_chain(4, 3)
    assert len(d.probs) == 16 and d.probs.sum() == pytest.approx(1.0)
    steps = np.diff(d.tokens, axis=1) % 4
    assert np.all((steps == 0) | (steps == 1))


def test_unknown_family():
    with pytest.raises(ValueError):
        make_dataset("zipf", S=2, D=2)


def test_dataset_file_round_trip(tmp_path):
    d = markov_chain(3, 3, seed=4)
    d.save(tmp_path / "d.json")
    back = TabularDistribution.load(tmp_path / "d.json")
    assert back.digest() == d.digest()
    j = gaussian_mixture_labeled(n=50, seed=1)
    j.save(tmp_path / "j.json")
    jb = JointDataset.load(tmp_path / "j.json")
    assert jb.digest() == j.digest() and np.array_equal(jb.tokens, j.tokens)


def test_mixture_meta_is_standardized():
    j = gaussian_mixture_labeled(n=4000, seed=0)
    assert abs(j.coords.mean()) < 1e-12 and j.coords.std() == pytest.approx(1.0)
    heads = mixture_heads(j)
    m = np.asarray(j.meta["means"]).ravel()
    assert abs(j.coords[j.tokens[:, 0] == 1].mean() - m[1]) < 0.05
    assert heads is not None


def test_overrides_parse_json_and_nest():
    out = apply_overrides({"sampler": {"eta": 1}}, ["sampler.eta=5", "eval.sweep_eta=[0,1]", "flow=uniform"])
    assert out == {"sampler": {"eta": 5}, "eval": {"sweep_eta": [0, 1]}, "flow": "uniform"}
    with pytest.raises(ValueError):
        apply_overrides({}, ["noequals"])


def test_unknown_keys_rejected():
    with pytest.raises(ValueError):
        from_dict({"flwo": "masking"})
    with pytest.raises(ValueError):
        from_dict({"sampler": {"etaa": 1}})
    with pytest.raises(ValueError):
        from_dict({"flow": "gaussian"})


def test_seed_propagates_and_explicit_wins(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 9, "train": {"seed": 2}}))
    cfg = load_config(str(p))
    assert cfg.sampler.seed == 9 and cfg.train.seed == 2


def test_config_hash_stable_and_sensitive():
    a, b = ExperimentConfig(), ExperimentConfig()
    assert a.config_hash() == b.config_hash() and len(a.config_hash()) == 16
    c = load_config(None, ["sampler.eta=2.0"])
    assert c.config_hash() != load_config(None, []).config_hash()
    assert from_dict(json.loads(c.canonical_json())).config_hash() == c.config_hash()


def test_missing_data_path_raises(tmp_path):
    with pytest.raises(FileNotFoundError):
        from_dict({"data": {"path": str(tmp_path / "nope.json")}})
