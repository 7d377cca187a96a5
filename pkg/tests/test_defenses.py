import numpy as np
import pytest
from numpy.testing import assert_array_equal

from config.experiment_config import DefenseGrid, ExperimentConfig, parse_defense
from core.errors import ConfigError, OutOfScopeError
from security.defenses import (
    FedPassDefense,
    GaussianNoiseDefense,
    NoDefense,
    OutOfScopeDefense,
    SparsifyDefense,
    apply_tensor_defense,
    check_grid_range,
    defense_grid,
    sparsify,
)


def test_sparsify_example():
    assert_array_equal(sparsify(np.array([1.0, -3.0, 2.0, 0.5]), 0.5), [0.0, -3.0, 2.0, 0.0])


def test_sparsify_ties_keep_lower_index_and_is_idempotent(rng):
    assert_array_equal(sparsify(np.array([1.0, -1.0, 1.0]), 0.34), [1.0, -1.0, 0.0])
    t = rng.standard_normal((4, 5))
    once = sparsify(t, 0.3)
    assert np.count_nonzero(once) == 6
    assert_array_equal(sparsify(once, 0.3), once)
    assert_array_equal(sparsify(t, 1.0), t)


def test_gaussian_noise_moments(rng):
    noisy = apply_tensor_defense(np.zeros(100_000), GaussianNoiseDefense(noise_level=0.5), rng)
    assert abs(noisy.mean()) < 0.01
    assert abs(noisy.std() - 0.5) < 0.01


def test_identity_defenses(rng):
    t = rng.standard_normal((3, 4))
    for spec in (NoDefense(), FedPassDefense(), GaussianNoiseDefense(noise_level=0.0)):
        assert_array_equal(apply_tensor_defense(t, spec, rng), t)


def test_boundary_defenses_only_touch_their_target(rng):
    t = rng.standard_normal((2, 8))
    noise = GaussianNoiseDefense(noise_level=0.1, target="embeddings")
    sparse = SparsifyDefense(keep_ratio=0.25, target="gradients")
    assert_array_equal(apply_tensor_defense(t, noise, rng, boundary="gradients"), t)
    assert not np.array_equal(apply_tensor_defense(t, noise, rng, boundary="embeddings"), t)
    assert_array_equal(apply_tensor_defense(t, sparse, rng, boundary="embeddings"), t)
    assert np.count_nonzero(apply_tensor_defense(t, sparse, rng, boundary="gradients")) == 4


def test_out_of_scope_defenses_are_refused(rng):
    spec = OutOfScopeDefense(variant="cae")
    with pytest.raises(OutOfScopeError):
        apply_tensor_defense(np.zeros(3), spec, rng)
    with pytest.raises(OutOfScopeError):
        spec.refuse()
    grid = defense_grid("instahide", [0.1, 0.2])
    assert [(s.variant, s.strength) for s in grid] == [("instahide", 0.1), ("instahide", 0.2)]


def test_defense_grid_builds_one_spec_per_strength():
    grid = defense_grid("fedpass", [0.0, 1.0, 4.0], swept="sigma2", N=10.0)
    assert [s.sigma2 for s in grid] == [0.0, 1.0, 4.0]
    assert all(s.N == 10.0 for s in grid)
    assert [s.strength for s in grid] == [0.0, 1.0, 4.0]
    assert [s.keep_ratio for s in defense_grid("sparsify", [0.01, 0.1])] == [0.01, 0.1]
    assert defense_grid("gaussian_noise", [0.1], target="gradients")[0].target == "gradients"


def test_defense_grid_rejects_bad_strength_lists():
    with pytest.raises(ConfigError):
        defense_grid("sparsify", [])
    with pytest.raises(ConfigError):
        defense_grid("gaussian_noise", [0.5, 0.1])
    with pytest.raises(ConfigError):
        defense_grid("mixup", [0.1])


def test_sweep_windows_for_baselines():
    check_grid_range(GaussianNoiseDefense(noise_level=1e-3))
    with pytest.raises(ConfigError):
        check_grid_range(GaussianNoiseDefense(noise_level=2.0))
    with pytest.raises(ConfigError):
        check_grid_range(SparsifyDefense(keep_ratio=0.9))

    grids = [DefenseGrid(variant="sparsify", strengths=[0.9])]
    with pytest.raises(ConfigError):
        ExperimentConfig(defense_grids=grids).grid()
    assert len(ExperimentConfig(defense_grids=grids, strict_grids=False).grid()) == 1


def test_fedpass_active_law_overrides():
    spec = FedPassDefense(N=20.0, sigma2=2.0, active_N=5.0, active_scope="per_sample")
    assert spec.passive_law().N == 20.0
    law = spec.active_law()
    assert (law.N, law.sigma2, law.scope) == (5.0, 2.0, "per_sample")


def test_parse_defense():
    assert isinstance(parse_defense({"variant": "fedpass", "N": 3}), FedPassDefense)
    with pytest.raises(ConfigError):
        parse_defense({"variant": "sparsify", "keep_ratio": 0.0})
