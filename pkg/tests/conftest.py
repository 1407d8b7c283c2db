import numpy as np
import pytest

from vvcdesign.linmodels import LpfModel, build_jacobians, build_ldf
from vvcdesign.network import bundled_feeder, bundled_path
from vvcdesign.scenario import (ProfileConfig, average_operating_point, mean_scenario, select_worst_case,
                                split_train_test, synthesize_year)

# two-generator sensitivity block used across the stability and design tests
FIXTURE_JQ = np.array([[1.5504, 1.5504], [1.5505, 1.6144]])


def scalar_lpf(jp=2.0, jq=2.0) -> LpfModel:
    return LpfModel(v_base=np.array([1.0]), p0=np.zeros(1), q0=np.zeros(1), Jp=np.array([[jp]]),
                    Jq=np.array([[jq]]), finite_diff_eps=1e-6, node_ids=("1",), gen_idx=(0,))


def matrix_lpf(Jq, gens=None) -> LpfModel:
    Jq = np.asarray(Jq, dtype=float)
    n = Jq.shape[0]
    gens = tuple(range(n)) if gens is None else tuple(gens)
    return LpfModel(v_base=np.ones(n), p0=np.zeros(n), q0=np.zeros(n), Jp=Jq.copy(), Jq=Jq,
                    finite_diff_eps=1e-6, node_ids=tuple(str(i + 1) for i in range(n)), gen_idx=gens)


@pytest.fixture(scope="session")
def two_bus():
    return bundled_feeder("two_bus")


@pytest.fixture(scope="session")
def chain5():
    return bundled_feeder("chain5")


@pytest.fixture(scope="session")
def ieee33():
    return bundled_feeder("ieee33")


@pytest.fixture(scope="session")
def year33(ieee33):
    return synthesize_year(ieee33, ProfileConfig.load(bundled_path("ieee33_profile.json")), seed=0)


@pytest.fixture(scope="session")
def study33(ieee33, year33):
    """Split, operating point, LPF/LDF models and worst-case scenario on the 33-node feeder."""
    split = split_train_test(year33, 0.9, seed=0)
    p0, q0 = average_operating_point(split.train)
    lpf = build_jacobians(ieee33, p0, q0, workers=4)
    return {
        "net": ieee33,
        "split": split,
        "lpf": lpf,
        "ldf": build_ldf(ieee33),
        "mean": mean_scenario(split.train),
        "worst": select_worst_case(split.train, ieee33, workers=4),
    }


@pytest.fixture(scope="session")
def chain5_lpf(chain5):
    return build_jacobians(chain5, np.zeros(chain5.n), np.zeros(chain5.n))
