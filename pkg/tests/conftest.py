import math

import pytest

from voltstab.netmodel import (Branch, Bus, BusKind, Load, Machine, MachineKind, NetworkCase,
                               apply_sc_mode, ieee14)


def two_bus(x=0.1, p_mw=100.0, q_mvar=0.0, r=0.0, v_slack=1.0, base_mva=100.0):
    """Slack bus 1 feeding a PQ load at bus 2 over one line."""
    buses = (Bus(1, "SLACK", BusKind.SLACK, v_slack), Bus(2, "LOAD", BusKind.PQ))
    branches = (Branch(1, 1, 2, r, x, outage_eligible=True),)
    loads = (Load(2, p_mw, q_mvar),)
    machines = (Machine(1, MachineKind.SYNC_GEN, 0.0, v_slack, -1e4, 1e4, 1e4),)
    return NetworkCase(base_mva, buses, branches, loads, machines)


def two_bus_oracle(p_pu, x):
    """Closed-form lossless 2-bus solution at unity power factor, slack V = 1."""
    v = math.sqrt((1 + math.sqrt(1 - 4 * (p_pu * x) ** 2)) / 2)
    return v, -math.asin(p_pu * x / v)


@pytest.fixture(scope="session")
def case14():
    return ieee14()


@pytest.fixture(scope="session")
def case14_no_sc(case14):
    return apply_sc_mode(case14, False)


@pytest.fixture(scope="session")
def case14_sc(case14):
    return apply_sc_mode(case14, True)
