"""Session-wide fixtures: synthesized suites and calibrated profiles."""

import numpy as np
import pytest

from floorvib.simfloor import scenario_suite, synthesize

import helpers


@pytest.fixture(scope="session")
def constant_suite():
    scenarios = scenario_suite("constant")
    data = [synthesize(sc) for sc in scenarios]
    return scenarios, data


@pytest.fixture(scope="session")
def constant_profile(constant_suite):
    scenarios, data = constant_suite
    return helpers.calibrate_quiet(
        [(rec, evs) for rec, evs, _ in data[:3]],
        floor_bounds=scenarios[0].floor.bounds)


@pytest.fixture(scope="session")
def constant_tracked(constant_suite, constant_profile):
    """Per-trial (errors, steps, events) for the 7 operating trials."""
    scenarios, data = constant_suite
    floor = scenarios[0].floor.bounds
    out = []
    for rec, evs, _ in data[3:]:
        errs, steps = helpers.localization_errors(rec, evs, constant_profile,
                                                  floor)
        out.append((errs, steps, evs))
    return out


@pytest.fixture(scope="session")
def columns_suite():
    scenarios = scenario_suite("columns")
    data = [synthesize(sc) for sc in scenarios]
    return scenarios, data


@pytest.fixture(scope="session")
def columns_profile(columns_suite):
    scenarios, data = columns_suite
    return helpers.calibrate_quiet(
        [(rec, evs) for rec, evs, _ in data[:4]],
        floor_bounds=scenarios[0].floor.bounds)
