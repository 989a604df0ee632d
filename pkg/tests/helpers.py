"""Scenario builders shared by the environment, CLI and acceptance tests."""
from dataclasses import replace

from highway_shield.highway import Placement, ScenarioConfig, SimConfig, Toggles


def sim(shield=True, comm=True, **scenario):
    toggles = scenario.pop("toggles", {})
    return SimConfig(scenario=ScenarioConfig(**scenario), toggles=Toggles(shield=shield, comm=comm, **toggles))


def obstacle_scenario(shield=True, comm=True, **kw):
    kw.setdefault("obstacles", [Placement(1, 10.0)])
    return sim(shield, comm, **kw)


def dense_scenario(shield=True, comm=True, **kw):
    return sim(
        shield,
        comm,
        name="dense_platoon",
        n_lanes=2,
        spawns=[Placement(0, 2.0), Placement(0, 1.0), Placement(1, 1.5)],
        init_target_speeds=[0.5, 2.0, 1.5],
        **kw,
    )


def with_toggles(cfg, **kw):
    return replace(cfg, toggles=replace(cfg.toggles, **kw))
