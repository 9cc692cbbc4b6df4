"""Scenario builders shared by the acceptance and audit tests."""

from __future__ import annotations

import random

from tdml.data import DataConfig
from tdml.protocol import TrainingConfig
from tdml.robust import AttackConfig
from tdml.simulation import Scenario

ATTACK_PARAMS = {
    "zero_gradient": {},
    "gaussian": {"sigma2": 30.0},
    "mean_shift": {"delta_rms": 0.5},
}


def detection_scenario(seed: int, kind: str | None, *, epochs: int = 1, start_epoch: int = 1) -> tuple[Scenario, str]:
    """Five pipelines of two trainers (ten trainers); one seat chosen per seed.

    Returns the scenario and the attacker's seat.  ``kind=None`` gives the
    honest twin with the same roster.
    """
    sc = Scenario.generate(seed=seed, n_pipelines=5, epochs=epochs)
    sc = sc.with_changes(
        data=DataConfig(separation=1.5),
        training=TrainingConfig(epochs=epochs, lr=0.3, n_pipelines=5),
    )
    seat = sc.trainers[random.Random(seed).randrange(len(sc.trainers))].uuid
    if kind is not None:
        sc = sc.with_changes(attacks=[AttackConfig(kind, seat, start_epoch=start_epoch, **ATTACK_PARAMS[kind])])
    return sc, seat


def ordering_scenario(seed: int, mode: str, *, epochs: int = 10, attacked: bool = True) -> tuple[Scenario, str | None]:
    """Four data-parallel pipelines; one trainer of one pipeline shifts its gradients by one benign RMS."""
    sc = Scenario.generate(seed=seed, mode=mode, n_pipelines=4, epochs=epochs)
    if mode == "single_node" or not attacked:
        return sc, None
    pipeline = random.Random(seed).randrange(4)
    seat = sc.trainers[2 * pipeline + random.Random(seed + 1).randrange(2)].uuid
    return sc.with_changes(attacks=[AttackConfig("mean_shift", seat, delta_rms=1.0)]), seat
