import time

import numpy as np
import pytest

ACCEPTANCE = {}


def record(n: int, ok: bool, detail: str, seconds: float | None = None) -> None:
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    if seconds is not None:
        line += f"  [{seconds:.2f} s]"
    ACCEPTANCE[n] = line


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])


class DeskRun:
    """Reduced ensemble taken through simulation, features, embedding and clustering."""

    def __init__(self, seed=0):
        from tmecontrol import features as ft
        from tmecontrol import landscape as ls
        from tmecontrol import sim

        t0 = time.perf_counter()
        self.spec = sim.EnsembleSpec(n_params=20, n_seeds=2, n_steps=200, grid_size=60, rng_seed=seed)
        self.data = sim.generate_ensemble(self.spec)
        self.series = [ft.featurize_trajectory(tr, trajectory_id=i) for i, tr in enumerate(self.data.trajectories)]
        z, self.table = ft.standardize(self.series)
        self.windows = ft.EmbeddedWindows.concat([ft.delay_embed(s, 25) for s in z])
        self.clustering = ls.cluster_states(self.windows, 6, order_by=ls.effector_score(self.windows, self.table),
                                            seed=seed)
        self.sequences = self.clustering.sequences(self.windows)
        term = ls.terminal_states(self.sequences)
        self.terminal = np.array([term[i] for i in range(len(self.data))])
        self.build_seconds = time.perf_counter() - t0


_DESK = {}


@pytest.fixture(scope="session")
def desk():
    if "run" not in _DESK:
        _DESK["run"] = DeskRun(0)
    return _DESK["run"]
