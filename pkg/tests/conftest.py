"""Shared fixtures: tiny explicit instances checked against the oracles."""

from __future__ import annotations

import numpy as np
import pytest

from pamscr.density import build_design_matrix, parse_formula
from pamscr.geometry import Mesh, SensorArray
from pamscr.likelihood import Dataset, LatentGrids, LikelihoodEvaluator, sl_weights
from pamscr.observation import SourceLevelGrid
from pamscr.params import ParamVector

from oracles import TinyInstance


def make_tiny(seed: int, k: int = 3, n_cells: int = 4, n_nodes: int = 3,
              n_calls: int = 2, sl_fixed: bool = False, bearing_mode: str = "mixture",
              m_min: int = 2, period: float = 1.0):
    """Build a tiny random instance as both package objects and an oracle."""
    rng = np.random.default_rng(seed)
    sensors = rng.uniform(-4000.0, 4000.0, size=(k, 2))
    cells = rng.uniform(-9000.0, 9000.0, size=(n_cells, 2))
    areas_km2 = rng.uniform(2.0, 30.0, size=n_cells)
    log_density = rng.uniform(-3.0, 0.5, size=n_cells)

    g0 = rng.uniform(0.3, 0.9)
    t_r = 96.0
    beta_r = rng.uniform(10.0, 20.0)
    sigma_r = rng.uniform(2.0, 5.0)
    mu_s = rng.uniform(150.0, 170.0)
    sigma_s = None if sl_fixed else rng.uniform(3.0, 8.0)
    kappa = None if bearing_mode == "none" else rng.uniform(0.1, 2.0)
    delta = None if bearing_mode != "mixture" else rng.uniform(0.0, 25.0)
    psi = None if bearing_mode != "mixture" else rng.uniform(0.05, 0.4)

    pv = ParamVector(g0=g0, beta_r=beta_r, sigma_r=sigma_r, mu_s=mu_s,
                     sigma_s=sigma_s, kappa=kappa, delta_kappa=delta,
                     psi_kappa=psi, beta=np.array([0.0, 1.0]))

    if sl_fixed:
        sl_grid = None
        nodes, weights = np.array([mu_s]), np.array([1.0])
    else:
        step = 6.0
        sl_grid = SourceLevelGrid(mu_s - step * (n_nodes - 1) / 2.0,
                                  mu_s + step * (n_nodes - 1) / 2.0 + 1e-9, step)
        nodes, weights = sl_weights(pv.prior(), sl_grid, check_coverage=False)
        nodes, weights = nodes[:n_nodes], weights[:n_nodes] / weights[:n_nodes].sum()

    array = SensorArray(sensors)
    mesh = Mesh(cells, areas_km2 * 1e6, {"v": log_density})
    design = build_design_matrix(parse_formula("D ~ v"), mesh, standardize=False)
    grids = LatentGrids(mesh, sl_grid)

    omega = np.zeros((n_calls, k), dtype=np.int8)
    for i in range(n_calls):
        n_det = rng.integers(m_min, k + 1)
        omega[i, rng.choice(k, size=n_det, replace=False)] = 1
    detected = omega.astype(bool)
    bearings = np.where(detected, rng.uniform(0.0, 2.0 * np.pi, size=omega.shape), np.nan)
    received = np.where(detected, t_r + rng.exponential(8.0, size=omega.shape), np.nan)
    data = Dataset(omega, bearings, received, m_min=m_min, period=period)

    oracle = TinyInstance(
        sensors=sensors, cells=cells, areas_km2=areas_km2, log_density=log_density,
        sl_nodes=nodes, sl_weights=weights, g0=g0, t_r=t_r, beta_r=beta_r,
        sigma_r=sigma_r, kappa=kappa,
        delta=0.0 if delta is None else delta,
        psi=1.0 if bearing_mode == "single" else (0.5 if psi is None else psi),
        m_min=m_min, period=period,
    )
    if bearing_mode == "single":
        # A single von Mises component is the mixture with all weight on kappa.
        oracle.kappa, oracle.delta, oracle.psi = kappa, 0.0, 1.0

    evaluator = LikelihoodEvaluator(data, array, design, grids, t_r,
                                    use_bearings=bearing_mode != "none")
    return {
        "pv": pv, "array": array, "mesh": mesh, "design": design, "grids": grids,
        "data": data, "oracle": oracle, "evaluator": evaluator, "t_r": t_r,
        "omega": omega, "bearings": bearings, "received": received,
    }


@pytest.fixture
def tiny():
    return make_tiny(seed=7)


def small_problem(seed: int = 0, source_level_mode: str = "fixed",
                  formula: str = "D ~ 1", density_beta=None, period: float = 1.0):
    """A fast synthetic fit problem: 3 sensors, ~40 cells, moderate n.

    Fixed source level keeps the grid one node deep, so full fits run in a
    couple of seconds; tests that need the variable mode pass it explicitly.
    """
    from pamscr.geometry import FunctionField, build_mesh
    from pamscr.observation import SourceLevelGrid
    from pamscr.simulation import SimConfig, simulate

    array = SensorArray([[0.0, 0.0], [4000.0, 0.0], [2000.0, 3500.0]])
    field = FunctionField({
        "v": lambda e, n: n / 20000.0,
        "depth": lambda e, n: 10.0 + n / 4000.0,
    })
    mesh = build_mesh(array, field, inner_radius=6000.0, inner_spacing=3000.0,
                      outer_radius=18000.0, outer_spacing=6000.0)
    if density_beta is None:
        density_beta = [-0.7] if formula == "D ~ 1" else [-0.7, 0.3]
    if source_level_mode == "fixed":
        pv = ParamVector(g0=0.6, beta_r=15.0, sigma_r=3.0, mu_s=155.0, sigma_s=None,
                         kappa=1.0, delta_kappa=15.0, psi_kappa=0.15,
                         beta=np.array(density_beta))
        sl_grid = None
    else:
        pv = ParamVector(g0=0.6, beta_r=15.0, sigma_r=3.0, mu_s=155.0, sigma_s=4.0,
                         kappa=1.0, delta_kappa=15.0, psi_kappa=0.15,
                         beta=np.array(density_beta))
        sl_grid = SourceLevelGrid(100.0, 220.0, 3.0)
    config = SimConfig(params=pv, array=array, mesh=mesh, formula=formula,
                       t_r=96.0, m_min=2, period=period, seed=seed)
    sim = simulate(config)
    grids = LatentGrids(mesh, sl_grid)
    return {"array": array, "mesh": mesh, "pv": pv, "sim": sim, "grids": grids,
            "dataset": sim.dataset, "formula": formula, "t_r": 96.0,
            "source_level_mode": source_level_mode}
