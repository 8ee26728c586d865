"""Shared synthetic fixtures for the test suite.

Desk-scale stand-ins for cluster workload series: coupled sinusoids with
AR(1) noise, plus a two-regime variant whose frequency and amplitude
shift at the midpoint to emulate concept drift.
"""

from __future__ import annotations

import numpy as np


def ar1_noise(rng: np.random.Generator, n: int, cols: int, sigma: float, rho: float = 0.7):
    eps = rng.normal(0.0, sigma, size=(n, cols))
    out = np.zeros((n, cols))
    for t in range(1, n):
        out[t] = rho * out[t - 1] + eps[t]
    return out


def coupled_sines(n: int = 2000, seed: int = 42, noise: float = 0.008) -> np.ndarray:
    """Four coupled quasi-periodic features in roughly [0, 1]."""
    rng = np.random.default_rng(seed)
    t = np.arange(n)
    s1 = np.sin(2 * np.pi * t / 24)
    s2 = np.sin(2 * np.pi * t / 60 + 1.0)
    ar = ar1_noise(rng, n, 4, noise)
    return np.column_stack(
        [
            0.50 + 0.30 * s1 + 0.05 * s2 + ar[:, 0],
            0.50 + 0.20 * s2 + 0.10 * s1 + ar[:, 1],
            0.50 + 0.15 * np.sin(2 * np.pi * t / 24 + 0.8) + ar[:, 2],
            0.50 + 0.10 * s1 * s2 + ar[:, 3],
        ]
    )


def regime_block(
    rng: np.random.Generator,
    n: int,
    period: float,
    amplitude: float,
    mean: float,
    noise: float,
    phase: float = 0.0,
) -> np.ndarray:
    """One stationary 4-feature block with a dominant shared oscillation."""
    t = np.arange(n)
    s = np.sin(2 * np.pi * t / period + phase)
    s_slow = np.sin(2 * np.pi * t / (period * 2.5) + 1.0 + phase)
    ar = ar1_noise(rng, n, 4, noise)
    return np.column_stack(
        [
            mean + amplitude * s + ar[:, 0],
            mean + 0.6 * amplitude * s_slow + 0.2 * amplitude * s + ar[:, 1],
            mean + 0.5 * amplitude * np.sin(2 * np.pi * t / period + 0.8 + phase) + ar[:, 2],
            mean + 0.3 * amplitude * s * s_slow + ar[:, 3],
        ]
    )


def two_regime_stream(
    n: int = 1280,
    seed: int = 7,
    noise: float = 0.006,
) -> tuple[np.ndarray, int]:
    """Concept-drift stream: frequency and amplitude change at the midpoint.

    Returns (matrix, drift_row).
    """
    rng = np.random.default_rng(seed)
    half = n // 2
    a = regime_block(rng, half, period=24.0, amplitude=0.28, mean=0.50, noise=noise)
    b = regime_block(rng, n - half, period=10.0, amplitude=0.42, mean=0.56, noise=noise,
                     phase=0.3)
    return np.vstack([a, b]), half


def regime_one_series(n: int = 1200, seed: int = 11, noise: float = 0.006) -> np.ndarray:
    """Pre-drift distribution used to fit the initial online model."""
    rng = np.random.default_rng(seed)
    return regime_block(rng, n, period=24.0, amplitude=0.28, mean=0.50, noise=noise)


def write_raw_trace(path, machines=("m1", "m2"), buckets: int = 40, seed: int = 0,
                    tasks_per_bucket: int = 2) -> None:
    """Write a small raw trace file in the default 13-column schema."""
    rng = np.random.default_rng(seed)
    lines = []
    for b in range(buckets):
        ts = b * 300
        for mi, machine in enumerate(machines):
            for task in range(tasks_per_bucket):
                cpu = abs(0.02 + 0.01 * np.sin(2 * np.pi * b / 12 + mi) + rng.normal(0, 1e-3))
                mem = abs(0.02 + 0.005 * np.cos(2 * np.pi * b / 12) + rng.normal(0, 5e-4))
                dio = "" if (b + task) % 5 == 0 else f"{abs(rng.normal(2e-3, 2e-4)):.6f}"
                dsk = abs(rng.normal(9e-5, 5e-6))
                lines.append(
                    f"{ts},{ts + 300},j{mi},{task},{machine},{cpu:.6f},{mem:.6f},"
                    f"0,0,0,0,{dio},{dsk:.8f}"
                )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
