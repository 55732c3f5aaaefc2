"""Shared fixtures: small deterministic backends and helper data."""

from __future__ import annotations

import numpy as np
import pytest

from reflexedit import BackendSpec, EditConfig, ToyBackend

# Layer sets scaled to the 12-layer default toy: the attention window sits in
# the single-stream stack, the residual window straddles the block boundary.
TOY_ATTN_LAYERS = frozenset(range(5, 11))
TOY_RES_LAYERS = frozenset(range(2, 5))


def toy_config(**overrides) -> EditConfig:
    base = dict(attn_layers=TOY_ATTN_LAYERS, res_layers=TOY_RES_LAYERS)
    base.update(overrides)
    return EditConfig(**base)


@pytest.fixture(scope="session")
def backend12() -> ToyBackend:
    """Default 12-layer toy backend (16x16x4 latent, patch 1)."""
    return ToyBackend(BackendSpec())


@pytest.fixture(scope="session")
def backend_small() -> ToyBackend:
    """Cheap 12-layer backend on an 8x8 grid for heavier pipeline tests."""
    return ToyBackend(BackendSpec(latent_shape=(8, 8, 4), patch_size=1))


def random_image(shape: tuple[int, int], seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.random((shape[0], shape[1], 3), dtype=np.float32)


def dyadic(shape, seed: int = 0, scale: int = 64, span: int = 128) -> np.ndarray:
    """Random float32 values on the grid {-span..span}/scale.

    Every value has a short binary mantissa, so sums and differences of a
    few of them are exact in float32; used wherever bit-level round trips
    are asserted.
    """
    rng = np.random.default_rng(seed)
    return (rng.integers(-span, span + 1, size=shape) / scale).astype(np.float32)


def pytest_runtest_logreport(report):
    if report.when != "call" or "test_acceptance" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    status = "PASS" if report.passed else "FAIL"
    print(f"\n[acceptance] {name}: {status}")
