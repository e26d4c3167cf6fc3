import pytest

from app.physics.trap_model import FieldParams, PhysicsConstants, ShiftModel, TrapParams


@pytest.fixture
def constants():
    return PhysicsConstants()


@pytest.fixture
def model():
    return ShiftModel()


@pytest.fixture
def field():
    return FieldParams(50e-6)


@pytest.fixture
def trap_1mk():
    return TrapParams(depth_k=1.0e-3)
