import numpy as np
import pytest

from orbit_tracer import plant as pl

# Reference Fourier coefficients of the settled open-loop Duffing orbit at omega = 1
# (a1, a3, a5 / b1, b3, b5 per state component).
Q1_COS = {1: -0.9928, 3: 0.0336, 5: -0.0005}
Q1_SIN = {1: 2.9876, 3: -0.0255, 5: 0.00002}
Q2_COS = {1: 2.9876, 3: -0.0765, 5: 0.0001}
Q2_SIN = {1: 0.9928, 3: -0.1008, 5: 0.0025}
# same for the scalar system
QS_COS = {1: -0.9849, 3: 0.0053, 5: 0.0002}
QS_SIN = {1: 0.1160, 3: 0.0115, 5: -0.0003}


@pytest.fixture
def duffing():
    return pl.duffing(omega=1.0)


@pytest.fixture
def A_duff():
    return np.array([[0.0, 1.0], [-1.5, -0.5]])
