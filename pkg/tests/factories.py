"""
Model factories shared by the test suites.
"""

from sepfilter.core.model import model_from_dict


def scalar_block(**overrides):
    """n=1, m=1 linear-Gaussian model block; keyword arguments replace entries."""
    block = {
        "name": "scalar-test",
        "dims": {"ell": 0, "n": 1, "m": 1, "m1": 1, "k": 0},
        "horizon": 1.0,
        "x0": {"mean": [0.0], "cov": [[0.25]]},
        "y0": [0.0, 0.0],
        "b": {"family": "linear", "params": {"const": [0.0], "x_coef": [[-1.0]]}},
        "lambda": {"family": "constant", "params": {"value": [[0.5, 0.0, 0.0]]}},
        "a": {"family": "linear", "params": {"const": [0.05], "x_coef": [[1.0]]}},
        "sigma": {"family": "constant", "params": {"value": [[0.0, 0.3, 0.0]]}},
        "c": {"family": "constant", "params": {"value": [0.02]}},
        "xi": {"family": "constant", "params": {"value": [[0.0, 0.0, 0.1]]}},
    }
    block.update(overrides)
    return block


def scalar_model(**overrides):
    return model_from_dict(scalar_block(**overrides))


def filtering_model():
    """dX = 0, dY = X dt + dW with X0 ~ N(0, 1): the Riccati solution is 1 / (1 + t)."""
    return scalar_model(
        b=None, c=None, xi=None,
        x0={"mean": [0.0], "cov": [[1.0]]},
        **{"lambda": None},
        a={"family": "linear", "params": {"const": [0.0], "x_coef": [[1.0]]}},
        sigma={"family": "constant", "params": {"value": [[0.0, 1.0, 0.0]]}},
    )


def deterministic_model():
    """No noise reaches R or X: R_T = r0 + (h a - c) T exactly."""
    return scalar_model(
        b=None, xi=None, **{"lambda": None},
        x0={"mean": [0.0], "cov": [[0.0]]},
        a={"family": "constant", "params": {"value": [0.04]}},
        sigma={"family": "constant", "params": {"value": [[0.0, 0.0, 0.0]]}},
    )
