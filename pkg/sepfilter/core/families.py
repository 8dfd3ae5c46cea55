"""
Coefficient Families
====================

Closed registry of parametric coefficient maps f(t, x, y). Every model
coefficient (drifts, diffusions, benchmark and expert blocks) is one of
these, so its structure is known without inspecting code.

Batch convention: ``x`` has shape (..., n) and ``y`` shape (..., mY); leading
axes broadcast against each other. ``evaluate_flat`` returns (..., P) where
P is the product of the declared output shape; ``evaluate`` restores it.
"""

import logging
from abc import ABC, abstractmethod
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np

from sepfilter.core.errors import ShapeError, ValidationError

logger = logging.getLogger(__name__)

STRUCTURE_TAGS = ("constant", "linear", "quadratic", "exponential", "general")


def _batch_shape(x: np.ndarray, y: np.ndarray) -> Tuple[int, ...]:
    return np.broadcast_shapes(x.shape[:-1], y.shape[:-1])


class CoefficientMap(ABC):
    """Vector or matrix valued map of (t, x, y) with a declared structure."""

    structure_tag = "general"
    family = "general"

    def __init__(self, name: str, shape: Sequence[int], n: int, mY: int) -> None:
        self.name = name
        self.shape = tuple(int(s) for s in shape)
        self.size = int(np.prod(self.shape)) if self.shape else 1
        self.n = n
        self.mY = mY

    @abstractmethod
    def evaluate_flat(self, t: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        ...

    @abstractmethod
    def jacobian_flat(self, t: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Derivative in x, shape (..., P, n)."""

    @abstractmethod
    def hessian_flat(self, t: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Second derivative in x, shape (..., P, n, n)."""

    @property
    def depends_on_x(self) -> bool:
        return True

    @property
    def depends_on_y(self) -> bool:
        return False

    def evaluate(self, t: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        out = self.evaluate_flat(t, np.asarray(x, dtype=float), np.asarray(y, dtype=float))
        return out.reshape(out.shape[:-1] + self.shape)

    def to_dict(self) -> Dict[str, Any]:
        return {"name": self.name, "family": self.family, "structure_tag": self.structure_tag,
                "shape": list(self.shape)}

    def __repr__(self) -> str:
        return f"{type(self).__name__}(name={self.name!r}, shape={self.shape})"


class ConstantMap(CoefficientMap):
    structure_tag = "constant"
    family = "constant"

    def __init__(self, name: str, shape: Sequence[int], n: int, mY: int,
                 value: np.ndarray, t_coef: Optional[np.ndarray] = None) -> None:
        super().__init__(name, shape, n, mY)
        self.value = np.asarray(value, dtype=float).reshape(self.size)
        self.t_coef = None if t_coef is None else np.asarray(t_coef, dtype=float).reshape(self.size)

    @property
    def depends_on_x(self) -> bool:
        return False

    def _at(self, t: float) -> np.ndarray:
        return self.value if self.t_coef is None else self.value + t * self.t_coef

    def evaluate_flat(self, t, x, y):
        batch = _batch_shape(x, y)
        return np.broadcast_to(self._at(t), batch + (self.size,)).copy()

    def jacobian_flat(self, t, x, y):
        return np.zeros(_batch_shape(x, y) + (self.size, self.n))

    def hessian_flat(self, t, x, y):
        return np.zeros(_batch_shape(x, y) + (self.size, self.n, self.n))

    def affine_parts(self, t: float, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        y = np.asarray(y, dtype=float)
        return (np.broadcast_to(self._at(t), y.shape[:-1] + (self.size,)).copy(),
                np.zeros((self.size, self.n)))


class AffineMap(CoefficientMap):
    """f = const + x_coef x + y_coef y + t_coef t."""

    structure_tag = "linear"
    family = "linear"

    def __init__(self, name: str, shape: Sequence[int], n: int, mY: int,
                 const: np.ndarray, x_coef: np.ndarray,
                 y_coef: Optional[np.ndarray] = None,
                 t_coef: Optional[np.ndarray] = None) -> None:
        super().__init__(name, shape, n, mY)
        self.const = np.asarray(const, dtype=float).reshape(self.size)
        self.x_coef = np.asarray(x_coef, dtype=float).reshape(self.size, n)
        self.y_coef = None if y_coef is None else np.asarray(y_coef, dtype=float).reshape(self.size, mY)
        self.t_coef = None if t_coef is None else np.asarray(t_coef, dtype=float).reshape(self.size)

    @property
    def depends_on_x(self) -> bool:
        return bool(np.any(self.x_coef != 0.0))

    @property
    def depends_on_y(self) -> bool:
        return self.y_coef is not None and bool(np.any(self.y_coef != 0.0))

    def affine_parts(self, t: float, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Intercept f0(t, y) of shape (..., P) and slope F of shape (P, n)."""
        y = np.asarray(y, dtype=float)
        f0 = np.broadcast_to(self.const, y.shape[:-1] + (self.size,)).copy()
        if self.t_coef is not None:
            f0 = f0 + t * self.t_coef
        if self.y_coef is not None:
            f0 = f0 + y @ self.y_coef.T
        return f0, self.x_coef

    def evaluate_flat(self, t, x, y):
        out = self.const + x @ self.x_coef.T
        if self.t_coef is not None:
            out = out + t * self.t_coef
        if self.y_coef is not None:
            out = out + y @ self.y_coef.T
        return np.broadcast_to(out, _batch_shape(x, y) + (self.size,)).copy()

    def jacobian_flat(self, t, x, y):
        return np.broadcast_to(self.x_coef, _batch_shape(x, y) + self.x_coef.shape).copy()

    def hessian_flat(self, t, x, y):
        return np.zeros(_batch_shape(x, y) + (self.size, self.n, self.n))


class QuadraticMap(CoefficientMap):
    """f_p = const_p + lin_p x + x' quad_p x."""

    structure_tag = "quadratic"
    family = "quadratic"

    def __init__(self, name: str, shape: Sequence[int], n: int, mY: int,
                 const: np.ndarray, lin: np.ndarray, quad: np.ndarray) -> None:
        super().__init__(name, shape, n, mY)
        self.const = np.asarray(const, dtype=float).reshape(self.size)
        self.lin = np.asarray(lin, dtype=float).reshape(self.size, n)
        self.quad = np.asarray(quad, dtype=float).reshape(self.size, n, n)

    def evaluate_flat(self, t, x, y):
        out = self.const + x @ self.lin.T + np.einsum("...i,pij,...j->...p", x, self.quad, x)
        return np.broadcast_to(out, _batch_shape(x, y) + (self.size,)).copy()

    def jacobian_flat(self, t, x, y):
        sym = self.quad + np.swapaxes(self.quad, -1, -2)
        out = self.lin + np.einsum("pij,...j->...pi", sym, x)
        return np.broadcast_to(out, _batch_shape(x, y) + (self.size, self.n)).copy()

    def hessian_flat(self, t, x, y):
        sym = self.quad + np.swapaxes(self.quad, -1, -2)
        return np.broadcast_to(sym, _batch_shape(x, y) + sym.shape).copy()


class ExponentialMap(CoefficientMap):
    """f_p = offset_p + scale_p exp(eta_p x)."""

    structure_tag = "exponential"
    family = "exponential"

    def __init__(self, name: str, shape: Sequence[int], n: int, mY: int,
                 offset: np.ndarray, scale: np.ndarray, eta: np.ndarray) -> None:
        super().__init__(name, shape, n, mY)
        self.offset = np.asarray(offset, dtype=float).reshape(self.size)
        self.scale = np.asarray(scale, dtype=float).reshape(self.size)
        self.eta = np.asarray(eta, dtype=float).reshape(self.size, n)

    @property
    def depends_on_x(self) -> bool:
        return bool(np.any((self.scale[:, None] * self.eta) != 0.0))

    def _exp(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        e = np.exp(x @ self.eta.T)
        return np.broadcast_to(e, _batch_shape(x, y) + (self.size,))

    def evaluate_flat(self, t, x, y):
        return self.offset + self.scale * self._exp(x, y)

    def jacobian_flat(self, t, x, y):
        return (self.scale * self._exp(x, y))[..., None] * self.eta

    def hessian_flat(self, t, x, y):
        outer = self.eta[:, :, None] * self.eta[:, None, :]
        return (self.scale * self._exp(x, y))[..., None, None] * outer


class TabulatedMap(CoefficientMap):
    """Piecewise-linear interpolation in a scalar hidden state (n = 1)."""

    structure_tag = "general"
    family = "tabulated"
    FD_STEP = 1e-5

    def __init__(self, name: str, shape: Sequence[int], n: int, mY: int,
                 grid: np.ndarray, values: np.ndarray) -> None:
        super().__init__(name, shape, n, mY)
        if n != 1:
            raise ValidationError(f"Tabulated coefficient {name} needs n = 1", n=n)
        self.grid = np.asarray(grid, dtype=float).reshape(-1)
        self.values = np.asarray(values, dtype=float).reshape(self.grid.size, self.size)
        if np.any(np.diff(self.grid) <= 0):
            raise ValidationError(f"Tabulated coefficient {name} grid must increase")
        self._h = self.FD_STEP * max(float(self.grid[-1] - self.grid[0]), 1.0)

    def _interp(self, x: np.ndarray) -> np.ndarray:
        flat = x[..., 0].reshape(-1)
        cols = [np.interp(flat, self.grid, self.values[:, p]) for p in range(self.size)]
        return np.stack(cols, axis=-1).reshape(x.shape[:-1] + (self.size,))

    def evaluate_flat(self, t, x, y):
        return np.broadcast_to(self._interp(x), _batch_shape(x, y) + (self.size,)).copy()

    def jacobian_flat(self, t, x, y):
        h = self._h
        d = (self._interp(x + h) - self._interp(x - h)) / (2.0 * h)
        return np.broadcast_to(d[..., None], _batch_shape(x, y) + (self.size, 1)).copy()

    def hessian_flat(self, t, x, y):
        h = self._h
        d2 = (self._interp(x + h) - 2.0 * self._interp(x) + self._interp(x - h)) / (h * h)
        return np.broadcast_to(d2[..., None, None], _batch_shape(x, y) + (self.size, 1, 1)).copy()


def zero_map(name: str, shape: Sequence[int], n: int, mY: int) -> ConstantMap:
    return ConstantMap(name, shape, n, mY, value=np.zeros(int(np.prod(shape)) if shape else 1))


def _param(params: Dict[str, Any], key: str, shape: Tuple[int, ...], name: str,
           required: bool = True) -> Optional[np.ndarray]:
    if key not in params:
        if required:
            raise ValidationError(f"Coefficient {name} is missing parameter '{key}'")
        return None
    arr = np.asarray(params[key], dtype=float)
    if arr.size != int(np.prod(shape)):
        raise ShapeError(
            f"Coefficient {name} parameter '{key}' has {arr.size} entries, expected shape {shape}",
            coefficient=name, parameter=key, expected=list(shape), got=list(arr.shape),
        )
    return arr.reshape(shape)


def build_family(name: str, block: Optional[Dict[str, Any]], shape: Sequence[int],
                 n: int, mY: int) -> CoefficientMap:
    """Construct a coefficient map from a scenario block ``{family, params}``.

    Args:
        name: Coefficient label (``b``, ``sigma``, ...), used in messages.
        block: Parsed block or None for an all-zero coefficient.
        shape: Declared output shape.
        n: Hidden-state dimension.
        mY: Observation dimension.

    Returns:
        CoefficientMap: The constructed family instance.

    Raises:
        ValidationError: Unknown family or malformed parameters.
    """
    shape = tuple(int(s) for s in shape)
    if block is None:
        return zero_map(name, shape, n, mY)
    family = str(block.get("family", "constant")).lower()
    params = dict(block.get("params", {}))
    if family == "constant":
        return ConstantMap(name, shape, n, mY,
                           value=_param(params, "value", shape, name),
                           t_coef=_param(params, "t_coef", shape, name, required=False))
    if family in ("linear", "affine"):
        return AffineMap(name, shape, n, mY,
                         const=_param(params, "const", shape, name),
                         x_coef=_param(params, "x_coef", shape + (n,), name),
                         y_coef=_param(params, "y_coef", shape + (mY,), name, required=False),
                         t_coef=_param(params, "t_coef", shape, name, required=False))
    if family == "quadratic":
        return QuadraticMap(name, shape, n, mY,
                            const=_param(params, "const", shape, name),
                            lin=_param(params, "lin", shape + (n,), name),
                            quad=_param(params, "quad", shape + (n, n), name))
    if family in ("exponential", "exponential-affine"):
        offset = _param(params, "offset", shape, name, required=False)
        return ExponentialMap(name, shape, n, mY,
                              offset=np.zeros(shape) if offset is None else offset,
                              scale=_param(params, "scale", shape, name),
                              eta=_param(params, "eta", shape + (n,), name))
    if family == "tabulated":
        grid = np.asarray(params.get("grid", []), dtype=float)
        values = np.asarray(params.get("values", []), dtype=float)
        if grid.ndim != 1 or values.shape[0] != grid.size:
            raise ShapeError(f"Tabulated coefficient {name} needs one value row per grid node",
                             coefficient=name)
        return TabulatedMap(name, shape, n, mY, grid=grid, values=values)
    raise ValidationError(f"Unknown coefficient family '{family}' for {name}",
                          coefficient=name, family=family)
