import logging
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from chanfuse.errors import ShapeError
from chanfuse.kernels import bigru_backward, bigru_forward, linear_backward, linear_forward

logger = logging.getLogger(__name__)


class ParamTensor(BaseModel):
    """
    A named learnable tensor with its gradient slot.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    name: str
    value: np.ndarray
    grad: np.ndarray

    @model_validator(mode="after")
    def _check_shapes(self) -> "ParamTensor":
        if self.value.shape != self.grad.shape:
            raise ShapeError(
                f"{self.name}: value shape {self.value.shape} != grad shape {self.grad.shape}"
            )
        return self


class ParamStore:
    """
    Registry of every ParamTensor of a model, keyed by unique dotted names.

    Gradients accumulate into the slots until `zero_grad` is called.
    """

    def __init__(self) -> None:
        self._params: Dict[str, ParamTensor] = {}

    def add(self, name: str, value: np.ndarray) -> ParamTensor:
        if name in self._params:
            raise ShapeError(f"parameter '{name}' registered twice")
        value = np.array(value, dtype=np.float64)
        param = ParamTensor(name=name, value=value, grad=np.zeros_like(value))
        self._params[name] = param
        return param

    def __getitem__(self, name: str) -> ParamTensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[ParamTensor]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self, prefix: str = "") -> List[str]:
        return [n for n in self._params if n.startswith(prefix)]

    def value(self, name: str) -> np.ndarray:
        return self._params[name].value

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        param = self._params[name]
        if grad.shape != param.value.shape:
            raise ShapeError(f"{name}: gradient shape {grad.shape} != {param.value.shape}")
        param.grad += grad

    def zero_grad(self) -> None:
        for param in self._params.values():
            param.grad.fill(0.0)

    def sgd_step(self, learning_rate: float) -> None:
        for param in self._params.values():
            param.value -= learning_rate * param.grad

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(p.grad**2)) for p in self._params.values())))

    def arrays(self, prefix: str = "") -> Dict[str, np.ndarray]:
        return {n: p.value for n, p in self._params.items() if n.startswith(prefix)}

    def load_arrays(self, arrays: Dict[str, np.ndarray], strict: bool = True) -> int:
        """
        Copies arrays into registered parameters of identical shape.

        Args:
            arrays (Dict[str, np.ndarray]): Tensors by parameter name.
            strict (bool): Require every registered parameter to be present.

        Returns:
            int: Number of parameters loaded.
        """
        missing = [n for n in self._params if n not in arrays]
        if strict and missing:
            raise ShapeError(f"missing parameters: {', '.join(missing[:5])}")
        loaded = 0
        for name, array in arrays.items():
            if name not in self._params:
                logger.warning("Ignoring unknown parameter %s", name)
                continue
            param = self._params[name]
            if param.value.shape != tuple(array.shape):
                raise ShapeError(
                    f"{name}: stored shape {tuple(array.shape)} != expected {param.value.shape}"
                )
            param.value[...] = array
            loaded += 1
        return loaded


def init_linear(
    store: ParamStore,
    name: str,
    din: int,
    dout: int,
    rng: np.random.Generator,
    identity: bool = False,
) -> None:
    """Registers `name.W` (Din×Dout, Glorot uniform) and `name.b` (zeros)."""
    if identity:
        if din != dout:
            raise ShapeError(f"{name}: identity init needs din == dout")
        weight = np.eye(din)
    else:
        limit = np.sqrt(6.0 / (din + dout))
        weight = rng.uniform(-limit, limit, size=(din, dout))
    store.add(f"{name}.W", weight)
    store.add(f"{name}.b", np.zeros(dout))


def init_gru(
    store: ParamStore,
    name: str,
    din: int,
    hidden: int,
    rng: np.random.Generator,
) -> None:
    """Registers one GRU direction: `Wx` (Din×3H), `Uh` (H×3H), `b` (3H), gate order z, r, n."""
    limit = 1.0 / np.sqrt(hidden)
    store.add(f"{name}.Wx", rng.uniform(-limit, limit, size=(din, 3 * hidden)))
    store.add(f"{name}.Uh", rng.uniform(-limit, limit, size=(hidden, 3 * hidden)))
    store.add(f"{name}.b", np.zeros(3 * hidden))


def init_gru_stack(
    store: ParamStore,
    name: str,
    din: int,
    hidden: int,
    layers: int,
    rng: np.random.Generator,
) -> None:
    """Registers `name.l{i}.fwd` and `name.l{i}.bwd` GRUs; layers above the first read 2H."""
    for layer in range(layers):
        layer_in = din if layer == 0 else 2 * hidden
        for direction in ("fwd", "bwd"):
            init_gru(store, f"{name}.l{layer}.{direction}", layer_in, hidden, rng)


def linear_apply(store: ParamStore, name: str, x: np.ndarray):
    return linear_forward(x, store.value(f"{name}.W"), store.value(f"{name}.b"))


def linear_accumulate(store: ParamStore, name: str, dy: np.ndarray, cache) -> np.ndarray:
    """Adds `name`'s weight and bias gradients to the store and returns dL/dx."""
    dx, dW, db = linear_backward(dy, cache)
    store.accumulate(f"{name}.W", dW)
    store.accumulate(f"{name}.b", db)
    return dx


def _gru_direction(store: ParamStore, name: str) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    return store.value(f"{name}.Wx"), store.value(f"{name}.Uh"), store.value(f"{name}.b")


def gru_stack_forward(store: ParamStore, name: str, x: np.ndarray, layers: int):
    """
    Stacked bidirectional GRU over B×T×Din.

    Returns the last layer's states (B×T×2H), its final states (B×2H) and the cache.
    """
    caches = []
    states, final = x, None
    for layer in range(layers):
        states, final, cache = bigru_forward(
            states,
            _gru_direction(store, f"{name}.l{layer}.fwd"),
            _gru_direction(store, f"{name}.l{layer}.bwd"),
        )
        caches.append(cache)
    return states, final, (caches, states.shape)


def gru_stack_backward(
    store: ParamStore,
    name: str,
    dstates: Optional[np.ndarray],
    dfinal: Optional[np.ndarray],
    cache,
) -> np.ndarray:
    caches, states_shape = cache
    if dstates is None:
        dstates = np.zeros(states_shape)
    for layer in reversed(range(len(caches))):
        dstates, grads_f, grads_b = bigru_backward(dstates, dfinal, caches[layer])
        for direction, grads in (("fwd", grads_f), ("bwd", grads_b)):
            for suffix, grad in zip(("Wx", "Uh", "b"), grads):
                store.accumulate(f"{name}.l{layer}.{direction}.{suffix}", grad)
        dfinal = None
    return dstates
