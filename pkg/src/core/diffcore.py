"""
Differentiable substrate for planning-by-backpropagation.

Nodes are torch tensors: the autograd graph is built define-by-run on every
forward pass, and `backward_differentiable` keeps the backward pass itself on
the graph so a loss that contains a gradient step can be differentiated again.
"""
import logging
from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterable, Iterator, List, Mapping, Optional, Tuple

import torch
import torch.nn.functional as F
from torch.overrides import TorchFunctionMode
from torch.utils._pytree import tree_map

from src.core.errors import NumericFault, ensure

logger = logging.getLogger(__name__)

DiffNode = torch.Tensor

# Attribute access and bookkeeping calls that do not produce new values
_UNRECORDED = {"__get__", "__set__", "__repr__", "__format__", "dim", "size", "numel", "item", "tolist"}


class GradMap(Mapping):
    """Gradients keyed by node identity; nodes unreachable from the loss have no entry"""

    def __init__(self):
        self._entries: Dict[int, Tuple[torch.Tensor, torch.Tensor]] = {}

    def _set(self, node: torch.Tensor, grad: torch.Tensor) -> None:
        ensure(grad.shape == node.shape, f"gradient shape {tuple(grad.shape)} != node shape {tuple(node.shape)}")
        self._entries[id(node)] = (node, grad)

    def __getitem__(self, node: torch.Tensor) -> torch.Tensor:
        return self._entries[id(node)][1]

    def __contains__(self, node: object) -> bool:
        return id(node) in self._entries

    def __iter__(self) -> Iterator[torch.Tensor]:
        return (node for node, _ in self._entries.values())

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, node: torch.Tensor, default: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Gradient of node, zeros when the node did not influence the loss"""
        if node in self:
            return self[node]
        return torch.zeros_like(node) if default is None else default


@dataclass
class TapeRecord:
    op: str
    func: Callable
    args: Tuple[Any, ...]
    kwargs: Dict[str, Any]
    output: torch.Tensor


class Tape(TorchFunctionMode):
    """Records every tensor-producing torch call made inside its context.

    The records are enough to re-run the forward program (`replay`) and to
    name the first operation that produced a non-finite value.
    """

    def __init__(self):
        super().__init__()
        self.records: List[TapeRecord] = []
        self.first_fault: Optional[str] = None

    def __torch_function__(self, func, types, args=(), kwargs=None):
        kwargs = kwargs or {}
        out = func(*args, **kwargs)
        op = getattr(func, "__name__", repr(func))
        if op in _UNRECORDED or not isinstance(out, torch.Tensor):
            return out
        self.records.append(TapeRecord(op, func, args, kwargs, out))
        if self.first_fault is None and out.is_floating_point() and not bool(torch.isfinite(out).all()):
            self.first_fault = op
            logger.debug(f"First non-finite value produced by {op}")
        return out

    @property
    def ops(self) -> List[str]:
        return [record.op for record in self.records]

    def replay(self) -> torch.Tensor:
        """Re-execute the recorded program from its recorded inputs and return the last output"""
        ensure(len(self.records) > 0, "cannot replay an empty tape")
        produced: Dict[int, torch.Tensor] = {}

        def substitute(value):
            if isinstance(value, torch.Tensor) and id(value) in produced:
                return produced[id(value)]
            return value

        out = None
        for record in self.records:
            out = record.func(*tree_map(substitute, record.args), **tree_map(substitute, record.kwargs))
            produced[id(record.output)] = out
        return out


def reachable_leaves(loss: torch.Tensor) -> List[torch.Tensor]:
    """Leaf nodes with requires_grad that the loss depends on, in graph-walk order"""
    leaves: List[torch.Tensor] = []
    seen_fns = set()
    seen_leaves = set()
    stack = [loss.grad_fn] if loss.grad_fn is not None else []
    if loss.grad_fn is None and loss.requires_grad:
        return [loss]
    while stack:
        fn = stack.pop()
        if fn is None or fn in seen_fns:
            continue
        seen_fns.add(fn)
        variable = getattr(fn, "variable", None)
        if variable is not None:
            if id(variable) not in seen_leaves:
                seen_leaves.add(id(variable))
                leaves.append(variable)
            continue
        stack.extend(next_fn for next_fn, _ in reversed(fn.next_functions))
    return leaves


def _fault_op(loss: torch.Tensor, tape: Optional[Tape]) -> str:
    if tape is not None and tape.first_fault:
        return tape.first_fault
    return type(loss.grad_fn).__name__ if loss.grad_fn is not None else "leaf"


def check_finite(value: torch.Tensor, tape: Optional[Tape] = None, what: str = "value") -> None:
    """Fail fast on NaN/inf, naming the first offending op when known"""
    if not bool(torch.isfinite(value).all()):
        raise NumericFault(f"non-finite {what}", op=_fault_op(value, tape))


def _gradients(loss: torch.Tensor, inputs: Optional[Iterable[torch.Tensor]], create_graph: bool,
               tape: Optional[Tape]) -> GradMap:
    ensure(isinstance(loss, torch.Tensor), "loss must be a tensor")
    ensure(loss.numel() == 1, f"backward requires a scalar loss, got shape {tuple(loss.shape)}")
    check_finite(loss, tape, "loss")

    result = GradMap()
    if not loss.requires_grad:
        return result

    nodes = list(inputs) if inputs is not None else reachable_leaves(loss)
    nodes = [node for node in nodes if node.requires_grad]
    if not nodes:
        return result

    grads = torch.autograd.grad(loss.reshape(()), nodes, retain_graph=True,
                                create_graph=create_graph, allow_unused=True)
    for node, grad in zip(nodes, grads):
        if grad is None:
            continue
        if not bool(torch.isfinite(grad).all()):
            raise NumericFault("non-finite gradient", op=_fault_op(loss, tape))
        result._set(node, grad)
    return result


def backward(loss: torch.Tensor, inputs: Optional[Iterable[torch.Tensor]] = None,
             tape: Optional[Tape] = None) -> GradMap:
    """Exact reverse-mode gradients of a scalar loss; the graph stays intact for reuse"""
    return _gradients(loss, inputs, create_graph=False, tape=tape)


def backward_differentiable(loss: torch.Tensor, inputs: Optional[Iterable[torch.Tensor]] = None,
                            tape: Optional[Tape] = None) -> GradMap:
    """Like backward, but the returned gradients are themselves differentiable"""
    return _gradients(loss, inputs, create_graph=True, tape=tape)


def detach(node: torch.Tensor) -> torch.Tensor:
    return node.detach()


def huber(pred: torch.Tensor, target: torch.Tensor, delta: float = 1.0) -> torch.Tensor:
    """Mean over elements of 0.5 r^2 for |r| <= delta, delta (|r| - 0.5 delta) otherwise"""
    ensure(pred.shape == target.shape, f"huber shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    ensure(delta > 0, "huber delta must be positive")
    return F.huber_loss(pred, target, reduction="mean", delta=delta)


def huber_rows(pred: torch.Tensor, target: torch.Tensor, delta: float = 1.0) -> torch.Tensor:
    """Huber loss reduced over the trailing dimension only, one value per leading row"""
    ensure(pred.shape == target.shape, f"huber shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    ensure(delta > 0, "huber delta must be positive")
    return F.huber_loss(pred, target, reduction="none", delta=delta).mean(dim=-1)


def mse(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    ensure(pred.shape == target.shape, f"mse shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    return F.mse_loss(pred, target, reduction="mean")


def finite_difference_grad(fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor,
                           step: float = 1e-5) -> torch.Tensor:
    """Central-difference gradient of a scalar function at x"""
    base = x.detach().clone()
    grad = torch.zeros_like(base)
    flat_base = base.view(-1)
    flat_grad = grad.view(-1)
    for i in range(flat_base.numel()):
        original = flat_base[i].item()
        flat_base[i] = original + step
        upper = float(fn(base))
        flat_base[i] = original - step
        lower = float(fn(base))
        flat_base[i] = original
        flat_grad[i] = (upper - lower) / (2 * step)
    return grad


def max_relative_error(actual: torch.Tensor, expected: torch.Tensor, floor: float = 1e-3) -> float:
    """Largest elementwise |a - e| / max(|a|, |e|, floor); entries smaller than floor count absolutely"""
    scale = torch.clamp(torch.maximum(actual.abs(), expected.abs()), min=floor)
    return float(((actual - expected).abs() / scale).max()) if actual.numel() else 0.0
