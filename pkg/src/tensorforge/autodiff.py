"""Unit graph with router-style reverse-mode differentiation.

During a forward pass every tensor handed to a unit registers that unit as a
consumer, which solves the graph edges on the fly. Backward walks the nodes in
reverse creation order; each tensor's :class:`GradSlot` collects one
contribution per registered edge, sums them in registration order and only
then feeds the producer.

A pass belongs to the unit whose ``forward`` was called with no pass active
(the root). Nested module calls inline their units into the root's pass.
"""

from __future__ import annotations

import itertools
import threading
from collections import OrderedDict
from typing import Iterable

import numpy as np

from .errors import GraphError, ShapeError, StateError
from .tensor import Engine, Tensor

_local = threading.local()
_pass_ids = itertools.count(1)

EXTERNAL = -1
IN_PLACE = "in_place"
COPY = "copy"


def _current_pass() -> "GraphPass | None":
    return getattr(_local, "active", None)


def as_tensor_list(xs) -> list[Tensor]:
    out = []
    for x in xs:
        if isinstance(x, Tensor):
            out.append(x)
        elif isinstance(x, (list, tuple)):
            out.extend(as_tensor_list(x))
        else:
            raise TypeError(f"expected Tensor or sequence of Tensors, got {type(x).__name__}")
    return out


class GradSlot:
    __slots__ = ("expected", "received", "parts")

    def __init__(self):
        self.expected = 0
        self.received = 0
        self.parts: dict[int, Tensor | None] = {}


class Node:
    """One invocation of a leaf unit inside a pass."""

    __slots__ = ("pass_", "unit", "index", "inputs", "edges", "outputs", "saved", "aux",
                 "ctx", "done")

    def __init__(self, pass_, unit, index):
        self.pass_ = pass_
        self.unit = unit
        self.index = index
        self.inputs: list[Tensor] = []
        self.edges: list[int] = []
        self.outputs: list[Tensor] = []
        self.saved: list[Tensor] = []
        self.aux: list[Tensor] = []
        self.ctx: dict = {}
        self.done = False

    def save(self, *tensors: Tensor) -> None:
        """Keep tensors for backward. Tensors created by this node go through :meth:`keep`."""
        for t in tensors:
            self.saved.append(t)
            self.pass_._savers[id(t)] = self.pass_._savers.get(id(t), 0) + 1

    def keep(self, *tensors: Tensor) -> None:
        """Node-private tensors (statistics, indices) released right after this node's backward."""
        for t in tensors:
            self.pass_.own(t)
            self.aux.append(t)


class GraphPass:
    def __init__(self, root: "Unit", inputs: list[Tensor], engine: Engine | None,
                 hint: "GraphPass | None" = None):
        self.id = next(_pass_ids)
        self.root = root
        self.engine = engine
        self.inputs = inputs
        self.outputs: list[Tensor] = []
        self.nodes: list[Node] = []
        self.state = "forwarding"
        self.mutations: list[str] = []
        self.release_eagerly = True
        self._slots: dict[int, GradSlot] = {}
        self._savers: dict[int, int] = {}
        self._owned: list[Tensor] = []
        self._owned_ids: set[int] = set()
        self._refs: dict[int, int] = {}
        self._output_ids: set[int] = set()
        self._external: set[int] = set()
        # structural fingerprint of the node sequence and per-node output fan-out, used by the
        # next pass of the same root to decide in-place execution before edges are known
        self.prefix: list[int] = []
        self.fanout: list[list[int]] = []
        self._hint_prefix = hint.prefix if hint is not None else []
        self._hint_fanout = hint.fanout if hint is not None else []

    # -- forward bookkeeping ----------------------------------------------------
    def own(self, t: Tensor) -> None:
        if id(t) not in self._owned_ids:
            self._owned_ids.add(id(t))
            self._owned.append(t)

    def slot(self, t: Tensor) -> GradSlot:
        s = self._slots.get(id(t))
        if s is None:
            s = self._slots[id(t)] = GradSlot()
        return s

    def consumers(self, t: Tensor) -> int:
        s = self._slots.get(id(t))
        return 0 if s is None else s.expected

    def _register(self, t: Tensor, node: Node) -> int:
        if not t.alive:
            raise GraphError("input tensor was released by an earlier pass (recycled or deleted)")
        if t.overwritten:
            raise GraphError(
                "input tensor was overwritten in place by its sole consumer; "
                "disable in-place execution for that unit to reuse the tensor")
        p = t.producer
        if p is not None and p.pass_ is not self:
            other = p.pass_
            if other.state == "recycled":
                raise GraphError("input tensor belongs to a recycled pass")
            if other.state == "forwarded":
                other.mutations.append(
                    f"unit {node.unit.name or type(node.unit).__name__} consumed an output "
                    f"of the finished pass {other.id}")
        s = self.slot(t)
        s.expected += 1
        return s.expected - 1

    def add_node(self, unit: "Unit", inputs: list[Tensor]) -> Node:
        if self.state != "forwarding":
            raise GraphError(f"cannot add units to a pass in state {self.state}")
        node = Node(self, unit, len(self.nodes))
        node.inputs = inputs
        node.edges = [self._register(t, node) for t in inputs]
        self.nodes.append(node)
        prev = self.prefix[-1] if self.prefix else 0
        self.prefix.append(hash((prev, type(unit).__qualname__, unit.name, len(inputs))))
        return node

    def predicted_consumers(self, t: Tensor) -> int | None:
        """Consumer count of ``t`` in the previous pass, if the graph so far is identical."""
        p = t.producer
        if p is None or p.pass_ is not self:
            return None
        i = p.index
        if i >= len(self._hint_prefix) or self._hint_prefix[i] != self.prefix[i]:
            return None
        try:
            return self._hint_fanout[i][p.outputs.index(t)]
        except (IndexError, ValueError):
            return None

    def seal(self, outputs: list[Tensor]) -> None:
        self.outputs = outputs
        for o in outputs:
            s = self.slot(o)
            s.expected += 1
            self._output_ids.add(id(o))
        self.fanout = [[self.consumers(o) for o in n.outputs] for n in self.nodes]
        self.state = "forwarded"

    # -- backward ---------------------------------------------------------------
    def mutable(self, t: Tensor) -> bool:
        """True when ``t`` is a pass-owned gradient referenced exactly once."""
        return id(t) in self._owned_ids and self._refs.get(id(t), 0) == 1

    def _hold(self, t: Tensor) -> None:
        self._refs[id(t)] = self._refs.get(id(t), 0) + 1

    def _drop(self, t: Tensor) -> None:
        k = id(t)
        n = self._refs.get(k, 0) - 1
        self._refs[k] = n
        if n <= 0 and k in self._owned_ids and k not in self._output_ids and t.alive:
            t.delete()

    def _contribute(self, t: Tensor, edge: int, g: Tensor | None) -> None:
        s = self.slot(t)
        if edge in s.parts:
            raise GraphError("gradient delivered twice along one edge")
        if g is not None:
            if g.shape != t.shape:
                raise ShapeError(f"gradient shape {g.shape} != tensor shape {t.shape}")
            if id(g) not in self._owned_ids and id(g) not in self._external:
                self.own(g)
            self._hold(g)
        s.parts[edge] = g
        s.received += 1

    def _collect(self, t: Tensor) -> Tensor | None:
        s = self._slots.get(id(t))
        if s is None:
            return None
        if s.received != s.expected:
            raise GraphError(
                f"gradient slot incomplete: received {s.received} of {s.expected} contributions")
        # EXTERNAL (-1) sorts first, then consumer edges in registration order
        parts = [s.parts[e] for e in sorted(s.parts) if s.parts[e] is not None]
        s.parts = {}
        if not parts:
            return None
        eg = parts[0].engine
        acc = parts[0]
        for p in parts[1:]:
            if self.mutable(acc):
                eg.add(acc, p, out=acc)
            else:
                new = eg.add(acc, p)
                self.own(new)
                self._hold(new)
                self._drop(acc)
                acc = new
            self._drop(p)
        return acc

    def backward(self, grads: list[Tensor]) -> list[Tensor | None]:
        if self.state != "forwarded":
            raise GraphError(f"backward needs a completed forward pass (state is {self.state})")
        if self.mutations:
            raise GraphError("computational graph changed since forward: " + "; ".join(self.mutations))
        if len(grads) != len(self.outputs):
            raise ShapeError(f"backward got {len(grads)} gradients for {len(self.outputs)} outputs")
        for node in self.nodes:
            for t in node.saved + node.aux:
                if not t.alive:
                    raise GraphError(
                        f"a tensor saved by {node.unit.name or type(node.unit).__name__} "
                        "was deleted before backward")
        self._external = {id(g) for g in grads}
        self.state = "backwarding"
        try:
            for out, g in zip(self.outputs, grads):
                if g.shape != out.shape:
                    raise ShapeError(f"output gradient shape {g.shape} != output shape {out.shape}")
                self._contribute(out, EXTERNAL, g)
            for node in reversed(self.nodes):
                self._backward_node(node)
            input_grads = []
            for x in self.inputs:
                g = self._collect(x)
                if g is not None and id(g) in self._owned_ids:
                    self._output_ids.add(id(g))
                input_grads.append(g)
        finally:
            self.state = "backwarded"
            self._external = set()
        return input_grads

    def _backward_node(self, node: Node) -> None:
        dys = [self._collect(o) for o in node.outputs]
        if all(d is None for d in dys):
            dxs = [None] * len(node.inputs)
        else:
            eg = node.unit.engine
            for i, d in enumerate(dys):
                if d is None:
                    z = eg.zeros(node.outputs[i].shape)
                    self.own(z)
                    self._hold(z)
                    dys[i] = z
            dxs = node.unit._backward(node, *dys)
            if len(dxs) != len(node.inputs):
                raise GraphError(f"{type(node.unit).__name__} returned {len(dxs)} gradients "
                                 f"for {len(node.inputs)} inputs")
        for x, edge, g in zip(node.inputs, node.edges, dxs):
            self._contribute(x, edge, g)
        for d in dys:
            if d is not None:
                self._drop(d)
        node.done = True
        for t in node.saved:
            self._savers[id(t)] -= 1
        if self.release_eagerly:
            for t in node.aux:
                if t.alive:
                    t.delete()
            for o in node.outputs:
                if (o.alive and self._savers.get(id(o), 0) == 0 and id(o) not in self._output_ids
                        and self._refs.get(id(o), 0) == 0):
                    o.delete()
            for t in node.saved:
                p = t.producer
                if (t.alive and self._savers[id(t)] == 0 and p is not None and p.pass_ is self
                        and p.done and id(t) not in self._output_ids
                        and self._refs.get(id(t), 0) == 0):
                    t.delete()

    # -- recycling --------------------------------------------------------------
    def recycle(self) -> int:
        if self.state == "backwarding":
            raise GraphError("cannot recycle while backward is running")
        if self.state == "recycled":
            return 0
        freed = 0
        for t in self._owned:
            if t.alive:
                freed += t.delete()
        self._owned.clear()
        self._owned_ids.clear()
        self._refs.clear()
        for node in self.nodes:
            node.saved = []
            node.aux = []
        self.state = "recycled"
        return freed


class Unit:
    """A graph node type. Leaf units implement ``_forward``/``_backward``."""

    def __init__(self, name: str = ""):
        object.__setattr__(self, "_children", OrderedDict())
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        self.name = name
        self.engine: Engine | None = None
        self.training = True
        self._pass: GraphPass | None = None
        self.inplace = True

    def __setattr__(self, key, value):
        if "_children" not in self.__dict__:
            Unit.__init__(self)
        if isinstance(value, Unit):
            self._children[key] = value
        elif key in self._children and value is None:
            del self._children[key]
        object.__setattr__(self, key, value)

    # -- structure --------------------------------------------------------------
    def children(self) -> list[tuple[str, "Unit"]]:
        return list(self._children.items())

    def units(self, prefix: str = "") -> Iterable[tuple[str, "Unit"]]:
        yield prefix, self
        for k, u in self._children.items():
            yield from u.units(f"{prefix}.{k}" if prefix else k)

    def _declare_params(self, eg: Engine, rng_seed) -> None:
        """Leaf hook: allocate parameters/buffers via :meth:`add_param` / :meth:`add_buffer`."""

    def add_param(self, name: str, t: Tensor) -> Tensor:
        t.is_param = True
        t.requires_grad = True
        t.grad = t.engine.zeros(t.shape)
        self._params[name] = t
        return t

    def add_buffer(self, name: str, t: Tensor) -> Tensor:
        self._buffers[name] = t
        return t

    def init(self, eg: Engine, seed: int = 0) -> "Unit":
        """Bind every unit to ``eg`` and allocate parameters; seeds derive from ``seed``."""
        ss = np.random.SeedSequence(seed)
        all_units = list(self.units())
        children_seeds = ss.spawn(len(all_units))
        for (path, u), s in zip(all_units, children_seeds):
            for t in list(u._params.values()) + list(u._buffers.values()):
                if t.alive:
                    t.delete()
            u._params.clear()
            u._buffers.clear()
            u.engine = eg
            u.name = path
            u._declare_params(eg, s)
            for k, t in list(u._params.items()) + list(u._buffers.items()):
                t.name = f"{path}.{k}" if path else k
        return self

    def _require_engine(self):
        if self.engine is None:
            raise StateError(f"{type(self).__name__} used before init(engine)")

    def named_params(self) -> list[tuple[str, Tensor]]:
        self._require_engine()
        out = []
        for path, u in self.units():
            for k, t in u._params.items():
                out.append((f"{path}.{k}" if path else k, t))
        return out

    def params(self) -> list[Tensor]:
        return [t for _, t in self.named_params()]

    def collect_params(self) -> list[tuple[Tensor, Tensor]]:
        return [(t, t.grad) for t in self.params()]

    def named_state(self) -> list[tuple[str, Tensor]]:
        """Parameters and persistent buffers (running statistics), in declaration order."""
        self._require_engine()
        out = []
        for path, u in self.units():
            for k, t in list(u._params.items()) + list(u._buffers.items()):
                out.append((f"{path}.{k}" if path else k, t))
        return out

    def train(self) -> "Unit":
        for _, u in self.units():
            u.training = True
        return self

    def eval(self) -> "Unit":
        for _, u in self.units():
            u.training = False
        return self

    def set_inplace(self, flag: bool) -> "Unit":
        for _, u in self.units():
            u.inplace = flag
        return self

    # -- execution --------------------------------------------------------------
    def forward(self, *inputs) -> list[Tensor]:
        self._require_engine()
        xs = as_tensor_list(inputs)
        gp = _current_pass()
        if gp is not None:
            return self._run_forward(gp, xs)
        prev = self._pass
        if prev is not None and prev.state != "recycled":
            prev.recycle()
        hint = prev if prev is not None and prev.fanout else None
        gp = GraphPass(self, xs, self.engine, hint)
        self._pass = gp
        _local.active = gp
        try:
            outs = self._run_forward(gp, xs)
        except BaseException:
            gp.state = "forwarded"
            gp.mutations.append("forward raised")
            raise
        finally:
            _local.active = None
        gp.seal(outs)
        return outs

    def _run_forward(self, gp: GraphPass, xs: list[Tensor]) -> list[Tensor]:
        node = gp.add_node(self, xs)
        outs = as_tensor_list([self._forward(node, *xs)])
        for o in outs:
            if o in xs:
                raise GraphError(f"{type(self).__name__} returned its input; return an alias")
            o.producer = node
            gp.own(o)
        node.outputs = outs
        return outs

    def _forward(self, node: Node, *xs: Tensor):
        raise NotImplementedError

    def _backward(self, node: Node, *dys: Tensor) -> list[Tensor | None]:
        raise NotImplementedError

    def backward(self, *grads) -> list[Tensor | None]:
        """Backpropagate explicit output gradients; returns gradients for the pass inputs."""
        gp = self._pass
        if gp is None or gp.root is not self:
            raise GraphError(f"{type(self).__name__} has no forward pass of its own to backpropagate")
        return gp.backward(as_tensor_list(grads))

    def gc(self) -> int:
        """Release every intermediate of the latest pass; parameters and grads survive."""
        gp = self._pass
        return 0 if gp is None else gp.recycle()

    @property
    def graph(self) -> GraphPass | None:
        return self._pass

    def param_count(self) -> int:
        return sum(t.size for t in self.params())

    def __repr__(self):
        lines = [f"{type(self).__name__}({self.extra_repr()})"]
        for k, u in self._children.items():
            sub = repr(u).replace("\n", "\n  ")
            lines.append(f"  ({k}): {sub}")
        return "\n".join(lines)

    def extra_repr(self) -> str:
        return ""


class Module(Unit):
    """Composite unit: subclasses override ``__forward__`` and call inner units."""

    def __forward__(self, *xs: Tensor):
        raise NotImplementedError

    def _run_forward(self, gp: GraphPass, xs: list[Tensor]) -> list[Tensor]:
        return as_tensor_list([self.__forward__(*xs)])


def in_place_request(unit: Unit, t: Tensor) -> str:
    """Grant in-place execution only to the sole consumer of a non-parameter intermediate.

    Edges are discovered while the forward runs, so a later consumer of ``t`` is not yet known
    when the request arrives. The grant therefore also needs the previous pass of the same root
    to have had an identical node sequence up to ``t``'s producer with exactly one consumer of
    ``t``. The first pass always copies.
    """
    gp = _current_pass()
    if gp is None or not unit.inplace or unit.engine is None or not unit.engine.inplace:
        return COPY
    if t.is_param or gp.consumers(t) != 1 or gp.predicted_consumers(t) != 1:
        return COPY
    p = t.producer
    if p is None or p.pass_ is not gp or gp._savers.get(id(t), 0) > 0:
        return COPY
    return IN_PLACE


def alias(t: Tensor) -> Tensor:
    """A second tensor object over the same storage (for in-place outputs)."""
    return t.engine.alias(t)
