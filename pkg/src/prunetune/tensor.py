"""Reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Graph` records primitive operations in execution order, so node
order is always a valid topological order and the backward pass is a single
reverse sweep. Models are written as *build functions*::

    def build(g, inputs):
        w = g.param("w")
        return {"loss": g.sum(g.mul(w, w))}

and evaluated with :func:`forward`, :func:`backward` or
:func:`value_and_grad`. Every primitive checks its output for NaN/Inf and
fails fast with the offending node's name.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .errors import ContractError, NumericOverflowError, ShapeError

__all__ = [
    "Graph",
    "Node",
    "forward",
    "backward",
    "value_and_grad",
    "grad_check",
]

DTYPE = np.float64


class Node:
    """One recorded value in a :class:`Graph`."""

    __slots__ = ("index", "op", "name", "value", "parents", "backward_fn")

    def __init__(self, index, op, name, value, parents, backward_fn):
        self.index = index
        self.op = op
        self.name = name
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.name!r}, shape={self.value.shape})"


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Graph:
    """Define-by-run computation graph.

    Args:
        params: Mapping from parameter name to float64 array. Parameters are
            bound lazily through :meth:`param`.
        mask: Optional mapping from parameter name to a boolean array. A
            masked parameter reads as zero wherever the mask is False, and
            its gradient is zeroed at the same positions.
        check_finite: Raise :class:`NumericOverflowError` as soon as any node
            produces a non-finite value.
    """

    def __init__(self, params: Mapping[str, np.ndarray] | None = None, mask=None,
                 check_finite: bool = True):
        self.params = params if params is not None else {}
        self.mask = mask
        self.check_finite = check_finite
        self.nodes: list[Node] = []
        self.bindings: dict[int, str] = {}
        self._bound: dict[str, Node] = {}

    # -- recording ---------------------------------------------------------

    def _record(self, op, value, parents=(), backward_fn=None, name=None):
        index = len(self.nodes)
        label = name or f"{op}#{index}"
        if self.check_finite and not np.isfinite(value).all():
            raise NumericOverflowError(label)
        node = Node(index, op, label, value, tuple(parents), backward_fn)
        self.nodes.append(node)
        return node

    def _label(self, op, name):
        return name or f"{op}#{len(self.nodes)}"

    # -- leaves ------------------------------------------------------------

    def param(self, name: str) -> Node:
        """Bind the parameter ``name`` (once per graph) and return its node."""
        node = self._bound.get(name)
        if node is not None:
            return node
        if name not in self.params:
            raise ContractError(f"unknown parameter {name!r}")
        value = self.params[name]
        if self.mask is not None and name in self.mask:
            m = self.mask[name]
            if m.shape != value.shape:
                raise ShapeError(
                    f"mask shape {m.shape} != parameter shape {value.shape}", name
                )
            value = np.where(m, value, 0.0)
        node = self._record("param", value, name=name)
        self.bindings[node.index] = name
        self._bound[name] = node
        return node

    def constant(self, value, name=None) -> Node:
        return self._record("constant", np.asarray(value, dtype=DTYPE), name=name)

    # -- primitives --------------------------------------------------------

    def matmul(self, a: Node, b: Node, name=None) -> Node:
        av, bv = a.value, b.value
        if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
            raise ShapeError(
                f"matmul shapes {av.shape} and {bv.shape} do not align",
                self._label("matmul", name),
            )
        if bv.ndim == 2:
            k, n = bv.shape
            a2 = av.reshape(-1, k)
            out = (a2 @ bv).reshape(av.shape[:-1] + (n,))

            def backward_fn(g):
                g2 = g.reshape(-1, n)
                return (g2 @ bv.T).reshape(av.shape), a2.T @ g2

        else:
            out = np.matmul(av, bv)

            def backward_fn(g):
                ga = _unbroadcast(np.matmul(g, np.swapaxes(bv, -1, -2)), av.shape)
                gb = _unbroadcast(np.matmul(np.swapaxes(av, -1, -2), g), bv.shape)
                return ga, gb

        return self._record("matmul", out, (a, b), backward_fn, name)

    def _check_broadcast(self, op, a, b, name):
        try:
            return np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise ShapeError(
                f"{op} shapes {a.shape} and {b.shape} do not broadcast",
                self._label(op, name),
            ) from None

    def add(self, a: Node, b: Node, name=None) -> Node:
        self._check_broadcast("add", a, b, name)
        sa, sb = a.shape, b.shape

        def backward_fn(g):
            return _unbroadcast(g, sa), _unbroadcast(g, sb)

        return self._record("add", a.value + b.value, (a, b), backward_fn, name)

    def sub(self, a: Node, b: Node, name=None) -> Node:
        self._check_broadcast("sub", a, b, name)
        sa, sb = a.shape, b.shape

        def backward_fn(g):
            return _unbroadcast(g, sa), _unbroadcast(-g, sb)

        return self._record("sub", a.value - b.value, (a, b), backward_fn, name)

    def mul(self, a: Node, b: Node, name=None) -> Node:
        self._check_broadcast("mul", a, b, name)
        av, bv = a.value, b.value

        def backward_fn(g):
            return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

        return self._record("mul", av * bv, (a, b), backward_fn, name)

    def scale(self, a: Node, factor: float, name=None) -> Node:
        factor = float(factor)

        def backward_fn(g):
            return (g * factor,)

        return self._record("scale", a.value * factor, (a,), backward_fn, name)

    def relu(self, a: Node, name=None) -> Node:
        active = a.value > 0

        def backward_fn(g):
            return (np.where(active, g, 0.0),)

        return self._record("relu", np.where(active, a.value, 0.0), (a,), backward_fn, name)

    def softmax(self, a: Node, name=None) -> Node:
        """Softmax over the last axis."""
        z = a.value - a.value.max(axis=-1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=-1, keepdims=True)

        def backward_fn(g):
            return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

        return self._record("softmax", y, (a,), backward_fn, name)

    def layer_norm(self, x: Node, gain: Node, bias: Node, eps: float = 1e-5,
                   name=None) -> Node:
        """Normalize over the last axis, then apply ``gain`` and ``bias``."""
        d = x.shape[-1]
        if gain.shape != (d,) or bias.shape != (d,):
            raise ShapeError(
                f"layer-norm gain/bias {gain.shape}/{bias.shape} vs width {d}",
                self._label("layer_norm", name),
            )
        mu = x.value.mean(axis=-1, keepdims=True)
        xc = x.value - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
        xhat = xc * inv
        gv = gain.value
        out = xhat * gv + bias.value

        def backward_fn(g):
            lead = tuple(range(g.ndim - 1))
            ggain = (g * xhat).sum(axis=lead)
            gbias = g.sum(axis=lead)
            gx_hat = g * gv
            gx = inv * (
                gx_hat
                - gx_hat.mean(axis=-1, keepdims=True)
                - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
            )
            return gx, ggain, gbias

        return self._record("layer_norm", out, (x, gain, bias), backward_fn, name)

    def embedding(self, table: Node, ids, name=None) -> Node:
        """Gather rows of ``table`` at integer ``ids`` (any shape)."""
        ids = np.asarray(ids)
        vocab = table.shape[0]
        if ids.size and (ids.min() < 0 or ids.max() >= vocab):
            raise ContractError(
                f"token id out of range [0, {vocab}) at node "
                f"{self._label('embedding', name)!r}"
            )
        shape = table.shape

        def backward_fn(g):
            gt = np.zeros(shape, dtype=DTYPE)
            np.add.at(gt, ids.reshape(-1), g.reshape(-1, shape[1]))
            return (gt,)

        return self._record("embedding", table.value[ids], (table,), backward_fn, name)

    def reshape(self, a: Node, shape, name=None) -> Node:
        src = a.shape
        try:
            out = a.value.reshape(shape)
        except ValueError:
            raise ShapeError(
                f"cannot reshape {src} to {tuple(shape)}", self._label("reshape", name)
            ) from None

        def backward_fn(g):
            return (g.reshape(src),)

        return self._record("reshape", out, (a,), backward_fn, name)

    def transpose(self, a: Node, axes, name=None) -> Node:
        axes = tuple(axes)
        inverse = tuple(np.argsort(axes))

        def backward_fn(g):
            return (np.transpose(g, inverse),)

        return self._record("transpose", np.transpose(a.value, axes), (a,), backward_fn, name)

    def concat(self, nodes, axis=-1, name=None) -> Node:
        try:
            out = np.concatenate([n.value for n in nodes], axis=axis)
        except ValueError:
            raise ShapeError(
                "concat operands disagree: " + ", ".join(str(n.shape) for n in nodes),
                self._label("concat", name),
            ) from None
        splits = np.cumsum([n.shape[axis] for n in nodes])[:-1]

        def backward_fn(g):
            return tuple(np.split(g, splits, axis=axis))

        return self._record("concat", out, tuple(nodes), backward_fn, name)

    def sum(self, a: Node, name=None) -> Node:
        shape = a.shape

        def backward_fn(g):
            return (np.broadcast_to(g, shape).copy(),)

        return self._record("sum", np.asarray(a.value.sum()), (a,), backward_fn, name)

    def cross_entropy(self, logits: Node, targets, weights=None, smoothing: float = 0.0,
                      name=None) -> Node:
        """Weighted mean token negative log-likelihood.

        ``logits`` has shape ``(N, V)``; ``targets`` holds ``N`` class ids and
        ``weights`` (default ones) selects which rows count. With
        ``smoothing`` > 0 the target distribution is mixed with uniform.
        """
        label = self._label("cross_entropy", name)
        lv = logits.value
        targets = np.asarray(targets).reshape(-1)
        if lv.ndim != 2 or lv.shape[0] != targets.shape[0]:
            raise ShapeError(f"logits {lv.shape} vs targets {targets.shape}", label)
        n, v = lv.shape
        if n and (targets.min() < 0 or targets.max() >= v):
            raise ContractError(f"target id out of range [0, {v}) at node {label!r}")
        w = np.ones(n, dtype=DTYPE) if weights is None else np.asarray(weights, DTYPE)
        total = w.sum()
        if total <= 0:
            raise ContractError(f"no weighted tokens at node {label!r}")
        z = lv - lv.max(axis=-1, keepdims=True)
        logz = np.log(np.exp(z).sum(axis=-1, keepdims=True))
        logp = z - logz
        nll = -logp[np.arange(n), targets]
        if smoothing:
            nll = (1.0 - smoothing) * nll - smoothing * logp.mean(axis=-1)
        loss = np.asarray((w * nll).sum() / total)

        def backward_fn(g):
            p = np.exp(logp)
            target_dist = np.zeros_like(p)
            target_dist[np.arange(n), targets] = 1.0
            if smoothing:
                target_dist = (1.0 - smoothing) * target_dist + smoothing / v
            return ((p - target_dist) * (w / total)[:, None] * g,)

        return self._record("cross_entropy", loss, (logits,), backward_fn, name)

    def kl_divergence(self, logits: Node, target_probs, weights=None, name=None) -> Node:
        """Weighted mean over rows of KL(target_probs || softmax(logits))."""
        label = self._label("kl_divergence", name)
        lv = logits.value
        p = np.asarray(target_probs, dtype=DTYPE)
        if p.shape != lv.shape or lv.ndim != 2:
            raise ShapeError(f"logits {lv.shape} vs target distribution {p.shape}", label)
        n = lv.shape[0]
        w = np.ones(n, dtype=DTYPE) if weights is None else np.asarray(weights, DTYPE)
        total = w.sum()
        if total <= 0:
            raise ContractError(f"no weighted tokens at node {label!r}")
        z = lv - lv.max(axis=-1, keepdims=True)
        logq = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        with np.errstate(divide="ignore"):
            logp = np.where(p > 0, np.log(np.where(p > 0, p, 1.0)), 0.0)
        rows = (p * (logp - logq)).sum(axis=-1)
        loss = np.asarray((w * rows).sum() / total)

        def backward_fn(g):
            return ((np.exp(logq) - p) * (w / total)[:, None] * g,)

        return self._record("kl_divergence", loss, (logits,), backward_fn, name)

    # -- differentiation ---------------------------------------------------

    def gradients(self, loss: Node) -> dict[str, np.ndarray]:
        """Gradients of scalar ``loss`` for every parameter in ``self.params``.

        Parameters that were never bound get zero tensors.
        """
        if loss.value.size != 1:
            raise ContractError(
                f"loss node {loss.name!r} is not scalar (shape {loss.shape})"
            )
        grads: list = [None] * (loss.index + 1)
        grads[loss.index] = np.ones_like(loss.value)
        for node in reversed(self.nodes[: loss.index + 1]):
            g = grads[node.index]
            if g is None or node.backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None:
                    continue
                if grads[parent.index] is None:
                    grads[parent.index] = pg
                else:
                    grads[parent.index] = grads[parent.index] + pg
        out = {name: np.zeros_like(value, dtype=DTYPE) for name, value in self.params.items()}
        for index, name in self.bindings.items():
            if index <= loss.index and grads[index] is not None:
                g = np.asarray(grads[index], dtype=DTYPE)
                if self.mask is not None and name in self.mask:
                    g = np.where(self.mask[name], g, 0.0)
                out[name] = g
        return out


BuildFn = Callable[[Graph, Mapping], Mapping[str, Node]]


def _run(build, params, inputs, mask):
    graph = Graph(params, mask)
    outputs = build(graph, inputs)
    return graph, outputs


def forward(build: BuildFn, params, inputs=None, outputs=None, mask=None) -> dict:
    """Evaluate ``build`` and return the requested output arrays.

    Args:
        build: Graph build function ``(graph, inputs) -> {name: Node}``.
        params: Parameter mapping.
        inputs: Passed through to ``build``.
        outputs: Names to return; all outputs by default.
        mask: Optional parameter mask (see :class:`Graph`).
    """
    _, nodes = _run(build, params, inputs or {}, mask)
    names = list(nodes) if outputs is None else list(outputs)
    missing = [n for n in names if n not in nodes]
    if missing:
        raise ContractError(f"graph has no outputs named {missing}")
    return {n: nodes[n].value for n in names}


def value_and_grad(build: BuildFn, params, inputs=None, loss="loss", mask=None):
    """Return ``(outputs, grads)`` from one forward and one backward sweep."""
    graph, nodes = _run(build, params, inputs or {}, mask)
    if loss not in nodes:
        raise ContractError(f"graph has no output named {loss!r}")
    grads = graph.gradients(nodes[loss])
    return {n: node.value for n, node in nodes.items()}, grads


def backward(build: BuildFn, params, inputs=None, loss="loss", mask=None) -> dict:
    """Gradients of the scalar output ``loss`` w.r.t. every parameter."""
    return value_and_grad(build, params, inputs, loss, mask)[1]


def _relu_signs(graph):
    return [n.parents[0].value > 0 for n in graph.nodes if n.op == "relu"]


def grad_check(build: BuildFn, params, inputs=None, loss="loss", probe_count=20,
               step_size=1e-5, seed=0, mask=None, names=None, floor=1e-8,
               stencil=2, skip_kinks=False, details=None) -> float:
    """Compare analytic gradients with central differences.

    Samples ``probe_count`` coordinates uniformly (seeded) over all
    parameter elements (optionally restricted to ``names``) and returns the
    worst relative error ``|a - n| / max(|a|, |n|, floor)``.

    ``stencil=2`` is the usual ``(f(x+h) - f(x-h)) / 2h``; ``stencil=4`` uses
    the fourth-order central formula, whose smaller truncation error allows
    a larger ``step_size`` and so less cancellation error.

    With ``skip_kinks`` a coordinate whose stencil flips the sign of any
    ReLU input is discarded and another one is drawn: the loss has a kink
    inside the stencil there, so the difference quotient is not a
    derivative estimate. ``details`` (a dict), when given, receives the
    ``checked`` and ``skipped`` counts.
    """
    if probe_count < 1:
        raise ContractError("probe_count must be >= 1")
    if stencil not in (2, 4):
        raise ContractError("stencil must be 2 or 4")
    names = list(params) if names is None else list(names)
    graph, nodes = _run(build, params, inputs or {}, mask)
    if loss not in nodes:
        raise ContractError(f"graph has no output named {loss!r}")
    analytic = graph.gradients(nodes[loss])
    base_signs = _relu_signs(graph) if skip_kinks else None
    sizes = np.array([np.asarray(params[n]).size for n in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rng = np.random.default_rng(seed)
    probes = list(rng.integers(0, offsets[-1], size=probe_count))
    work = {n: np.array(v, dtype=DTYPE, copy=True) for n, v in params.items()}
    kinked = False

    def loss_at(view, local, value):
        nonlocal kinked
        view[local] = value
        g, out = _run(build, work, inputs or {}, mask)
        if skip_kinks and not kinked:
            kinked = any(not np.array_equal(a, b) for a, b in zip(_relu_signs(g), base_signs))
        return float(out[loss].value)

    worst, checked, skipped = 0.0, 0, 0
    while checked < probe_count:
        if not probes:
            if skipped > 20 * probe_count:
                raise ContractError(f"{skipped} probes straddled ReLU kinks; reduce step_size")
            probes.append(int(rng.integers(0, offsets[-1])))
        flat = probes.pop(0)
        t = int(np.searchsorted(offsets, flat, side="right") - 1)
        name, local = names[t], int(flat - offsets[t])
        view = work[name].reshape(-1)
        x, h = view[local], step_size
        kinked = False
        numeric = (loss_at(view, local, x + h) - loss_at(view, local, x - h)) / (2.0 * h)
        if stencil == 4:
            wide = (loss_at(view, local, x + 2 * h) - loss_at(view, local, x - 2 * h)) / (4.0 * h)
            numeric = (4.0 * numeric - wide) / 3.0
        view[local] = x
        if kinked:
            skipped += 1
            continue
        checked += 1
        a = float(analytic[name].reshape(-1)[local])
        err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        worst = max(worst, err)
    if details is not None:
        details.update(checked=checked, skipped=skipped)
    return worst
