"""Minimal tape-based reverse-mode differentiation for volumetric conv nets.

Values are plain numpy arrays of shape ``(C, nx, ny, nz)``.  Every primitive
records a vector-Jacobian product closure on the tape; ``Tape.backward``
replays them in exact reverse recording order (which is a topological order
by construction).
"""
from __future__ import annotations

import weakref
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Var:
    __slots__ = ("_tape", "id", "value")

    def __init__(self, tape: "Tape", id: int, value: np.ndarray):
        # weak, so a dropped tape (and its saved activations) is freed immediately
        self._tape = weakref.ref(tape)
        self.id = id
        self.value = value

    @property
    def tape(self) -> "Tape":
        return self._tape()

    @property
    def shape(self):
        return self.value.shape


class Tape:
    def __init__(self):
        self._ops: list[tuple[int, tuple[int, ...], Callable]] = []
        self._count = 0
        self.leaves: dict[str, Var] = {}
        # sign patterns of every leaky-ReLU input, in recording order
        self.relu_masks: list[np.ndarray] = []
        self.output: Var | None = None

    def _new(self, value) -> Var:
        v = Var(self, self._count, value)
        self._count += 1
        return v

    def leaf(self, value: np.ndarray, name: str | None = None) -> Var:
        v = self._new(value)
        if name is not None:
            self.leaves[name] = v
        return v

    def record(self, value, parents: Sequence[Var], vjp: Callable) -> Var:
        out = self._new(value)
        self._ops.append((out.id, tuple(p.id for p in parents), vjp))
        return out

    def backward(self, out: Var, grad: np.ndarray) -> dict[int, np.ndarray]:
        """Propagate ``grad`` (d loss / d out) back; returns gradients keyed by node id."""
        if grad.shape != out.value.shape:
            raise ValueError(f"gradient shape {grad.shape} != output shape {out.value.shape}")
        grads: dict[int, np.ndarray] = {out.id: grad}
        for oid, pids, vjp in reversed(self._ops):
            g = grads.pop(oid, None)
            if g is None:
                continue
            for pid, pg in zip(pids, vjp(g)):
                if pg is None:
                    continue
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg
        return grads


# -- convolution kernels -------------------------------------------------------------------

def im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(C, n1, n2, n3) -> (C*k^3, n1*n2*n3) patches under zero 'same' padding."""
    c = x.shape[0]
    if k == 1:
        return x.reshape(c, -1)
    p = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))
    return np.ascontiguousarray(win.transpose(0, 4, 5, 6, 1, 2, 3)).reshape(c * k ** 3, -1)


def conv3d_raw(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    cout, k = w.shape[0], w.shape[-1]
    y = w.reshape(cout, -1) @ im2col(x, k)
    if b is not None:
        y += b[:, None]
    return y.reshape((cout,) + x.shape[1:])


def conv3d(x: Var, w: Var, b: Var) -> Var:
    """Stride-1 3D cross-correlation with zero 'same' padding and odd cubic kernel."""
    W = w.value
    cout, cin, k = W.shape[0], W.shape[1], W.shape[-1]
    if W.shape[2:] != (k, k, k) or k % 2 == 0:
        raise ValueError(f"kernel must be odd and cubic, got {W.shape[2:]}")
    if x.value.shape[0] != cin:
        raise ValueError(f"conv expects {cin} input channels, got {x.value.shape[0]}")
    spatial = x.value.shape[1:]
    cols = im2col(x.value, k)
    y = (W.reshape(cout, -1) @ cols + b.value[:, None]).reshape((cout,) + spatial)

    def vjp(g):
        g2 = g.reshape(cout, -1)
        gw = (g2 @ cols.T).reshape(W.shape)
        gb = g2.sum(axis=1)
        # transpose of same-padded correlation = correlation with flipped, swapped kernel
        wt = np.ascontiguousarray(W.transpose(1, 0, 2, 3, 4)[:, :, ::-1, ::-1, ::-1])
        gx = conv3d_raw(g, wt)
        return gx, gw, gb

    return x.tape.record(y, (x, w, b), vjp)


def leaky_relu(x: Var, slope: float = 0.01) -> Var:
    pos = x.value > 0
    x.tape.relu_masks.append(pos)
    y = np.where(pos, x.value, slope * x.value)
    return x.tape.record(y, (x,), lambda g: (np.where(pos, g, slope * g),))


def _check_even(shape):
    if any(n % 2 for n in shape[1:]):
        raise ValueError(f"spatial dims must be even to pool, got {shape[1:]}")


def avg_pool2(x: Var) -> Var:
    v = x.value
    _check_even(v.shape)
    c, n1, n2, n3 = v.shape
    y = v.reshape(c, n1 // 2, 2, n2 // 2, 2, n3 // 2, 2).mean(axis=(2, 4, 6))

    def vjp(g):
        return (_repeat2(g) / 8.0,)

    return x.tape.record(y, (x,), vjp)


def _repeat2(v: np.ndarray) -> np.ndarray:
    return v.repeat(2, axis=1).repeat(2, axis=2).repeat(2, axis=3)


def upsample2(x: Var) -> Var:
    """Nearest-neighbour upsampling by 2 along every spatial axis."""
    c, n1, n2, n3 = x.value.shape

    def vjp(g):
        return (g.reshape(c, n1, 2, n2, 2, n3, 2).sum(axis=(2, 4, 6)),)

    return x.tape.record(_repeat2(x.value), (x,), vjp)


def concat(xs: Sequence[Var]) -> Var:
    sizes = [x.value.shape[0] for x in xs]
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=0))

    return xs[0].tape.record(np.concatenate([x.value for x in xs], axis=0), tuple(xs), vjp)
