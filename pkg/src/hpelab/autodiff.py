"""Tape-based reverse-mode differentiation over numpy arrays.

Exactly the primitive set the surrogate forward pass and the discovery policy
need, nothing more. Values are float64 or complex128. The gradient of a real
scalar loss with respect to a complex tensor x follows the convention

    grad(x) = dL/dRe(x) + i * dL/dIm(x),

so for any complex-linear op y = A x the adjoint is conj(A)^T applied to the
cotangent; in particular the adjoint of the unnormalized forward DFT is the
unnormalized inverse DFT of the cotangent. Nonlinearities act componentwise
on real and imaginary parts.

Ops record onto the innermost active ``Tape``. With no tape active they are
plain numpy computations (evaluation mode). Recording order is execution
order, which is a valid topological order, so ``backward`` is a single
reverse sweep that visits each node once; gradients accumulate by summation
across fan-out. Replaying the same tape twice gives bitwise-identical
gradients because the sweep order and the accumulation order are fixed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

_TAPE_STACK: list["Tape"] = []


class Tensor:
    """Array value tracked by the active tape."""

    __slots__ = ("data", "requires_grad", "grad", "_tracked")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype.kind in "iub":
            arr = arr.astype(np.float64)
        elif arr.dtype == np.float32:
            arr = arr.astype(np.float64)
        elif arr.dtype == np.complex64:
            arr = arr.astype(np.complex128)
        elif arr.dtype not in (np.float64, np.complex128):
            raise TypeError(f"unsupported dtype {arr.dtype}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tracked = self.requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_complex(self) -> bool:
        return self.data.dtype == np.complex128

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, tracked={self._tracked})"

    # arithmetic sugar; scalars and arrays are wrapped as untracked constants
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __neg__(self):
        return neg(self)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Execution-ordered record of primitive applications.

    Context manager; tapes nest but ops record only onto the innermost one.
    ``backward(out)`` seeds d(out)/d(out) = 1 and replays the record in
    reverse, leaving gradients on every leaf with requires_grad=True.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, output: Tensor) -> None:
        if output.data.size != 1:
            raise ValueError("backward needs a scalar output")
        if output.is_complex:
            raise ValueError("backward needs a real scalar output")
        if not output._tracked:
            raise ValueError("output does not depend on any tracked tensor")
        grads: dict[int, np.ndarray] = {
            id(output): np.ones_like(output.data)
        }
        leaves: dict[int, Tensor] = {}
        if output.requires_grad:
            leaves[id(output)] = output
        for out, parents, backward_fn in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            contributions = backward_fn(g)
            for parent, gp in zip(parents, contributions):
                if gp is None or not parent._tracked:
                    continue
                key = id(parent)
                held = grads.get(key)
                grads[key] = gp if held is None else held + gp
                if parent.requires_grad:
                    leaves[key] = parent
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            if leaf.grad is None:
                leaf.grad = g.copy()
            else:
                leaf.grad = leaf.grad + g


def backward(output: Tensor) -> None:
    """Run the innermost active tape backwards from ``output``."""
    if not _TAPE_STACK:
        raise RuntimeError("no active tape")
    _TAPE_STACK[-1].backward(output)


def _record(out: Tensor, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    if _TAPE_STACK and any(p._tracked for p in parents):
        out._tracked = True
        _TAPE_STACK[-1]._records.append((out, parents, backward_fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum the cotangent down to ``shape`` (adjoint of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _match(g: np.ndarray, t: Tensor) -> np.ndarray:
    """Cast a cotangent to the parent's dtype (drop imag for real parents)."""
    if not t.is_complex and np.iscomplexobj(g):
        return g.real
    return g


# ----- arithmetic -----


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)

    def bwd(g):
        return _match(_unbroadcast(g, a.shape), a), _match(_unbroadcast(g, b.shape), b)

    return _record(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)

    def bwd(g):
        return _match(_unbroadcast(g, a.shape), a), _match(-_unbroadcast(g, b.shape), b)

    return _record(out, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    return _record(Tensor(-a.data), (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data

    def bwd(g):
        ga = _unbroadcast(g * np.conj(bd), a.shape)
        gb = _unbroadcast(g * np.conj(ad), b.shape)
        return _match(ga, a), _match(gb, b)

    return _record(out, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data / b.data)
    ad, bd = a.data, b.data

    def bwd(g):
        ga = _unbroadcast(g * np.conj(1.0 / bd), a.shape)
        gb = _unbroadcast(g * np.conj(-ad / bd**2), b.shape)
        return _match(ga, a), _match(gb, b)

    return _record(out, (a, b), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data @ b.data)
    ad, bd = a.data, b.data

    def bwd(g):
        ga = _unbroadcast(g @ np.conj(np.swapaxes(bd, -1, -2)), a.shape)
        gb = _unbroadcast(np.conj(np.swapaxes(ad, -1, -2)) @ g, b.shape)
        return _match(ga, a), _match(gb, b)

    return _record(out, (a, b), bwd)


# ----- reductions and shape -----


def tsum(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())

    def bwd(g):
        return (_match(np.broadcast_to(g, a.shape), a),)

    return _record(out, (a,), bwd)


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    out = Tensor(a.data.mean())

    def bwd(g):
        return (_match(np.broadcast_to(g / n, a.shape), a),)

    return _record(out, (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.shape
    out = Tensor(a.data.reshape(shape))

    def bwd(g):
        return (g.reshape(orig),)

    return _record(out, (a,), bwd)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = Tensor(a.data.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def bwd(g):
        return (g.transpose(inverse),)

    return _record(out, (a,), bwd)


def stack(tensors: list[Tensor], axis: int = 0) -> Tensor:
    out = Tensor(np.stack([t.data for t in tensors], axis=axis))

    def bwd(g):
        pieces = np.split(g, len(tensors), axis=axis)
        return tuple(
            _match(piece.reshape(t.shape), t) for piece, t in zip(pieces, tensors)
        )

    return _record(out, tuple(tensors), bwd)


def take_channel(a: Tensor, index: int, axis: int = 0) -> Tensor:
    out = Tensor(np.take(a.data, index, axis=axis))

    def bwd(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        sl = [slice(None)] * len(a.shape)
        sl[axis] = index
        full[tuple(sl)] = g
        return (_match(full, a),)

    return _record(out, (a,), bwd)


def periodic_shift(a: Tensor, shift: int, axis: int) -> Tensor:
    """np.roll as a primitive; the adjoint rolls the other way."""
    out = Tensor(np.roll(a.data, shift, axis=axis))

    def bwd(g):
        return (np.roll(g, -shift, axis=axis),)

    return _record(out, (a,), bwd)


def detach(a: Tensor) -> Tensor:
    """Constant copy: same value, no gradient path."""
    return Tensor(a.data.copy())


# ----- complex structure -----


def real(a: Tensor) -> Tensor:
    out = Tensor(a.data.real.copy() if a.is_complex else a.data)

    def bwd(g):
        return (g.astype(np.complex128) if a.is_complex else g,)

    return _record(out, (a,), bwd)


def imag(a: Tensor) -> Tensor:
    if not a.is_complex:
        raise TypeError("imag expects a complex tensor")
    out = Tensor(a.data.imag.copy())

    def bwd(g):
        return (1j * g,)

    return _record(out, (a,), bwd)


def complex_join(re: Tensor, im: Tensor) -> Tensor:
    if re.is_complex or im.is_complex:
        raise TypeError("complex_join expects real parts")
    out = Tensor(re.data + 1j * im.data)

    def bwd(g):
        return g.real.copy(), g.imag.copy()

    return _record(out, (re, im), bwd)


# ----- transforms -----


def dft2(a: Tensor, axes: tuple[int, int] = (0, 1)) -> Tensor:
    """Unnormalized forward DFT over ``axes``; adjoint is the unnormalized inverse."""
    out = Tensor(np.fft.fft2(a.data, axes=axes))
    n = a.shape[axes[0]] * a.shape[axes[1]]

    def bwd(g):
        return (_match(np.fft.ifft2(g, axes=axes) * n, a),)

    return _record(out, (a,), bwd)


def idft2(a: Tensor, axes: tuple[int, int] = (0, 1)) -> Tensor:
    """Normalized (1/N) inverse DFT; adjoint is the forward transform over N."""
    out = Tensor(np.fft.ifft2(a.data, axes=axes))
    n = a.shape[axes[0]] * a.shape[axes[1]]

    def bwd(g):
        return (_match(np.fft.fft2(g, axes=axes) / n, a),)

    return _record(out, (a,), bwd)


# ----- nonlinearities (componentwise on re/im for complex input) -----


def _gelu_val(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def _gelu_deriv(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


def gelu(a: Tensor) -> Tensor:
    if a.is_complex:
        xr, xi = a.data.real, a.data.imag
        out = Tensor(_gelu_val(xr) + 1j * _gelu_val(xi))

        def bwd(g):
            return ((_gelu_deriv(xr) * g.real + 1j * _gelu_deriv(xi) * g.imag),)

    else:
        x = a.data
        out = Tensor(_gelu_val(x))

        def bwd(g):
            return (_gelu_deriv(x) * g,)

    return _record(out, (a,), bwd)


def _softshrink_val(x: np.ndarray, lam: float) -> np.ndarray:
    return np.sign(x) * np.maximum(np.abs(x) - lam, 0.0)


def softshrink(a: Tensor, lam: float) -> Tensor:
    """sign(x)*max(|x|-lam, 0); subgradient 0 inside the dead zone."""
    if lam < 0.0:
        raise ValueError("softshrink threshold must be non-negative")
    if a.is_complex:
        xr, xi = a.data.real, a.data.imag
        out = Tensor(_softshrink_val(xr, lam) + 1j * _softshrink_val(xi, lam))

        def bwd(g):
            return (((np.abs(xr) > lam) * g.real + 1j * ((np.abs(xi) > lam) * g.imag)),)

    else:
        x = a.data
        out = Tensor(_softshrink_val(x, lam))

        def bwd(g):
            return ((np.abs(x) > lam) * g,)

    return _record(out, (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    if a.is_complex:
        raise TypeError("tanh supports real tensors only")
    y = np.tanh(a.data)
    out = Tensor(y)

    def bwd(g):
        return ((1.0 - y * y) * g,)

    return _record(out, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    if a.is_complex:
        raise TypeError("exp supports real tensors only")
    y = np.exp(a.data)
    out = Tensor(y)

    def bwd(g):
        return (y * g,)

    return _record(out, (a,), bwd)


def log(a: Tensor) -> Tensor:
    if a.is_complex:
        raise TypeError("log supports real tensors only")
    if np.any(a.data <= 0.0):
        raise ValueError("log requires strictly positive input")
    x = a.data
    out = Tensor(np.log(x))

    def bwd(g):
        return (g / x,)

    return _record(out, (a,), bwd)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp; gradient passes only strictly inside the interval."""
    if a.is_complex:
        raise TypeError("clip supports real tensors only")
    x = a.data
    out = Tensor(np.clip(x, lo, hi))
    inside = (x > lo) & (x < hi)

    def bwd(g):
        return (inside * g,)

    return _record(out, (a,), bwd)


def dropout(a: Tensor, p: float, seed: int, train: bool) -> Tensor:
    """Inverted dropout: zero with probability p, scale by 1/(1-p) in train mode.

    The mask is a pure function of (seed, shape, p); evaluation mode and p=0
    are the identity.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    if not train or p == 0.0:
        return _record(Tensor(a.data.copy()), (a,), lambda g: (g,))
    rng = np.random.default_rng(seed)
    mask = (rng.uniform(size=a.shape) >= p) / (1.0 - p)
    out = Tensor(a.data * mask)

    def bwd(g):
        return (mask * g,)

    return _record(out, (a,), bwd)


# ----- structured linear maps -----


def block_mix(z: Tensor, w: Tensor) -> Tensor:
    """Per-mode block-diagonal mix: out[h,w,k,o] = sum_b z[h,w,k,b] * w[k,b,o].

    The same block weights are shared across all modes of the token lattice.
    """
    out = Tensor(np.einsum("hwkb,kbo->hwko", z.data, w.data))
    zd, wd = z.data, w.data

    def bwd(g):
        gz = np.einsum("hwko,kbo->hwkb", g, np.conj(wd))
        gw = np.einsum("hwkb,hwko->kbo", np.conj(zd), g)
        return _match(gz, z), _match(gw, w)

    return _record(out, (z, w), bwd)


def weighted_average(raw: Tensor, weights: np.ndarray) -> Tensor:
    """Dense re-weighting out_flat = W @ raw_flat with constant W.

    W rows are the consistency weights of each cell; it is built outside the
    tape from the current state value and deliberately treated as a constant
    (no gradient through the weights).
    """
    shape = raw.shape
    flat = raw.data.reshape(-1)
    if weights.shape != (flat.size, flat.size):
        raise ValueError("weight matrix does not match the flattened field")
    out = Tensor((weights @ flat).reshape(shape))

    def bwd(g):
        return ((weights.T @ g.reshape(-1)).reshape(shape),)

    return _record(out, (raw,), bwd)


# ----- gradient verification -----


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_tensor: dict[str, float] = field(default_factory=dict)
    n_coords: int = 0

    @property
    def ok(self) -> bool:
        return np.isfinite(self.max_rel_error)


def grad_check(
    fn,
    params: list[tuple[str, Tensor]] | list[Tensor],
    h: float = 1e-6,
    max_coords: int = 64,
    seed: int = 0,
    rel_floor: float = 1e-6,
) -> GradCheckReport:
    """Compare tape gradients of fn() against central finite differences.

    ``fn`` recomputes the scalar loss from the live ``params`` tensors each
    call. Coordinates are subsampled (at most ``max_coords`` per tensor,
    fixed seed); complex coordinates are perturbed separately along the real
    and imaginary axes. Relative error divides by max(|ad|, |fd|, rel_floor).
    """
    named = [p if isinstance(p, tuple) else (f"p{i}", p) for i, p in enumerate(params)]
    for _, t in named:
        t.zero_grad()
        if not t.requires_grad:
            raise ValueError("grad_check parameters must require gradients")
    with Tape() as tape:
        out = fn()
    tape.backward(out)

    rng = np.random.default_rng(seed)
    report = GradCheckReport(max_rel_error=0.0)

    def fd_direction(t: Tensor, idx, delta) -> float:
        base = t.data[idx]
        t.data[idx] = base + delta
        up = float(fn().data)
        t.data[idx] = base - delta
        down = float(fn().data)
        t.data[idx] = base
        return (up - down) / (2.0 * h)

    for name, t in named:
        grad = t.grad
        if grad is None:
            grad = np.zeros_like(t.data)
        size = t.data.size
        flat_idx = np.arange(size) if size <= max_coords else rng.choice(size, size=max_coords, replace=False)
        worst = 0.0
        for fi in flat_idx:
            idx = np.unravel_index(int(fi), t.data.shape) if t.data.ndim else ()
            if t.is_complex:
                fd = fd_direction(t, idx, h) + 1j * fd_direction(t, idx, 1j * h)
            else:
                fd = fd_direction(t, idx, h)
            ad = grad[idx] if grad.ndim else grad[()]
            err = abs(ad - fd)
            denom = max(abs(ad), abs(fd), rel_floor)
            worst = max(worst, err / denom)
            report.n_coords += 1
        report.per_tensor[name] = worst
        report.max_rel_error = max(report.max_rel_error, worst)
    return report
