"""Per-channel 2-D Fourier transform and amplitude/phase algebra.

Transforms are unitary (``1/sqrt(HW)`` both ways) over the full ``H x W``
grid and act on the trailing two axes, so ``C x H x W`` and
``N x C x H x W`` inputs are both accepted.

The 1-D kernel is a recursive mixed-radix Cooley-Tukey transform with direct
codelets for tiny or small-prime lengths and Bluestein's chirp-z algorithm
for larger prime lengths. Inside the autograd graph a complex plane is
carried as a real tensor with a trailing axis of size 2 (real, imaginary).
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .numerics.tensor import ShapeError, Tensor, make

AMP_FLOOR = 1e-12
RESIDUE_RTOL = 1e-8

_DIRECT_MAX = 4
_DIRECT_PRIME_MAX = 16


class ImaginaryResidueError(ValueError):
    """The inverse transform produced a non-negligible imaginary part."""

    def __init__(self, residue: float, scale: float):
        self.residue = residue
        self.scale = scale
        super().__init__(
            f"inverse FFT imaginary residue {residue:.3e} exceeds {RESIDUE_RTOL:g} x max|Re| "
            f"({scale:.3e}); pass force_real=True to discard it"
        )


# -- 1-D kernel ---------------------------------------------------------------
@lru_cache(maxsize=None)
def _roots(n: int, sign: int) -> np.ndarray:
    """exp(sign * 2j*pi*e/n) for e = 0..n-1, exact on quarter turns."""
    e = np.arange(n)
    ang = 2.0 * np.pi * e / n
    w = np.cos(ang) + 1j * sign * np.sin(ang)
    quarter = (4 * e) % n == 0
    q = (4 * e[quarter]) // n
    w[quarter] = np.array([1, 1j * sign, -1, -1j * sign])[q % 4]
    w.flags.writeable = False
    return w


@lru_cache(maxsize=None)
def _dft_matrix(n: int, sign: int) -> np.ndarray:
    k = np.arange(n)
    m = _roots(n, sign)[np.outer(k, k) % n]
    m.flags.writeable = False
    return m


def _smallest_factor(n: int) -> int:
    if n % 2 == 0:
        return 2
    f = 3
    while f * f <= n:
        if n % f == 0:
            return f
        f += 2
    return n


def _dft_last(x: np.ndarray, sign: int) -> np.ndarray:
    """Unnormalized DFT along the last axis with kernel exp(sign*2j*pi*jk/n)."""
    n = x.shape[-1]
    if n == 1:
        return x.copy()
    p = _smallest_factor(n)
    if n <= _DIRECT_MAX or (p == n and n <= _DIRECT_PRIME_MAX):
        return x @ _dft_matrix(n, sign).T
    if p == n:
        return _bluestein(x, sign)
    m = n // p
    # decimation in time: subsequence r holds x[j*p + r]
    sub = np.swapaxes(x.reshape(x.shape[:-1] + (m, p)), -1, -2)
    y = _dft_last(np.ascontiguousarray(sub), sign)
    w = _roots(n, sign)
    tw = w[np.outer(np.arange(p), np.arange(m)) % n]
    z = y * tw
    out = np.matmul(_dft_matrix(p, sign), z)
    return out.reshape(x.shape)


@lru_cache(maxsize=None)
def _chirp(n: int, sign: int) -> tuple[np.ndarray, np.ndarray, int]:
    k = np.arange(n)
    # k^2 mod 2n keeps the angle argument small for large n
    b = np.exp(sign * 1j * np.pi * ((k * k) % (2 * n)) / n)
    size = 1 << (2 * n - 1).bit_length()
    kernel = np.zeros(size, dtype=complex)
    kernel[:n] = np.conj(b)
    kernel[size - n + 1:] = np.conj(b[1:])[::-1]
    kernel_f = _dft_last(kernel, -1)
    for arr in (b, kernel_f):
        arr.flags.writeable = False
    return b, kernel_f, size


def _bluestein(x: np.ndarray, sign: int) -> np.ndarray:
    n = x.shape[-1]
    b, kernel_f, size = _chirp(n, sign)
    a = np.zeros(x.shape[:-1] + (size,), dtype=complex)
    a[..., :n] = x * b
    conv = _dft_last(_dft_last(a, -1) * kernel_f, +1) / size
    return conv[..., :n] * b


def _along(x: np.ndarray, axis: int, sign: int) -> np.ndarray:
    if axis in (-1, x.ndim - 1):
        return _dft_last(x, sign)
    moved = np.ascontiguousarray(np.moveaxis(x, axis, -1))
    return np.moveaxis(_dft_last(moved, sign), -1, axis)


def fft2_array(x: np.ndarray) -> np.ndarray:
    """Unitary forward 2-D DFT over the trailing two axes (complex result)."""
    x = np.asarray(x)
    if x.ndim < 2 or x.shape[-1] < 1 or x.shape[-2] < 1:
        raise ShapeError(f"fft2 needs a trailing H x W plane, got {x.shape}")
    h, w = x.shape[-2:]
    z = _along(_along(x.astype(complex), -1, -1), -2, -1)
    return z / np.sqrt(h * w)


def ifft2_array(z: np.ndarray) -> np.ndarray:
    """Unitary inverse 2-D DFT over the trailing two axes (complex result)."""
    z = np.asarray(z, dtype=complex)
    if z.ndim < 2:
        raise ShapeError(f"ifft2 needs a trailing H x W plane, got {z.shape}")
    h, w = z.shape[-2:]
    out = _along(_along(z, -1, +1), -2, +1)
    return out / np.sqrt(h * w)


# -- elementwise amplitude/phase -----------------------------------------------
def amp_phase(re, im):
    """Amplitude and phase of ``re + i*im``; ``atan2(0, 0)`` is 0."""
    re = np.asarray(re, dtype=float)
    im = np.asarray(im, dtype=float)
    amp = np.hypot(re, im)
    pha = np.arctan2(im, re)
    # arctan2 returns -pi for (-0.0, negative); keep the (-pi, pi] range
    pha = np.where(pha == -np.pi, np.pi, pha)
    pha = np.where(amp == 0, 0.0, pha)
    return amp, pha


# -- differentiable complex pairs ------------------------------------------------
def _pack(z: np.ndarray, dtype) -> np.ndarray:
    return np.stack([z.real, z.imag], axis=-1).astype(dtype, copy=False)


def _unpack(p: np.ndarray) -> np.ndarray:
    return p[..., 0] + 1j * p[..., 1]


def fft2_pair(x: Tensor) -> Tensor:
    """Forward transform of a real tensor, returned as ``[..., H, W, 2]``."""
    z = fft2_array(x.data)

    def backward(g):
        return (ifft2_array(_unpack(g)).real.astype(x.dtype, copy=False),)

    return make(_pack(z, x.dtype), (x,), backward)


def ifft2_pair(p: Tensor) -> Tensor:
    """Inverse transform of a complex pair tensor."""
    z = ifft2_array(_unpack(p.data))

    def backward(g):
        return (_pack(fft2_array(_unpack(g)), p.dtype),)

    return make(_pack(z, p.dtype), (p,), backward)


def complex_abs(p: Tensor) -> Tensor:
    re, im = p.data[..., 0], p.data[..., 1]
    amp, _ = amp_phase(re, im)
    amp = amp.astype(p.dtype, copy=False)

    def backward(g):
        inv = g / np.maximum(amp, AMP_FLOOR)
        return (np.stack([re * inv, im * inv], axis=-1),)

    return make(amp, (p,), backward)


def complex_angle(p: Tensor) -> Tensor:
    re, im = p.data[..., 0], p.data[..., 1]
    amp, pha = amp_phase(re, im)
    pha = pha.astype(p.dtype, copy=False)

    def backward(g):
        inv = g / np.maximum(amp, AMP_FLOOR) ** 2
        return (np.stack([-im * inv, re * inv], axis=-1),)

    return make(pha, (p,), backward)


def polar(amp: Tensor, pha: Tensor) -> Tensor:
    """Complex pair ``amp * (cos(pha), sin(pha))``."""
    if amp.shape != pha.shape:
        raise ShapeError(f"amplitude {amp.shape} and phase {pha.shape} differ")
    c, s = np.cos(pha.data), np.sin(pha.data)
    out = np.stack([amp.data * c, amp.data * s], axis=-1)

    def backward(g):
        gr, gi = g[..., 0], g[..., 1]
        return gr * c + gi * s, amp.data * (gi * c - gr * s)

    return make(out, (amp, pha), backward)


# -- spectrum-level API ------------------------------------------------------------
@dataclass
class Spectrum:
    """Amplitude and phase planes of a per-channel 2-D spectrum.

    ``pair`` is the same spectrum as a ``[..., H, W, 2]`` real/imag tensor;
    it is what :func:`ifft2` consumes.
    """

    amp: Tensor
    pha: Tensor
    pair: Tensor

    @property
    def shape(self) -> tuple[int, ...]:
        return self.amp.shape

    @property
    def real(self) -> np.ndarray:
        return self.pair.data[..., 0]

    @property
    def imag(self) -> np.ndarray:
        return self.pair.data[..., 1]

    def complex(self) -> np.ndarray:
        return _unpack(self.pair.data)


def fft2(x: Tensor) -> Spectrum:
    if not isinstance(x, Tensor):
        x = Tensor(x)
    pair = fft2_pair(x)
    return Spectrum(complex_abs(pair), complex_angle(pair), pair)


def recombine(amp: Tensor, pha: Tensor, signed: bool = False) -> Spectrum:
    """Spectrum with ``R = amp*cos(pha)`` and ``I = amp*sin(pha)``.

    Negative amplitudes are rejected unless ``signed`` is set; learned
    amplitude edits (conv + instance norm) produce signed planes, which are
    equivalent to a phase shift of pi.
    """
    if not signed and np.any(amp.data < 0):
        raise ValueError(f"negative amplitude (min {amp.data.min():.3e}) in recombine")
    return Spectrum(amp, pha, polar(amp, pha))


def ifft2(s: Spectrum, force_real: bool = False) -> Tensor:
    """Real inverse transform; the imaginary part must be negligible unless forced."""
    out = ifft2_pair(s.pair)
    if not force_real:
        re = np.abs(out.data[..., 0])
        residue = float(np.max(np.abs(out.data[..., 1]))) if out.size else 0.0
        scale = float(np.max(re)) if re.size else 0.0
        if residue > RESIDUE_RTOL * scale and residue > 0:
            raise ImaginaryResidueError(residue, scale)
    return out[..., 0]


def swap_components(a: Tensor, b: Tensor, force_real: bool = True) -> tuple[Tensor, Tensor]:
    """Exchange amplitudes: returns (amp_b with pha_a, amp_a with pha_b)."""
    if a.shape != b.shape:
        raise ShapeError(f"swap_components needs equal shapes, got {a.shape} and {b.shape}")
    sa, sb = fft2(a), fft2(b)
    first = ifft2(recombine(sb.amp, sa.pha), force_real=force_real)
    second = ifft2(recombine(sa.amp, sb.pha), force_real=force_real)
    return first, second


def component_only(a: Tensor, which: str) -> Tensor:
    """Reconstruct from one component: amplitude-only zeroes the phase,
    phase-only sets a unit amplitude."""
    s = fft2(a)
    if which == "amplitude":
        pha = Tensor(np.zeros(s.shape, dtype=a.dtype), dtype=a.dtype)
        return ifft2(recombine(s.amp, pha), force_real=True)
    if which == "phase":
        amp = Tensor(np.ones(s.shape, dtype=a.dtype), dtype=a.dtype)
        return ifft2(recombine(amp, s.pha), force_real=True)
    raise ValueError(f"which must be 'amplitude' or 'phase', got {which!r}")
