"""Fourier representation of periodic, mean-free vector fields on the 3-torus.

Coefficients use the ``scipy.fft.rfftn`` half-spectrum layout, normalised so that

    u(x) = sum_n u_hat(n) exp(i n.x),   x in [0, 2 pi)^3,

and every norm is taken against the normalised measure dx / (2 pi)^3.  With this
convention the L2 norm is ``sqrt(sum_n |u_hat(n)|^2)`` over the full lattice, which
is what :func:`sobolev_norm` evaluates with the Hermitian multiplicity weights.

Fields may carry leading batch axes; the last four axes are always
``(component, kx, ky, kz)``.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
import scipy.fft as sfft

FFT_AXES = (-3, -2, -1)

# (m, j) with m <= j; the order used for symmetric tensors throughout.
SYM_PAIRS = ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))


class ModeLattice:
    """Integer wavevectors of an N^3 periodic grid in half-spectrum layout.

    The Nyquist planes (|n_i| = N/2) are kept in the arrays but never carry
    energy, so the stored set is closed under n -> -n.  ``dealias`` is the
    2/3-rule set |n_i| < N/3; fields supported there multiply without
    aliasing on this grid.
    """

    def __init__(self, N: int):
        if N < 4 or N % 2:
            raise ValueError(f"resolution must be an even integer >= 4, got {N}")
        self.N = int(N)
        self.shape = (N, N, N // 2 + 1)
        kx = np.fft.fftfreq(N, 1.0 / N).astype(int)
        kz = np.arange(N // 2 + 1)
        self.kx = kx.reshape(N, 1, 1)
        self.ky = kx.reshape(1, N, 1)
        self.kz = kz.reshape(1, 1, N // 2 + 1)
        kvec = np.stack(np.broadcast_arrays(self.kx, self.ky, self.kz)).astype(float)
        self.kvec = kvec
        self.k2 = (kvec**2).sum(axis=0)
        self.kmag = np.sqrt(self.k2)
        self.k2_safe = np.where(self.k2 == 0, 1.0, self.k2)

        weight = np.full(self.shape, 2.0)
        weight[..., 0] = 1.0
        weight[..., -1] = 1.0
        self.weight = weight

        absk = np.abs(kvec)
        self.resolved = (absk < N / 2).all(axis=0)
        self.resolved[0, 0, 0] = False
        self.dealias = (absk < N / 3).all(axis=0) & self.resolved
        self.dealias_index = np.flatnonzero(self.dealias)
        self.kvec_dealiased = kvec.reshape(3, -1)[:, self.dealias_index]
        self.k2_dealiased = self.k2.reshape(-1)[self.dealias_index]
        self._multipliers: dict[float, np.ndarray] = {}

    def __repr__(self):
        return f"ModeLattice(N={self.N})"

    def __reduce__(self):
        return (lattice, (self.N,))

    def sobolev_weight(self, alpha: float) -> np.ndarray:
        """Multiplicity times (1+|n|^2)^alpha: the weight of a squared H^alpha norm."""
        key = float(alpha)
        w = self._multipliers.get(key)
        if w is None:
            w = self.weight * (1.0 + self.k2) ** key
            w.setflags(write=False)
            self._multipliers[key] = w
        return w

    def norm_matrix(self, alphas: tuple) -> np.ndarray:
        """Weights for :func:`norms_sq`: one column per exponent, rows over the
        real-view flattening of a (3, grid) coefficient array."""
        key = ("matrix",) + tuple(float(a) for a in alphas)
        m = self._multipliers.get(key)
        if m is None:
            cols = [np.repeat(self.sobolev_weight(a).reshape(-1), 2) for a in alphas]
            m = np.tile(np.stack(cols, axis=1), (3, 1))
            m.setflags(write=False)
            self._multipliers[key] = m
        return m

    def conjugate_index(self, axis_index: np.ndarray) -> np.ndarray:
        return (-axis_index) % self.N


@functools.lru_cache(maxsize=None)
def lattice(N: int) -> ModeLattice:
    """Shared lattice instance for resolution N."""
    return ModeLattice(N)


def to_physical(lat: ModeLattice, coeffs: np.ndarray) -> np.ndarray:
    return sfft.irfftn(coeffs, s=(lat.N,) * 3, axes=FFT_AXES, norm="forward")


def from_physical(lat: ModeLattice, values: np.ndarray) -> np.ndarray:
    return sfft.rfftn(values, axes=FFT_AXES, norm="forward")


def energy_density(coeffs: np.ndarray) -> np.ndarray:
    """sum_j |c_j(n)|^2, reduced over the component axis."""
    return (coeffs.real**2 + coeffs.imag**2).sum(axis=-4)


def norm_sq(lat: ModeLattice, coeffs: np.ndarray, alpha: float):
    """Squared H^alpha norm of raw coefficients (batched over leading axes)."""
    return np.tensordot(energy_density(coeffs), lat.sobolev_weight(alpha), axes=3)


def norms_sq(lat: ModeLattice, coeffs: np.ndarray, alphas: tuple) -> np.ndarray:
    """Squared H^alpha norms for several exponents at once, shape batch + (len(alphas),)."""
    c = np.ascontiguousarray(coeffs)
    batch = c.shape[:-4]
    x = c.reshape(batch + (-1,)).view(np.float64)
    return (x * x) @ lat.norm_matrix(tuple(alphas))


def leray(lat: ModeLattice, coeffs: np.ndarray) -> np.ndarray:
    """(delta_jk - n_j n_k / |n|^2) c_k, with the zero mode set to zero."""
    div = (lat.kvec * coeffs).sum(axis=-4)
    out = coeffs - lat.kvec * np.expand_dims(div / lat.k2_safe, -4)
    out[..., 0, 0, 0] = 0.0
    return out


def divergence_defect(lat: ModeLattice, coeffs: np.ndarray) -> float:
    """Relative size of n.c(n) compared with |n||c(n)|, max over the batch."""
    div = (lat.kvec * coeffs).sum(axis=-4)
    num = np.sqrt(np.tensordot(np.abs(div) ** 2, lat.weight, axes=3))
    den = np.sqrt(np.tensordot(energy_density(coeffs), lat.weight * lat.k2, axes=3))
    num, den = np.atleast_1d(num), np.atleast_1d(den)
    rel = np.where(den > 0, num / np.where(den > 0, den, 1.0), num)
    return float(rel.max())


@dataclass(frozen=True, eq=False)
class SpectralField:
    """Three complex coefficient arrays on a :class:`ModeLattice`.

    The coefficient array is made read-only on construction; every operation
    returns a new field.
    """

    lattice: ModeLattice
    coeffs: np.ndarray
    solenoidal: bool = False

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=complex)
        if c.shape[-4:] != (3,) + self.lattice.shape:
            raise ValueError(
                f"coefficient shape {c.shape} does not match lattice {self.lattice}"
            )
        if c.flags.writeable:
            c = c.view()
            c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    # construction -----------------------------------------------------
    @classmethod
    def zeros(cls, lat: ModeLattice, batch: tuple = ()) -> "SpectralField":
        return cls(lat, np.zeros(tuple(batch) + (3,) + lat.shape, complex), True)

    @classmethod
    def from_physical(cls, lat: ModeLattice, values, solenoidal: bool = False):
        """Transform real grid values; the mean and Nyquist planes are removed."""
        c = from_physical(lat, np.asarray(values, dtype=float))
        c = c * lat.resolved
        return cls(lat, c, solenoidal)

    @classmethod
    def single_mode(cls, lat: ModeLattice, n, component: int, amplitude=1.0):
        """u_hat_component(n) = amplitude, plus the conjugate at -n."""
        n = tuple(int(x) for x in n)
        if n == (0, 0, 0):
            raise ValueError("the zero mode is excluded from mean-free fields")
        if max(abs(x) for x in n) >= lat.N / 2:
            raise ValueError(f"mode {n} is not resolved at N={lat.N}")
        c = np.zeros((3,) + lat.shape, complex)
        amp = complex(amplitude)
        for sign, value in ((1, amp), (-1, amp.conjugate())):
            m = tuple(sign * x for x in n)
            if m[2] < 0:
                continue
            c[component, m[0] % lat.N, m[1] % lat.N, m[2]] = value
        sol = abs(n[component]) == 0
        return cls(lat, c, sol)

    # algebra ----------------------------------------------------------
    def _check(self, other: "SpectralField"):
        if other.lattice.N != self.lattice.N:
            raise ValueError("fields live on different lattices")

    def __add__(self, other: "SpectralField"):
        self._check(other)
        return SpectralField(
            self.lattice, self.coeffs + other.coeffs, self.solenoidal and other.solenoidal
        )

    def __sub__(self, other: "SpectralField"):
        self._check(other)
        return SpectralField(
            self.lattice, self.coeffs - other.coeffs, self.solenoidal and other.solenoidal
        )

    def __neg__(self):
        return SpectralField(self.lattice, -self.coeffs, self.solenoidal)

    def __mul__(self, scalar):
        return SpectralField(self.lattice, self.coeffs * scalar, self.solenoidal)

    __rmul__ = __mul__

    # views ------------------------------------------------------------
    def to_physical(self) -> np.ndarray:
        return to_physical(self.lattice, self.coeffs)

    @property
    def batch_shape(self) -> tuple:
        return self.coeffs.shape[:-4]

    def is_zero(self) -> bool:
        return not self.coeffs.any()

    def mean_defect(self) -> float:
        return float(np.abs(self.coeffs[..., 0, 0, 0]).max())

    def divergence_defect(self) -> float:
        return divergence_defect(self.lattice, self.coeffs)

    def hermitian_defect(self) -> float:
        """max |c(-n) - conj c(n)| over the self-conjugate kz planes."""
        lat = self.lattice
        idx = lat.conjugate_index(np.arange(lat.N))
        worst = 0.0
        for plane in (0, lat.N // 2):
            p = self.coeffs[..., plane]
            mirrored = np.conj(p[..., idx, :][..., idx])
            worst = max(worst, float(np.abs(p - mirrored).max()))
        return worst


def leray_project(f: SpectralField) -> SpectralField:
    """Project onto divergence-free fields; the result is flagged solenoidal."""
    return SpectralField(f.lattice, leray(f.lattice, f.coeffs), True)


def sobolev_norm(f: SpectralField, alpha: float):
    """(sum_n (1+|n|^2)^alpha sum_j |f_j(n)|^2)^(1/2); an array for batched fields."""
    out = np.sqrt(norm_sq(f.lattice, f.coeffs, alpha))
    return float(out) if np.ndim(out) == 0 else out


def inner(f: SpectralField, g: SpectralField) -> float:
    """Real L2 inner product of two real fields."""
    prod = (np.conj(f.coeffs) * g.coeffs).real.sum(axis=-4)
    return float(np.tensordot(prod, f.lattice.weight, axes=3))


def lambda_power(f: SpectralField, beta: float) -> SpectralField:
    """Apply the multiplier (1+|n|^2)^(beta/2)."""
    lat = f.lattice
    return SpectralField(lat, f.coeffs * (1.0 + lat.k2) ** (beta / 2.0), f.solenoidal)


def random_solenoidal(
    lat: ModeLattice,
    rng: np.random.Generator,
    slope: float = 4.0,
    norm: float | None = None,
    alpha: float = 0.5,
    dealiased: bool = True,
) -> SpectralField:
    """Gaussian divergence-free field with amplitudes ~ (1+|n|^2)^(-slope/2).

    If ``norm`` is given the field is rescaled to have exactly that H^alpha norm.
    """
    shape = (3,) + lat.shape
    c = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    c *= (1.0 + lat.k2) ** (-slope / 2.0)
    c *= lat.dealias if dealiased else lat.resolved
    c = from_physical(lat, to_physical(lat, c))  # Hermitian projection
    c = leray(lat, c)
    if norm is not None:
        current = np.sqrt(norm_sq(lat, c, alpha))
        if current > 0:
            c *= norm / current
    return SpectralField(lat, c, True)


# ---------------------------------------------------------------------------
# Quadratic terms
# ---------------------------------------------------------------------------


def div_symmetric(lat: ModeLattice, sym_phys: np.ndarray) -> np.ndarray:
    """Dealiased Leray-projected divergence of a symmetric tensor.

    ``sym_phys`` holds the six components in :data:`SYM_PAIRS` order on the grid
    (axis -4, leading batch axes allowed); returns the coefficients of P(d_m T_mj).
    Only the dealiased modes are touched.
    """
    t = from_physical(lat, sym_phys)
    batch = t.shape[:-4]
    idx = lat.dealias_index
    t = t.reshape(batch + (6, -1))[..., idx]
    k0, k1, k2 = lat.kvec_dealiased
    t00, t11, t22, t01, t02, t12 = (t[..., i, :] for i in range(6))
    d0 = k0 * t00 + k1 * t01 + k2 * t02
    d1 = k0 * t01 + k1 * t11 + k2 * t12
    d2 = k0 * t02 + k1 * t12 + k2 * t22
    s = (k0 * d0 + k1 * d1 + k2 * d2) / lat.k2_dealiased
    out = np.zeros(batch + (3, lat.k2.size), complex)
    out[..., 0, idx] = 1j * (d0 - k0 * s)
    out[..., 1, idx] = 1j * (d1 - k1 * s)
    out[..., 2, idx] = 1j * (d2 - k2 * s)
    return out.reshape(batch + (3,) + lat.shape)


def symmetric_product(a: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Six SYM_PAIRS components of a (x) b + b (x) a (or a (x) a) on the grid."""
    out = np.empty(a.shape[:-4] + (6,) + a.shape[-3:])
    for i, (m, j) in enumerate(SYM_PAIRS):
        if b is None:
            np.multiply(a[..., m, :, :, :], a[..., j, :, :, :], out=out[..., i, :, :, :])
        else:
            out[..., i, :, :, :] = (
                a[..., m, :, :, :] * b[..., j, :, :, :] + b[..., m, :, :, :] * a[..., j, :, :, :]
            )
    return out


def div_tensor(lat: ModeLattice, tensor_phys: np.ndarray) -> np.ndarray:
    """Dealiased Leray-projected divergence of a general (3, 3, grid) tensor."""
    t_hat = from_physical(lat, tensor_phys)
    out = 1j * np.einsum("m...,mj...->j...", lat.kvec, t_hat)
    out *= lat.dealias
    return leray(lat, out)


def _require_solenoidal(u: SpectralField, tol: float = 1e-10):
    if not u.is_zero() and u.divergence_defect() > tol:
        raise ValueError("the transporting field must be divergence-free")


def advective_term(u: SpectralField, w: SpectralField) -> SpectralField:
    """P div(u (x) w), computed pseudo-spectrally with the 2/3 rule."""
    _require_solenoidal(u)
    lat = u.lattice
    up, wp = u.to_physical(), w.to_physical()
    tensor = up[:, None] * wp[None, :]
    return SpectralField(lat, div_tensor(lat, tensor), True)


def convective_derivative(a: SpectralField, b: SpectralField) -> np.ndarray:
    """Dealiased coefficients of (a.grad) b, without projection."""
    lat = a.lattice
    ap = a.to_physical()
    grad_b = 1j * lat.kvec[:, None] * b.coeffs[None, :]  # (m, j, ...)
    gp = to_physical(lat, grad_b)
    prod = np.einsum("m...,mj...->j...", ap, gp)
    return from_physical(lat, prod) * lat.dealias


def convective_term(u: SpectralField, w: SpectralField) -> SpectralField:
    """P((u.grad) w), the convective form of :func:`advective_term`."""
    lat = u.lattice
    return SpectralField(lat, leray(lat, convective_derivative(u, w)), True)


# ---------------------------------------------------------------------------
# Product inequality
# ---------------------------------------------------------------------------


def _pad(lat: ModeLattice, big: ModeLattice, coeffs: np.ndarray) -> np.ndarray:
    out = np.zeros(coeffs.shape[:-3] + big.shape, complex)
    ix = np.fft.fftfreq(lat.N, 1.0 / lat.N).astype(int) % big.N
    nz = lat.N // 2 + 1
    out[..., ix[:, None], ix[None, :], :nz] = coeffs
    return out


def product_norm(v: SpectralField, w: SpectralField, alpha: float) -> float:
    """Exact H^alpha norm of the tensor v (x) w, by zero-padding to a 2N grid."""
    big = lattice(2 * v.lattice.N)
    vp = to_physical(big, _pad(v.lattice, big, v.coeffs))
    wp = to_physical(big, _pad(w.lattice, big, w.coeffs))
    tensor = (vp[:, None] * wp[None, :]).reshape((9,) + vp.shape[1:])
    t_hat = from_physical(big, tensor)
    dens = (t_hat.real**2 + t_hat.imag**2).sum(axis=0)
    w_big = big.weight * (1.0 + big.k2) ** alpha
    return float(np.sqrt((dens * w_big).sum()))


@dataclass(frozen=True)
class InequalityReport:
    lhs: float
    rhs: float
    ratio: float


def verify_product_inequality(
    v: SpectralField, w: SpectralField, alpha: float
) -> InequalityReport:
    """Both sides of the fractional product estimate for v (x) w.

    lhs = ||v (x) w||_{H^{1/2+a}},
    rhs = ||v||_{1/2+a}^{(1+a)/2} ||v||_{3/2+a}^{(1-a)/2} * (same for w).
    """
    s = 0.5 + alpha
    lhs = product_norm(v, w, s)

    def factor(f):
        lo, hi = sobolev_norm(f, s), sobolev_norm(f, s + 1.0)
        return lo ** ((1 + alpha) / 2) * hi ** ((1 - alpha) / 2)

    rhs = factor(v) * factor(w)
    ratio = lhs / rhs if rhs > 0 else 0.0
    return InequalityReport(lhs, rhs, ratio)


def calibrate_product_constant(
    lat: ModeLattice, alpha: float, n_samples: int = 1000, seed: int = 0
) -> tuple[float, np.ndarray]:
    """Brute-force max of the product-estimate ratio over random field pairs.

    Spectral slopes are drawn uniformly from [1, 6] so the ensemble mixes
    rough and smooth fields.  Returns ``(C_N, ratios)``.
    """
    rng = np.random.default_rng(seed)
    ratios = np.empty(n_samples)
    for i in range(n_samples):
        v = random_solenoidal(lat, rng, slope=rng.uniform(1, 6))
        w = random_solenoidal(lat, rng, slope=rng.uniform(1, 6))
        ratios[i] = verify_product_inequality(v, w, alpha).ratio
    return float(ratios.max()), ratios
