"""Statevector simulation of the style-based SU(4) generator circuit.

Conventions (frozen; changing any of them bumps ``GATE_ORDERING_VERSION``):

* Amplitude index ``i`` has qubit 0 as its least-significant bit.
* Inside a box acting on qubits ``(a, b)`` the local 4-dim basis index is
  ``bit_a + 2 * bit_b``.
* Box gate order, angles numbered 1..15::

      U3(1,2,3) on a, U3(4,5,6) on b
      CNOT b->a
      RZ(7) on a, RY(8) on b
      CNOT a->b
      RY(9) on b
      CNOT b->a
      U3(10,11,12) on a, U3(13,14,15) on b

* ``U3(t, p, l) = [[cos(t/2), -e^{il} sin(t/2)], [e^{ip} sin(t/2), e^{i(p+l)} cos(t/2)]]``,
  ``RY(t) = exp(-i t Y / 2)``, ``RZ(t) = exp(-i t Z / 2)``.
* A layer is sublayer A, pairs (0,1),(2,3),..., followed by sublayer B, pairs
  (1,2),(3,4),...,(Q-1,0). For odd Q the unpaired qubit of each sublayer is
  left idle and B has no wraparound pair.
* Angle ``k`` of a box uses the noise component of the qubit its rotation
  acts on: ``theta = 2*pi*tanh(xi_q * W + b)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numba
import numpy as np

from lqgan.errors import ConfigError, ShapeError

GATE_ORDERING_VERSION = 1
ANGLES_PER_BOX = 15
TWO_PI = 2.0 * np.pi

# which qubit of the (a, b) pair each of the 15 angles acts on: 0 -> a, 1 -> b
_ANGLE_SIDE = np.array([0, 0, 0, 1, 1, 1, 0, 1, 1, 0, 0, 0, 1, 1, 1])


def count_params(num_qubits: int, num_layers: int) -> int:
    """Trainable parameters of the style-based generator (W and b)."""
    if num_qubits < 2 or num_qubits % 2:
        raise ConfigError("qubit count must be even and >= 2", num_qubits=num_qubits)
    if num_layers < 1:
        raise ConfigError("layer count must be >= 1", num_layers=num_layers)
    return 2 * ANGLES_PER_BOX * num_qubits * num_layers


@dataclass(frozen=True)
class CircuitSpec:
    num_qubits: int
    num_layers: int

    def __post_init__(self):
        if self.num_qubits < 2:
            raise ConfigError("need at least two qubits", num_qubits=self.num_qubits)
        if self.num_layers < 1:
            raise ConfigError("need at least one layer", num_layers=self.num_layers)

    @cached_property
    def layer_pairs(self) -> list[tuple[int, int]]:
        q = self.num_qubits
        sub_a = [(i, i + 1) for i in range(0, q - 1, 2)]
        sub_b = [(i, i + 1) for i in range(1, q - 1, 2)]
        if q % 2 == 0:
            sub_b.append((q - 1, 0))
        return sub_a + sub_b

    @cached_property
    def pairs(self) -> np.ndarray:
        """(num_boxes, 2) int array of (a, b) qubit pairs in application order."""
        return np.array(self.layer_pairs * self.num_layers, dtype=np.int64)

    @property
    def num_boxes(self) -> int:
        return len(self.layer_pairs) * self.num_layers

    @cached_property
    def qubit_map(self) -> np.ndarray:
        """(num_boxes, 15) physical qubit index used for each angle's noise."""
        p = self.pairs
        return np.where(_ANGLE_SIDE[None, :] == 0, p[:, :1], p[:, 1:2])

    @property
    def latent_dim(self) -> int:
        return 2 * self.num_qubits

    @property
    def num_params(self) -> int:
        return 2 * ANGLES_PER_BOX * self.num_boxes


@dataclass
class StyleParams:
    """Trainable weight and bias tensors, both shaped (num_boxes, 15)."""

    spec: CircuitSpec
    W: np.ndarray
    b: np.ndarray = field(default=None)

    def __post_init__(self):
        shape = (self.spec.num_boxes, ANGLES_PER_BOX)
        if self.b is None:
            self.b = np.zeros(shape)
        if self.W.shape != shape or self.b.shape != shape:
            raise ShapeError("style params shape mismatch", expected=list(shape), W=list(self.W.shape), b=list(self.b.shape))

    @classmethod
    def zeros(cls, spec: CircuitSpec) -> "StyleParams":
        shape = (spec.num_boxes, ANGLES_PER_BOX)
        return cls(spec, np.zeros(shape), np.zeros(shape))

    @classmethod
    def random(cls, spec: CircuitSpec, rng: np.random.Generator, scale: float = 1.0) -> "StyleParams":
        shape = (spec.num_boxes, ANGLES_PER_BOX)
        return cls(spec, scale * rng.standard_normal(shape), scale * rng.standard_normal(shape))

    @property
    def num_params(self) -> int:
        return self.W.size + self.b.size

    def to_blocks(self, prefix: str = "qgen.") -> dict[str, np.ndarray]:
        header = np.array([self.spec.num_qubits, self.spec.num_layers, GATE_ORDERING_VERSION], dtype=np.float64)
        return {prefix + "header": header, prefix + "W": self.W, prefix + "b": self.b}

    @classmethod
    def from_blocks(cls, blocks: dict[str, np.ndarray], prefix: str = "qgen.") -> "StyleParams":
        q, layers, version = (int(v) for v in blocks[prefix + "header"])
        if version != GATE_ORDERING_VERSION:
            raise ConfigError("checkpoint uses a different gate ordering", version=version, expected=GATE_ORDERING_VERSION)
        return cls(CircuitSpec(q, layers), np.array(blocks[prefix + "W"], dtype=np.float64),
                   np.array(blocks[prefix + "b"], dtype=np.float64))


# ---------------------------------------------------------------------------
# Gate matrices, vectorized over a leading batch axis


def u3(theta, phi, lam) -> np.ndarray:
    theta, phi, lam = np.broadcast_arrays(*(np.asarray(v, dtype=np.float64) for v in (theta, phi, lam)))
    c, s = np.cos(theta / 2), np.sin(theta / 2)
    out = np.empty(theta.shape + (2, 2), dtype=np.complex128)
    out[..., 0, 0] = c
    out[..., 0, 1] = -np.exp(1j * lam) * s
    out[..., 1, 0] = np.exp(1j * phi) * s
    out[..., 1, 1] = np.exp(1j * (phi + lam)) * c
    return out


def ry(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    c, s = np.cos(theta / 2), np.sin(theta / 2)
    out = np.zeros(theta.shape + (2, 2), dtype=np.complex128)
    out[..., 0, 0] = c
    out[..., 0, 1] = -s
    out[..., 1, 0] = s
    out[..., 1, 1] = c
    return out


def rz(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    out = np.zeros(theta.shape + (2, 2), dtype=np.complex128)
    out[..., 0, 0] = np.exp(-0.5j * theta)
    out[..., 1, 1] = np.exp(0.5j * theta)
    return out


def _du3(theta, phi, lam) -> np.ndarray:
    """(…, 3, 2, 2) derivatives of U3 w.r.t. (theta, phi, lam)."""
    c, s = np.cos(theta / 2), np.sin(theta / 2)
    el, ep, epl = np.exp(1j * lam), np.exp(1j * phi), np.exp(1j * (phi + lam))
    out = np.zeros(np.shape(theta) + (3, 2, 2), dtype=np.complex128)
    out[..., 0, 0, 0] = -0.5 * s
    out[..., 0, 0, 1] = -0.5 * el * c
    out[..., 0, 1, 0] = 0.5 * ep * c
    out[..., 0, 1, 1] = -0.5 * epl * s
    out[..., 1, 1, 0] = 1j * ep * s
    out[..., 1, 1, 1] = 1j * epl * c
    out[..., 2, 0, 1] = -1j * el * s
    out[..., 2, 1, 1] = 1j * epl * c
    return out


def _dry(theta) -> np.ndarray:
    c, s = np.cos(theta / 2), np.sin(theta / 2)
    out = np.zeros(np.shape(theta) + (2, 2), dtype=np.complex128)
    out[..., 0, 0] = -0.5 * s
    out[..., 0, 1] = -0.5 * c
    out[..., 1, 0] = 0.5 * c
    out[..., 1, 1] = -0.5 * s
    return out


def _drz(theta) -> np.ndarray:
    out = np.zeros(np.shape(theta) + (2, 2), dtype=np.complex128)
    out[..., 0, 0] = -0.5j * np.exp(-0.5j * theta)
    out[..., 1, 1] = 0.5j * np.exp(0.5j * theta)
    return out


_I2 = np.eye(2, dtype=np.complex128)
# local basis index = bit_a + 2 * bit_b
CNOT_B_TO_A = np.array([[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]], dtype=np.complex128)
CNOT_A_TO_B = np.array([[1, 0, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0], [0, 1, 0, 0]], dtype=np.complex128)


def _kron(mb: np.ndarray, ma: np.ndarray) -> np.ndarray:
    """Batched kron for the local basis: ``mb`` acts on b (high bit), ``ma`` on a."""
    out = mb[..., :, None, :, None] * ma[..., None, :, None, :]
    return out.reshape(out.shape[:-4] + (4, 4))


def _box_factors(angles: np.ndarray):
    """The seven 4x4 factors F1..F7 (application order) and their angle derivatives.

    Returns ``factors`` (7, …, 4, 4) and a list of ``(factor_index, angle_index, dF)``.
    """
    t = [angles[..., k] for k in range(ANGLES_PER_BOX)]
    ua1, ub1 = u3(t[0], t[1], t[2]), u3(t[3], t[4], t[5])
    ua2, ub2 = u3(t[9], t[10], t[11]), u3(t[12], t[13], t[14])
    rz7, ry8, ry9 = rz(t[6]), ry(t[7]), ry(t[8])
    batch = angles.shape[:-1]
    eye = np.broadcast_to(_I2, batch + (2, 2))
    factors = [
        _kron(ub1, ua1),
        np.broadcast_to(CNOT_B_TO_A, batch + (4, 4)),
        _kron(ry8, rz7),
        np.broadcast_to(CNOT_A_TO_B, batch + (4, 4)),
        _kron(ry9, eye),
        np.broadcast_to(CNOT_B_TO_A, batch + (4, 4)),
        _kron(ub2, ua2),
    ]
    dua1, dub1 = _du3(t[0], t[1], t[2]), _du3(t[3], t[4], t[5])
    dua2, dub2 = _du3(t[9], t[10], t[11]), _du3(t[12], t[13], t[14])
    derivs = []
    for j in range(3):
        derivs.append((0, j, _kron(ub1, dua1[..., j, :, :])))
    for j in range(3):
        derivs.append((0, 3 + j, _kron(dub1[..., j, :, :], ua1)))
    derivs.append((2, 6, _kron(ry8, _drz(t[6]))))
    derivs.append((2, 7, _kron(_dry(t[7]), rz7)))
    derivs.append((4, 8, _kron(_dry(t[8]), eye)))
    for j in range(3):
        derivs.append((6, 9 + j, _kron(ub2, dua2[..., j, :, :])))
    for j in range(3):
        derivs.append((6, 12 + j, _kron(dub2[..., j, :, :], ua2)))
    return factors, derivs


def box_matrix(angles: np.ndarray) -> np.ndarray:
    """Fused 4x4 unitary of one SU(4) box, batched over leading axes of ``angles``."""
    angles = np.asarray(angles, dtype=np.float64)
    if angles.shape[-1] != ANGLES_PER_BOX:
        raise ShapeError("an SU(4) box takes 15 angles", shape=list(angles.shape))
    factors, _ = _box_factors(angles)
    u = factors[0]
    for f in factors[1:]:
        u = f @ u
    return u


def box_matrix_and_grads(angles: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Fused box unitaries and their derivatives, shapes (…, 4, 4) and (…, 15, 4, 4)."""
    factors, derivs = _box_factors(angles)
    n = len(factors)
    prefix = [None] * (n + 1)  # prefix[j] = F_{j-1} ... F_0
    prefix[0] = np.broadcast_to(np.eye(4, dtype=np.complex128), angles.shape[:-1] + (4, 4))
    for j in range(n):
        prefix[j + 1] = factors[j] @ prefix[j]
    suffix = [None] * (n + 1)  # suffix[j] = F_{n-1} ... F_j
    suffix[n] = prefix[0]
    for j in range(n - 1, -1, -1):
        suffix[j] = suffix[j + 1] @ factors[j]
    d = np.empty(angles.shape[:-1] + (ANGLES_PER_BOX, 4, 4), dtype=np.complex128)
    for fi, k, df in derivs:
        d[..., k, :, :] = suffix[fi + 1] @ df @ prefix[fi]
    return prefix[n], d


# ---------------------------------------------------------------------------
# numba kernels: one statevector per sample, processed independently


# No NaN/inf handling in the hot loops; NaNs are caught on the Python side.
_FAST = {"nnan", "ninf", "nsz", "contract"}


@numba.njit(cache=True, inline="always")
def _insert_zero_bits(k, lo, hi):
    # spread k over the index bits other than lo < hi
    i = ((k >> lo) << (lo + 1)) | (k & ((1 << lo) - 1))
    return ((i >> hi) << (hi + 1)) | (i & ((1 << hi) - 1))


@numba.njit(cache=True, fastmath=_FAST)
def _apply4(psi, u, a, b):
    ma = 1 << a
    mb = 1 << b
    lo = min(a, b)
    hi = max(a, b)
    u00, u01, u02, u03 = u[0, 0], u[0, 1], u[0, 2], u[0, 3]
    u10, u11, u12, u13 = u[1, 0], u[1, 1], u[1, 2], u[1, 3]
    u20, u21, u22, u23 = u[2, 0], u[2, 1], u[2, 2], u[2, 3]
    u30, u31, u32, u33 = u[3, 0], u[3, 1], u[3, 2], u[3, 3]
    for k in range(psi.shape[0] >> 2):
        i0 = _insert_zero_bits(k, lo, hi)
        i1 = i0 | ma
        i2 = i0 | mb
        i3 = i1 | mb
        x0 = psi[i0]
        x1 = psi[i1]
        x2 = psi[i2]
        x3 = psi[i3]
        psi[i0] = u00 * x0 + u01 * x1 + u02 * x2 + u03 * x3
        psi[i1] = u10 * x0 + u11 * x1 + u12 * x2 + u13 * x3
        psi[i2] = u20 * x0 + u21 * x1 + u22 * x2 + u23 * x3
        psi[i3] = u30 * x0 + u31 * x1 + u32 * x2 + u33 * x3


@numba.njit(cache=True, fastmath=_FAST)
def _apply4_dagger(psi, u, a, b):
    ud = np.conj(u.T).copy()
    _apply4(psi, ud, a, b)


@numba.njit(cache=True, fastmath=_FAST)
def _expectations(psi, nq, out):
    """Fill out[:nq] with <X_q> and out[nq:] with <Z_q>."""
    n = psi.shape[0]
    for q in range(nq):
        m = 1 << q
        ex = 0.0
        ez = 0.0
        for k in range(n >> 1):
            i0 = ((k >> q) << (q + 1)) | (k & (m - 1))
            i1 = i0 | m
            x0 = psi[i0]
            x1 = psi[i1]
            ez += (x0.real * x0.real + x0.imag * x0.imag) - (x1.real * x1.real + x1.imag * x1.imag)
            ex += 2.0 * (x0.real * x1.real + x0.imag * x1.imag)
        out[q] = ex
        out[nq + q] = ez


@numba.njit(cache=True)
def _mm4(x, y, out):
    for i in range(4):
        for j in range(4):
            acc = 0.0 + 0.0j
            for k in range(4):
                acc += x[i, k] * y[k, j]
            out[i, j] = acc


@numba.njit(cache=True)
def _kron_into(mb, ma, out):
    for bo in range(2):
        for ao in range(2):
            for bi in range(2):
                for ai in range(2):
                    out[2 * bo + ao, 2 * bi + ai] = mb[bo, bi] * ma[ao, ai]


@numba.njit(cache=True)
def _u3_into(t, p, l, out):
    c = np.cos(0.5 * t)
    s = np.sin(0.5 * t)
    out[0, 0] = c
    out[0, 1] = -np.exp(1j * l) * s
    out[1, 0] = np.exp(1j * p) * s
    out[1, 1] = np.exp(1j * (p + l)) * c


@numba.njit(cache=True)
def _du3_into(t, p, l, out):
    c = np.cos(0.5 * t)
    s = np.sin(0.5 * t)
    el = np.exp(1j * l)
    ep = np.exp(1j * p)
    epl = np.exp(1j * (p + l))
    out[:] = 0.0
    out[0, 0, 0] = -0.5 * s
    out[0, 0, 1] = -0.5 * el * c
    out[0, 1, 0] = 0.5 * ep * c
    out[0, 1, 1] = -0.5 * epl * s
    out[1, 1, 0] = 1j * ep * s
    out[1, 1, 1] = 1j * epl * c
    out[2, 0, 1] = -1j * el * s
    out[2, 1, 1] = 1j * epl * c


@numba.njit(cache=True)
def _ry_into(t, out, deriv):
    c = np.cos(0.5 * t)
    s = np.sin(0.5 * t)
    if deriv:
        out[0, 0] = -0.5 * s
        out[0, 1] = -0.5 * c
        out[1, 0] = 0.5 * c
        out[1, 1] = -0.5 * s
    else:
        out[0, 0] = c
        out[0, 1] = -s
        out[1, 0] = s
        out[1, 1] = c


@numba.njit(cache=True)
def _rz_into(t, out, deriv):
    out[0, 1] = 0.0
    out[1, 0] = 0.0
    if deriv:
        out[0, 0] = -0.5j * np.exp(-0.5j * t)
        out[1, 1] = 0.5j * np.exp(0.5j * t)
    else:
        out[0, 0] = np.exp(-0.5j * t)
        out[1, 1] = np.exp(0.5j * t)


@numba.njit(cache=True)
def _factors_into(th, g2, f):
    """Fill single-qubit gates g2[0..6] and 4x4 factors f[0..6] for one box."""
    _u3_into(th[0], th[1], th[2], g2[0])  # a, first
    _u3_into(th[3], th[4], th[5], g2[1])  # b, first
    _rz_into(th[6], g2[2], False)  # a
    _ry_into(th[7], g2[3], False)  # b
    _ry_into(th[8], g2[4], False)  # b
    _u3_into(th[9], th[10], th[11], g2[5])  # a, last
    _u3_into(th[12], th[13], th[14], g2[6])  # b, last
    _kron_into(g2[1], g2[0], f[0])
    f[1] = 0.0
    f[1, 0, 0] = 1.0
    f[1, 1, 1] = 1.0
    f[1, 2, 3] = 1.0
    f[1, 3, 2] = 1.0
    _kron_into(g2[3], g2[2], f[2])
    f[3] = 0.0
    f[3, 0, 0] = 1.0
    f[3, 1, 3] = 1.0
    f[3, 2, 2] = 1.0
    f[3, 3, 1] = 1.0
    f[4] = 0.0  # RY on b, identity on a
    f[4, 0, 0] = g2[4, 0, 0]
    f[4, 0, 2] = g2[4, 0, 1]
    f[4, 2, 0] = g2[4, 1, 0]
    f[4, 2, 2] = g2[4, 1, 1]
    f[4, 1, 1] = g2[4, 0, 0]
    f[4, 1, 3] = g2[4, 0, 1]
    f[4, 3, 1] = g2[4, 1, 0]
    f[4, 3, 3] = g2[4, 1, 1]
    f[5] = f[1]
    _kron_into(g2[6], g2[5], f[6])


@numba.njit(cache=True)
def _box_mats(angles, out):
    """Fused 4x4 box unitaries for angles (batch, boxes, 15)."""
    g2 = np.empty((7, 2, 2), dtype=np.complex128)
    f = np.empty((7, 4, 4), dtype=np.complex128)
    tmp = np.empty((4, 4), dtype=np.complex128)
    for s in range(angles.shape[0]):
        for j in range(angles.shape[1]):
            _factors_into(angles[s, j], g2, f)
            acc = out[s, j]
            acc[:] = f[0]
            for k in range(1, 7):
                _mm4(f[k], acc, tmp)
                acc[:] = tmp


@numba.njit(cache=True)
def _kron_side_grad(g, other, dmat, side_b):
    """sum_kl g_kl dF_kl for F = kron(X_b, Y_a) differentiated on one side.

    side_b: dmat replaces X (b side) and ``other`` is Y; otherwise dmat is Y
    and ``other`` is X.
    """
    acc = 0.0 + 0.0j
    for bo in range(2):
        for ao in range(2):
            for bi in range(2):
                for ai in range(2):
                    if side_b:
                        v = dmat[bo, bi] * other[ao, ai]
                    else:
                        v = other[bo, bi] * dmat[ao, ai]
                    acc += g[2 * bo + ao, 2 * bi + ai] * v
    return acc


@numba.njit(cache=True)
def _box_angle_grads(angles, mgrad, out):
    """out[s, j, k] = 2 Re sum_xy mgrad[s, j, x, y] dU_xy/dtheta_k."""
    g2 = np.empty((7, 2, 2), dtype=np.complex128)
    f = np.empty((7, 4, 4), dtype=np.complex128)
    pre = np.empty((8, 4, 4), dtype=np.complex128)
    t = np.empty((4, 4), dtype=np.complex128)
    tmp = np.empty((4, 4), dtype=np.complex128)
    gf = np.empty((4, 4), dtype=np.complex128)
    du = np.empty((3, 2, 2), dtype=np.complex128)
    d2 = np.empty((2, 2), dtype=np.complex128)
    eye2 = np.eye(2).astype(np.complex128)
    for s in range(angles.shape[0]):
        for j in range(angles.shape[1]):
            th = angles[s, j]
            _factors_into(th, g2, f)
            pre[0] = 0.0
            for d in range(4):
                pre[0, d, d] = 1.0
            for k in range(7):
                _mm4(f[k], pre[k], pre[k + 1])
            # t holds (F_6 ... F_{k+1})^T M while sweeping k downward
            t[:] = mgrad[s, j]
            for k in range(6, -1, -1):
                _mm4(t, pre[k].T.copy(), gf)  # gradient w.r.t. factor k
                if k == 0:
                    _du3_into(th[0], th[1], th[2], du)
                    for r in range(3):
                        out[s, j, r] = 2.0 * _kron_side_grad(gf, g2[1], du[r], False).real
                    _du3_into(th[3], th[4], th[5], du)
                    for r in range(3):
                        out[s, j, 3 + r] = 2.0 * _kron_side_grad(gf, g2[0], du[r], True).real
                elif k == 2:
                    _rz_into(th[6], d2, True)
                    out[s, j, 6] = 2.0 * _kron_side_grad(gf, g2[3], d2, False).real
                    _ry_into(th[7], d2, True)
                    out[s, j, 7] = 2.0 * _kron_side_grad(gf, g2[2], d2, True).real
                elif k == 4:
                    _ry_into(th[8], d2, True)
                    out[s, j, 8] = 2.0 * _kron_side_grad(gf, eye2, d2, True).real
                elif k == 6:
                    _du3_into(th[9], th[10], th[11], du)
                    for r in range(3):
                        out[s, j, 9 + r] = 2.0 * _kron_side_grad(gf, g2[6], du[r], False).real
                    _du3_into(th[12], th[13], th[14], du)
                    for r in range(3):
                        out[s, j, 12 + r] = 2.0 * _kron_side_grad(gf, g2[5], du[r], True).real
                _mm4(f[k].T.copy(), t, tmp)
                t[:] = tmp


@numba.njit(cache=True, fastmath=_FAST)
def _run_circuit(mats, pairs, nq, states, latents, keep_states):
    bsz = mats.shape[0]
    nbox = mats.shape[1]
    dim = 1 << nq
    psi = np.zeros(dim, dtype=np.complex128)
    for s in range(bsz):
        psi[:] = 0.0
        psi[0] = 1.0
        for j in range(nbox):
            _apply4(psi, mats[s, j], pairs[j, 0], pairs[j, 1])
        _expectations(psi, nq, latents[s])
        if keep_states:
            states[s, :] = psi


@numba.njit(cache=True, fastmath=_FAST)
def _adjoint(mats, pairs, nq, states, cot, out_m):
    """Per-sample adjoint sweep.

    For loss = sum_q cot_X[q] <X_q> + cot_Z[q] <Z_q>, fills
    out_m[s, j] = sum_r conj(lam_r) (x) phi_r, with lam the back-propagated
    cotangent state after box j and phi the state before box j. The angle
    gradient is then 2 Re sum(out_m * dU).
    """
    bsz = mats.shape[0]
    nbox = mats.shape[1]
    dim = 1 << nq
    phi = np.empty(dim, dtype=np.complex128)
    lam = np.empty(dim, dtype=np.complex128)
    zw = np.empty(dim, dtype=np.float64)
    for s in range(bsz):
        phi[:] = states[s]
        # lam = O phi with O = sum_q cX_q X_q + cZ_q Z_q
        for i in range(dim):
            w = 0.0
            for q in range(nq):
                if i & (1 << q):
                    w -= cot[s, nq + q]
                else:
                    w += cot[s, nq + q]
            zw[i] = w
        for i in range(dim):
            lam[i] = zw[i] * phi[i]
        for q in range(nq):
            cx = cot[s, q]
            if cx != 0.0:
                m = 1 << q
                for i in range(dim):
                    lam[i] += cx * phi[i ^ m]
        for j in range(nbox - 1, -1, -1):
            a = pairs[j, 0]
            b = pairs[j, 1]
            u = mats[s, j]
            _apply4_dagger(phi, u, a, b)
            ma = 1 << a
            mb = 1 << b
            lo = min(a, b)
            hi = max(a, b)
            a00 = a01 = a02 = a03 = 0.0 + 0.0j
            a10 = a11 = a12 = a13 = 0.0 + 0.0j
            a20 = a21 = a22 = a23 = 0.0 + 0.0j
            a30 = a31 = a32 = a33 = 0.0 + 0.0j
            for k in range(dim >> 2):
                i0 = _insert_zero_bits(k, lo, hi)
                i1 = i0 | ma
                i2 = i0 | mb
                i3 = i1 | mb
                l0 = np.conj(lam[i0])
                l1 = np.conj(lam[i1])
                l2 = np.conj(lam[i2])
                l3 = np.conj(lam[i3])
                p0 = phi[i0]
                p1 = phi[i1]
                p2 = phi[i2]
                p3 = phi[i3]
                a00 += l0 * p0
                a01 += l0 * p1
                a02 += l0 * p2
                a03 += l0 * p3
                a10 += l1 * p0
                a11 += l1 * p1
                a12 += l1 * p2
                a13 += l1 * p3
                a20 += l2 * p0
                a21 += l2 * p1
                a22 += l2 * p2
                a23 += l2 * p3
                a30 += l3 * p0
                a31 += l3 * p1
                a32 += l3 * p2
                a33 += l3 * p3
            o = out_m[s, j]
            o[0, 0] = a00
            o[0, 1] = a01
            o[0, 2] = a02
            o[0, 3] = a03
            o[1, 0] = a10
            o[1, 1] = a11
            o[1, 2] = a12
            o[1, 3] = a13
            o[2, 0] = a20
            o[2, 1] = a21
            o[2, 2] = a22
            o[2, 3] = a23
            o[3, 0] = a30
            o[3, 1] = a31
            o[3, 2] = a32
            o[3, 3] = a33
            _apply4_dagger(lam, u, a, b)


# ---------------------------------------------------------------------------
# Public operations


def _check_qubits(nq: int, a: int, b: int) -> None:
    if a == b or not (0 <= a < nq) or not (0 <= b < nq):
        raise ShapeError("invalid qubit pair", num_qubits=nq, qubits=[a, b])


def su4_block(state: np.ndarray, qubits: tuple[int, int], angles) -> np.ndarray:
    """Apply one SU(4) box to a statevector (returns a new array)."""
    psi = np.array(state, dtype=np.complex128, copy=True)
    nq = int(np.log2(psi.shape[-1]))
    if psi.ndim != 1 or (1 << nq) != psi.shape[0]:
        raise ShapeError("statevector length must be a power of two", shape=list(psi.shape))
    a, b = (int(q) for q in qubits)
    _check_qubits(nq, a, b)
    angles = np.asarray(angles, dtype=np.float64)
    if angles.shape != (ANGLES_PER_BOX,):
        raise ShapeError("an SU(4) box takes exactly 15 angles", shape=list(angles.shape))
    _apply4(psi, box_matrix(angles), a, b)
    return psi


def zero_state(num_qubits: int) -> np.ndarray:
    psi = np.zeros(1 << num_qubits, dtype=np.complex128)
    psi[0] = 1.0
    return psi


def _as_noise_batch(spec: CircuitSpec, xi) -> tuple[np.ndarray, bool]:
    xi = np.asarray(xi, dtype=np.float64)
    single = xi.ndim == 1
    xi = np.atleast_2d(xi)
    if xi.shape[-1] != spec.num_qubits:
        raise ShapeError("noise length must equal the qubit count", expected=spec.num_qubits, got=xi.shape[-1])
    return xi, single


def angles_from_noise(params: StyleParams, xi) -> np.ndarray:
    """Rotation angles ``2*pi*tanh(xi_q * W + b)``; shape (batch, boxes, 15)."""
    xi, single = _as_noise_batch(params.spec, xi)
    pre = xi[:, params.spec.qubit_map] * params.W + params.b
    theta = TWO_PI * np.tanh(pre)
    return theta[0] if single else theta


def simulate(spec: CircuitSpec, angles: np.ndarray, keep_states: bool = False):
    """Run the circuit for a batch of angle sets (batch, boxes, 15).

    Returns ``(latents, final_states_or_None, box_matrices)``.
    """
    angles = np.ascontiguousarray(angles, dtype=np.float64)
    if angles.ndim == 2:
        angles = angles[None]
    if angles.shape[1:] != (spec.num_boxes, ANGLES_PER_BOX):
        raise ShapeError("angle tensor shape mismatch", expected=[spec.num_boxes, ANGLES_PER_BOX],
                         got=list(angles.shape[1:]))
    bsz = angles.shape[0]
    mats = np.empty(angles.shape[:2] + (4, 4), dtype=np.complex128)
    _box_mats(angles, mats)
    latents = np.empty((bsz, spec.latent_dim))
    states = np.empty((bsz if keep_states else 1, 1 << spec.num_qubits), dtype=np.complex128)
    _run_circuit(mats, spec.pairs, spec.num_qubits, states, latents, keep_states)
    return latents, (states if keep_states else None), mats


def final_state(spec: CircuitSpec, angles: np.ndarray) -> np.ndarray:
    """Final statevector(s) for angles shaped (boxes, 15) or (batch, boxes, 15)."""
    single = np.asarray(angles).ndim == 2
    _, states, _ = simulate(spec, angles, keep_states=True)
    return states[0] if single else states


def generate_latent(params: StyleParams, xi) -> np.ndarray:
    """Exact (<X_0..X_{Q-1}>, <Z_0..Z_{Q-1}>) for each noise vector."""
    xi, single = _as_noise_batch(params.spec, xi)
    latents, _, _ = simulate(params.spec, angles_from_noise(params, xi))
    return latents[0] if single else latents


def angle_vjp(spec: CircuitSpec, angles: np.ndarray, cotangent: np.ndarray, forward=None) -> np.ndarray:
    """d(sum cotangent * latent)/d(angles) via adjoint differentiation.

    ``angles`` (batch, boxes, 15), ``cotangent`` (batch, 2Q). Returns
    (batch, boxes, 15). ``forward`` may be the result of
    ``simulate(spec, angles, keep_states=True)`` to skip re-running the circuit.
    """
    angles = np.ascontiguousarray(angles, dtype=np.float64)
    cot = np.ascontiguousarray(np.atleast_2d(cotangent), dtype=np.float64)
    if cot.shape != (angles.shape[0], spec.latent_dim):
        raise ShapeError("cotangent shape mismatch", expected=[angles.shape[0], spec.latent_dim], got=list(cot.shape))
    if forward is None or forward[1] is None:
        forward = simulate(spec, angles, keep_states=True)
    _, states, mats = forward
    m = np.empty(mats.shape, dtype=np.complex128)
    _adjoint(mats, spec.pairs, spec.num_qubits, states, cot, m)
    out = np.empty(angles.shape)
    _box_angle_grads(angles, m, out)
    return out


def latent_jacobian_angles(spec: CircuitSpec, angles: np.ndarray) -> np.ndarray:
    """Full Jacobian d latent / d angles for one angle set: (2Q, boxes, 15)."""
    eye = np.eye(spec.latent_dim)
    batch = np.broadcast_to(angles, (spec.latent_dim,) + np.shape(angles))
    return angle_vjp(spec, batch, eye)


def latent_vjp(params: StyleParams, xi, cotangent, forward=None) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``sum(cotangent * generate_latent(params, xi))`` w.r.t. W and b.

    The batch reduction runs in a fixed order so results are reproducible.
    """
    xi, _ = _as_noise_batch(params.spec, xi)
    cot = np.atleast_2d(np.asarray(cotangent, dtype=np.float64))
    qmap = params.spec.qubit_map
    th = np.tanh(xi[:, qmap] * params.W + params.b)
    g_theta = angle_vjp(params.spec, TWO_PI * th, cot, forward=forward)
    g_pre = g_theta * (TWO_PI * (1.0 - th * th))
    db = np.sum(g_pre, axis=0)
    dW = np.sum(g_pre * xi[:, qmap], axis=0)
    return dW, db


def latent_gradients(params: StyleParams, xi) -> tuple[np.ndarray, np.ndarray]:
    """Full Jacobians d latent / dW and d latent / db for a single noise vector.

    Shapes (2Q, boxes, 15) each.
    """
    xi = np.asarray(xi, dtype=np.float64)
    if xi.ndim != 1:
        raise ShapeError("latent_gradients takes one noise vector", shape=list(xi.shape))
    spec = params.spec
    pre = xi[spec.qubit_map] * params.W + params.b
    th = np.tanh(pre)
    jac = latent_jacobian_angles(spec, TWO_PI * th)
    g_pre = jac * (TWO_PI * (1.0 - th * th))
    return g_pre * xi[spec.qubit_map], g_pre
