"""Quaternion and small symmetric-matrix utilities.

Quaternions are stored scalar-first, ``q = (w, x, y, z)``, and act on vectors
as ``v' = R(q) v`` with the usual right-handed (Hamilton) product. Functions
accept a single quaternion of shape ``(4,)`` or a stack of shape ``(..., 4)``.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidArgumentError

__all__ = [
    "quat_normalize",
    "quat_to_matrix",
    "random_rotation",
    "random_rotations",
    "sym_eig",
    "min_eigvec_sym4",
    "canonical_sign",
    "ROTATION_FORMS",
    "rotation_form",
]


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0.0) or not np.all(np.isfinite(norm)):
        raise InvalidArgumentError("quaternion must have finite nonzero norm")
    return q / norm


def _quat_matrix_unnormalized(q):
    w, x, y, z = np.moveaxis(q, -1, 0)
    rows = [
        [w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), w * w - x * x - y * y + z * z],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def quat_to_matrix(q):
    """Rotation matrix of ``q`` (normalized internally). ``q`` and ``-q`` agree."""
    return _quat_matrix_unnormalized(quat_normalize(q))


def _build_rotation_forms():
    # R(q)[r, c] == q @ E[r, c] @ q for unit q; E[r, c] is symmetric 4x4.
    eye = np.eye(4)
    diag = _quat_matrix_unnormalized(eye)  # (4, 3, 3): M(e_j)
    forms = np.zeros((3, 3, 4, 4))
    for j in range(4):
        forms[:, :, j, j] = diag[j]
        for k in range(j + 1, 4):
            cross = _quat_matrix_unnormalized(eye[j] + eye[k]) - diag[j] - diag[k]
            forms[:, :, j, k] = forms[:, :, k, j] = 0.5 * cross
    return forms


ROTATION_FORMS = _build_rotation_forms()


def rotation_form(a, b):
    """Symmetric 4x4 ``P`` with ``b @ R(q) @ a == q @ P @ q / (q @ q)``.

    ``a`` and ``b`` may be stacks of shape ``(..., 3)``; the result then has
    shape ``(..., 4, 4)``.
    """
    return np.einsum("...r,...c,rcjk->...jk", b, a, ROTATION_FORMS)


def random_rotations(rng: np.random.Generator, n: int):
    """``n`` quaternions uniformly distributed over SO(3), shape ``(n, 4)``."""
    u = rng.random((n, 3))
    s, t1, t2 = u[:, 0], 2.0 * np.pi * u[:, 1], 2.0 * np.pi * u[:, 2]
    s1 = np.sqrt(1.0 - s)
    s2 = np.sqrt(s)
    q = np.stack([np.cos(t2) * s2, np.sin(t1) * s1, np.cos(t1) * s1, np.sin(t2) * s2], axis=-1)
    return quat_normalize(q)


def random_rotation(rng: np.random.Generator):
    return random_rotations(rng, 1)[0]


def sym_eig(a):
    """Eigenvalues (ascending) and eigenvectors of symmetric matrices.

    Accepts a single matrix or a stack ``(..., n, n)``; the input is
    symmetrized first. Backed by LAPACK's iterative tridiagonal solver.
    """
    a = np.asarray(a, dtype=float)
    return np.linalg.eigh(0.5 * (a + np.swapaxes(a, -1, -2)))


def canonical_sign(v, eps=1e-12):
    """Flip each vector so its first component with ``|v_k| > eps`` is positive."""
    v = np.asarray(v, dtype=float)
    big = np.abs(v) > eps
    first = np.argmax(big, axis=-1)
    lead = np.take_along_axis(v, first[..., None], axis=-1)
    sign = np.where(lead < 0.0, -1.0, 1.0)
    return v * sign


def min_eigvec_sym4(b):
    """Unit eigenvector of the smallest eigenvalue of a symmetric 4x4 matrix.

    Stacks ``(..., 4, 4)`` are handled elementwise. The sign is fixed so that
    the first nonzero component is positive.
    """
    b = np.asarray(b, dtype=float)
    if b.shape[-2:] != (4, 4):
        raise InvalidArgumentError(f"expected (..., 4, 4) matrix, got {b.shape}")
    _, vecs = sym_eig(b)
    v = vecs[..., :, 0]
    v = v / np.linalg.norm(v, axis=-1, keepdims=True)
    return canonical_sign(v)
