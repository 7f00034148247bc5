"""Real spherical harmonics up to degree 3.

Uses the orthonormal real basis without the Condon-Shortley phase, so
``Y_1^{-1}, Y_1^0, Y_1^1`` are proportional to ``y, z, x``.  Coefficients are
stored flattened with index ``l*l + l + m``.
"""

import math

import torch

MAX_DEGREE = 3

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (
    1.0925484305920792,
    1.0925484305920792,
    0.31539156525252005,
    1.0925484305920792,
    0.5462742152960396,
)
C3 = (
    0.5900435899266435,
    2.890611442640554,
    0.4570457994644658,
    0.3731763325901154,
    0.4570457994644658,
    1.445305721320277,
    0.5900435899266435,
)


def num_coeffs(degree):
    return (degree + 1) ** 2


def flat_index(l, m):
    return l * l + l + m


def sh_basis(degree, dirs):
    """All basis functions up to ``degree`` at unit directions ``dirs`` [..., 3].

    Returns a tensor [..., (degree+1)**2].
    """
    if not 0 <= degree <= MAX_DEGREE:
        raise ValueError(f"SH degree must be in [0, {MAX_DEGREE}], got {degree}")
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = [torch.full_like(x, C0)]
    if degree >= 1:
        out += [C1 * y, C1 * z, C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out += [
            C2[0] * x * y,
            C2[1] * y * z,
            C2[2] * (2.0 * zz - xx - yy),
            C2[3] * x * z,
            C2[4] * (xx - yy),
        ]
    if degree >= 3:
        out += [
            C3[0] * y * (3.0 * xx - yy),
            C3[1] * x * y * z,
            C3[2] * y * (4.0 * zz - xx - yy),
            C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
            C3[4] * x * (4.0 * zz - xx - yy),
            C3[5] * z * (xx - yy),
            C3[6] * x * (xx - 3.0 * yy),
        ]
    return torch.stack(out, dim=-1)


def real_sh_basis(l, m, direction):
    """Single real SH value ``Y_l^m`` at a unit direction (scalar in, float out)."""
    if not (0 <= l <= MAX_DEGREE and abs(m) <= l):
        raise ValueError(f"invalid SH index (l={l}, m={m})")
    d = torch.as_tensor(direction, dtype=torch.float64)
    norm = float(torch.linalg.vector_norm(d))
    if not math.isclose(norm, 1.0, abs_tol=1e-9):
        raise ValueError(f"direction must be unit-norm, got norm {norm}")
    return float(sh_basis(l, d)[flat_index(l, m)])
