"""4D Gaussian primitives: covariance factorization, time conditioning and TEASH color.

A scene is a batched :class:`Primitive4D` whose fields carry a leading axis of
length N.  All math is float64 torch so it composes with autograd.
"""

from dataclasses import dataclass, fields
import math

import torch

from .sh import num_coeffs, sh_basis

DTYPE = torch.float64
COV_FLOOR = 1e-7
SH_DC_OFFSET = 0.5


@dataclass
class Primitive4D:
    mu_x: torch.Tensor  # [N, 3]
    mu_t: torch.Tensor  # [N]
    log_scale: torch.Tensor  # [N, 4], last axis is time
    rot_left: torch.Tensor  # [N, 4] quaternion (w, x, y, z)
    rot_right: torch.Tensor  # [N, 4]
    logit_opacity: torch.Tensor  # [N]
    sh_coeffs: torch.Tensor  # [N, N_t + 1, (L + 1)**2, 3]
    phases: torch.Tensor  # [N, N_t + 1]

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]

    @property
    def count(self):
        return self.mu_x.shape[0]

    @property
    def sh_degree(self):
        return math.isqrt(self.sh_coeffs.shape[2]) - 1

    @property
    def n_freq(self):
        return self.sh_coeffs.shape[1] - 1

    @property
    def opacity(self):
        return torch.sigmoid(self.logit_opacity)

    def as_dict(self):
        return {name: getattr(self, name) for name in self.field_names()}

    def map(self, fn):
        return Primitive4D(**{k: fn(v) for k, v in self.as_dict().items()})

    def __getitem__(self, idx):
        if isinstance(idx, int):
            idx = slice(idx, idx + 1)
        return self.map(lambda v: v[idx])

    def detach(self):
        return self.map(lambda v: v.detach().clone())

    def requires_grad_(self):
        for v in self.as_dict().values():
            v.requires_grad_(True)
        return self

    @staticmethod
    def cat(parts):
        names = Primitive4D.field_names()
        return Primitive4D(**{n: torch.cat([getattr(p, n) for p in parts]) for n in names})

    @staticmethod
    def create(mu_x, mu_t, log_scale, rot_left=None, rot_right=None, opacity=0.5,
               sh_coeffs=None, phases=None, sh_degree=3, n_freq=2):
        """Build a batch from loosely-typed inputs, filling identity rotations etc."""
        mu_x = torch.as_tensor(mu_x, dtype=DTYPE).reshape(-1, 3)
        n = mu_x.shape[0]

        def vec(v, shape):
            return torch.as_tensor(v, dtype=DTYPE).expand(*shape).clone()

        ident = torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=DTYPE)
        rot_left = ident.expand(n, 4).clone() if rot_left is None else vec(rot_left, (n, 4))
        rot_right = ident.expand(n, 4).clone() if rot_right is None else vec(rot_right, (n, 4))
        op = torch.as_tensor(opacity, dtype=DTYPE).expand(n).clone()
        if sh_coeffs is None:
            sh_coeffs = torch.zeros(n, n_freq + 1, num_coeffs(sh_degree), 3, dtype=DTYPE)
        else:
            sh_coeffs = torch.as_tensor(sh_coeffs, dtype=DTYPE).clone()
        if phases is None:
            phases = torch.zeros(n, sh_coeffs.shape[1], dtype=DTYPE)
        return Primitive4D(
            mu_x=mu_x.clone(),
            mu_t=vec(mu_t, (n,)),
            log_scale=vec(log_scale, (n, 4)),
            rot_left=rot_left,
            rot_right=rot_right,
            logit_opacity=torch.logit(op.clamp(1e-12, 1 - 1e-12)),
            sh_coeffs=sh_coeffs,
            phases=torch.as_tensor(phases, dtype=DTYPE).clone(),
        )


@dataclass
class Cov4Blocks:
    sigma_xx: torch.Tensor  # [..., 3, 3]
    sigma_xt: torch.Tensor  # [..., 3]
    sigma_tt: torch.Tensor  # [...]


@dataclass
class ConditionalGaussian3D:
    mean3: torch.Tensor  # [N, 3]
    cov3: torch.Tensor  # [N, 3, 3]
    temporal_weight: torch.Tensor  # [N]
    n_clamped: int = 0


def left_isoclinic(q):
    a, b, c, d = q.unbind(-1)
    rows = [
        [a, -b, -c, -d],
        [b, a, -d, c],
        [c, d, a, -b],
        [d, -c, b, a],
    ]
    return torch.stack([torch.stack(r, -1) for r in rows], -2)


def right_isoclinic(q):
    p, q1, r, s = q.unbind(-1)
    rows = [
        [p, -q1, -r, -s],
        [q1, p, s, -r],
        [r, -s, p, q1],
        [s, r, -q1, p],
    ]
    return torch.stack([torch.stack(r_, -1) for r_ in rows], -2)


def rotation4(rot_left, rot_right):
    """4x4 rotation from a left/right unit quaternion pair."""
    return left_isoclinic(rot_left) @ right_isoclinic(rot_right)


def build_cov4(log_scale, rot_left, rot_right):
    log_scale = torch.as_tensor(log_scale, dtype=DTYPE)
    R = rotation4(torch.as_tensor(rot_left, dtype=DTYPE), torch.as_tensor(rot_right, dtype=DTYPE))
    RS = R * torch.exp(log_scale).unsqueeze(-2)
    cov = RS @ RS.transpose(-1, -2)
    return 0.5 * (cov + cov.transpose(-1, -2))


def split_cov4(cov4):
    return Cov4Blocks(cov4[..., :3, :3], cov4[..., :3, 3], cov4[..., 3, 3])


def cov4_of(p):
    return build_cov4(p.log_scale, p.rot_left, p.rot_right)


def _floor_eigenvalues(cov3):
    """Clamp eigenvalues below COV_FLOOR, touching only the offending matrices."""
    with torch.no_grad():
        low = torch.linalg.eigvalsh(cov3)[..., 0] < COV_FLOOR
    n_low = int(low.sum())
    if n_low == 0:
        return cov3, 0
    evals, evecs = torch.linalg.eigh(cov3[low])
    fixed = (evecs * evals.clamp_min(COV_FLOOR).unsqueeze(-2)) @ evecs.transpose(-1, -2)
    out = cov3.clone()
    out[low] = fixed
    return out, n_low


def condition_at_time(p, t):
    """Slice the 4D Gaussian at time ``t`` into a 3D Gaussian and a temporal weight."""
    blocks = split_cov4(cov4_of(p))
    sigma_tt = blocks.sigma_tt
    n_clamped = int((sigma_tt.detach() < COV_FLOOR).sum())
    sigma_tt = sigma_tt.clamp_min(COV_FLOOR)
    dt = torch.as_tensor(t, dtype=DTYPE) - p.mu_t
    gain = blocks.sigma_xt / sigma_tt.unsqueeze(-1)
    mean3 = p.mu_x + gain * dt.unsqueeze(-1)
    cov3 = blocks.sigma_xx - gain.unsqueeze(-1) * blocks.sigma_xt.unsqueeze(-2)
    cov3 = 0.5 * (cov3 + cov3.transpose(-1, -2))
    cov3, n_floor = _floor_eigenvalues(cov3)
    weight = torch.exp(-0.5 * dt * dt / sigma_tt)
    return ConditionalGaussian3D(mean3, cov3, weight, n_clamped + n_floor)


def eval_density4(p, x, t):
    """Unnormalized 4D density at (x, t); x is [N, 3] or broadcastable, t scalar or [N]."""
    x = torch.as_tensor(x, dtype=DTYPE)
    t = torch.as_tensor(t, dtype=DTYPE)
    d = torch.cat([x - p.mu_x, (t - p.mu_t).expand(p.mu_t.shape).unsqueeze(-1)], dim=-1)
    sol = torch.linalg.solve(cov4_of(p), d.unsqueeze(-1)).squeeze(-1)
    return torch.exp(-0.5 * (d * sol).sum(-1))


def eval_conditional3(g, x):
    """3D density of a conditioned Gaussian at points x, without the temporal weight."""
    d = torch.as_tensor(x, dtype=DTYPE) - g.mean3
    sol = torch.linalg.solve(g.cov3, d.unsqueeze(-1)).squeeze(-1)
    return torch.exp(-0.5 * (d * sol).sum(-1))


def position_at(p, t):
    return condition_at_time(p, t).mean3


def velocity(p):
    """Constant trajectory slope Sigma_xt / Sigma_tt (scene units per unit time)."""
    blocks = split_cov4(cov4_of(p))
    return blocks.sigma_xt / blocks.sigma_tt.clamp_min(COV_FLOOR).unsqueeze(-1)


def temporal_atoms(n_freq, t, phases):
    """cos(2*pi*n*t + phi_n) for n = 0..n_freq; phases [N, n_freq+1] -> [N, n_freq+1]."""
    n = torch.arange(n_freq + 1, dtype=DTYPE)
    t = torch.as_tensor(t, dtype=DTYPE)
    return torch.cos(2.0 * math.pi * n * t + phases)


def teash_eval(p, dirs, t):
    """RGB color per primitive for unit view directions ``dirs`` [N, 3] at time ``t``.

    The n = 0 phase is pinned to zero regardless of the stored value.
    """
    phases = torch.cat([torch.zeros_like(p.phases[:, :1]), p.phases[:, 1:]], dim=1)
    atoms = temporal_atoms(p.n_freq, t, phases)  # [N, F]
    basis = sh_basis(p.sh_degree, dirs)  # [N, K]
    raw = torch.einsum("nfkc,nf,nk->nc", p.sh_coeffs, atoms, basis)
    return torch.clamp_min(raw + SH_DC_OFFSET, 0.0)


def normalize_quaternions_(p):
    with torch.no_grad():
        for q in (p.rot_left, p.rot_right):
            q /= torch.linalg.vector_norm(q, dim=-1, keepdim=True).clamp_min(1e-12)
    return p
