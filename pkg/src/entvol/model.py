"""PDE instances and the physical scales derived from them.

The reaction-diffusion system is ``du/dt = D u'' + F(u)`` with ``N`` real
components.  For the complex Ginzburg-Landau equation the complex field
``v = u1 + i u2`` gives ``D = [[1, -alpha], [alpha, 1]]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

DEFAULT_K_STAR_PREFACTOR = 4.0


class ValidationError(ValueError):
    """Raised when a model, configuration or call violates a precondition."""


@dataclass(frozen=True)
class CGL:
    alpha: float
    beta: float

    kind = "cgl"


@dataclass(frozen=True)
class ModelSpec:
    n_components: int
    diffusion: np.ndarray
    nonlinearity: Optional[CGL]
    q_star: float
    m_star_override: Optional[float] = None

    def __post_init__(self):
        d = np.array(self.diffusion, dtype=float)
        d.setflags(write=False)
        object.__setattr__(self, "diffusion", d)
        if self.n_components < 1:
            raise ValidationError("n_components must be positive")
        if d.shape != (self.n_components, self.n_components):
            raise ValidationError(
                f"diffusion has shape {d.shape}, expected "
                f"({self.n_components}, {self.n_components})"
            )
        if not self.q_star > 0:
            raise ValidationError(f"q_star must be positive, got {self.q_star}")
        if self.m_star_override is not None and not self.m_star_override > 0:
            raise ValidationError("m_star_override must be positive")
        if isinstance(self.nonlinearity, CGL) and self.n_components != 2:
            raise ValidationError("the CGL real form has exactly 2 components")
        eig = np.linalg.eigvalsh(symmetric_part(d))
        if eig[0] <= 0:
            raise ValidationError(
                f"symmetric part of diffusion is not positive definite: "
                f"smallest eigenvalue {eig[0]:.6g}"
            )

    @classmethod
    def cgl(cls, alpha: float, beta: float, q_star: float,
            m_star_override: Optional[float] = None) -> "ModelSpec":
        return cls(
            n_components=2,
            diffusion=cgl_diffusion(alpha),
            nonlinearity=CGL(float(alpha), float(beta)),
            q_star=float(q_star),
            m_star_override=m_star_override,
        )

    def fingerprint(self) -> dict:
        return {
            "n_components": self.n_components,
            "diffusion": self.diffusion.tolist(),
            "nonlinearity": None if self.nonlinearity is None else
            {"type": "cgl", "alpha": self.nonlinearity.alpha, "beta": self.nonlinearity.beta},
            "q_star": self.q_star,
            "m_star_override": self.m_star_override,
        }


@dataclass(frozen=True)
class ScaleSet:
    nu_star: float
    d_star: float
    m_star: float
    tau_star: float
    delta_star: float
    k_star: float
    k_star_prefactor: float = field(default=DEFAULT_K_STAR_PREFACTOR)

    @property
    def condition_ratio(self) -> float:
        return self.d_star / self.nu_star

    def as_dict(self) -> dict:
        return {
            "nu_star": self.nu_star,
            "d_star": self.d_star,
            "m_star": self.m_star,
            "tau_star": self.tau_star,
            "delta_star": self.delta_star,
            "k_star": self.k_star,
            "k_star_prefactor": self.k_star_prefactor,
            "condition_ratio": self.condition_ratio,
        }


def cgl_diffusion(alpha: float) -> np.ndarray:
    return np.array([[1.0, -alpha], [alpha, 1.0]])


def symmetric_part(d) -> np.ndarray:
    d = np.asarray(d, dtype=float)
    return 0.5 * (d + d.T)


def nu_star_of(d) -> float:
    """Smallest eigenvalue of the symmetric part of ``d``."""
    eig = np.linalg.eigvalsh(symmetric_part(d))
    if eig[0] <= 0:
        raise ValidationError(
            f"symmetric part of diffusion has non-positive eigenvalue {eig[0]:.6g}"
        )
    return float(eig[0])


def d_star_of(d) -> float:
    """Operator norm of ``d`` on l2(R^N), i.e. its largest singular value."""
    return float(np.linalg.norm(np.asarray(d, dtype=float), 2))


def compute_nu_star(spec: ModelSpec) -> float:
    return nu_star_of(spec.diffusion)


def compute_d_star(spec: ModelSpec) -> float:
    return d_star_of(spec.diffusion)


def cgl_m_star(beta: float, q_star: float) -> float:
    """Bound on the linearised expansion matrix of the CGL equation."""
    return 1.0 + 3.0 * (1.0 + abs(beta)) * q_star ** 2 / 4.0


def compute_m_star(spec: ModelSpec) -> float:
    if spec.m_star_override is not None:
        return float(spec.m_star_override)
    if isinstance(spec.nonlinearity, CGL):
        return cgl_m_star(spec.nonlinearity.beta, spec.q_star)
    raise ValidationError(
        "no closed-form expansion bound for this nonlinearity; "
        "supply m_star_override explicitly"
    )


def scales_from(nu_star: float, d_star: float, m_star: float,
                k_star_prefactor: float = DEFAULT_K_STAR_PREFACTOR) -> ScaleSet:
    if not (nu_star > 0 and d_star > 0 and m_star > 0):
        raise ValidationError("nu_star, d_star and m_star must all be positive")
    if not k_star_prefactor > 0:
        raise ValidationError("k_star_prefactor must be positive")
    tau = 1.0 / m_star
    delta = math.sqrt(d_star * tau)
    k_star = k_star_prefactor * math.sqrt(m_star / nu_star)
    # k*^2 nu* tau* = prefactor^2, so the admissible minimum is 1
    if k_star * k_star * nu_star * tau < 1.0 * (1 - 1e-12):
        raise ValidationError(
            f"k_star_prefactor={k_star_prefactor} violates k*^2 >= 1/(nu* tau*); "
            f"minimum admissible prefactor is 1.0"
        )
    return ScaleSet(nu_star, d_star, m_star, tau, delta, k_star, k_star_prefactor)


def derive_scales(spec: ModelSpec,
                  k_star_prefactor: float = DEFAULT_K_STAR_PREFACTOR) -> ScaleSet:
    return scales_from(compute_nu_star(spec), compute_d_star(spec),
                       compute_m_star(spec), k_star_prefactor)
