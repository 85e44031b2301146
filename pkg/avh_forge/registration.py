"""
Non-rigid registration of a posed template onto a scan surface.

The vertices move by gradient descent on

    E(V) = sum_i |v_i - closest_scan(v_i)|^2 + lambda * sum_i |L(V)_i - L(V0)_i|^2

where ``L`` is the uniform Laplacian and ``V0`` the starting positions, so the
regularizer penalizes changes of the template's differential coordinates
rather than curvature itself. Closest points are refreshed every iteration.
"""

import logging
from dataclasses import dataclass, field
from typing import List

import numpy as np
import scipy.sparse as sp

from .accel import SurfaceAccel
from .mesh import TriMesh, compute_normals

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RegistrationParams:
    """
    :param lambda_laplacian: Weight of the Laplacian term.
    :param step_size: Initial step along the negative gradient, reset every iteration.
    :param max_iters: Maximum number of accepted steps.
    :param convergence_tol: Stop once the relative energy decrease falls below this.
    :param max_backtracks: Step halvings tried before giving up on an iteration.
    """

    lambda_laplacian: float = 1.0
    step_size: float = 0.5
    max_iters: int = 100
    convergence_tol: float = 1e-5
    max_backtracks: int = 30

    def __post_init__(self):
        if self.lambda_laplacian < 0:
            raise RegistrationError("lambda_laplacian must be nonnegative")
        if self.step_size <= 0 or self.convergence_tol <= 0:
            raise RegistrationError("step_size and convergence_tol must be positive")
        if self.max_iters < 0 or self.max_backtracks < 0:
            raise RegistrationError("max_iters and max_backtracks must be nonnegative")


@dataclass
class RegistrationResult:
    mesh: TriMesh
    energies: List[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False


def laplacian_matrix(mesh: TriMesh) -> sp.csr_matrix:
    """Sparse uniform Laplacian ``D^-1 A - I``; rows of isolated vertices are zero."""
    n = mesh.n_vertices
    edges = mesh.edges()
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    adjacency = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    degree = np.asarray(adjacency.sum(axis=1)).ravel()
    connected = degree > 0
    inv_degree = np.where(connected, 1.0 / np.where(connected, degree, 1.0), 0.0)
    return (sp.diags(inv_degree) @ adjacency - sp.diags(connected.astype(np.float64))).tocsr()


def uniform_laplacian(mesh: TriMesh) -> np.ndarray:
    """Mean of each vertex's neighbors minus the vertex; zero for isolated vertices."""
    return laplacian_matrix(mesh) @ mesh.vertices


class _Energy:
    def __init__(self, scan_accel: SurfaceAccel, laplacian, reference, weight):
        self.scan_accel = scan_accel
        self.laplacian = laplacian
        self.reference = reference
        self.weight = weight

    def __call__(self, vertices):
        closest, _, dist2 = self.scan_accel.closest_points(vertices)
        residual = self.laplacian @ vertices - self.reference
        energy = float(np.sum(dist2) + self.weight * np.sum(residual * residual))
        return energy, closest, residual

    def gradient(self, vertices, closest, residual):
        return 2.0 * (vertices - closest) + 2.0 * self.weight * (self.laplacian.T @ residual)


def optimize(
    shadow: TriMesh, scan_accel: SurfaceAccel, params: RegistrationParams = RegistrationParams()
) -> RegistrationResult:
    """Run the registration and return the mesh together with its energy trace."""
    laplacian = laplacian_matrix(shadow)
    vertices = shadow.vertices.copy()
    energy_fn = _Energy(scan_accel, laplacian, laplacian @ vertices, params.lambda_laplacian)
    energy, closest, residual = energy_fn(vertices)
    if not np.isfinite(energy):
        raise RegistrationError(f"initial registration energy is not finite ({energy})")
    result = RegistrationResult(mesh=shadow, energies=[energy])

    for iteration in range(params.max_iters):
        if energy == 0.0:
            result.converged = True
            break
        grad = energy_fn.gradient(vertices, closest, residual)
        step = params.step_size
        for _ in range(params.max_backtracks + 1):
            candidate = vertices - step * grad
            new_energy, new_closest, new_residual = energy_fn(candidate)
            if not np.isfinite(new_energy):
                raise RegistrationError(
                    f"registration energy became non-finite at iteration {iteration} "
                    f"(step {step:g})"
                )
            if new_energy <= energy:
                break
            step *= 0.5
        else:
            logger.debug(f"No descent step found at iteration {iteration}; stopping")
            result.converged = True
            break

        assert new_energy <= energy
        relative = (energy - new_energy) / energy
        vertices, energy, closest, residual = candidate, new_energy, new_closest, new_residual
        result.energies.append(energy)
        result.iterations = iteration + 1
        logger.debug(f"iteration {iteration}: energy {energy:.6g}, step {step:g}")
        if relative < params.convergence_tol:
            result.converged = True
            break

    logger.info(
        f"Registration finished after {result.iterations} iterations, "
        f"energy {result.energies[0]:.6g} -> {result.energies[-1]:.6g}"
    )
    result.mesh = compute_normals(shadow.with_vertices(vertices))
    return result


def register(
    shadow: TriMesh, scan_accel: SurfaceAccel, params: RegistrationParams = RegistrationParams()
) -> TriMesh:
    return optimize(shadow, scan_accel, params).mesh


class RegistrationError(Exception):
    """Base class for exceptions in this module."""

    pass
