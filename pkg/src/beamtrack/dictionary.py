"""Beamspace dictionaries for a uniform linear array observed on a DFT grid.

The array response is represented on the unitary DFT grid of ``n_bs`` beams.
A path whose spatial angle falls between grid points is handled by a
first-order expansion of the steering column about its grid angle: each
column k of the refined dictionary is ``f_k + nu_k * f'_k`` where ``nu_k``
lives in the box ``[-delta/2, +delta/2]`` with ``delta = 2*pi/n_bs``.

Per-user measurement matrices are pilot Kronecker blocks ``x_m (x) Omega`` and
the stacked multi-user dictionary is their horizontal concatenation, so for
mutually orthogonal pilots the stacked gram inherits the Kronecker
eigenstructure ``kron(pilot powers, eig(Omega^H Omega))``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "OffGridDictionary",
    "dft_matrix",
    "dft_derivative_matrix",
    "grid_spacing",
    "steering_exact",
    "steering_offgrid",
    "user_dictionary",
    "stacked_dictionary",
    "gram_eigenstructure",
]


def grid_spacing(n_bs: int) -> float:
    """Angular width of one beamspace grid cell."""
    return 2.0 * np.pi / n_bs


def steering_exact(n_bs: int, theta: float) -> np.ndarray:
    """Unit-norm steering vector at grid-domain angle theta.

    Entry r is ``exp(-1j * r * theta) / sqrt(n_bs)``.
    """
    r = np.arange(n_bs)
    return np.exp(-1j * r * theta) / np.sqrt(n_bs)


def dft_matrix(n_bs: int) -> np.ndarray:
    """Unitary DFT dictionary; column k is the steering vector at ``2*pi*k/n_bs``.

    Parameters
    ----------
    n_bs : int
        Number of array elements (equals the number of grid beams).

    Returns
    -------
    ndarray of shape (n_bs, n_bs), complex
    """
    if n_bs < 1:
        raise ValueError(f"n_bs must be a positive integer, got {n_bs}")
    r = np.arange(n_bs)
    theta = 2.0 * np.pi * r / n_bs
    return np.exp(-1j * np.outer(r, theta)) / np.sqrt(n_bs)


def dft_derivative_matrix(n_bs: int) -> np.ndarray:
    """Derivative of each steering column with respect to its angle.

    Entry (r, k) is ``(-1j * r / sqrt(n_bs)) * exp(-1j * r * theta_k)``.
    """
    if n_bs < 1:
        raise ValueError(f"n_bs must be a positive integer, got {n_bs}")
    r = np.arange(n_bs)
    return (-1j * r)[:, None] * dft_matrix(n_bs)


def steering_offgrid(f_base: np.ndarray, f_deriv: np.ndarray, nu: np.ndarray) -> np.ndarray:
    """First-order off-grid dictionary ``Omega = F + F' diag(nu)``."""
    nu = np.asarray(nu, dtype=float)
    if f_base.shape != f_deriv.shape:
        raise ValueError(f"base/derivative shape mismatch: {f_base.shape} vs {f_deriv.shape}")
    if nu.shape != (f_base.shape[1],):
        raise ValueError(f"nu has shape {nu.shape}, expected ({f_base.shape[1]},)")
    return f_base + f_deriv * nu[None, :]


def user_dictionary(pilot: np.ndarray, omega: np.ndarray) -> np.ndarray:
    """Per-user measurement matrix ``pilot (x) Omega``.

    Stacks ``pilot[i] * Omega`` blocks vertically, one block per pilot symbol,
    giving shape ``(n_bs * len(pilot), n_bs)``.
    """
    pilot = np.atleast_1d(np.asarray(pilot))
    if pilot.ndim != 1 or pilot.size == 0:
        raise ValueError(f"pilot must be a nonempty vector, got shape {pilot.shape}")
    return np.kron(pilot[:, None].astype(complex), omega)


def stacked_dictionary(dictionary: "OffGridDictionary", n: int) -> np.ndarray:
    """Multi-user dictionary for subcarrier n: user blocks concatenated columnwise."""
    omega = steering_offgrid(dictionary.f_base, dictionary.f_deriv, dictionary.nu)
    pilots = dictionary.pilots_at(n)
    return np.concatenate([user_dictionary(x, omega) for x in pilots], axis=1)


def gram_eigenstructure(power: np.ndarray, omega: np.ndarray) -> np.ndarray:
    """Eigenvalues of the stacked gram under mutually orthogonal pilots.

    With orthogonal pilots of per-user powers ``p`` the stacked gram is
    ``diag(p) (x) Omega^H Omega``, so its spectrum is ``kron(p, eig(Omega^H Omega))``.
    Returned in kron order, not sorted. Intended as a cheap reference for tests
    and diagnostics rather than a runtime code path.
    """
    power = np.asarray(power, dtype=float)
    if np.any(power <= 0):
        raise ValueError(f"pilot powers must be positive, got {power}")
    sigma = np.linalg.eigvalsh(omega.conj().T @ omega)
    return np.kron(power, sigma)


@dataclass(frozen=True)
class OffGridDictionary:
    """Shared grid matrices, the current off-grid vector, and the pilot set.

    pilots has shape (m_users, pilot_len) when every subcarrier reuses the same
    pilot block, or (n_subcarriers, m_users, pilot_len) otherwise.
    """

    f_base: np.ndarray  # (n_bs, n_bs)
    f_deriv: np.ndarray  # (n_bs, n_bs)
    nu: np.ndarray  # (n_bs,), each entry within the half-cell box
    pilots: np.ndarray  # (m, l) or (n, m, l)

    @classmethod
    def create(cls, n_bs: int, pilots, nu: np.ndarray | None = None) -> "OffGridDictionary":
        try:
            pilots = np.asarray(pilots, dtype=complex)
        except ValueError as exc:
            raise ValueError(f"pilots must form a rectangular array: {exc}") from exc
        if pilots.dtype == object or pilots.ndim not in (2, 3) or pilots.shape[-1] == 0:
            raise ValueError(
                "pilots must have shape (m_users, pilot_len) or "
                f"(n_subcarriers, m_users, pilot_len), got {pilots.shape}"
            )
        if nu is None:
            nu = np.zeros(n_bs)
        nu = np.asarray(nu, dtype=float)
        half = grid_spacing(n_bs) / 2
        if nu.shape != (n_bs,):
            raise ValueError(f"nu has shape {nu.shape}, expected ({n_bs},)")
        if np.any(np.abs(nu) > half * (1 + 1e-12)):
            worst = int(np.argmax(np.abs(nu)))
            raise ValueError(
                f"nu[{worst}] = {nu[worst]:.6g} outside the half-cell box +/-{half:.6g}"
            )
        return cls(dft_matrix(n_bs), dft_derivative_matrix(n_bs), nu, pilots)

    @property
    def n_bs(self) -> int:
        return self.f_base.shape[0]

    @property
    def m_users(self) -> int:
        return self.pilots.shape[-2]

    @property
    def pilot_len(self) -> int:
        return self.pilots.shape[-1]

    @property
    def shared_pilots(self) -> bool:
        return self.pilots.ndim == 2

    def pilots_at(self, n: int) -> np.ndarray:
        """Pilot block (m_users, pilot_len) in effect on subcarrier n."""
        if self.shared_pilots:
            return self.pilots
        if not 0 <= n < self.pilots.shape[0]:
            raise IndexError(f"subcarrier {n} out of range [0, {self.pilots.shape[0]})")
        return self.pilots[n]

    def with_nu(self, nu: np.ndarray) -> "OffGridDictionary":
        """Same grid and pilots with a new off-grid vector (box checked)."""
        nu = np.asarray(nu, dtype=float)
        half = grid_spacing(self.n_bs) / 2
        if nu.shape != (self.n_bs,):
            raise ValueError(f"nu has shape {nu.shape}, expected ({self.n_bs},)")
        if np.any(np.abs(nu) > half * (1 + 1e-12)):
            worst = int(np.argmax(np.abs(nu)))
            raise ValueError(
                f"nu[{worst}] = {nu[worst]:.6g} outside the half-cell box +/-{half:.6g}"
            )
        return OffGridDictionary(self.f_base, self.f_deriv, nu, self.pilots)

    def omega(self) -> np.ndarray:
        """Refined steering dictionary at the current off-grid vector."""
        return steering_offgrid(self.f_base, self.f_deriv, self.nu)
