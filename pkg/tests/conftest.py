import numpy as np
import pytest

from wemhd.spectral import TorusGrid


def band_limited(grid: TorusGrid, ncomp: int | None, rng: np.random.Generator,
                 kmax: int = 6, mean_zero: bool = True) -> np.ndarray:
    """Random real field whose Fourier support lies in |k_i| <= kmax."""
    shape = grid.shape if ncomp is None else (ncomp,) + grid.shape
    kx, ky, kz = grid._k_int
    mask = (np.abs(kx) <= kmax) & (np.abs(ky) <= kmax) & (kz <= kmax)
    spec_shape = shape[:-1] + (grid.n_space // 2 + 1,)
    coef = (rng.normal(size=spec_shape) + 1j * rng.normal(size=spec_shape)) * mask
    out = grid.ifft(coef)
    out /= np.abs(out).max()
    if mean_zero:
        out = grid.remove_mean(out)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(20240531)
