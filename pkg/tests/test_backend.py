import os
import subprocess
import sys

import numpy as np
import pytest
import scipy.sparse as sp

from airspde._cholesky import HAVE_CHOLMOD, SparseCholesky


def _run(code, **env):
    base = {k: v for k, v in os.environ.items() if k not in ("OPENBLAS_CORETYPE", "AIRSPDE_BLAS_AUTODETECT")}
    out = subprocess.run([sys.executable, "-c", code], env={**base, **env}, capture_output=True, text=True, check=True)
    return out.stdout.strip()


def test_package_import_pins_blas_before_scipy_stats():
    code = "import os, airspde, scipy.stats; print(os.environ.get('OPENBLAS_CORETYPE'))"
    try:
        with open("/proc/cpuinfo") as fh:
            flags = next((line for line in fh if line.startswith("flags")), "")
    except OSError:
        flags = ""
    expected = "Haswell" if " avx2" in flags and " fma" in flags else "None"
    assert _run(code) == expected


def test_user_blas_setting_wins():
    code = "import os, airspde; print(os.environ.get('OPENBLAS_CORETYPE'))"
    assert _run(code, OPENBLAS_CORETYPE="SkylakeX") == "SkylakeX"
    assert _run(code, AIRSPDE_BLAS_AUTODETECT="1") == "None"


@pytest.mark.skipif(not HAVE_CHOLMOD, reason="scikit-sparse not installed")
def test_backends_agree():
    n = 40
    lap = sp.diags([-1.0, 2.5, -1.0], [-1, 0, 1], shape=(n, n))
    Q = sp.kron(lap, sp.identity(n)) + sp.kron(sp.identity(n), lap)
    b = np.linspace(-1.0, 1.0, n * n)
    a, c = SparseCholesky(Q, "cholmod"), SparseCholesky(Q, "scipy")
    assert a.logdet() == pytest.approx(c.logdet(), rel=1e-12)
    np.testing.assert_allclose(a.solve(b), c.solve(b), rtol=1e-10, atol=1e-12)
