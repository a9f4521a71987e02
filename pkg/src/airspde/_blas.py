"""OpenBLAS kernel pin for CHOLMOD, applied before any BLAS library loads."""

import os
import platform


def pin_openblas_core() -> None:
    """Pick a conservative OpenBLAS kernel for CHOLMOD's BLAS.

    Runtime kernel autodetection in some OpenBLAS builds selects kernels that
    corrupt CHOLMOD's supernodal factors on newer Xeons. Haswell kernels only
    need AVX2. OpenBLAS reads the setting once, when it is first loaded, so
    this only helps if it runs before any module that links the system
    OpenBLAS (scipy.stats and scipy.integrate do on some installations).
    An explicit user setting always wins; ``AIRSPDE_BLAS_AUTODETECT=1``
    disables the pin.
    """
    if "OPENBLAS_CORETYPE" in os.environ or os.environ.get("AIRSPDE_BLAS_AUTODETECT") == "1":
        return
    if platform.machine() not in ("x86_64", "AMD64"):
        return
    try:
        with open("/proc/cpuinfo") as fh:
            flags = next((line for line in fh if line.startswith("flags")), "")
    except OSError:
        return
    if " avx2" in flags and " fma" in flags:
        os.environ["OPENBLAS_CORETYPE"] = "Haswell"
