"""
Unbalanced complex eigensolver.

``scipy.linalg.eig`` always calls ``zgeev``, which scales the matrix
before the QR iteration.  On strongly graded truncated Floquet operators the
back-transformation then loses most digits of some eigenvectors.  ``zgeevx``
with ``balanc='N'`` avoids this; scipy ships it only through the
``cython_lapack`` capsule table, so it is called here with ctypes.
"""
from __future__ import annotations

import ctypes

import numpy as np
from scipy import linalg

_P = ctypes.c_void_p


def _load():
    try:
        from scipy.linalg import cython_lapack
        cap = cython_lapack.__pyx_capi__["zgeevx"]
    except (ImportError, KeyError, AttributeError):
        return None
    api = ctypes.pythonapi
    api.PyCapsule_GetName.restype = ctypes.c_char_p
    api.PyCapsule_GetName.argtypes = [ctypes.py_object]
    api.PyCapsule_GetPointer.restype = ctypes.c_void_p
    api.PyCapsule_GetPointer.argtypes = [ctypes.py_object, ctypes.c_char_p]
    ptr = api.PyCapsule_GetPointer(cap, api.PyCapsule_GetName(cap))
    return ctypes.CFUNCTYPE(None, *([_P] * 22))(ptr)


_ZGEEVX = _load()


def eig_unbalanced(a: np.ndarray, vectors: bool = True):
    """
    Eigenvalues (and right eigenvectors) without balancing.

    Falls back to ``scipy.linalg.eig`` when the LAPACK routine is not
    reachable.  Raises ``LinAlgError`` if the QR iteration fails.
    """
    if _ZGEEVX is None:
        if vectors:
            return linalg.eig(a, check_finite=False)
        return linalg.eigvals(a, check_finite=False), None
    a = np.array(a, dtype=np.complex128, order="F")
    n = a.shape[0]
    byref = ctypes.byref
    balanc, jobvl = ctypes.c_char(b"N"), ctypes.c_char(b"N")
    jobvr, sense = ctypes.c_char(b"V" if vectors else b"N"), ctypes.c_char(b"N")
    nn, one = ctypes.c_int(n), ctypes.c_int(1)
    w = np.zeros(n, np.complex128)
    vl = np.zeros(1, np.complex128)
    vr = np.zeros((n, n) if vectors else (1, 1), np.complex128, order="F")
    ldvr = ctypes.c_int(n if vectors else 1)
    ilo, ihi, abnrm, info = ctypes.c_int(), ctypes.c_int(), ctypes.c_double(), ctypes.c_int()
    scale, rce, rcv = np.zeros(n), np.zeros(n), np.zeros(n)
    rwork = np.zeros(2 * n)

    def call(work, lwork):
        _ZGEEVX(byref(balanc), byref(jobvl), byref(jobvr), byref(sense), byref(nn),
                a.ctypes.data_as(_P), byref(nn), w.ctypes.data_as(_P), vl.ctypes.data_as(_P),
                byref(one), vr.ctypes.data_as(_P), byref(ldvr), byref(ilo), byref(ihi),
                scale.ctypes.data_as(_P), byref(abnrm), rce.ctypes.data_as(_P),
                rcv.ctypes.data_as(_P), work.ctypes.data_as(_P), byref(lwork),
                rwork.ctypes.data_as(_P), byref(info))

    query = np.zeros(1, np.complex128)
    call(query, ctypes.c_int(-1))
    lwork = max(int(query[0].real), 2 * n)
    call(np.zeros(lwork, np.complex128), ctypes.c_int(lwork))
    if info.value != 0:
        raise linalg.LinAlgError(f"zgeevx failed with info={info.value}")
    return w, (vr if vectors else None)
