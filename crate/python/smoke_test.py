#!/usr/bin/env python3
"""Smoke test for the hodbf_py extension module.

Builds the module with `cargo build --release -p hodbf-py`, then run this
script from the repository root. It copies the cdylib next to itself under the
importable name and exercises the solve pipeline on a tiny sphere.
"""

import pathlib
import shutil
import sys

HERE = pathlib.Path(__file__).resolve().parent
ROOT = HERE.parent


def import_module():
    candidates = [
        ROOT / "target" / "release" / "libhodbf_py.so",
        ROOT / "target" / "release" / "hodbf_py.dll",
        ROOT / "target" / "release" / "libhodbf_py.dylib",
    ]
    src = next((p for p in candidates if p.exists()), None)
    if src is None:
        sys.exit("build the extension first: cargo build --release -p hodbf-py")
    dst = HERE / ("hodbf_py" + (".pyd" if src.suffix == ".dll" else ".so"))
    shutil.copyfile(src, dst)
    sys.path.insert(0, str(HERE))
    import hodbf_py

    return hodbf_py


def main():
    hb = import_module()

    cloud = hb.PointCloud.sphere(radius=0.15, eps=2.0 + 0.0j, spacing=0.05)
    n = len(cloud)
    assert n > 50, f"sphere too small: {n} cells"

    sys_ = hb.KernelSystem.physical(8.0e8, cloud)
    rhs = sys_.plane_wave_rhs([0.0, 0.0, 1.0], [1.0, 0.0, 0.0])

    x, report = hb.solve_scattering(
        sys_, rhs, format="hodbf", chi_con=1e-4, chi_fact=1e-3, chi_sol=1e-6, precond=True
    )
    assert report["converged"], report
    assert report["true_residual"] <= 1e-5, report

    # forward operator reproduces the dense kernel action on the solution
    mat = hb.HodBfMatrix.construct(sys_, 1e-4, seed=0)
    y = mat.matvec(x)
    resid = hb.relative_rmse(y, rhs)
    assert resid <= 1e-3, f"matvec residual too large: {resid}"

    # inverse as a direct solver: M Z x ~ x
    inv = mat.invert(1e-3, seed=1)
    x2 = inv.apply_inverse(rhs)
    err = hb.relative_rmse(x2, x)
    assert err <= 1e-2, f"direct inverse error too large: {err}"

    p = hb.fit_exponent([(2.0**k, (2.0**k) ** 1.5) for k in range(8, 12)])
    assert abs(p - 1.5) < 1e-9

    print(f"smoke test passed: n={n}, iters={report['iterations']}, "
          f"residual={report['true_residual']:.2e}")


if __name__ == "__main__":
    main()
