"""Smoke test for the pygeoflow extension.

Uses an installed ``pygeoflow`` when there is one; otherwise loads the library that
``cargo build -p geoflow-python`` leaves in ``target/<profile>/``.

    python3 python/smoke_test.py [--profile release]
"""

import argparse
import importlib
import math
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load(profile):
    try:
        return importlib.import_module("pygeoflow")
    except ImportError:
        pass
    built = ROOT / "target" / profile / "libpygeoflow.so"
    if not built.exists():
        sys.exit(f"pygeoflow is not installed and {built} does not exist; run cargo build -p geoflow-python")
    tmp = Path(tempfile.mkdtemp())
    shutil.copy(built, tmp / "pygeoflow.so")
    sys.path.insert(0, str(tmp))
    return importlib.import_module("pygeoflow")


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--profile", default="debug")
    gf = load(parser.parse_args().profile)

    ico = gf.Mesh.icosphere(2)
    assert (ico.num_vertices, ico.num_triangles, ico.euler_characteristic) == (162, 320, 2), ico
    torus = gf.Mesh.flat_torus(12, 6.0)
    assert torus.euler_characteristic == 0 and torus.topology == "torus"

    cone = gf.Mesh.cone_sphere(math.pi, 1)
    again = gf.Mesh.from_text(cone.to_text())
    assert again.to_text() == cone.to_text()
    assert cone.singular, "cone apex should be declared singular"

    values = gf.laplacian_spectrum(ico, 4)
    assert abs(values[0]) < 1e-8 and all(a <= b for a, b in zip(values, values[1:]))
    assert abs(values[1] - 2.0) < 0.1, values

    f = [p[2] for p in ico.vertices]  # a first spherical harmonic
    u = gf.solve_mean_zero(ico, f)
    ratio = sum(a * b for a, b in zip(u, f)) / sum(b * b for b in f)
    assert abs(ratio - 1.0 / values[1]) < 0.05, ratio

    hk = gf.HeatKernel(ico)
    rho = hk.slice(0, 0.1)
    assert min(rho) >= 0.0 and abs(hk.integral(rho) - 1.0) < 1e-8

    k = gf.kato_constants(ico, seed=7)
    assert 0.0 < k["c_low"] <= k["c_high"], k

    fit = gf.ricci_tangency(ico, 0, (1.0, 0.0), [0.02, 0.04, 0.06, 0.08, 0.1])
    assert abs(fit["slope"] + 2.0) < 0.3, fit

    try:
        gf.Mesh.icosphere(99)
    except ValueError:
        pass
    else:
        raise AssertionError("out-of-range subdivision accepted")

    print(f"pygeoflow {gf.__version__}: ok "
          f"(lambda1 {values[1]:.4f}, c_low {k['c_low']:.3f}, c_high {k['c_high']:.3f}, slope {fit['slope']:.3f})")


if __name__ == "__main__":
    main()
