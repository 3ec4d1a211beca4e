"""Smoke test for the Python bindings."""

import math
import os
import tempfile

import flexicubes_py as fc


def main():
    assert "sphere" in fc.Target.builtins()
    target = fc.Target.builtin("sphere")
    d = target.sdf([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    assert abs(d[0] + 0.6) < 1e-12 and abs(d[1] - 0.4) < 1e-12

    grid = fc.Grid.from_target(target, 16)
    assert grid.resolution == [16, 16, 16]
    assert len(grid.sdf) == grid.num_vertices == 17**3

    mesh = fc.extract(grid)
    topo = mesh.topology()
    assert topo["boundary_edges"] == 0 and topo["non_manifold_edges"] == 0
    assert topo["euler"] == 2

    verts, quads = fc.extract_quad_mesh(grid)
    assert 2 * len(quads) == len(mesh)

    report = mesh.metrics(target, samples=20000)
    assert 0.0 < report["cd"] < 2e-2

    tverts, tets = fc.tetrahedralize(grid)
    assert len(tets) > 0

    grads = fc.grad_check(res=4, trials=3)
    assert grads["passed"], grads

    fitter = fc.Fitter(fc.Target.builtin("box", rotate=[22.5, 22.5, 0.0]), resolution=12, iterations=20)
    losses = [fitter.step() for _ in range(5)]
    assert all(math.isfinite(x) for x in losses)
    fitter.run()
    assert fitter.iteration == fitter.total_steps == 20
    fitted = fitter.mesh()
    assert len(fitted) > 0
    assert fitter.history_csv().count("\n") == 21

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "mesh.obj")
        fitted.write_obj(path)
        back = fc.Mesh.read_obj(path)
        assert len(back) == len(fitted)

    try:
        fc.Target.load_obj("/nonexistent/shape.obj")
    except OSError:
        pass
    else:
        raise AssertionError("missing file should raise OSError")

    print("python smoke test passed")


if __name__ == "__main__":
    main()
