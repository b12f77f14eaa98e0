import math

import numpy as np
import pytest

from caoguide.errors import EmptyPlan, TooFewTumorPoints, UnsupportedOption
from caoguide.resect_plan import CutPlan, PlanConfig, normal_distance, plan_cuts, tumor_extent, validate_plan
from caoguide.surface_fit import N_TERMS, EXPONENTS, PolySurface, fit_poly55
from caoguide import synth_scene

FLAT = PolySurface(np.zeros(N_TERMS))


def box(lx, ly, deg=0.0, z=0.0, step=0.5, center=(0.0, 0.0)):
    xs = np.arange(-lx / 2, lx / 2 + 1e-9, step)
    ys = np.arange(-ly / 2, ly / 2 + 1e-9, step)
    X, Y = (a.ravel() for a in np.meshgrid(xs, ys))
    a = math.radians(deg)
    xr = math.cos(a) * X - math.sin(a) * Y + center[0]
    yr = math.sin(a) * X + math.cos(a) * Y + center[1]
    return np.column_stack([xr, yr, np.full(len(X), z)])


def test_extent_box():
    e = tumor_extent(box(20, 5), margin_mm=2.0)
    assert np.allclose(e.axis, [1, 0]) and e.width == pytest.approx(5.0)
    assert e.start[0] == pytest.approx(-12) and e.end[0] == pytest.approx(12)


def test_extent_rotated_box():
    e = tumor_extent(box(20, 5, deg=30))
    angle = math.degrees(math.atan2(e.axis[1], e.axis[0]))
    assert abs(angle - 30) < 1


def test_extent_sign_toward_plus_x():
    e = tumor_extent(box(20, 5, deg=170))
    assert e.axis[0] > 0


def test_too_few_tumor_points():
    with pytest.raises(TooFewTumorPoints):
        tumor_extent(np.zeros((5, 3)))


def test_flat_hand_oracle():
    plan = plan_cuts(FLAT, box(20, 8), PlanConfig(clearance=1.0, depth_increment=4.0))
    assert len(plan.passes) == 3
    assert [p.depth_offset for p in plan.passes] == [0.0, 4.0, 8.0]
    for k, p in enumerate(plan.passes):
        assert p.pass_index == k
        assert np.all(p.waypoints[:, 2] == 1.0)
        assert np.allclose(p.waypoints[:, 1], -4.0 + 4.0 * k)
        assert p.waypoints[0, 0] == pytest.approx(-12.0) and p.waypoints[-1, 0] == pytest.approx(12.0)
        assert np.linalg.norm(np.diff(p.waypoints, axis=0), axis=1).max() <= 0.5 + 1e-12


def test_zero_clearance_on_surface():
    plan = plan_cuts(FLAT, box(20, 8), PlanConfig(clearance=0.0))
    assert all(np.all(p.waypoints[:, 2] == 0.0) for p in plan.passes)


def test_narrow_footprint_single_pass():
    plan = plan_cuts(FLAT, box(20, 3), PlanConfig(margin_mm=0.0))
    assert len(plan.passes) == 1 and plan.passes[0].depth_offset == 0.0


def test_pass_cap_and_empty_plan():
    assert len(plan_cuts(FLAT, box(20, 40), PlanConfig(n_passes_max=2)).passes) == 2
    with pytest.raises(EmptyPlan):
        plan_cuts(FLAT, box(20, 8), PlanConfig(n_passes_max=0))
    # a footprint that is a single point repeated has no cut line once margin is zero
    with pytest.raises(EmptyPlan):
        plan_cuts(FLAT, np.zeros((12, 3)) + [1, 2, 0], PlanConfig(margin_mm=0.0))


def test_deepen_unsupported():
    with pytest.raises(UnsupportedOption):
        plan_cuts(FLAT, box(20, 8), PlanConfig(advance_mode="deepen"))


def curved_surface():
    c = np.zeros(N_TERMS)
    c[EXPONENTS.index((0, 2))] = 0.05
    c[EXPONENTS.index((2, 0))] = 0.01
    c[EXPONENTS.index((1, 1))] = 0.02
    return PolySurface(c)


def test_spacing_on_curved_surface():
    plan = plan_cuts(curved_surface(), box(20, 8, deg=20), PlanConfig(step_ds=0.3))
    for p in plan.passes:
        assert np.linalg.norm(np.diff(p.waypoints, axis=0), axis=1).max() <= 0.3 + 1e-12


def test_validate_clean_and_lowered():
    surf = curved_surface()
    plan = plan_cuts(surf, box(20, 8), PlanConfig())
    assert validate_plan(plan, surf, np.zeros((0, 3))) == []
    wp = plan.passes[1].waypoints.copy()
    wp[5, 2] -= 2.0
    from caoguide.resect_plan import CutPass

    bad = CutPlan([plan.passes[0], CutPass(wp, 1, 4.0)], plan.clearance, plan.depth_increment, plan.step_ds)
    v = validate_plan(bad, surf, np.zeros((0, 3)))
    assert len(v) == 1 and v[0].pass_index == 1 and v[0].waypoint_index == 5


def test_below_tissue_violation():
    plan = plan_cuts(FLAT, box(20, 8), PlanConfig())
    tissue = np.array([[0.0, -4.0, 3.0]])
    v = validate_plan(plan, FLAT, tissue)
    assert v and all(x.kind == "below_tissue" for x in v)


def test_empty_plan_empty_report():
    assert validate_plan(CutPlan([], 1.0, 4.0, 0.5), FLAT, np.zeros((0, 3))) == []


def test_normal_distance_sphere_like():
    surf = curved_surface()
    xy = np.random.default_rng(0).uniform(-5, 5, (50, 2))
    base = np.column_stack([xy, surf.eval(xy[:, 0], xy[:, 1])])
    pts = base + 1.3 * surf.normal(xy[:, 0], xy[:, 1])
    assert np.allclose(normal_distance(surf, pts), 1.3, atol=1e-9)


def test_deterministic(tmp_path):
    surf = curved_surface()
    a = plan_cuts(surf, box(20, 8, deg=10), PlanConfig())
    b = plan_cuts(surf, box(20, 8, deg=10), PlanConfig())
    a.save(tmp_path / "a.json")
    b.save(tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    paths = a.save_pass_csvs(tmp_path / "passes")
    assert paths[0].read_text().splitlines()[1] == "idx,x_mm,y_mm,z_mm"


def test_rotation_equivariance():
    tumor = box(20, 8, step=0.5)
    a = math.radians(25)
    R = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    cfg = PlanConfig(margin_mm=2.2)  # keep the line length off a step_ds multiple
    p0 = plan_cuts(FLAT, tumor, cfg)
    rotated = tumor.copy()
    rotated[:, :2] = tumor[:, :2] @ R.T
    p1 = plan_cuts(FLAT, rotated, cfg)
    assert len(p0.passes) == len(p1.passes)
    for q0, q1 in zip(p0.passes, p1.passes):
        assert len(q0.waypoints) == len(q1.waypoints)
        assert np.abs(q0.waypoints[:, :2] @ R.T - q1.waypoints[:, :2]).max() < 1e-6


def test_synthetic_scenes_clean():
    rng = np.random.default_rng(0)
    for seed in range(5):
        spec = synth_scene.SceneSpec(tumor=synth_scene.TumorSpec(yaw_deg=float(rng.uniform(-30, 30))))
        g = synth_scene.SceneGeometry(spec)
        pts = g.dense_grid(0.5)
        labels = g.labels(pts[:, 0], pts[:, 1])
        surf = fit_poly55(pts[labels == 1])
        plan = plan_cuts(surf, pts[labels == 2])
        assert plan.passes
        assert validate_plan(plan, surf, pts[labels == 1]) == []
