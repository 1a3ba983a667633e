import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sartrace.accel import (Ray, build_bvh, intersect_rays, intersect_scene,
                            intersect_triangle)
from sartrace.scene import Mesh
from sartrace.scenes import box_mesh

from conftest import oracle_nearest_hit


def random_triangles(rng, n, scale=1.0):
    base = rng.uniform(-scale, scale, size=(n, 3))
    edges = rng.uniform(-0.3 * scale, 0.3 * scale, size=(n, 2, 3))
    vertices = np.concatenate([base, base + edges[:, 0], base + edges[:, 1]])
    facets = np.stack([np.arange(n), np.arange(n) + n, np.arange(n) + 2 * n], axis=1)
    return Mesh.from_arrays(vertices, facets)


class TestIntersectTriangle:
    def test_axis_aligned_hand_solution(self):
        ray = Ray(np.array([0.25, 0.25, 1.0]), np.array([0.0, 0.0, -1.0]))
        out = intersect_triangle(ray, [1, 0, 0], [0, 1, 0], [0, 0, 0])
        assert out is not None
        t, m1, m2 = out
        assert (t, m1, m2) == pytest.approx((1.0, 0.25, 0.25), rel=1e-12)

    def test_translation_along_ray(self):
        ray = Ray(np.array([0.25, 0.25, 1.0]), np.array([0.0, 0.0, -1.0]))
        out = intersect_triangle(ray, [1, 0, -5], [0, 1, -5], [0, 0, -5])
        assert out[0] == pytest.approx(6.0, rel=1e-12)

    def test_parallel_ray_misses(self):
        ray = Ray(np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0]))
        assert intersect_triangle(ray, [1, 0, 0], [0, 1, 0], [0, 0, 0]) is None

    def test_behind_origin_misses(self):
        ray = Ray(np.array([0.25, 0.25, -1.0]), np.array([0.0, 0.0, -1.0]))
        assert intersect_triangle(ray, [1, 0, 0], [0, 1, 0], [0, 0, 0]) is None

    def test_t_max_cutoff(self):
        ray = Ray(np.array([0.25, 0.25, 1.0]), np.array([0.0, 0.0, -1.0]), t_max=0.5)
        assert intersect_triangle(ray, [1, 0, 0], [0, 1, 0], [0, 0, 0]) is None

    def test_outside_simplex_misses(self):
        ray = Ray(np.array([0.9, 0.9, 1.0]), np.array([0.0, 0.0, -1.0]))
        assert intersect_triangle(ray, [1, 0, 0], [0, 1, 0], [0, 0, 0]) is None


class TestBvhBuild:
    def test_single_triangle_single_leaf(self):
        mesh = Mesh.from_arrays([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
        bvh = build_bvh(mesh)
        assert bvh.num_nodes == 1
        assert bvh.count[0] == 1

    def test_cube_root_box_and_coverage(self):
        mesh = box_mesh((2.0, 2.0, 2.0))
        bvh = build_bvh(mesh)
        np.testing.assert_allclose(bvh.box_min[0], [-1, -1, -1])
        np.testing.assert_allclose(bvh.box_max[0], [1, 1, 1])
        np.testing.assert_array_equal(np.sort(bvh.order), np.arange(12))
        leaves = bvh.count > 0
        assert bvh.count[leaves].sum() == 12

    def test_every_facet_in_exactly_one_leaf(self):
        mesh = random_triangles(np.random.default_rng(1), 300)
        bvh = build_bvh(mesh, leaf_size=4)
        assert np.all(bvh.count[bvh.count > 0] <= 4)
        seen = []
        for node in range(bvh.num_nodes):
            if bvh.count[node] > 0:
                seen.extend(bvh.order[bvh.start[node]:bvh.start[node] + bvh.count[node]])
        assert sorted(seen) == list(range(300))

    def test_deterministic(self):
        mesh = random_triangles(np.random.default_rng(2), 128)
        a = build_bvh(mesh)
        b = build_bvh(mesh)
        np.testing.assert_array_equal(a.order, b.order)
        np.testing.assert_array_equal(a.box_min, b.box_min)

    def test_empty_mesh_rejected(self):
        mesh = Mesh(vertices=np.zeros((3, 3)), facets=np.zeros((0, 3), dtype=np.int64),
                    facet_normals=np.zeros((0, 3)))
        with pytest.raises(ValueError):
            build_bvh(mesh)


class TestIntersectScene:
    def test_nearest_of_stacked_triangles(self):
        vertices = [[0, 0, 0], [1, 0, 0], [0, 1, 0],
                    [0, 0, -1], [1, 0, -1], [0, 1, -1]]
        mesh = Mesh.from_arrays(vertices, [[0, 1, 2], [3, 4, 5]])
        bvh = build_bvh(mesh)
        ray = Ray(np.array([0.2, 0.2, 2.0]), np.array([0.0, 0.0, -1.0]))
        hit = intersect_scene(bvh, mesh, ray)
        assert hit.facet_id == 0
        assert hit.t == pytest.approx(2.0, rel=1e-12)
        assert hit.cos_theta == pytest.approx(1.0)

    def test_miss_returns_none(self):
        mesh = Mesh.from_arrays([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
        bvh = build_bvh(mesh)
        ray = Ray(np.array([5.0, 5.0, 1.0]), np.array([0.0, 0.0, -1.0]))
        assert intersect_scene(bvh, mesh, ray) is None

    def test_point_on_ray(self):
        mesh = random_triangles(np.random.default_rng(3), 50)
        bvh = build_bvh(mesh)
        rng = np.random.default_rng(4)
        centroids = mesh.vertices[mesh.facets].mean(axis=1)
        checked = 0
        for _ in range(200):
            o = rng.uniform(2.5, 4, 3) * rng.choice([-1.0, 1.0], 3)
            target = centroids[rng.integers(len(centroids))]
            d = target - o
            d /= np.linalg.norm(d)
            hit = intersect_scene(bvh, mesh, Ray(o, d))
            if hit is None:
                continue
            np.testing.assert_allclose(hit.point, o + hit.t * d, atol=1e-7)
            recon = ((1.0 - hit.m1 - hit.m2) * mesh.vertices[mesh.facets[hit.facet_id][2]]
                     + hit.m1 * mesh.vertices[mesh.facets[hit.facet_id][0]]
                     + hit.m2 * mesh.vertices[mesh.facets[hit.facet_id][1]])
            np.testing.assert_allclose(recon, hit.point, atol=1e-7)
            assert 0.0 < hit.cos_theta <= 1.0
            checked += 1
        assert checked > 20


class TestBvhAgainstLinearScan:
    def test_random_scene_equivalence(self):
        mesh = random_triangles(np.random.default_rng(5), 400)
        bvh = build_bvh(mesh)
        rng = np.random.default_rng(6)
        origins = rng.uniform(-2, 2, size=(300, 3))
        dirs = rng.normal(size=(300, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        for o, d in zip(origins, dirs):
            expected = oracle_nearest_hit(mesh, o, d)
            hit = intersect_scene(bvh, mesh, Ray(o, d))
            if expected is None:
                assert hit is None
            else:
                assert hit.facet_id == expected[0]
                assert hit.t == pytest.approx(expected[1], rel=1e-9)

    def test_batch_paths_agree(self):
        mesh = random_triangles(np.random.default_rng(7), 500)
        bvh = build_bvh(mesh)
        rng = np.random.default_rng(8)
        origins = rng.uniform(-2, 2, size=(200, 3))
        dirs = rng.normal(size=(200, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        fid_a, t_a, m1_a, m2_a, cos_a = intersect_rays(mesh, origins, dirs)
        fid_b, t_b, m1_b, m2_b, cos_b = intersect_rays(mesh, origins, dirs, bvh=bvh)
        np.testing.assert_array_equal(fid_a, fid_b)
        np.testing.assert_array_equal(t_a[fid_a >= 0], t_b[fid_b >= 0])
        np.testing.assert_array_equal(m1_a, m1_b)
        np.testing.assert_array_equal(cos_a, cos_b)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_brute_batch_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    mesh = random_triangles(rng, 40)
    o = rng.uniform(-2, 2, 3)
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    fid, t, m1, m2, cos_t = intersect_rays(mesh, o[None, :], d[None, :])
    expected = oracle_nearest_hit(mesh, o, d)
    if expected is None:
        assert fid[0] == -1
    else:
        assert fid[0] == expected[0]
        assert t[0] == pytest.approx(expected[1], rel=1e-9)
