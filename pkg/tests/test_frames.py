import numpy as np
import pytest

from oracles import brute_lrf, closed_form_eig3, sign_fix_columns
from rimae.cloud import apply_rotation, generate_shape, random_rotation
from rimae.frames import (
    FrameNotSetError,
    attach_frames,
    compute_lrf,
    covariance3,
    eig_sym3,
    rotation_normalize,
)
from rimae.patches import Patch, build_patches


def make_patch(points, normals=None):
    points = np.asarray(points, dtype=np.float64)
    return Patch(
        points=points,
        center=np.zeros(3),
        frame=None,
        normals=normals,
        member_indices=np.arange(len(points)),
        center_index=0,
    )


class TestCovariance:
    def test_identical_rows_zero(self):
        pts = np.ones((5, 3)) * 3.7
        assert np.abs(covariance3(pts)).max() == 0.0

    def test_plus_minus_ex(self):
        pts = np.array([[1.0, 0, 0], [-1.0, 0, 0]])
        # mean 0; x-variance 1; everything else 0 -- hand computation
        with pytest.raises(ValueError):
            covariance3(pts)
        pts3 = np.array([[1.0, 0, 0], [-1.0, 0, 0], [1.0, 0, 0], [-1.0, 0, 0]])
        assert np.abs(covariance3(pts3) - np.diag([1.0, 0, 0])).max() < 1e-15

    def test_rotation_equivariance(self):
        rng = np.random.default_rng(0)
        pts = rng.standard_normal((12, 3))
        r = random_rotation(1).matrix
        lhs = covariance3(pts @ r)
        rhs = r.T @ covariance3(pts) @ r
        assert np.abs(lhs - rhs).max() < 1e-14

    def test_needs_three_points(self):
        with pytest.raises(ValueError):
            covariance3(np.zeros((2, 3)))


class TestEigSym3:
    def test_diagonal_input(self):
        dec = eig_sym3(np.diag([3.0, 1.0, 2.0]))
        assert np.array_equal(dec.eigenvalues, [1.0, 2.0, 3.0])
        expected = np.eye(3)[:, [1, 2, 0]]
        assert np.abs(dec.eigenvectors - expected).max() == 0.0

    def test_identity(self):
        dec = eig_sym3(np.eye(3))
        assert np.array_equal(dec.eigenvalues, [1.0, 1.0, 1.0])

    def test_reconstruction_on_random_matrices(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            a = rng.standard_normal((3, 3)) * rng.uniform(0.01, 100)
            a = (a + a.T) / 2.0
            dec = eig_sym3(a)
            recon = dec.eigenvectors @ np.diag(dec.eigenvalues) @ dec.eigenvectors.T
            tol = 1e-10 * (1.0 + np.abs(a).max())
            assert np.abs(recon - a).max() <= tol
            assert np.abs(dec.eigenvectors.T @ dec.eigenvectors - np.eye(3)).max() <= 1e-10
            assert (np.diff(dec.eigenvalues) >= 0).all()

    def test_matches_characteristic_polynomial_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            a = rng.standard_normal((3, 3))
            a = (a + a.T) / 2.0
            dec = eig_sym3(a)
            w, v = closed_form_eig3(a)
            assert np.abs(dec.eigenvalues - w).max() < 1e-9
            # eigenvalue gaps in this draw are generically healthy
            if np.diff(w).min() > 1e-3:
                assert np.abs(dec.eigenvectors - sign_fix_columns(v)).max() < 1e-7

    def test_sign_convention(self):
        dec = eig_sym3(np.diag([2.0, 0.5, 1.0]))
        for j in range(3):
            col = dec.eigenvectors[:, j]
            assert col[np.argmax(np.abs(col))] > 0

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            eig_sym3(np.full((3, 3), np.nan))


class TestComputeLrf:
    def test_planar_patch(self):
        # z = 0 plane, mass biased toward +x from the center
        rng = np.random.default_rng(3)
        pts = np.column_stack([rng.uniform(0.2, 1.0, 16), rng.uniform(-1, 1, 16), np.zeros(16)])
        frame, degenerate = compute_lrf(make_patch(pts))
        assert not degenerate
        e1, e2 = frame[:, 0], frame[:, 1]
        assert abs(abs(e1[2]) - 1.0) < 1e-12  # plane normal
        assert abs(e1[0]) < 1e-12 and abs(e1[1]) < 1e-12
        assert e2[0] > 0.9  # barycenter direction is +x

    def test_mass_rule_sign(self):
        rng = np.random.default_rng(4)
        pts = np.column_stack([rng.uniform(-1, 1, 20), rng.uniform(-1, 1, 20), rng.uniform(0.5, 1.0, 20)])
        frame, _ = compute_lrf(make_patch(pts))
        e1 = frame[:, 0]
        assert float((-pts).sum(axis=0) @ e1) >= 0.0

    def test_proper_rotation(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            pts = rng.standard_normal((10, 3))
            frame, _ = compute_lrf(make_patch(pts))
            assert np.abs(frame.T @ frame - np.eye(3)).max() <= 1e-10
            assert abs(np.linalg.det(frame) - 1.0) <= 1e-10

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            pts = rng.standard_normal((6, 3)) + rng.standard_normal(3)
            frame, degenerate = compute_lrf(make_patch(pts))
            if degenerate:
                continue
            cov = covariance3(pts)
            w, _ = closed_form_eig3(cov)
            if np.diff(w).min() < 1e-3:
                continue
            assert np.abs(frame - brute_lrf(pts)) .max() < 1e-7

    def test_degenerate_symmetric_patch_flagged(self):
        # barycenter exactly at the center: e2 falls back to the mid eigenvector
        pts = np.array(
            [[1, 0, 0], [-1, 0, 0], [0, 2, 0], [0, -2, 0]], dtype=np.float64
        )
        frame, degenerate = compute_lrf(make_patch(pts))
        assert degenerate
        assert np.abs(frame.T @ frame - np.eye(3)).max() <= 1e-10

    def test_equivariance_under_rotation(self):
        rng = np.random.default_rng(7)
        excluded = 0
        checked = 0
        for cloud_seed in range(5):
            pc = generate_shape(["torus", "cube", "two_planes"][cloud_seed % 3], 128, cloud_seed)
            patches = build_patches(pc, 8, 16)
            for rot_seed in range(20):
                rot = random_rotation(1000 + rot_seed)
                rotated = build_patches(apply_rotation(pc, rot), 8, 16)
                for base_p, rot_p in zip(patches, rotated):
                    f0, d0 = compute_lrf(base_p)
                    f1, d1 = compute_lrf(rot_p)
                    if d0 or d1:
                        excluded += 1
                        continue
                    gap = np.diff(closed_form_eig3(covariance3(base_p.points))[0]).min()
                    if gap < 1e-6:
                        excluded += 1
                        continue
                    checked += 1
                    assert np.abs(f1 - rot.matrix.T @ f0).max() <= 1e-8
        assert checked > 500  # the property was actually exercised


class TestRotationNormalize:
    def test_identity_frame(self):
        pc = generate_shape("torus", 64, 8)
        patch = build_patches(pc, 4, 8)[0]
        import dataclasses
        with_frame = dataclasses.replace(patch, frame=np.eye(3))
        pts, nrm = rotation_normalize(with_frame)
        assert np.array_equal(pts, patch.points)
        assert np.array_equal(nrm, patch.normals)

    def test_frame_not_set(self):
        pc = generate_shape("torus", 64, 8)
        patch = build_patches(pc, 4, 8)[0]
        with pytest.raises(FrameNotSetError):
            rotation_normalize(patch)

    def test_row_norms_preserved(self):
        pc = generate_shape("cube", 64, 9)
        for patch in attach_frames(build_patches(pc, 4, 8)):
            pts, _ = rotation_normalize(patch)
            assert np.abs(
                np.linalg.norm(pts, axis=1) - np.linalg.norm(patch.points, axis=1)
            ).max() <= 1e-12

    def test_invariant_under_cloud_rotation(self):
        pc = generate_shape("torus", 128, 10)
        base = attach_frames(build_patches(pc, 8, 16))
        for rot_seed in range(10):
            rot = random_rotation(rot_seed)
            rotated = attach_frames(build_patches(apply_rotation(pc, rot), 8, 16))
            for a, b in zip(base, rotated):
                if a.degenerate or b.degenerate:
                    continue
                pa, na = rotation_normalize(a)
                pb, nb = rotation_normalize(b)
                assert np.abs(pa - pb).max() <= 1e-10
                assert np.abs(na - nb).max() <= 1e-10

    def test_bitwise_stable(self):
        pc = generate_shape("two_planes", 64, 11)
        patches = attach_frames(build_patches(pc, 4, 8))
        a = rotation_normalize(patches[0])[0]
        b = rotation_normalize(patches[0])[0]
        assert np.array_equal(a, b)

    def test_self_consistency_after_normalization(self):
        # the frame of an already-normalized patch is the identity
        import dataclasses
        pc = generate_shape("torus", 128, 12)
        for patch in attach_frames(build_patches(pc, 6, 16)):
            if patch.degenerate:
                continue
            pts, _ = rotation_normalize(patch)
            renorm = dataclasses.replace(patch, points=pts, frame=None)
            frame, degenerate = compute_lrf(renorm)
            if degenerate:
                continue
            assert np.abs(frame - np.eye(3)).max() <= 1e-8
