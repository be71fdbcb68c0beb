import numpy as np
import pytest

from partalign import alignment
from partalign.alignment import AffineTransform
from partalign.synth import (
    generate_dataset,
    oracle_affine_fit,
    oracle_pseudo_gt,
    write_dataset,
)


class TestGenerateDataset:
    def test_identity_transforms_reproduce_template(self):
        ds = generate_dataset(
            n_images=4, n_parts=3, c_i=32, grid=10, noise=0.0, seed=0,
            distractors=0, max_rotation_deg=0.0, scale_range=(1.0, 1.0),
            max_translation=0.0,
        )
        template = ds.template_field.astype(np.float32)
        for scene in ds.scenes:
            assert np.allclose(scene.backbone_map, template, atol=1e-6)

    def test_fixed_seed_is_byte_identical(self, tmp_path):
        paths = []
        for run in ("a", "b"):
            out = tmp_path / run
            ds = generate_dataset(10, 4, 32, 10, 0.05, seed=13, out_dir=out)
            paths.append(out)
            assert len(ds.scenes) == 10
        for rel in sorted(p.relative_to(paths[0]) for p in paths[0].rglob("*") if p.is_file()):
            assert (paths[0] / rel).read_bytes() == (paths[1] / rel).read_bytes(), rel

    def test_every_image_has_all_parts(self):
        ds = generate_dataset(12, 5, 64, 12, 0.05, seed=2)
        for scene in ds.scenes:
            assert len(scene.true_parts) == 5
        for entry in ds.manifest:
            assert len(entry.part_boxes) == 5
            assert len(entry.landmarks) == 5

    def test_part_cells_carry_prototypes(self):
        ds = generate_dataset(6, 4, 32, 10, 0.05, seed=3)
        for scene in ds.scenes:
            for idx, (r, c) in scene.true_parts:
                cell = (round(r), round(c))
                vec = scene.backbone_map[cell[0], cell[1]].astype(np.float64)
                proto = ds.part_prototypes[idx]
                noise_vec = vec - proto
                assert np.linalg.norm(noise_vec) <= 0.1 + 1e-6

    def test_parameter_validation(self):
        with pytest.raises(ValueError, match="smaller than c_i"):
            generate_dataset(2, 8, 8, 10, 0.0, 0)
        with pytest.raises(ValueError, match="grid"):
            generate_dataset(2, 2, 16, 4, 0.0, 0)
        with pytest.raises(ValueError, match="noise"):
            generate_dataset(2, 2, 16, 10, 0.5, 0)

    def test_alignment_recovers_applied_transforms(self):
        # template (identity scene) as destination: fitting template -> image
        # should recover each image's applied transform
        ds = generate_dataset(40, 5, 64, 28, 0.05, seed=3, distractors=10)
        template = ds.template_field.astype(np.float64)
        hits = 0
        for scene in ds.scenes:
            res = alignment.align_pair(
                scene.backbone_map.astype(np.float64), template, template,
                threshold=0.6, family="affine", iterations=100,
                inlier_tol=1.0, min_inliers=6, rng_seed=5,
            )
            err = np.abs(res.transform.theta - scene.applied_transform.theta).max()
            hits += err < 0.1
        assert hits >= 0.95 * len(ds.scenes)


class TestOraclePseudoGt:
    def test_agrees_on_handmade_cases(self):
        fm = np.zeros((2, 2, 2), dtype=np.float32)
        fm[:, :, 0] = [[0.9, 0.8], [0.1, 0.2]]
        fm[:, :, 1] = [[0.1, 0.2], [0.9, 0.8]]
        assert oracle_pseudo_gt(fm, 3, 0).tolist() == [[0, 0], [1, 1]]

    def test_uncapped_is_per_cell_argmax(self):
        rng = np.random.default_rng(4)
        fm = rng.uniform(0, 1, size=(5, 4, 3))
        labels = oracle_pseudo_gt(fm, max_per_channel=5 * 4, suppress_radius=0)
        assert np.array_equal(labels, fm.argmax(axis=2))


class TestOracleAffineFit:
    def test_identity(self):
        pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [3.0, 2.0]])
        t = oracle_affine_fit(pts, pts)
        assert np.abs(t.theta - AffineTransform.identity().theta).max() < 1e-12

    def test_exact_affine_data(self):
        rng = np.random.default_rng(5)
        planted = AffineTransform(np.array([[0.9, 0.2, 1.5], [-0.1, 1.1, -0.7]]))
        src = rng.uniform(0, 10, size=(12, 2))
        t = oracle_affine_fit(src, planted.apply(src))
        assert np.abs(t.theta - planted.theta).max() < 1e-9

    def test_noisy_residual_bounded(self):
        rng = np.random.default_rng(6)
        planted = AffineTransform(np.array([[1.0, 0.1, 0.5], [0.0, 1.0, -0.2]]))
        src = rng.uniform(0, 10, size=(200, 2))
        sigma = 0.01
        dst = planted.apply(src) + rng.normal(0, sigma, size=(200, 2))
        t = oracle_affine_fit(src, dst)
        residuals = np.linalg.norm(t.apply(src) - dst, axis=1)
        rms = float(np.sqrt((residuals**2).mean()))
        assert rms <= 3 * sigma

    def test_collinear_rejected(self):
        pts = np.array([[float(i), float(i)] for i in range(5)])
        with pytest.raises(ValueError, match="collinear"):
            oracle_affine_fit(pts, pts)


def test_write_dataset_loadable(tmp_path):
    from partalign.manifest import load_manifest, resolve_feature_path
    from partalign.tensors import load_feature_map

    ds = generate_dataset(3, 2, 16, 10, 0.02, seed=7)
    manifest_path = write_dataset(tmp_path, ds)
    manifest = load_manifest(manifest_path)
    assert manifest.ids() == [s.image_id for s in ds.scenes]
    for entry, scene in zip(manifest, ds.scenes):
        fm = load_feature_map(resolve_feature_path(manifest_path, entry))
        assert np.array_equal(fm, scene.backbone_map)
