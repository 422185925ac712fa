import hashlib

import numpy as np
import pytest

from sdnet.data import center_crop_or_pad
from sdnet.latent import ArithmeticJob, MODES, emit_figure, load_jobs, null_mask, null_z, recombine, save_jobs


@pytest.fixture()
def slices32(phantom_samples):
    return [center_crop_or_pad(s.image, 32) for s in phantom_samples[:6]]


class TestRecombine:
    def test_self_swap_identity_bit_exact(self, tiny_model, slices32):
        x = slices32[0]
        a = recombine(tiny_model, x, x, "Mi_Zj")
        b = recombine(tiny_model, x, x, "self_i")
        np.testing.assert_array_equal(a.pixels, b.pixels)

    def test_self_mode_matches_decompose_reconstruct(self, tiny_model, slices32):
        from sdnet.data import MaskMap
        from sdnet.networks import decompose, reconstruct

        x = slices32[1]
        dec = decompose(tiny_model, x)
        hard = MaskMap((dec.mask.pixels >= 0.5).astype(float), is_binary=True)
        expect = reconstruct(tiny_model, hard, dec.z)
        got = recombine(tiny_model, x, x, "self_i")
        np.testing.assert_array_equal(got.pixels, expect.pixels)

    def test_outputs_in_range_for_all_modes(self, tiny_model, slices32):
        for mode in MODES:
            out = recombine(tiny_model, slices32[0], slices32[1], mode)
            assert out.pixels.min() >= -1.0 and out.pixels.max() <= 1.0

    def test_unknown_mode(self, tiny_model, slices32):
        with pytest.raises(ValueError):
            recombine(tiny_model, slices32[0], slices32[1], "Mi_Mi")

    def test_deterministic(self, tiny_model, slices32):
        a = recombine(tiny_model, slices32[0], slices32[1], "Mj_Zi")
        b = recombine(tiny_model, slices32[0], slices32[1], "Mj_Zi")
        np.testing.assert_array_equal(a.pixels, b.pixels)


class TestNullReconstructions:
    def test_null_mask_shape_and_determinism(self, tiny_model, slices32):
        a = null_mask(tiny_model, slices32[2])
        b = null_mask(tiny_model, slices32[2])
        assert a.pixels.shape == slices32[2].pixels.shape
        np.testing.assert_array_equal(a.pixels, b.pixels)

    def test_null_z_shape_and_determinism(self, tiny_model, slices32):
        a = null_z(tiny_model, slices32[3])
        b = null_z(tiny_model, slices32[3])
        assert a.pixels.shape == slices32[3].pixels.shape
        np.testing.assert_array_equal(a.pixels, b.pixels)


class TestJobsAndFigure:
    def test_job_validation(self, slices32):
        with pytest.raises(ValueError):
            ArithmeticJob(pair=(slices32[0], slices32[1]), modes=[])
        with pytest.raises(ValueError):
            ArithmeticJob(pair=(slices32[0], slices32[1]), modes=["bogus"])

    def test_empty_job_list_rejected(self, tiny_model, tmp_path):
        with pytest.raises(ValueError):
            emit_figure(tiny_model, [], tmp_path / "fig.png")

    def test_figure_layout_and_determinism(self, tiny_model, slices32, tmp_path):
        from PIL import Image

        jobs = [
            ArithmeticJob(pair=(slices32[0], slices32[1])),
            ArithmeticJob(pair=(slices32[2], slices32[3])),
        ]
        p1 = emit_figure(tiny_model, jobs, tmp_path / "a.png")
        p2 = emit_figure(tiny_model, jobs, tmp_path / "b.png")
        img = Image.open(p1)
        # 2 input columns + 6 recombination modes, 2 rows with label strips
        assert img.size == (8 * 32, 2 * (32 + 14))
        h1 = hashlib.sha256(open(p1, "rb").read()).hexdigest()
        h2 = hashlib.sha256(open(p2, "rb").read()).hexdigest()
        assert h1 == h2

    def test_unwritable_path(self, tiny_model, slices32, tmp_path):
        jobs = [ArithmeticJob(pair=(slices32[0], slices32[1]))]
        with pytest.raises(OSError):
            emit_figure(tiny_model, jobs, tmp_path / "missing_dir" / "fig.png")

    def test_jobs_json_roundtrip(self, phantom_samples, tmp_path):
        jobs = [ArithmeticJob(pair=(0, 3), modes=["self_i", "Mj_Zi"])]
        path = tmp_path / "jobs.json"
        save_jobs(jobs, path)
        loaded = load_jobs(path, phantom_samples)
        assert loaded[0].modes == ["self_i", "Mj_Zi"]
        np.testing.assert_array_equal(
            loaded[0].pair[0].pixels, phantom_samples[0].image.pixels
        )
