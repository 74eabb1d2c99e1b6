import csv
import logging
import math

import numpy as np
import pytest

from ehdr.data import Sample, SynthConfig, synthetic_sample
from ehdr.hdr import merge_hdr
from ehdr.metrics import (
    EvalReport,
    crop_border,
    evaluate,
    evaluate_pairs,
    naive_merge,
    psnr_mu,
    ssim_map,
    ssim_mu,
)
from ehdr.simulator import BracketSpec, NoiseModel, synthesize_bracket


def scalar_mu(v):
    return math.log(1 + 5000 * min(v, 1.0)) / math.log(5001)


def loop_psnr(a, b):
    total, n = 0.0, 0
    for idx in np.ndindex(a.shape):
        d = scalar_mu(a[idx]) - scalar_mu(b[idx])
        total += d * d
        n += 1
    return -10 * math.log10(total / n)


def loop_ssim(a, b, size=11, sigma=1.5):
    """Sliding-window SSIM of the mu-law luminance, one window at a time."""
    lum = (0.2126, 0.7152, 0.0722)
    h, w = a.shape[:2]
    ta = [[sum(lum[c] * scalar_mu(a[y, x, c]) for c in range(3)) for x in range(w)] for y in range(h)]
    tb = [[sum(lum[c] * scalar_mu(b[y, x, c]) for c in range(3)) for x in range(w)] for y in range(h)]
    half = (size - 1) / 2
    g1 = [math.exp(-((i - half) ** 2) / (2 * sigma ** 2)) for i in range(size)]
    s = sum(g1)
    g1 = [v / s for v in g1]
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    for y in range(h - size + 1):
        for x in range(w - size + 1):
            ma = mb = saa = sbb = sab = 0.0
            for dy in range(size):
                for dx in range(size):
                    wgt = g1[dy] * g1[dx]
                    va, vb = ta[y + dy][x + dx], tb[y + dy][x + dx]
                    ma += wgt * va
                    mb += wgt * vb
                    saa += wgt * va * va
                    sbb += wgt * vb * vb
                    sab += wgt * va * vb
            va_, vb_, cov = saa - ma * ma, sbb - mb * mb, sab - ma * mb
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va_ + vb_ + c2)))
    return sum(vals) / len(vals)


class TestPsnr:
    def test_identical_capped(self, rng):
        x = rng.uniform(0, 1, (8, 8, 3))
        assert psnr_mu(x, x) == 99.0

    def test_twenty_db(self):
        # mu-law images 0 and 0.1 everywhere: MSE = 0.01
        h = (5001 ** 0.1 - 1) / 5000
        assert psnr_mu(np.full((4, 4, 3), h), np.zeros((4, 4, 3))) == pytest.approx(20.0, abs=1e-9)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_scalar_loop(self, seed):
        r = np.random.default_rng(seed)
        a, b = r.uniform(0, 1, (2, 12, 12, 3))
        assert abs(psnr_mu(a, b) - loop_psnr(a, b)) < 1e-6

    def test_symmetric(self, rng):
        a, b = rng.uniform(0, 1, (2, 10, 10, 3))
        assert psnr_mu(a, b) == psnr_mu(b, a)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr_mu(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


class TestSsim:
    def test_identical_is_one(self, rng):
        x = rng.uniform(0, 1, (16, 16, 3))
        assert ssim_mu(x, x) == pytest.approx(1.0)

    def test_inverted_contrast_below_one(self, rng):
        x = rng.uniform(0, 1, (16, 16, 3))
        assert ssim_mu(x, 1.0 - x) < 1.0

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_sliding_window_loop(self, seed):
        r = np.random.default_rng(seed)
        a = r.uniform(0, 1, (16, 16, 3))
        b = np.clip(a + r.normal(0, 0.1, a.shape), 0, 1)
        assert abs(ssim_mu(a, b) - loop_ssim(a, b)) < 1e-5

    def test_symmetric(self, rng):
        a, b = rng.uniform(0, 1, (2, 16, 16, 3))
        assert abs(ssim_mu(a, b) - ssim_mu(b, a)) < 1e-6

    def test_too_small(self):
        with pytest.raises(ValueError):
            ssim_map(np.zeros((8, 20)), np.zeros((8, 20)))

    def test_geometric_invariance(self, rng):
        a, b = rng.uniform(0, 1, (2, 16, 20, 3))
        t = lambda x: np.rot90(x[:, ::-1], axes=(0, 1))  # noqa: E731
        assert psnr_mu(t(a), t(b)) == pytest.approx(psnr_mu(a, b))
        assert ssim_mu(t(a), t(b)) == pytest.approx(ssim_mu(a, b), abs=1e-9)


@pytest.fixture(scope="module")
def moving():
    return synthetic_sample(1, SynthConfig(size=48))


class TestHarness:
    def test_border_crop(self, rng):
        assert crop_border(rng.uniform(0, 1, (64, 48, 3)), 10).shape == (44, 28, 3)
        with pytest.raises(ValueError):
            crop_border(np.zeros((20, 20, 3)), 10)

    def test_gt_against_itself(self, moving):
        rep = evaluate(lambda s: s.gt.transpose(1, 2, 0), [moving, moving])
        assert all(p == 99.0 and s == pytest.approx(1.0) for _, p, s in rep.rows)

    def test_missing_gt_skipped(self, moving, caplog):
        nogt = Sample(moving.images, moving.voxels, None, "nogt")
        with caplog.at_level(logging.WARNING, logger="ehdr.metrics"):
            rep = evaluate(lambda s: s.gt.transpose(1, 2, 0), [moving, nogt])
        assert len(rep.rows) == 1 and "nogt" in caplog.text

    def test_naive_merge_worse_than_static_oracle(self, moving):
        spec = BracketSpec()
        gt = moving.gt.transpose(1, 2, 0)
        # static oracle: all three brackets rendered at the reference time
        k = 2.0 ** -min(spec.fstops)
        static = [synthesize_bracket(gt * k, f, spec, NoiseModel(), i, scale=1.0) for i, f in enumerate(spec.fstops)]
        oracle = psnr_mu(crop_border(merge_hdr(static), 10), crop_border(gt, 10))
        naive = psnr_mu(crop_border(naive_merge(moving), 10), crop_border(gt, 10))
        assert naive < oracle

    def test_report_csv_and_text(self, tmp_path):
        rep = EvalReport([("a", 30.0, 0.9), ("b", 20.0, 0.7)])
        rep.write_csv(tmp_path / "r.csv")
        rows = list(csv.reader(open(tmp_path / "r.csv")))
        assert rows[0] == ["sample", "psnr_mu", "ssim_mu"]
        assert rows[-1][0] == "mean" and float(rows[-1][1]) == 25.0
        assert "mean over 2 samples" in rep.to_text()

    def test_evaluate_pairs_crops(self, rng):
        a = rng.uniform(0, 1, (40, 40, 3))
        b = a.copy()
        b[:10] = 0  # damage lies entirely in the cropped border
        assert evaluate_pairs([("x", b, a)], 10).rows[0][1] == 99.0
