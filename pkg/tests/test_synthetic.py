import numpy as np
import pytest

from rawcodec.bitdepth import bit_depth_array
from rawcodec.rawio import pack_bayer, write_raw_container
from rawcodec.synthetic import CorpusSpec, load_corpus_dir, make_synthetic_corpus, smooth_entropy_estimate


@pytest.mark.parametrize("kind", ["constant", "uniform", "smooth", "correlated", "mixed"])
def test_seeded_and_in_range(kind):
    spec = CorpusSpec(kind, 4, 32, bit_depth=10, seed=5)
    a, b = make_synthetic_corpus(spec), make_synthetic_corpus(spec)
    assert a == b
    assert make_synthetic_corpus(CorpusSpec(kind, 4, 32, bit_depth=10, seed=6)) != a
    for im in a:
        assert im.samples.shape == (32, 32)
        assert int(im.samples.max()) < 1 << im.container_bit_depth


def test_constant_blocks():
    im = make_synthetic_corpus(CorpusSpec("constant", 1, 64, bit_depth=8, block=8))[0]
    planes = pack_bayer(im).planes
    blk = planes[:, 8:16, 16:24]
    assert (blk == blk[0, 0, 0]).all()


def test_mixed_alternates_depths():
    imgs = make_synthetic_corpus(CorpusSpec("mixed", 4, 64))
    depths = [int(bit_depth_array(im.samples.max())) for im in imgs]
    assert depths[0] <= 8 and depths[2] <= 8
    assert 12 <= depths[1] <= 14 and 12 <= depths[3] <= 14


def test_correlated_green_tracks_red():
    im = make_synthetic_corpus(CorpusSpec("correlated", 1, 128, bit_depth=8))[0]
    p = pack_bayer(im).planes.astype(float)
    assert np.corrcoef(p[0].ravel(), p[1].ravel())[0, 1] > 0.99
    assert abs(np.corrcoef(p[0].ravel(), p[2].ravel())[0, 1]) < 0.1


def test_smooth_entropy_well_below_depth():
    h = smooth_entropy_estimate(CorpusSpec("smooth", bit_depth=8))
    assert 1.5 < h < 0.7 * 8


def test_load_corpus_dir(tmp_path):
    imgs = make_synthetic_corpus(CorpusSpec("uniform", 3, 16))
    for i, im in enumerate(imgs):
        write_raw_container(im, tmp_path / f"{i}.rwb")
    assert load_corpus_dir(tmp_path) == imgs
    with pytest.raises(FileNotFoundError):
        load_corpus_dir(tmp_path / "missing")


def test_unknown_kind():
    with pytest.raises(ValueError):
        make_synthetic_corpus(CorpusSpec("plaid"))
