import numpy as np
import pytest

from faceinpaint import dataset as ds
from faceinpaint import masks as mt
from faceinpaint.errors import LoadError, ProbeTrainingError
from faceinpaint.probe import (CROP_H, CROP_W, ProbeModel, brow_probe_data, crop_around, eval_brow_mask,
                               train_brow_probe, train_probe)


@pytest.fixture(scope="session")
def brow_probe():
    return train_brow_probe()


def test_crop_centred_on_bbox():
    img = np.arange(3 * 32 * 32, dtype=np.float32).reshape(3, 32, 32)
    m = np.zeros((32, 32), bool)
    m[10:14, 6:20] = True
    c = crop_around(img, m)
    assert c.shape == (3, CROP_H, CROP_W)
    # bbox centre (12, 13); window rows 7..16, cols 1..24
    np.testing.assert_array_equal(c, img[:, 7:17, 1:25])
    edge = crop_around(img, np.eye(32, dtype=bool)[:1])
    assert edge.shape == (3, CROP_H, CROP_W)
    with pytest.raises(ProbeTrainingError):
        crop_around(img, np.zeros((32, 32), bool))


def test_eval_mask_covers_every_bucket():
    spec = ds.SyntheticFaceSpec.sample(9)
    em = eval_brow_mask(spec)
    for b in range(3):
        seg = ds.generate_face(ds.SyntheticFaceSpec(**{**spec.__dict__, "brow_bucket": b})).seg
        assert np.all(em.astype(bool)[mt.attr_mask(seg, ds.ATTR_CLASSES["eyebrows"]).astype(bool)])


def test_refuses_degenerate_probe():
    crops, labels = brow_probe_data(60, seed=1)
    shuffled = np.random.default_rng(0).permutation(labels)
    with pytest.raises(ProbeTrainingError):
        train_probe(crops, shuffled, epochs=5)
    with pytest.raises(ProbeTrainingError):
        train_probe(crops[:5], labels[:5])


def test_brow_probe_sanity(brow_probe, tmp_path):
    assert brow_probe.accuracy >= 0.95
    crops, labels = brow_probe_data(150, seed=99)
    assert (brow_probe.predict(crops) == labels).mean() >= 0.9
    brow_probe.save(tmp_path / "p.ckpt")
    again = ProbeModel.load(tmp_path / "p.ckpt")
    np.testing.assert_array_equal(again.predict(crops), brow_probe.predict(crops))
    with pytest.raises(LoadError):
        ProbeModel.load(tmp_path / "none.ckpt")
