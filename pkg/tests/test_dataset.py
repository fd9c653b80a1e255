import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from faceinpaint import dataset as ds
from faceinpaint import masks as mt
from faceinpaint.errors import ClientError, LoadError, ParameterError


def face(seed, **over):
    spec = ds.SyntheticFaceSpec.sample(seed)
    for k, v in over.items():
        setattr(spec, k, v)
    return ds.generate_face(spec)


def test_determinism():
    a, b = face(11), face(11)
    assert a.image.tobytes() == b.image.tobytes()
    assert a.seg.tobytes() == b.seg.tobytes()
    assert a.captions == b.captions


def test_glasses_off():
    f = face(3, glasses=False)
    assert not np.any(f.seg == 6)
    assert not any(a == ds.ATTR_ID["glasses"] for a, _ in f.captions)
    g = face(3, glasses=True)
    assert np.any(g.seg == 6)


def test_brow_thickness_pixel_count():
    for seed in range(10):
        counts = []
        for b in range(3):
            seg = face(seed, brow_bucket=b, glasses=False).seg
            n = 0
            for i in range(seg.shape[0]):
                for j in range(seg.shape[1]):
                    n += seg[i, j] in (2, 3)
            counts.append(n)
        assert counts[0] < counts[1] < counts[2], counts


def _scalar_predicates(spec, i, j):
    """Per-pixel shape membership computed with scalar arithmetic."""
    S = spec.size
    u, v = (j + 0.5) / S, (i + 0.5) / S
    cx, cy = spec.center
    rx, ry = spec.radii
    face_in = ((u - cx) / rx) ** 2 + ((v - cy) / ry) ** 2 <= 1.0
    out = {1: face_in, 14: abs(u - cx) <= 0.13 and v >= cy + 0.25}
    out[17] = (((u - cx) / (rx * 1.12)) ** 2 + ((v - cy) / (ry * 1.08)) ** 2 <= 1.0) and v < cy - ry * 0.74
    out[10] = face_in and ((u - cx) / 0.045) ** 2 + ((v - cy - 0.07) / 0.06) ** 2 <= 1.0
    for side, brow_cls, eye_cls in ((-1, 3, 5), (1, 2, 4)):
        x = (u - (cx + side * 0.17)) / 0.1
        centre = cy - 0.215 - spec.brow_arch * (1 - x * x)
        half = ds.BROW_HALF_THICKNESS[spec.brow_bucket] / 32
        out[brow_cls] = face_in and abs(x) <= 1 and abs(v - centre) <= half
        hh = (0.055, 0.04, 0.026)[spec.eye_shape]
        out[eye_cls] = ((u - cx - side * 0.17) / 0.08) ** 2 + ((v - cy + 0.05) / hh) ** 2 <= 1
    curv = (0.045, 0.0, -0.045)[spec.mouth_shape]
    x = (u - cx) / 0.13
    c = cy + 0.22 + curv * (1 - x * x) - curv * 0.5
    out[12] = face_in and abs(x) <= 1 and c - 0.04 <= v < c
    out[13] = face_in and abs(x) <= 1 and c <= v <= c + 0.045
    ring = False
    for side in (-1, 1):
        ex, ey = cx + side * 0.17, cy - 0.05
        if spec.glasses_shape == 0:
            d = math.hypot(u - ex, v - ey)
        else:
            d = max(abs(u - ex) / 1.1, abs(v - ey) * 1.25)
        ring |= abs(d - 0.09) <= 0.02
    bridge = abs(u - cx) <= 0.07 and abs(v - (cy - 0.06)) <= 0.02
    out[6] = face_in and (ring or bridge)
    return out


@pytest.mark.parametrize("seed", range(12))
def test_ground_truth_consistency(seed):
    f = face(seed)
    for i in range(32):
        for j in range(32):
            k = int(f.seg[i, j])
            if k == 0:
                continue
            assert _scalar_predicates(f.spec, i, j)[k], (i, j, mt.CLASS_NAMES[k])


def test_caption_faithfulness():
    for seed in range(40):
        f = face(seed)
        for a, cap in f.captions:
            assert ds.HEAD_WORD[ds.ATTRIBUTES[a]] in cap
    for attr, forms in ds.GRAMMAR.items():
        for value in forms:
            for indirect in (False, True):
                assert ds.HEAD_WORD[attr] in ds.caption_for(attr, value, indirect)
    assert ds.caption_for("eyebrows", "thick") == "thick dark eyebrows"
    with pytest.raises(ParameterError):
        ds.caption_for("eyebrows", "bushy")


def test_spec_validation():
    spec = ds.SyntheticFaceSpec.sample(0)
    spec.brow_bucket = 3
    with pytest.raises(ParameterError):
        ds.generate_face(spec)
    spec = ds.SyntheticFaceSpec.sample(0, size=24)
    with pytest.raises(ParameterError):
        ds.generate_face(spec)


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=30, deadline=None)
def test_sampled_specs_valid(seed):
    f = ds.generate_face(ds.SyntheticFaceSpec.sample(seed))
    assert f.image.shape == (3, 32, 32) and np.abs(f.image).max() <= 1.0
    assert f.seg.max() < 19
    assert any(a == ds.ATTR_ID["eyebrows"] for a, _ in f.captions)


def test_corpus_single(tmp_path):
    m = ds.build_corpus(1, 0, tmp_path)
    assert len(m.triples) == 1 and not m.rejects
    t = m.triples[0]
    for p in (t.image_path, t.mask_path, ds.precise_path_for(t.mask_path)):
        assert (tmp_path / p).exists()
    assert t.caption and ds.read_mask_png(tmp_path / t.mask_path).any()
    again = ds.Manifest.read(tmp_path)
    assert again.triples == m.triples


@pytest.mark.parametrize("mode", ["hull", "dilate"])
def test_coarse_superset(tmp_path, mode):
    m = ds.build_corpus(30, 1, tmp_path, mask_aug=mode)
    for s in ds.load_corpus(m, split=None):
        assert np.all(s.coarse_mask >= s.precise_mask)
        if mode == "hull":
            np.testing.assert_array_equal(mt.convex_hull(s.coarse_mask), s.coarse_mask)


def test_manifest_hash_rerun(tmp_path):
    a = ds.build_corpus(100, 42, tmp_path / "a")
    b = ds.build_corpus(100, 42, tmp_path / "b")
    assert a.digest() == b.digest()
    c = ds.build_corpus(100, 43, tmp_path / "c")
    assert c.digest() != a.digest()
    lines = a.path.read_text().splitlines()
    assert all(len(l.split("\t")) == 5 for l in lines)
    assert {l.split("\t")[4] for l in lines} == {"train", "eval"}


class FlakyCaptioner(ds.CaptionerClient):
    def caption(self, image, mask, template_id, hint=None):
        if template_id == "mouth":
            raise ClientError("mouth captioning unavailable")
        return hint


def test_client_failure_goes_to_rejects(tmp_path):
    m = ds.build_corpus(40, 0, tmp_path, captioner=FlakyCaptioner())
    assert m.rejects and len(m.triples) + len(m.rejects) == 40
    assert all("mouth" in msg for _, msg in m.rejects)
    assert ds.Manifest.read(tmp_path).rejects == m.rejects


def test_http_captioner_round_trip(tmp_path):
    with ds.MockCaptionServer() as server:
        cap = ds.HTTPCaptioner(server.url)
        m = ds.build_corpus(5, 0, tmp_path, captioner=cap)
        m2 = ds.build_corpus(5, 0, tmp_path / "again", captioner=cap)
        f = face(1)
        with pytest.raises(ClientError):
            cap.caption(f.image, f.attr_masks[0], "hat")
    assert len(m.triples) == 5 and m.digest() == m2.digest()
    for t in m.triples:
        assert ds.HEAD_WORD[ds.ATTRIBUTES[t.attribute_id]] in t.caption
    with pytest.raises(ClientError):
        ds.HTTPCaptioner("http://127.0.0.1:9/none", timeout=0.5).caption(f.image, f.attr_masks[0], "eyes")


def test_load_corpus(tmp_path):
    m = ds.build_corpus(22, 5, tmp_path)
    train = ds.load_corpus(m, "train")
    ev = ds.load_corpus(m, "eval")
    assert len(train) == 20 and len(ev) == 2
    assert len(ds.load_corpus(m, None)) == 22
    for s in train:
        assert np.abs(s.z0).max() <= 1.0 and s.z0.dtype == np.float32
        assert set(np.unique(s.coarse_mask)) <= {0, 1}
    a = [s.caption for s in ds.load_corpus(m, "train", shuffle_seed=3)]
    b = [s.caption for s in ds.load_corpus(m, "train", shuffle_seed=3)]
    assert a == b
    (tmp_path / m.triples[4].mask_path).unlink()
    with pytest.raises(LoadError, match=m.triples[4].image_path):
        ds.load_corpus(m, None)
    with pytest.raises(LoadError):
        ds.Manifest.read(tmp_path / "nowhere")


def test_vocabulary_covers_grammar():
    from faceinpaint.conditioning import tokenize
    words = set(ds.vocabulary_words())
    for forms in ds.GRAMMAR.values():
        for direct, indirect in forms.values():
            for tone in ds.TONE_WORDS:
                assert set(tokenize(direct.replace("{tone}", tone))) <= words
            assert set(tokenize(indirect)) <= words
