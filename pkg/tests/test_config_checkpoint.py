import zipfile

import numpy as np
import pytest
import torch

from conftest import ROOT, tiny_model_config
from faceinpaint.checkpoint import FORMAT, load_checkpoint, read_manifest, save_checkpoint, write_archive
from faceinpaint.config import from_dict, load_config
from faceinpaint.errors import LoadError, ParameterError
from faceinpaint.pipeline import EditModel, Variant, build_schedule, checkpoint_schedule


def test_defaults_and_round_trip(tmp_path):
    cfg = load_config()
    assert cfg.schedule.T == 1000 and cfg.sample.steps == 50 and cfg.sample.guidance_scale == 7.5
    assert cfg.train.drop_prob == 0.05 and cfg.guidance.sign == "descent"
    cfg.dump(tmp_path / "c.yaml")
    assert load_config(tmp_path / "c.yaml") == cfg


def test_reference_config_parses():
    cfg = load_config(ROOT / "configs" / "reference.yaml")
    assert cfg.train.steps >= 2000 and cfg.data.size == 32


def test_config_errors():
    with pytest.raises(ParameterError):
        from_dict({"trian": {}})
    with pytest.raises(ParameterError):
        from_dict({"train": {"stesp": 3}})
    with pytest.raises(ParameterError):
        from_dict({"train": {"drop_prob": 1.5}})
    assert from_dict({"model": {"widths": [8, 16]}}).model.widths == (8, 16)


def test_checkpoint_round_trip(tmp_path):
    m = EditModel(tiny_model_config())
    p = tmp_path / "m.ckpt"
    save_checkpoint(m, p, {"step": 3})
    m2, meta = load_checkpoint(p)
    assert meta == {"step": 3}
    for (k, a), (k2, b) in zip(m.state_dict().items(), m2.state_dict().items()):
        assert k == k2 and torch.equal(a.float(), b)
    assert m2.vocab.itos == m.vocab.itos and m2.cfg == m.cfg
    save_checkpoint(m, tmp_path / "again.ckpt", {"step": 3})
    assert p.read_bytes() == (tmp_path / "again.ckpt").read_bytes()


def test_checkpoint_layout(tmp_path):
    p = tmp_path / "a.ckpt"
    write_archive(p, {"w": torch.arange(6.0).reshape(2, 3)}, {"kind": "test"})
    man = read_manifest(p)
    assert man["format"] == FORMAT and man["tensors"]["w"]["shape"] == [2, 3]
    with zipfile.ZipFile(p) as zf:
        raw = zf.read(man["tensors"]["w"]["file"])
    np.testing.assert_array_equal(np.frombuffer(raw, "<f4"), np.arange(6.0))


def test_checkpoint_errors(tmp_path):
    with pytest.raises(LoadError):
        load_checkpoint(tmp_path / "missing.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"not a zip")
    with pytest.raises(LoadError):
        load_checkpoint(tmp_path / "junk.ckpt")
    write_archive(tmp_path / "probe.ckpt", {}, {"kind": "probe"})
    with pytest.raises(LoadError):
        load_checkpoint(tmp_path / "probe.ckpt")
    with zipfile.ZipFile(tmp_path / "fmt.ckpt", "w") as zf:
        zf.writestr("manifest.json", '{"format": "other/9"}')
    with pytest.raises(LoadError):
        read_manifest(tmp_path / "fmt.ckpt")


def test_checkpoint_schedule_and_variant_from_config():
    cfg = from_dict({"schedule": {"kind": "cosine"}, "guidance": {"t_max": 300, "sign": "literal"}})
    got = checkpoint_schedule({"config": cfg.to_dict()})
    want = build_schedule(cfg)
    assert np.array_equal(got.alpha_bar, want.alpha_bar)
    assert np.array_equal(checkpoint_schedule({}).alpha_bar, build_schedule(from_dict({})).alpha_bar)
    v = Variant.from_section(cfg.guidance)
    assert (v.t_max, v.sign, v.window) == (300, "literal", "centered")
    assert Variant().t_max == from_dict({}).guidance.t_max
