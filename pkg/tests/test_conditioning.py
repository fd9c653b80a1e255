import numpy as np
import pytest
import torch

from faceinpaint.conditioning import (ImageEncoder, TextCondition, TextEncoder, Vocabulary, VisionCondition,
                                      broadcast_pooled, drop_conditions, tokenize)
from faceinpaint.dataset import vocabulary_words
from faceinpaint.errors import ParameterError, ShapeError


@pytest.fixture
def vocab():
    return Vocabulary(vocabulary_words())


@pytest.fixture
def enc(vocab):
    return TextEncoder(vocab, dim=8, max_len=16).double()


def test_vocabulary_roundtrip(vocab, tmp_path):
    assert vocab.itos[:2] == ["<pad>", "<unk>"]
    assert vocab.encode("Thick EYEBROWS zebra") == [vocab.stoi["thick"], vocab.stoi["eyebrows"], 1]
    p = tmp_path / "vocab.txt"
    vocab.save(p)
    lines = p.read_text().splitlines()
    assert lines == vocab.itos
    assert Vocabulary.load(p).itos == vocab.itos
    assert tokenize("a bold, expressive brow!") == ["a", "bold", "expressive", "brow"]


def test_text_determinism_and_pooled(enc):
    a = enc(["thick dark eyebrows", "thick dark eyebrows"])
    assert torch.equal(a.tokens[0], a.tokens[1])
    one = enc(["eyebrows"])
    # row 0 is the start token; pooled averages content rows only
    assert torch.equal(one.tokens[0, 0], enc.bos[0])
    assert one.starts.tolist() == [1] and one.lengths.tolist() == [2]
    assert torch.equal(one.pooled[0], one.tokens[0, 1])
    torch.testing.assert_close(a.pooled[0], a.tokens[0, 1:].mean(0))


def test_text_differs_at_changed_word(enc, vocab):
    a = enc(["thin dark eyebrows"])
    b = enc(["thick dark eyebrows"])
    # lookup oracle: embedding row plus position, before mixing
    for cap, cond in (("thin dark eyebrows", a), ("thick dark eyebrows", b)):
        ids = vocab.encode(cap)
        x = torch.stack([enc.embed.weight[i] + enc.pos[k] for k, i in enumerate(ids)])
        ctx = x.mean(0, keepdim=True).expand_as(x)
        oracle = x + torch.cat([x, ctx], -1) @ enc.mix.weight.T + enc.mix.bias
        torch.testing.assert_close(cond.tokens[0, 1:], oracle)
    assert not torch.allclose(a.tokens[0, 1], b.tokens[0, 1])


def test_empty_caption_is_null_embedding(enc):
    c = enc([""])
    assert not bool(c.is_null[0])
    assert torch.equal(c.tokens[0], enc.null)
    with pytest.raises(ParameterError):
        enc([" ".join(["brow"] * 17)])


def test_padding_excluded_from_pooled(enc):
    c = enc(["eyebrows", "thick dark eyebrows"])
    assert c.lengths.tolist() == [2, 4] and c.starts.tolist() == [1, 1]
    assert torch.equal(c.pooled[0], c.tokens[0, 1])
    assert torch.all(c.tokens[0, 2:] == 0)


def test_image_encoder_patch_oracle():
    ie = ImageEncoder(channels=3, patch=8, dim=5).double()
    img = torch.randn(2, 3, 32, 32, dtype=torch.float64)
    out = ie(img)
    assert out.tokens.shape == (2, 16, 5)
    k = 0
    for pi in range(4):
        for pj in range(4):
            patch = img[:, :, pi * 8:(pi + 1) * 8, pj * 8:(pj + 1) * 8].reshape(2, -1)
            torch.testing.assert_close(out.tokens[:, k], patch @ ie.proj.weight.T + ie.proj.bias)
            k += 1
    const = ie(torch.full((1, 3, 32, 32), 0.3, dtype=torch.float64)).tokens[0]
    assert torch.allclose(const, const[:1].expand_as(const))
    with pytest.raises(ShapeError):
        ie(torch.zeros(1, 3, 30, 32, dtype=torch.float64))


def test_broadcast_pooled(enc):
    c = enc(["thick dark eyebrows"])
    b = broadcast_pooled(c, 4)
    assert b.shape == (1, 4, 8) and torch.equal(b[0, 3], c.pooled[0])
    assert torch.equal(broadcast_pooled(c, 1)[0, 0], c.pooled[0])
    assert broadcast_pooled(c, 4096).shape == (1, 4096, 8)
    with pytest.raises(ParameterError):
        broadcast_pooled(c, 0)


def _conds(enc, B=4):
    txt = enc(["thick dark eyebrows"] * B)
    vis = VisionCondition(tokens=torch.randn(B, 16, 8, dtype=torch.float64), is_null=torch.zeros(B, dtype=torch.bool))
    return txt, vis


def test_drop_p0_p1(enc):
    txt, vis = _conds(enc)
    t0, v0 = drop_conditions(txt, vis, 0.0, np.random.default_rng(0), enc.null_condition(1))
    assert torch.equal(t0.tokens, txt.tokens) and torch.equal(v0.tokens, vis.tokens)
    t1, v1 = drop_conditions(txt, vis, 1.0, np.random.default_rng(0), enc.null_condition(1))
    assert t1.is_null.all() and v1.is_null.all()
    assert torch.equal(t1.tokens[:, 0], enc.null.expand(4, -1))
    assert t1.lengths.tolist() == [1] * 4
    assert torch.all(v1.tokens == 0)
    # dropping again is a no-op
    t2, v2 = drop_conditions(t1, v1, 1.0, np.random.default_rng(1), enc.null_condition(1))
    assert torch.equal(t2.tokens, t1.tokens) and torch.equal(v2.tokens, v1.tokens)
    with pytest.raises(ParameterError):
        drop_conditions(txt, vis, 1.5, np.random.default_rng(0))


def test_drop_frequency(enc):
    B = 100_000
    txt = TextCondition(tokens=torch.zeros(B, 1, 2), lengths=torch.ones(B, dtype=torch.long),
                        pooled=torch.zeros(B, 2), is_null=torch.zeros(B, dtype=torch.bool))
    vis = VisionCondition(tokens=torch.zeros(B, 1, 2), is_null=torch.zeros(B, dtype=torch.bool))
    null = TextCondition(tokens=torch.ones(1, 1, 2), lengths=torch.ones(1, dtype=torch.long),
                         pooled=torch.ones(1, 2), is_null=torch.ones(1, dtype=torch.bool))
    t, v = drop_conditions(txt, vis, 0.05, np.random.default_rng(7), null)
    tol = 3 * np.sqrt(0.05 * 0.95 / B)
    assert abs(t.is_null.double().mean().item() - 0.05) < tol
    assert abs(v.is_null.double().mean().item() - 0.05) < tol
    # independence: joint rate near p^2
    both = (t.is_null & v.is_null).double().mean().item()
    assert abs(both - 0.0025) < 3 * np.sqrt(0.0025 * 0.9975 / B)
