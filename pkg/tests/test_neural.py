from pathlib import Path

import numpy as np
import pytest
import torch

from david.docmodel import BBox, Document, Entity, Token
from david.model import DavidModel, ModelOptions, build_model, count_parameters, tensorize
from david.neural import (EncoderConfig, EntityFusion, L2VProjection, SequenceOverflowError, TokenEncoder,
                          VisualEncoder, Vocab, child_mean, pool_l2v, read_ppm, region_means, render_l2v,
                          render_page, roi_mean_pool, word_shape, write_ppm)

DATA = Path(__file__).parent / "data"
SMALL = EncoderConfig(vocab_size=50, hidden_dim=16, n_layers=1, n_heads=2, max_tokens=40, max_entities=16,
                      dropout=0.0, ffn_dim=24, decoder_layers=1, conv_channels=(4, 6))


def test_config_requires_divisible_heads():
    with pytest.raises(ValueError):
        EncoderConfig(hidden_dim=30, n_heads=4)


def test_config_defaults_and_json():
    cfg = EncoderConfig()
    assert (cfg.hidden_dim, cfg.n_layers, cfg.n_heads) == (128, 4, 4)
    assert EncoderConfig.from_json(cfg.to_json()) == cfg


def test_l2v_corner_pixels():
    img = render_l2v((100, 100))
    assert img[0, 0].tolist() == [0, 0, 128]
    assert img[99, 99].tolist() == [255, 255, 128]
    # floor(255 * 50 / 99) = 128
    assert img[50, 50].tolist() == [128, 128, 128]


def test_l2v_matches_golden_raster(tmp_path):
    golden = read_ppm(DATA / "l2v_64x64.ppm")
    img = render_l2v((64, 64))
    assert np.array_equal(img, golden)
    write_ppm(tmp_path / "x.ppm", img)
    assert (tmp_path / "x.ppm").read_bytes() == (DATA / "l2v_64x64.ppm").read_bytes()


@pytest.mark.parametrize("size", [(64, 64), (101, 37), (640, 900)])
def test_full_page_channel_means(size):
    means = region_means(render_l2v(size), [BBox(0, 0, 1000, 1000)])[0]
    w, h = size
    # mean of floor(255 k / (n - 1)) over k; close to the continuous ramp mean 127.5
    exact = [np.mean((255 * np.arange(n)) // (n - 1)) for n in (w, h)]
    assert means[:2] == pytest.approx(exact)
    assert means[:2] == pytest.approx([127.5, 127.5], abs=0.6)
    assert means[2] == 128


def test_single_pixel_region_is_that_pixel():
    img = render_l2v((1000, 1000))
    assert region_means(img, [BBox(300, 700, 301, 701)])[0].tolist() == img[700, 300].tolist()


def test_zero_projection_gives_zero_vector():
    proj = L2VProjection(SMALL)
    torch.nn.init.zeros_(proj.proj.weight)
    torch.nn.init.zeros_(proj.proj.bias)
    v = pool_l2v(render_l2v((50, 50)), BBox(0, 0, 500, 500), proj)
    assert torch.equal(v, torch.zeros(16))


def test_region_means_agree_with_roi_pool():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(40, 30, 3)).astype(np.uint8)
    boxes = [BBox(0, 0, 1000, 1000), BBox(100, 250, 430, 900), BBox(999, 999, 1000, 1000)]
    fmap = torch.as_tensor(img.transpose(2, 0, 1).astype(np.float64))
    assert np.allclose(roi_mean_pool(fmap, boxes).numpy(), region_means(img, boxes))


def _page(entities, w=80, h=80):
    return Document("p", w, h, (), entities)


def test_visual_identical_pixels_identical_output():
    torch.manual_seed(0)
    vis = VisualEncoder(SMALL)
    doc = _page((Entity(0, "a", BBox(0, 0, 400, 400), "menu"), Entity(1, "b", BBox(500, 500, 900, 900), "menu")))
    page = torch.as_tensor(render_page(doc).transpose(2, 0, 1).copy(), dtype=torch.float32) / 255
    out = vis(page, [BBox(100, 100, 300, 300), BBox(600, 600, 800, 800)])
    assert torch.allclose(out[0], out[1])


def test_visual_zero_conv_constant_output():
    torch.manual_seed(0)
    vis = VisualEncoder(SMALL)
    for conv in (vis.conv1, vis.conv2):
        torch.nn.init.zeros_(conv.weight)
    doc = _page((Entity(0, "a", BBox(0, 0, 400, 400), "total"),))
    page = torch.as_tensor(render_page(doc).transpose(2, 0, 1).copy(), dtype=torch.float32) / 255
    out = vis(page, [BBox(0, 0, 400, 400), BBox(500, 500, 1000, 1000)])
    assert torch.allclose(out[0], out[1])


def test_visual_distinct_shades_distinct_output():
    torch.manual_seed(0)
    vis = VisualEncoder(SMALL)
    doc = _page((Entity(0, "a", BBox(0, 0, 400, 400), "total"), Entity(1, "b", BBox(500, 500, 900, 900), "field")))
    page = torch.as_tensor(render_page(doc).transpose(2, 0, 1).copy(), dtype=torch.float32) / 255
    out = vis(page, [BBox(100, 100, 300, 300), BBox(600, 600, 800, 800)])
    assert not torch.allclose(out[0], out[1])


def test_fusion_zero_weights_exposes_layout():
    fusion = EntityFusion(SMALL)
    torch.nn.init.zeros_(fusion.linear.weight)
    torch.nn.init.zeros_(fusion.linear.bias)
    l2v = torch.randn(3, 16)
    assert torch.equal(fusion(torch.randn(3, 16), torch.randn(3, 16), l2v), l2v)


def test_childless_entity_pools_zero():
    states = torch.randn(4, 16)
    rel = torch.tensor([[1.0, 0.0], [1.0, 0.0], [0.0, 0.0], [0.0, 0.0]])
    pooled = child_mean(states, rel)
    assert torch.allclose(pooled[0], states[:2].mean(0))
    assert torch.equal(pooled[1], torch.zeros(16))
    fusion = EntityFusion(SMALL)
    vis, l2v = torch.randn(2, 16), torch.randn(2, 16)
    expected = fusion.linear(torch.cat([vis[1], torch.zeros(16)])) + l2v[1]
    assert torch.allclose(fusion(vis, pooled, l2v)[1], expected)


def _tokens(n):
    return torch.arange(2, 2 + n)[None] % SMALL.vocab_size, torch.randint(0, 1000, (1, n, 4))


def test_token_encoder_empty_document():
    model = build_model(SMALL, ModelOptions(3, 6), seed=0)
    doc = Document("e", 50, 50, (), ())
    dt = tensorize(doc, Vocab([]))
    assert model.encode_tokens_gde(dt).shape == (0, 16)


def test_token_encoder_deterministic_and_order_sensitive():
    torch.manual_seed(0)
    enc = TokenEncoder(SMALL).eval()
    ids, boxes = _tokens(6)
    a, b = enc(ids, boxes), enc(ids, boxes)
    assert torch.equal(a, b)
    perm = torch.tensor([5, 4, 3, 2, 1, 0])
    c = enc(ids[:, perm], boxes[:, perm])
    assert not torch.allclose(a[0, perm], c[0])


def test_token_encoder_overflow():
    enc = TokenEncoder(SMALL)
    ids, boxes = _tokens(41)
    with pytest.raises(SequenceOverflowError):
        enc(ids, boxes)


def test_query_encoding_deterministic_and_distinct():
    vocab = Vocab.build(["holder name", "shareholder name", "share class"], 50)
    model = build_model(SMALL, ModelOptions(3, 6), seed=0).eval()
    q = vocab.encode("holder name".split())
    a, b = model.query_encoding(q), model.query_encoding(q)
    assert torch.equal(a.pooled, b.pooled)
    assert torch.allclose(a.pooled, a.sequence.mean(0))
    s1 = model.query_encoding(vocab.encode("Shareholder Name".split())).pooled
    s2 = model.query_encoding(vocab.encode("Share Class".split())).pooled
    assert not torch.allclose(s1, s2)


def test_word_shape_and_vocab():
    assert word_shape("Total12.50") == "total00.00"
    vocab = Vocab.build(["a b b", "C c c"], max_size=4)
    assert vocab.itos == ["<pad>", "<unk>", "c", "b"]
    assert vocab.encode(["B", "zzz"]) == [3, 1]


def _expected_parameters(cfg: EncoderConfig, n_gold: int, n_syn: int) -> int:
    h, f, v = cfg.hidden_dim, cfg.ffn_dim, cfg.vocab_size
    c1, c2 = cfg.conv_channels
    lin = lambda i, o: i * o + o  # noqa: E731
    mha = 4 * lin(h, h)
    ffn = lin(h, f) + lin(f, h)
    enc_layer = 2 * 2 * h + mha + ffn
    dec_layer = 3 * 2 * h + 2 * mha + ffn
    encoder = cfg.n_layers * enc_layer + 2 * h
    decoder = cfg.decoder_layers * dec_layer + 2 * h
    token_enc = v * h + 4 * 1001 * h + cfg.max_tokens * h + 2 * h + encoder
    l2v = lin(3, h)
    entity = (c1 * 3 * 9 + c1) + (c2 * c1 * 9 + c2) + lin(c2, h) + lin(2 * h, h)
    joint = 2 * h + encoder
    align = 2 * lin(h, h)
    pointer = 2 * lin(h, h)
    return (token_enc + l2v + entity + joint + align + decoder + lin(h, n_syn) + decoder + pointer
            + lin(h, n_gold) + decoder + pointer)


@pytest.mark.parametrize("cfg", [SMALL, EncoderConfig(), EncoderConfig(hidden_dim=64, n_layers=2, n_heads=8,
                                                                       ffn_dim=100, decoder_layers=3)])
def test_parameter_count_closed_form(cfg):
    model = DavidModel(cfg, ModelOptions(13, 6))
    assert count_parameters(model) == _expected_parameters(cfg, 13, 6)


def test_outputs_finite(form_docs):
    vocab = Vocab.build([t.text for d in form_docs for t in d.tokens], 50)
    model = build_model(SMALL, ModelOptions(13, 6), seed=1)
    doc = form_docs[0]
    small = Document(doc.id, doc.page_width, doc.page_height, doc.tokens[:40],
                     doc.entities, split="g")
    dt = tensorize(small, vocab)
    reps = model.represent(dt)
    for t in (reps.tokens_gde, reps.entities, reps.tokens_joint, reps.entities_joint, model.tag_logits(reps)):
        assert torch.isfinite(t).all()
