import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from groprompt.model import (
    ModelConfig, ObjectQuerySet, ProposalSet, build_model, select_top, top_indices,
    token_scores,
)
from groprompt.synthdata import GenerationParams, generate_video, tokenize
from oracles import rel_close


@pytest.fixture(scope="module")
def video():
    return generate_video(GenerationParams(num_frames=6, num_objects=2), seed=3)


@pytest.fixture(scope="module")
def model():
    return build_model(ModelConfig(), seed=0).eval()


def ids(text="the red circle moving right"):
    return tokenize(text)


def test_encode_frame_shapes_and_determinism(model, video):
    vis = model.encode_frame(video.frames[0])
    assert vis.tokens.shape == (1, 64, 64)
    assert torch.isfinite(vis.tokens).all()
    assert torch.equal(vis.tokens, model.encode_frame(video.frames[0].copy()).tokens)
    with pytest.raises(ValueError):
        model.encode_frame(np.zeros((32, 32, 3), np.uint8))


def test_encode_frame_sensitive_to_one_patch(model, video):
    frame = video.frames[0].copy()
    other = frame.copy()
    other[8:16, 24:32] = 255 - other[8:16, 24:32]
    a, b = model.encode_frame(frame).tokens, model.encode_frame(other).tokens
    changed = (a != b).any(-1)[0]
    # the 3x3 stem lets a change leak into adjacent patches only
    assert changed[1 * 8 + 3]
    assert not changed[5 * 8:].any()


def test_encode_text_frozen_and_masked(model):
    txt = model.encode_text(ids())
    assert txt.tokens.shape == (12, 64) and txt.sentence_feature.shape == (64,)
    n = int((~txt.pad_mask).sum())
    assert n == 7
    assert torch.allclose(txt.sentence_feature, txt.tokens[:n].mean(0))
    assert all(not p.requires_grad for p in model.text_encoder.parameters())
    other = model.encode_text(ids("the red square moving right"))
    assert not torch.equal(txt.sentence_feature, other.sentence_feature)
    with pytest.raises(ValueError):
        model.encode_text([1, 999, 2])


def test_text_table_unchanged_by_training(video):
    m = build_model(seed=1)
    before = m.encode_text(ids()).tokens.clone()
    table = m.text_encoder.embedding.weight.clone()
    opt = torch.optim.SGD([p for _, p in m.trainable_named_parameters()], lr=1e-2, momentum=0.9)
    txt = m.encode_text(ids())
    for _ in range(100):
        p = m(video.frames[:2], txt)
        loss = p.boxes.sum() + p.confidence_logits.pow(2).sum()
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert torch.equal(m.text_encoder.embedding.weight, table)
    assert torch.equal(m.encode_text(ids()).tokens, before)


def test_parameter_partition():
    m = build_model(seed=0)
    trainable = {n.split(".")[0] for n, _ in m.trainable_named_parameters()}
    assert trainable == {"backbone", "query_content", "decoder", "box_head", "conf_head", "decoder_norm"}
    assert [n for n, _ in m.frozen_named_parameters()] == ["text_encoder.embedding.weight"]


def test_query_selection_hand_case():
    vis = torch.tensor([[[1.0, 0.0], [0.0, 3.0], [2.0, 0.0], [0.0, -1.0]]])
    txt = torch.tensor([[1.0, 0.0], [0.0, 1.0], [9.0, 9.0]])
    pad = torch.tensor([False, False, True])
    score = token_scores(vis, txt, pad)
    # max over the two real text tokens: 1, 3, 2, 0 (scaled by 1/sqrt(2))
    assert torch.allclose(score * 2 ** 0.5, torch.tensor([[1.0, 3.0, 2.0, 0.0]]))
    assert top_indices(score, 2).tolist() == [[1, 2]]
    assert top_indices(torch.tensor([[1.0, 1.0, 0.0, 1.0]]), 2).tolist() == [[0, 1]]


def test_generate_queries(model, video):
    vis = model.encode_frame(video.frames[:2])
    txt = model.encode_text(ids())
    q = model.generate_queries(vis, txt)
    assert q.queries.shape == (2, 8, 64) and q.provenance.shape == (2, 8)
    scaled = type(txt)(txt.tokens * 3.5, txt.pad_mask, txt.sentence_feature)
    assert torch.equal(model.generate_queries(vis, scaled).provenance, q.provenance)


def test_all_tokens_selected_when_queries_equal_tokens(video):
    m = build_model(ModelConfig(num_queries=64), seed=0)
    vis = m.encode_frame(video.frames[0])
    txt = m.encode_text(ids())
    q = m.generate_queries(vis, txt)
    assert sorted(q.provenance[0].tolist()) == list(range(64))
    scores = token_scores(vis.tokens, txt.tokens, txt.pad_mask)[0]
    assert torch.all(scores[q.provenance[0]][:-1] >= scores[q.provenance[0]][1:])
    with pytest.raises(ValueError):
        build_model(ModelConfig(num_queries=65), seed=0).generate_queries(vis, txt)


def test_zero_initialized_decoder_is_identity(video):
    m = build_model(ModelConfig(zero_init_outputs=True), seed=0)
    vis = m.encode_frame(video.frames[0])
    txt = m.encode_text(ids())
    q = m.generate_queries(vis, txt)
    assert torch.equal(m.cross_modality_decode(q, vis, txt).queries, q.queries)


def test_decoder_permutation_equivariant(model, video):
    vis = model.encode_frame(video.frames[0])
    txt = model.encode_text(ids())
    q = model.generate_queries(vis, txt)
    perm = torch.tensor([3, 0, 7, 1, 6, 2, 5, 4])
    qp = ObjectQuerySet(q.queries[:, perm], q.provenance[:, perm], q.scores[:, perm],
                        q.reference[:, perm])
    out = model.cross_modality_decode(q, vis, txt).queries
    out_p = model.cross_modality_decode(qp, vis, txt).queries
    assert torch.allclose(out[:, perm], out_p, atol=1e-5)


def test_decoder_uses_text(model, video):
    vis = model.encode_frame(video.frames[0])
    txt = model.encode_text(ids())
    q = model.generate_queries(vis, txt)
    with_text = model.cross_modality_decode(q, vis, txt).queries
    masked = model.cross_modality_decode(q, vis, txt, text_mask=torch.ones(12, dtype=torch.bool)).queries
    assert not torch.allclose(with_text, masked)


def test_zero_logits_give_half(model):
    m = build_model(seed=0)
    torch.nn.init.zeros_(m.conf_head.weight)
    torch.nn.init.zeros_(m.conf_head.bias)
    q = ObjectQuerySet(torch.randn(1, 8, 64), torch.arange(8)[None])
    p = m.predict_proposals(q)
    assert len(p) == 8
    assert torch.equal(p.boxes, torch.full((1, 8, 4), 0.5))
    assert torch.equal(p.confidences, torch.full((1, 8), 0.5))


def test_proposals_in_unit_interval(model, video):
    p = model(video.frames, model.encode_text(ids()))
    assert p.boxes.shape == (6, 8, 4) and p.confidences.shape == (6, 8)
    assert bool(((p.boxes > 0) & (p.boxes < 1)).all())
    assert bool(((p.confidences > 0) & (p.confidences < 1)).all())


def proposals(conf):
    conf = torch.tensor(conf)
    boxes = torch.rand(len(conf), 4)
    return ProposalSet(boxes, conf, torch.logit(conf))


def test_select_top_examples():
    p = proposals([0.2, 0.9, 0.4])
    box, conf, k = select_top(p)
    assert k == 1 and torch.equal(box, p.boxes[1]) and float(conf) == pytest.approx(0.9)
    assert select_top(proposals([0.5, 0.5, 0.5]))[2] == 0
    q = ProposalSet(p.boxes, p.confidences ** 3, p.confidence_logits * 2 + 7)
    assert select_top(q)[2] == 1
    with pytest.raises(ValueError):
        select_top(ProposalSet(torch.zeros(0, 4), torch.zeros(0), torch.zeros(0)))


def test_forward_clip_online_contract(model, video):
    full = model.forward_clip(video.frames, ids())
    single = model.forward_clip(video.frames[:1], ids())
    assert len(full) == 6
    p = model(video.frames[0], model.encode_text(ids())).frame(0)
    assert torch.equal(single[0].proposals.boxes, p.boxes)
    for t in range(1, 6):
        prefix = model.forward_clip(video.frames[:t], ids())
        for a, b in zip(prefix, full):
            assert torch.equal(a.proposals.boxes, b.proposals.boxes)
            assert torch.equal(a.proposals.confidence_logits, b.proposals.confidence_logits)
            assert a.index == b.index


def test_duplicated_frame_gives_identical_proposals(model, video):
    frames = np.concatenate([video.frames[:3], video.frames[1:2]])
    out = model.forward_clip(frames, ids())
    assert torch.equal(out[1].proposals.boxes, out[3].proposals.boxes)
    assert out[1].index == out[3].index


def test_batched_forward_matches_sequential(model, video):
    txt = model.encode_text(ids())
    batched = model(video.frames, txt)
    for t in range(video.num_frames):
        assert torch.allclose(model(video.frames[t], txt).boxes[0], batched.boxes[t], atol=1e-6)


def test_selected_box_gradient_matches_finite_differences(video):
    m = build_model(seed=4).double()
    with torch.no_grad():
        # the zero-initialized box head would make the box constant
        m.box_head.layers[-1].weight.normal_(0, 0.1)
    txt = m.encode_text(ids())
    frame = video.frames[2]
    k = int(torch.argmax(m(frame, txt).confidence_logits[0]))
    param = m.backbone.stem.weight
    probes = [(0, 0, 1, 1), (3, 1, 0, 2), (7, 2, 2, 0)]

    def selected(field):
        return m(frame, txt).boxes[0, k, field]

    for field in range(4):
        m.zero_grad()
        selected(field).backward()
        for idx in probes:
            analytic = param.grad[idx].item()
            eps = 1e-6
            with torch.no_grad():
                old = param[idx].item()
                param[idx] = old + eps
                hi = selected(field).item()
                param[idx] = old - eps
                lo = selected(field).item()
                param[idx] = old
            assert int(torch.argmax(m(frame, txt).confidence_logits[0])) == k
            assert rel_close(analytic, (hi - lo) / (2 * eps), 1e-3, floor=1e-10)


@settings(max_examples=15, deadline=None)
@given(size=st.sampled_from([64, 128]), frames=st.integers(1, 3),
       length=st.integers(0, 10), nq=st.integers(1, 16))
def test_shape_contract(size, frames, length, nq):
    m = build_model(ModelConfig(image_size=size, num_queries=nq, layers=2), seed=0)
    v = np.random.default_rng(0).integers(0, 256, (frames, size, size, 3), dtype=np.uint8)
    words = ("the red circle moving right " * 3).split()[:length]
    txt = m.encode_text(tokenize(" ".join(words)))
    nv = (size // 8) ** 2
    vis = m.encode_frame(v)
    assert vis.tokens.shape == (frames, nv, 64)
    q = m.generate_queries(vis, txt)
    assert q.queries.shape == (frames, nq, 64)
    q = m.cross_modality_decode(q, vis, txt)
    assert q.queries.shape == (frames, nq, 64)
    p = m.predict_proposals(q)
    assert p.boxes.shape == (frames, nq, 4) and p.confidences.shape == (frames, nq)
