import pytest
import torch
from hypothesis import given, settings, strategies as st

from groprompt.losses import (
    LossWeights, box_loss, confidence_loss, confidence_targets, modalcon_loss,
    textcon_loss, total_loss, triplet,
)
from oracles import central_diff, raster_iou_giou, rel_close

W = LossWeights()


def test_weights_defaults_and_validation():
    assert (W.lambda_r, W.lambda_g, W.lambda_f, W.lambda_v, W.lambda_cls) == (5, 2, 0.01, 0.1, 1)
    with pytest.raises(ValueError):
        LossWeights(lambda_f=-1)


def test_box_loss_exact_match_is_zero():
    b = torch.tensor([[0.3, 0.4, 0.2, 0.1], [0.6, 0.5, 0.3, 0.3]], dtype=torch.float64)
    assert float(box_loss(b, b, W)) == 0.0


def test_box_loss_hand_example():
    pred, gt = (0.5, 0.5, 0.4, 0.4), (0.5, 0.5, 0.5, 0.5)
    _, giou_ref = raster_iou_giou(pred, gt)
    assert giou_ref == pytest.approx(0.64, abs=2e-2)
    loss = box_loss(torch.tensor([pred], dtype=torch.float64), torch.tensor([gt], dtype=torch.float64), W)
    assert float(loss) == pytest.approx(1.72, abs=1e-6)


def test_box_loss_linear_in_weights():
    pred = torch.tensor([[0.5, 0.5, 0.4, 0.4]], dtype=torch.float64)
    gt = torch.tensor([[0.5, 0.5, 0.5, 0.5]], dtype=torch.float64)
    base = float(box_loss(pred, gt, LossWeights()))
    doubled = float(box_loss(pred, gt, LossWeights(lambda_r=10)))
    l1_part = float(box_loss(pred, gt, LossWeights(lambda_g=0)))
    assert doubled - base == pytest.approx(l1_part, abs=1e-12)


def test_box_loss_length_mismatch():
    with pytest.raises(ValueError):
        box_loss(torch.rand(3, 4), torch.rand(2, 4), W)


@pytest.mark.parametrize("dp,dn,expected", [(0.3, 0.7, 0.0), (0.7, 0.3, 0.4), (0.5, 0.5, 0.0)])
def test_triplet_examples(dp, dn, expected):
    assert float(triplet(dp, dn)) == pytest.approx(expected, abs=1e-15)


def test_triplet_margin():
    assert float(triplet(0.3, 0.7, margin=0.5)) == pytest.approx(0.1)


def test_textcon_examples():
    a = torch.randn(5, 8, dtype=torch.float64)
    n = torch.randn(5, 8, dtype=torch.float64)
    assert float(textcon_loss(a, a.clone(), n)) == 0.0
    p = torch.randn(5, 8, dtype=torch.float64)
    assert float(textcon_loss(a, p, p.clone())) == 0.0
    anchor = torch.tensor([[0.0, 0.0]])
    pos = torch.tensor([[1.0, 0.0]])
    neg = torch.tensor([[0.0, 0.5]])
    assert float(textcon_loss(anchor, pos, neg)) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        textcon_loss(a, a[:3], n)


def test_modalcon_examples():
    z = torch.tensor([0.3, -1.2, 2.0])
    assert float(modalcon_loss(z, z.clone(), torch.zeros(3))) == 0.0
    f = torch.zeros(2)
    assert float(modalcon_loss(f, torch.tensor([1.0, 0.0]), torch.tensor([0.0, 1.0]))) == 0.0
    out = modalcon_loss(torch.tensor([0.0, 0.0]), torch.tensor([3.0, 4.0]), torch.tensor([0.0, 1.0]))
    assert float(out) == pytest.approx(4.0)
    with pytest.raises(ValueError):
        modalcon_loss(torch.zeros(2), torch.zeros(3), torch.zeros(2))


def test_prompt_embeddings_are_flattened():
    a = torch.randn(3, 2, 4, dtype=torch.float64)
    p = torch.randn(3, 2, 4, dtype=torch.float64)
    n = torch.randn(3, 2, 4, dtype=torch.float64)
    flat = textcon_loss(a.reshape(3, 8), p.reshape(3, 8), n.reshape(3, 8))
    assert float(textcon_loss(a, p, n)) == float(flat)


def test_total_loss_examples():
    t = total_loss(1.72, 0.0, 0.0, 0.0, LossWeights(lambda_f=0, lambda_v=0, lambda_cls=0))
    assert float(t.total) == 1.72
    assert float(total_loss(0.0, 0.0, 0.0, 0.0).total) == 0.0
    t = total_loss(1.72, 0.5, 4.0, 0.0, LossWeights())
    assert float(t.total) == pytest.approx(2.125, abs=1e-12)
    assert float(sum(t.weighted.values())) == float(t.total)
    rec = t.record()
    assert rec["L_f"] == 0.5 and rec["L_v"] == 4.0 and rec["L_box"] == 1.72


def off_kink(dp, dn):
    return abs(float(dp) - float(dn)) > 1e-3


def test_textcon_gradient_matches_finite_differences():
    g = torch.Generator().manual_seed(0)
    checked = 0
    while checked < 50:
        a = torch.randn(4, 6, generator=g, dtype=torch.float64)
        p = torch.randn(4, 6, generator=g, dtype=torch.float64)
        n = torch.randn(4, 6, generator=g, dtype=torch.float64)
        dps, dns = (a - p).norm(dim=-1), (a - n).norm(dim=-1)
        if not all(off_kink(x, y) for x, y in zip(dps, dns)):
            continue
        a.requires_grad_(True)
        textcon_loss(a, p, n).backward()
        num = central_diff(lambda x: textcon_loss(x, p, n), a)
        assert rel_close(a.grad, num, 1e-4)
        checked += 1


def test_modalcon_gradient_matches_finite_differences():
    g = torch.Generator().manual_seed(1)
    checked = 0
    while checked < 50:
        f = torch.randn(8, generator=g, dtype=torch.float64)
        zi = torch.randn(8, generator=g, dtype=torch.float64)
        zj = torch.randn(8, generator=g, dtype=torch.float64)
        if not off_kink((f - zi).norm(), (f - zj).norm()):
            continue
        f.requires_grad_(True)
        modalcon_loss(f, zi, zj).backward()
        num = central_diff(lambda x: modalcon_loss(x, zi, zj), f)
        assert rel_close(f.grad, num, 1e-4)
        checked += 1


def test_zero_gradient_when_triplet_satisfied():
    a = torch.tensor([[0.0, 0.0]], dtype=torch.float64, requires_grad=True)
    p = torch.tensor([[0.1, 0.0]], dtype=torch.float64, requires_grad=True)
    n = torch.tensor([[2.0, 0.0]], dtype=torch.float64, requires_grad=True)
    textcon_loss(a, p, n).backward()
    for x in (a, p, n):
        assert torch.equal(x.grad, torch.zeros_like(x))


def test_kink_and_coincident_points_give_finite_zero_gradient():
    a = torch.tensor([[1.0, 1.0]], dtype=torch.float64, requires_grad=True)
    textcon_loss(a, a.detach().clone(), a.detach().clone()).backward()
    assert torch.equal(a.grad, torch.zeros_like(a))


def test_confidence_targets_pick_best_iou_with_low_index_ties():
    boxes = torch.tensor([[[0.2, 0.2, 0.1, 0.1], [0.5, 0.5, 0.2, 0.2], [0.5, 0.5, 0.2, 0.2]]])
    gt = torch.tensor([[0.5, 0.5, 0.2, 0.2]])
    assert confidence_targets(boxes, gt).tolist() == [[0.0, 1.0, 0.0]]
    logits = torch.zeros(1, 3, requires_grad=True)
    loss = confidence_loss(logits, boxes, gt)
    loss.backward()
    assert logits.grad[0, 1] < 0 < logits.grad[0, 0]


vec = st.lists(st.floats(-5, 5), min_size=3, max_size=3)


@settings(max_examples=100)
@given(vec, vec, vec)
def test_losses_non_negative(a, p, n):
    a, p, n = (torch.tensor([x], dtype=torch.float64) for x in (a, p, n))
    lf = textcon_loss(a, p, n)
    lv = modalcon_loss(a[0], p[0], n[0])
    assert float(lf) >= 0 and float(lv) >= 0
    t = total_loss(1.0, lf, lv, 0.0)
    assert float(t.total) >= 1.0
