import math

import numpy as np
import pytest
import torch

from patternmark import losses, media
from patternmark.errors import ConfigError

torch.set_num_threads(2)


def rand_img(shape, seed=0):
    return torch.rand(shape, generator=torch.Generator().manual_seed(seed))


# --- differentiable SSIM vs the float64 metric -----------------------------------

def test_ssim_index_matches_media():
    a = rand_img((1, 3, 24, 24), 1)
    b = (a + 0.1 * rand_img((1, 3, 24, 24), 2)).clamp(0, 1)
    torch_val = float(losses.ssim_index(a, b))
    np_val = media.ssim(a[0].numpy(), b[0].numpy())
    assert torch_val == pytest.approx(np_val, abs=1e-4)


def test_ssim_index_self_is_one():
    a = rand_img((2, 1, 16, 16), 3)
    assert float(losses.ssim_index(a, a)) == pytest.approx(1.0, abs=1e-6)


def test_ssim_index_differentiable():
    a = rand_img((1, 1, 16, 16), 4).double().requires_grad_(True)
    b = rand_img((1, 1, 16, 16), 5).double()
    (1 - losses.ssim_index(a, b)).backward()
    assert float(a.grad.abs().sum()) > 0


# --- stage 1 -----------------------------------------------------------------------

def test_stage1_confident_correct_is_near_zero():
    msgs = torch.randint(0, 2, (4, 196), generator=torch.Generator().manual_seed(0)).float()
    scores = (msgs * 2 - 1) * 20.0
    assert float(losses.loss_stage1(msgs, scores)) < 1e-6


def test_stage1_zero_logits_is_ln2():
    msgs = torch.randint(0, 2, (4, 196), generator=torch.Generator().manual_seed(1)).float()
    assert float(losses.loss_stage1(msgs, torch.zeros(4, 196))) == pytest.approx(
        math.log(2), abs=1e-6)


def test_stage1_flipping_truth_increases_loss():
    msgs = torch.randint(0, 2, (1, 196), generator=torch.Generator().manual_seed(2)).float()
    scores = (msgs * 2 - 1) * 5.0
    base = float(losses.loss_stage1(msgs, scores))
    flipped = msgs.clone()
    flipped[0, 0] = 1 - flipped[0, 0]
    assert float(losses.loss_stage1(flipped, scores)) > base


def test_stage1_shape_mismatch():
    with pytest.raises(ConfigError):
        losses.loss_stage1(torch.zeros(1, 196), torch.zeros(1, 64))


# --- stage 2 / 3 ----------------------------------------------------------------------

def stage2_inputs(seed=0):
    cover = rand_img((2, 3, 24, 24), seed)
    encoded = (cover + 0.05 * rand_img((2, 3, 24, 24), seed + 1)).clamp(0, 1)
    gt_mask = (rand_img((2, 1, 16, 16), seed + 2) > 0.5).float()
    pred_mask = rand_img((2, 1, 16, 16), seed + 3).clamp(0.01, 0.99)
    gt_pat = rand_img((2, 1, 24, 24), seed + 4)
    dec_pat = rand_img((2, 1, 24, 24), seed + 5)
    return cover, encoded, gt_mask, pred_mask, gt_pat, dec_pat


def test_stage2_identical_pairs_leave_only_mask_term():
    cover, _, gt_mask, _, gt_pat, _ = stage2_inputs()
    total, terms = losses.loss_stage2(cover, cover, gt_mask, gt_mask, gt_pat, gt_pat,
                                      (1, 1, 1, 1))
    assert float(terms["vis"]) == pytest.approx(0.0, abs=1e-6)
    assert float(terms["pattern"]) == pytest.approx(0.0, abs=1e-6)
    assert float(terms["loc"]) < 1e-4  # crisp {0,1} mask against itself
    assert float(total) == pytest.approx(float(terms["loc"]), abs=1e-6)


def test_stage2_zero_lambdas():
    total, _ = losses.loss_stage2(*stage2_inputs(), (0, 0, 0, 0))
    assert float(total) == 0.0


def test_stage2_doubling_lambda1_doubles_visual_term():
    args = stage2_inputs(7)
    _, t1 = losses.loss_stage2(*args, (1, 1, 1, 1))
    _, t2 = losses.loss_stage2(*args, (2, 1, 1, 1))
    assert float(t2["vis"]) == pytest.approx(2 * float(t1["vis"]), rel=1e-6)
    assert float(t2["loc"]) == pytest.approx(float(t1["loc"]), rel=1e-6)


def test_stage2_total_is_sum_of_breakdown():
    for seed in range(5):
        total, terms = losses.loss_stage2(*stage2_inputs(seed), (2.5, 0.5, 1.5, 1))
        assert float(total) == pytest.approx(sum(float(v) for v in terms.values()),
                                             abs=1e-6)


def test_stage3_reduces_to_stage2_when_lambda4_zero():
    args = stage2_inputs(9)
    msgs = torch.randint(0, 2, (2, 8), generator=torch.Generator().manual_seed(0)).float()
    scores = torch.randn(2, 8, generator=torch.Generator().manual_seed(1))
    t2, _ = losses.loss_stage2(*args, (1, 1, 1, 1))
    t3, terms = losses.loss_stage3(*args, msgs, scores, (1, 1, 1, 0))
    assert float(t3) == pytest.approx(float(t2), abs=1e-7)
    assert float(terms["msg"]) == 0.0


def test_stage3_default_weights_breakdown():
    args = stage2_inputs(11)
    msgs = torch.randint(0, 2, (2, 8), generator=torch.Generator().manual_seed(2)).float()
    scores = torch.randn(2, 8, generator=torch.Generator().manual_seed(3))
    total, terms = losses.loss_stage3(*args, msgs, scores, (10, 1, 1, 1))
    assert set(terms) == {"vis", "loc", "pattern", "msg"}
    _, unit = losses.loss_stage3(*args, msgs, scores, (1, 1, 1, 1))
    assert float(terms["vis"]) == pytest.approx(10 * float(unit["vis"]), rel=1e-6)
    assert float(total) == pytest.approx(sum(float(v) for v in terms.values()), abs=1e-6)


def test_stage3_gradient_wrt_encoded():
    cover, encoded, gt_mask, pred_mask, gt_pat, dec_pat = stage2_inputs(13)
    encoded = encoded.clone().requires_grad_(True)
    msgs = torch.randint(0, 2, (2, 8), generator=torch.Generator().manual_seed(4)).float()
    scores = torch.randn(2, 8, generator=torch.Generator().manual_seed(5))
    total, _ = losses.loss_stage3(cover, encoded, gt_mask, pred_mask, gt_pat, dec_pat,
                                  msgs, scores, (1, 1, 1, 1))
    total.backward()
    assert float(encoded.grad.abs().sum()) > 0
