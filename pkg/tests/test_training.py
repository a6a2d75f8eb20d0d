import hashlib
import json
import math
import os

import numpy as np
import pytest
import torch

from patternmark import data, distortions as dist, losses, models, training
from patternmark.errors import MissingArtifactError, NotLocatedError
from tests.conftest import TOY_GEOMETRY, TOY_MODELS

torch.set_num_threads(2)


def checksum(module):
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(p.numpy().tobytes())
    return h.hexdigest()


def read_log(out_dir):
    path = os.path.join(out_dir, "train_log.jsonl")
    with open(path) as fh:
        return [json.loads(line) for line in fh]


def toy_cfg(stage, tmp_path, dataset=None, **kw):
    base = dict(out_dir=str(tmp_path / "run"), geometry=dict(TOY_GEOMETRY), seed=5)
    if stage == 1:
        base.update(epochs=1, batch_size=4, steps_per_epoch=3)
    else:
        base.update(epochs=1, batch_size=2, dataset_root=str(dataset))
    base.update(kw)
    return training.StageConfig.defaults(stage, **base)


# --- StageConfig ------------------------------------------------------------------

def test_stage_defaults_match_training_recipe():
    s1, s2, s3 = (training.StageConfig.defaults(i) for i in (1, 2, 3))
    assert (s1.epochs, s2.epochs, s3.epochs) == (20, 14, 20)
    assert (s1.batch_size, s2.batch_size, s3.batch_size) == (32, 10, 10)
    assert (s1.lr, s2.lr, s3.lr) == (1e-3, 1e-3, 1e-4)
    assert s1.weight_decay == s2.weight_decay == 1e-2
    assert s2.lambdas[:3] == (1.0, 1.0, 1.0)
    assert s3.lambdas == (10.0, 1.0, 1.0, 1.0)
    assert s2.accumulate_every == s3.accumulate_every == 2
    assert s2.batch_size * s2.accumulate_every == 20  # effective batch


# --- crop_by_mask -----------------------------------------------------------------

def test_crop_all_ones_mask_resizes_whole_image(gen):
    img = torch.rand(3, 40, 40, generator=gen)
    out = training.crop_by_mask(img, torch.ones(1, 20, 20), out_size=16)
    ref = torch.nn.functional.interpolate(img.unsqueeze(0), size=(16, 16),
                                          mode="bilinear", align_corners=False)[0]
    assert torch.allclose(out, ref, atol=1e-6)


def test_crop_centered_half_mask(gen):
    img = torch.rand(3, 64, 64, generator=gen)
    mask = torch.zeros(1, 32, 32)
    mask[0, 8:24, 8:24] = 1.0
    out = training.crop_by_mask(img, mask, out_size=32)
    box = dist.mask_to_crop_box(mask, (64, 64))
    assert box == (16, 16, 48, 48)  # exact central half region
    ref = torch.nn.functional.interpolate(img[None, :, 16:48, 16:48], size=(32, 32),
                                          mode="bilinear", align_corners=False)[0]
    assert torch.allclose(out, ref, atol=1e-6)


def test_crop_empty_mask_raises():
    with pytest.raises(NotLocatedError):
        training.crop_by_mask(torch.rand(3, 32, 32), torch.zeros(1, 16, 16))


# --- stage gating --------------------------------------------------------------------

def test_stage2_requires_stage1(tmp_path, toy_handles, tiny_dataset):
    cfg = toy_cfg(2, tmp_path, tiny_dataset.root)
    with pytest.raises(MissingArtifactError):
        training.run_stage2(cfg, toy_handles, str(tmp_path / "missing"))


def test_stage3_requires_stage2(tmp_path, toy_handles, tiny_dataset):
    ck1 = training.run_stage1(toy_cfg(1, tmp_path), toy_handles)
    cfg = toy_cfg(3, tmp_path, tiny_dataset.root)
    with pytest.raises(MissingArtifactError, match="stage-2"):
        training.run_stage3(cfg, toy_handles, ck1)


# --- stage 1 ---------------------------------------------------------------------------

def test_stage1_initial_loss_near_ln2(tmp_path, toy_handles):
    training.run_stage1(toy_cfg(1, tmp_path), toy_handles)
    first = read_log(str(tmp_path / "run"))[0]
    assert first["total"] == pytest.approx(math.log(2), abs=0.05)


def test_stage1_epoch_count_honored(tmp_path, toy_handles):
    training.run_stage1(toy_cfg(1, tmp_path, epochs=2, steps_per_epoch=4), toy_handles)
    steps = [r for r in read_log(str(tmp_path / "run")) if "total" in r]
    assert len(steps) == 8
    assert {r["epoch"] for r in steps} == {0, 1}


def test_stage1_deterministic(tmp_path):
    curves = []
    for run in ("a", "b"):
        torch.manual_seed(0)
        handles = models.build_all(TOY_MODELS)
        out = tmp_path / run
        cfg = toy_cfg(1, out, steps_per_epoch=4)
        training.run_stage1(cfg, handles)
        curves.append([r["total"] for r in read_log(str(out / "run")) if "total" in r])
    assert curves[0] == curves[1]


def test_stage1_resume_continues_step_counter(tmp_path, toy_handles):
    cfg = toy_cfg(1, tmp_path, epochs=1, steps_per_epoch=4)
    ck = training.run_stage1(cfg, toy_handles)
    cfg2 = toy_cfg(1, tmp_path, epochs=2, steps_per_epoch=4, resume_from=ck)
    ck2 = training.run_stage1(cfg2, toy_handles)
    state = torch.load(os.path.join(ck2, "train_state.pt"), weights_only=True)
    assert state["step"] == 8
    assert state["epoch"] == 1


# --- stages 2 and 3 -----------------------------------------------------------------------

@pytest.fixture
def staged(tmp_path, toy_handles, tiny_dataset):
    ck1 = training.run_stage1(toy_cfg(1, tmp_path), toy_handles)
    return tmp_path, toy_handles, tiny_dataset, ck1


def test_stage2_freezes_message_ends(staged):
    tmp_path, handles, dataset, ck1 = staged
    before_proc = checksum(handles["processor"].module)
    before_extr = checksum(handles["extractor"].module)
    before_enc = checksum(handles["encoder"].module)
    training.run_stage2(toy_cfg(2, tmp_path, dataset.root), handles, ck1)
    assert checksum(handles["processor"].module) == before_proc
    assert checksum(handles["extractor"].module) == before_extr
    assert checksum(handles["encoder"].module) != before_enc
    assert handles["processor"].frozen and handles["extractor"].frozen


def test_stage3_updates_all_five(staged):
    tmp_path, handles, dataset, ck1 = staged
    ck2 = training.run_stage2(toy_cfg(2, tmp_path, dataset.root), handles, ck1)
    before = {role: checksum(h.module) for role, h in handles.items()}
    training.run_stage3(toy_cfg(3, tmp_path, dataset.root), handles, ck2)
    changed = {role for role, h in handles.items() if checksum(h.module) != before[role]}
    assert changed == set(handles)


def test_stage2_logs_terms_and_psnr(staged):
    tmp_path, handles, dataset, ck1 = staged
    training.run_stage2(toy_cfg(2, tmp_path, dataset.root), handles, ck1)
    records = [r for r in read_log(str(tmp_path / "run")) if r.get("stage") == 2]
    assert records
    for r in records:
        assert set(r["terms"]) == {"vis", "loc", "pattern"}
        assert r["total"] == pytest.approx(sum(r["terms"].values()), abs=1e-5)
        assert "psnr" in r


def test_stage3_breakdown_has_msg_term(staged):
    tmp_path, handles, dataset, ck1 = staged
    ck2 = training.run_stage2(toy_cfg(2, tmp_path, dataset.root), handles, ck1)
    training.run_stage3(toy_cfg(3, tmp_path, dataset.root), handles, ck2)
    records = [r for r in read_log(str(tmp_path / "run")) if r.get("stage") == 3]
    assert records
    assert set(records[0]["terms"]) == {"vis", "loc", "pattern", "msg"}
    assert records[0]["lambdas"] == [10.0, 1.0, 1.0, 1.0]


# --- full-graph gradient check -----------------------------------------------------------

def _stage3_scalar_loss(handles, covers, backgrounds, msgs, geo, seed):
    gen = torch.Generator().manual_seed(seed)
    pipeline = dist.build_pipeline("II", {"simulated_jpeg": {"probability": 0.0}})
    fwd = training.stage_forward(handles, covers, backgrounds, msgs,
                                 dist.spatial_specs(pipeline), dist.pixel_specs(pipeline),
                                 gen, geo, with_extractor=True)
    total, _ = losses.loss_stage3(covers, fwd["encoded"], fwd["gt_mask"],
                                  fwd["pred_mask"], fwd["gt_pattern"], fwd["decoded"],
                                  msgs, fwd["scores"], (1.0, 1.0, 1.0, 1.0))
    return total


def test_stage3_graph_backprop_matches_finite_differences():
    geo = {"message_bits": 4, "pattern_size": 8, "image_size": 8,
           "canvas_size": 16, "locator_size": 32}
    torch.manual_seed(2)
    handles = models.build_all({
        "processor": {"message_bits": 4, "pattern_size": 8},
        "encoder": {"base": 4, "levels": 1},
        "locator": {"variant": "light", "size": 32},
        "decoder": {"base": 4, "levels": 1},
        "extractor": {"message_bits": 4, "depths": [1], "dims": [8]},
    })
    for h in handles.values():
        h.module.double().train()
    g = torch.Generator().manual_seed(0)
    covers = torch.rand(2, 3, 8, 8, generator=g, dtype=torch.float64)
    backgrounds = torch.rand(2, 3, 16, 16, generator=g, dtype=torch.float64)
    msgs = torch.randint(0, 2, (2, 4), generator=g).double()

    loss = _stage3_scalar_loss(handles, covers, backgrounds, msgs, geo, seed=3)
    params = [p for h in handles.values() for p in h.parameters() if p.requires_grad]
    grads = torch.autograd.grad(loss, params, allow_unused=True)

    rng = np.random.default_rng(0)
    checked = 0
    attempts = 0
    while checked < 5 and attempts < 60:
        attempts += 1
        pi = int(rng.integers(len(params)))
        if grads[pi] is None:
            continue
        flat = params[pi].detach().view(-1)
        ei = int(rng.integers(flat.numel()))
        auto = float(grads[pi].view(-1)[ei])
        if abs(auto) < 1e-5:
            continue
        h = 1e-5
        with torch.no_grad():
            params[pi].view(-1)[ei] += h
        up = float(_stage3_scalar_loss(handles, covers, backgrounds, msgs, geo, seed=3))
        with torch.no_grad():
            params[pi].view(-1)[ei] -= 2 * h
        down = float(_stage3_scalar_loss(handles, covers, backgrounds, msgs, geo, seed=3))
        with torch.no_grad():
            params[pi].view(-1)[ei] += h
        fd = (up - down) / (2 * h)
        assert abs(fd - auto) / max(abs(fd), 1e-8) < 1e-2, (pi, ei, fd, auto)
        checked += 1
    assert checked == 5


def test_stage3_every_unfrozen_tensor_gets_gradient(tmp_path, toy_handles, tiny_dataset):
    ck1 = training.run_stage1(toy_cfg(1, tmp_path), toy_handles)
    ck2 = training.run_stage2(toy_cfg(2, tmp_path, tiny_dataset.root), toy_handles, ck1)
    handles = toy_handles
    for h in handles.values():
        h.unfreeze()
        h.module.train()
    g = torch.Generator().manual_seed(1)
    covers = tiny_dataset.load_batch([0, 1], 32)
    backgrounds = tiny_dataset.load_batch([2, 3], 48)
    msgs = torch.randint(0, 2, (2, 8), generator=g).float()
    pipeline = dist.build_pipeline("II")
    fwd = training.stage_forward(handles, covers, backgrounds, msgs,
                                 dist.spatial_specs(pipeline), dist.pixel_specs(pipeline),
                                 g, TOY_GEOMETRY, with_extractor=True)
    total, _ = losses.loss_stage3(covers, fwd["encoded"], fwd["gt_mask"],
                                  fwd["pred_mask"], fwd["gt_pattern"], fwd["decoded"],
                                  msgs, fwd["scores"], (1, 1, 1, 1))
    total.backward()
    for role, h in handles.items():
        for name, p in h.module.named_parameters():
            assert p.grad is not None, (role, name)
            assert torch.isfinite(p.grad).all(), (role, name)
        grads = [float(p.grad.abs().sum()) for p in h.module.parameters()]
        assert sum(grads) > 0, role
