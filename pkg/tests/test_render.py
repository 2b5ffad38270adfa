"""Per-instance detail rendering: logit masks, softmax merge, the full hook.

Key invariants: merge weights form a partition of unity; uncovered positions
give the background weight ~1; at high contrast (alpha = 50) the owning
instance saturates to weight 1; with zero instances the merge *is* the
caption render. The hook is checked against a hand-built oracle that runs
the same site attends and mixes them with loops.
"""

import numpy as np
import pytest
import torch

from depict.layout import BBox, InstanceSpec, Layout
from depict.render import (
    DEFAULT_ALPHA,
    DEFAULT_BETA,
    MergeConfig,
    RenderSet,
    build_logit_masks,
    downsample_mask,
    make_renderer_hook,
    merge,
    merge_weights,
    render_instance,
)
from depict.segment import InstanceMask, bbox_mask
from depict.shapes import rasterize_bbox
from depict.unet import ArchConfig, build_model


def tiny_cfg(in_channels=3):
    return ArchConfig(
        in_channels=in_channels, channels=(8, 12, 16, 20), norm_groups=4,
        attn_heads=2, attn_head_dim=4, time_dim=16,
    )


# --- MergeConfig ----------------------------------------------------------------


def test_merge_config_defaults():
    c = MergeConfig()
    assert c.alpha == DEFAULT_ALPHA == 10.0
    assert c.beta == DEFAULT_BETA == 0.0


@pytest.mark.parametrize("alpha,beta", [(0.0, 0.0), (1.0, 2.0), (-1.0, 0.0)])
def test_merge_config_requires_contrast(alpha, beta):
    with pytest.raises(ValueError, match="alpha"):
        MergeConfig(alpha=alpha, beta=beta)


def test_merge_config_requires_deep_sentinel():
    with pytest.raises(ValueError, match="neg_inf"):
        MergeConfig(neg_inf=-1000.0)


# --- mask downsampling ------------------------------------------------------------


def test_downsample_any_semantics():
    m = np.zeros((64, 64), dtype=bool)
    m[0, 0] = True  # single pixel -> its 8x8 cell at resolution 8
    out = downsample_mask(m, 8)
    want = np.zeros((8, 8), dtype=bool)
    want[0, 0] = True
    assert np.array_equal(out, want)


def test_downsample_single_pixel_every_cell():
    rng = np.random.default_rng(0)
    m = np.zeros((64, 64), dtype=bool)
    # one arbitrary pixel in each 4x4 block of cells at resolution 16
    for ci in range(16):
        for cj in range(16):
            m[ci * 4 + rng.integers(4), cj * 4 + rng.integers(4)] = True
    assert downsample_mask(m, 16).all()


def test_downsample_identity_at_full_resolution():
    rng = np.random.default_rng(1)
    m = rng.random((64, 64)) > 0.5
    assert np.array_equal(downsample_mask(m, 64), m)


def test_downsample_rejects_indivisible():
    with pytest.raises(ValueError, match="divide"):
        downsample_mask(np.zeros((64, 64), dtype=bool), 7)


# --- logit masks -------------------------------------------------------------------


def _mask_for(box, hw=(64, 64)):
    return bbox_mask(box, hw)


def test_logit_rows_alpha_inside_sentinel_outside():
    cfg = MergeConfig(alpha=5.0, beta=0.0)
    box = BBox(0.0, 0.0, 0.25, 0.25)
    inst, cap = build_logit_masks([_mask_for(box)], 8, cfg)
    assert inst.shape == (1, 64) and cap.shape == (64,)
    cells = downsample_mask(rasterize_bbox(box, (64, 64)), 8).reshape(-1)
    assert (inst[0, cells] == 5.0).all()
    assert (inst[0, ~cells] == cfg.neg_inf).all()
    assert (cap == 0.0).all()


def test_logit_masks_empty_instance_list():
    inst, cap = build_logit_masks([], 8, MergeConfig())
    assert inst.shape == (0, 64) and cap.shape == (64,)


# --- merge -------------------------------------------------------------------------


def test_weights_partition_of_unity():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        n = int(rng.integers(0, 5))
        n_q = int(rng.integers(1, 20))
        inst = torch.as_tensor(
            rng.choice([10.0, -1e9], size=(n, n_q), p=[0.3, 0.7])
        )
        cap = torch.zeros(n_q, dtype=torch.float64)
        w = merge_weights(inst, cap)
        assert w.shape == (n + 1, n_q)
        np.testing.assert_allclose(w.sum(dim=0).numpy(), 1.0, atol=1e-6)


def test_background_owns_uncovered_positions():
    # no mask covers the position -> background weight must be ~1
    inst = torch.full((3, 10), -1e9, dtype=torch.float64)
    cap = torch.zeros(10, dtype=torch.float64)
    w = merge_weights(inst, cap)
    assert (w[-1] > 1 - 1e-6).all()
    assert (w[:-1] < 1e-6).all()


def test_single_owner_weight_formula():
    # one instance covering, n-1 sentinels: w = 1/(1 + e^(beta-alpha))
    cfg = MergeConfig(alpha=10.0, beta=0.0)
    inst = torch.tensor([[10.0], [-1e9]], dtype=torch.float64)
    cap = torch.zeros(1, dtype=torch.float64)
    w = merge_weights(inst, cap)
    want = 1.0 / (1.0 + np.exp(-10.0))
    assert float(w[0, 0]) == pytest.approx(want, abs=1e-12)


def test_alpha_50_saturates():
    inst = torch.tensor([[50.0]], dtype=torch.float64)
    cap = torch.zeros(1, dtype=torch.float64)
    w = merge_weights(inst, cap)
    assert float(w[0, 0]) > 1 - 1e-4
    assert float(w[1, 0]) < 1e-4


def test_two_instances_overlap_hand_computation():
    # both cover one position at alpha: they split (1 - bg) evenly;
    # exact softmax over (a, a, 0)
    a = 10.0
    inst = torch.tensor([[a], [a]], dtype=torch.float64)
    cap = torch.zeros(1, dtype=torch.float64)
    w = merge_weights(inst, cap).numpy().ravel()
    z = 2 * np.exp(a) + 1.0
    np.testing.assert_allclose(w, [np.exp(a) / z, np.exp(a) / z, 1.0 / z], atol=1e-12)


def _rand_renderset(n, n_q=6, d_v=4, seed=0, alpha=10.0):
    rng = np.random.default_rng(seed)
    renders = tuple(
        torch.as_tensor(rng.standard_normal((1, n_q, d_v))) for _ in range(n)
    )
    caption = torch.as_tensor(rng.standard_normal((1, n_q, d_v)))
    inst = torch.as_tensor(rng.choice([alpha, -1e9], size=(n, n_q)))
    cap = torch.zeros(n_q, dtype=torch.float64)
    return RenderSet(
        instance_renders=renders, caption_render=caption,
        instance_logits=inst, caption_logits=cap,
    )


def test_merge_zero_instances_is_caption_render():
    rs = _rand_renderset(0)
    out = merge(rs)
    assert torch.equal(out, rs.caption_render)


def test_merge_matches_loop_oracle():
    rs = _rand_renderset(3, seed=5)
    got = merge(rs).numpy()

    w = merge_weights(rs.instance_logits, rs.caption_logits).numpy()
    want = np.zeros_like(rs.caption_render.numpy())
    for q in range(6):
        acc = w[-1, q] * rs.caption_render[0, q].numpy()
        for i in range(3):
            acc = acc + w[i, q] * rs.instance_renders[i][0, q].numpy()
        want[0, q] = acc
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_merge_weights_cast_to_render_dtype():
    rs = _rand_renderset(1)
    rs32 = RenderSet(
        instance_renders=tuple(r.float() for r in rs.instance_renders),
        caption_render=rs.caption_render.float(),
        instance_logits=rs.instance_logits,
        caption_logits=rs.caption_logits,
    )
    assert merge(rs32).dtype == torch.float32


def test_renderset_validation():
    rs = _rand_renderset(2)
    with pytest.raises(ValueError, match="logit rows"):
        RenderSet(rs.instance_renders[:1], rs.caption_render,
                  rs.instance_logits, rs.caption_logits)
    with pytest.raises(ValueError, match="share"):
        RenderSet((rs.instance_renders[0][:, :3],) + rs.instance_renders[1:],
                  rs.caption_render, rs.instance_logits, rs.caption_logits)
    with pytest.raises(ValueError, match="query count"):
        RenderSet(rs.instance_renders, rs.caption_render,
                  rs.instance_logits, rs.caption_logits[:4])


# --- the hook through a real UNet ----------------------------------------------------


def _layout2():
    return Layout(
        instances=(
            InstanceSpec(bbox=BBox(0.05, 0.05, 0.45, 0.45), phrase=("red", "square"),
                         depth_rank=0),
            InstanceSpec(bbox=BBox(0.5, 0.5, 0.95, 0.95), phrase=("blue", "circle"),
                         depth_rank=1),
        ),
        caption=("a", "red", "square", "on", "a", "blue", "circle"),
    )


def _live_model(seed=0):
    m = build_model(tiny_cfg(), seed=seed)
    torch.manual_seed(seed + 50)
    torch.nn.init.normal_(m.out_conv.weight, std=0.2)
    return m


def _caption_tensor(layout, b=1):
    from depict.layout import encode_tokens

    return torch.as_tensor(encode_tokens(layout.caption), dtype=torch.long).expand(b, -1).clone()


def test_hook_no_instances_equals_unhooked():
    # Layout itself requires >= 1 instance; the hook must still be total for
    # the degenerate case, where merging reduces to the caption render alone.
    from types import SimpleNamespace

    model = _live_model()
    lay = SimpleNamespace(instances=(), caption=("a", "scene"))
    hook = make_renderer_hook(lay, [], MergeConfig())
    z = torch.randn(1, 3, 64, 64)
    ids = _caption_tensor(lay)
    a = model(z, np.array([8]), ids)
    b = model(z, np.array([8]), ids, hook=hook)
    assert torch.allclose(a, b, atol=1e-6)


def test_hook_changes_output_with_instances():
    model = _live_model()
    lay = _layout2()
    masks = [bbox_mask(s.bbox, (64, 64)) for s in lay.instances]
    hook = make_renderer_hook(lay, masks, MergeConfig())
    z = torch.randn(1, 3, 64, 64)
    ids = _caption_tensor(lay)
    a = model(z, np.array([8]), ids)
    b = model(z, np.array([8]), ids, hook=hook)
    assert not torch.equal(a, b)


def test_single_instance_full_cover_saturation():
    # one instance whose mask covers everything, alpha = 50: the merged
    # output must be that instance's render alone (weight saturates),
    # so hooking == attending to the instance phrase as the caption
    model = _live_model()
    box = BBox(0.0, 0.0, 1.0, 1.0)
    lay = Layout(
        instances=(InstanceSpec(bbox=box, phrase=("red", "square"), depth_rank=0),),
        caption=("a", "blue", "circle"),  # deliberately different caption
    )
    masks = [bbox_mask(box, (64, 64))]
    hook = make_renderer_hook(lay, masks, MergeConfig(alpha=50.0))
    z = torch.randn(1, 3, 64, 64)

    from depict.layout import encode_tokens

    phrase_as_caption = torch.as_tensor(encode_tokens(("red", "square")),
                                        dtype=torch.long).unsqueeze(0)
    a = model(z, np.array([8]), phrase_as_caption)
    b = model(z, np.array([8]), _caption_tensor(lay), hook=hook)
    assert torch.allclose(a, b, atol=1e-4)


def test_hook_oracle_at_one_site():
    """Drive one real site and rebuild the hook's output with plain loops."""
    model = _live_model()
    lay = _layout2()
    masks = [bbox_mask(s.bbox, (64, 64)) for s in lay.instances]
    cfg = MergeConfig()
    hook = make_renderer_hook(lay, masks, cfg)

    captured = {}

    def spy(site):
        out = hook(site)
        if site.name == "enc16":
            captured["got"] = out
            captured["site"] = site
        return out

    z = torch.randn(1, 3, 64, 64)
    model(z, np.array([8]), _caption_tensor(lay), hook=spy)

    site = captured["site"]
    from depict.layout import encode_tokens

    # oracle: attend per phrase, merge with softmax weights position by position
    renders = [
        site.attend(torch.as_tensor(encode_tokens(s.phrase)).unsqueeze(0))
        for s in lay.instances
    ]
    r_c = site.attend(torch.as_tensor(encode_tokens(lay.caption)).unsqueeze(0))
    want = torch.empty_like(r_c)
    for q in range(16 * 16):
        logits = []
        for s in lay.instances:
            cells = downsample_mask(rasterize_bbox(s.bbox, (64, 64)), 16).reshape(-1)
            logits.append(cfg.alpha if cells[q] else cfg.neg_inf)
        logits.append(cfg.beta)
        ww = np.exp(np.array(logits) - max(logits))
        ww = ww / ww.sum()
        acc = ww[-1] * r_c[0, q]
        for i, r in enumerate(renders):
            acc = acc + ww[i] * r[0, q]
        want[0, q] = acc
    assert torch.allclose(captured["got"], want, atol=1e-6)


def test_hook_is_pure():
    model = _live_model()
    lay = _layout2()
    masks = [bbox_mask(s.bbox, (64, 64)) for s in lay.instances]
    hook = make_renderer_hook(lay, masks, MergeConfig())
    z = torch.randn(1, 3, 64, 64)
    ids = _caption_tensor(lay)
    a = model(z, np.array([8]), ids, hook=hook)
    b = model(z, np.array([8]), ids, hook=hook)
    assert torch.equal(a, b)


def test_hook_count_mismatch():
    lay = _layout2()
    with pytest.raises(ValueError, match="instances but"):
        make_renderer_hook(lay, [bbox_mask(lay.instances[0].bbox, (64, 64))], MergeConfig())


def test_render_instance_rejects_empty_phrase():
    site_calls = []

    class FakeSite:
        name, resolution = "enc16", 16

        @staticmethod
        def attend(ids):
            site_calls.append(ids)
            return torch.zeros(1, 4, 8)

    with pytest.raises(ValueError, match="empty phrase"):
        render_instance(FakeSite, torch.zeros(4, dtype=torch.long))
    assert not site_calls
