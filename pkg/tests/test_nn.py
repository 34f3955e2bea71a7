import numpy as np
import pytest

from branchtune import nn
from branchtune import tensor as T
from branchtune.gradcheck import check_gradients
from branchtune.tensor import Tensor


def toy_model(seed=0, **overrides):
    spec = nn.BackboneSpec(**overrides)
    return nn.build_backbone(spec, seed=seed)


def spec_parameter_count(spec: nn.BackboneSpec) -> int:
    """Closed-form count of trainable-eligible scalars."""
    total = spec.stage_widths[0] * spec.in_channels * 9  # stem conv
    total += 2 * spec.stage_widths[0]                    # stem bn
    in_ch = spec.stage_widths[0]
    for si, (w, depth) in enumerate(zip(spec.stage_widths,
                                        spec.blocks_per_stage), start=1):
        for bi in range(1, depth + 1):
            stride = 2 if (si > 1 and bi == 1) else 1
            total += w * in_ch * 9 + 2 * w      # conv1 + bn1
            total += w * w * 9 + 2 * w          # conv2 + bn2
            if stride != 1 or in_ch != w:
                total += w * in_ch + 2 * w      # 1x1 skip conv + bn
            in_ch = w
    if spec.embed_dim != in_ch:
        total += spec.embed_dim * in_ch
    hidden = spec.resolved_proj_hidden()
    out = spec.resolved_proj_out()
    total += hidden * spec.embed_dim + hidden
    total += out * hidden + out
    return total


class TestBuild:
    def test_same_seed_bitwise_identical(self):
        a = toy_model(seed=11)
        b = toy_model(seed=11)
        for (na, pa), (nb, pb) in zip(a.named_state(), b.named_state()):
            assert na == nb
            assert np.array_equal(pa.data, pb.data)

    def test_different_seed_differs(self):
        a = toy_model(seed=1)
        b = toy_model(seed=2)
        assert not np.array_equal(a.stem_conv.weight.data,
                                  b.stem_conv.weight.data)

    def test_parameter_count_closed_form(self):
        for spec in [nn.BackboneSpec(),
                     nn.BackboneSpec(stage_widths=(4, 8, 8),
                                     blocks_per_stage=(1, 2, 1),
                                     embed_dim=16),
                     nn.BackboneSpec(stage_widths=(8,), blocks_per_stage=(2,),
                                     embed_dim=8)]:
            model = nn.build_backbone(spec, seed=0)
            assert model.parameter_count() == spec_parameter_count(spec)

    def test_invalid_specs_rejected(self):
        with pytest.raises(nn.BuildError):
            nn.BackboneSpec(stage_widths=(), blocks_per_stage=()).validate()
        with pytest.raises(nn.BuildError):
            nn.BackboneSpec(stage_widths=(8, 16),
                            blocks_per_stage=(1,)).validate()
        with pytest.raises(nn.BuildError):
            nn.BackboneSpec(embed_dim=0).validate()
        with pytest.raises(nn.BuildError):
            nn.build_backbone(nn.BackboneSpec(input_size=2), seed=0)

    def test_bn_starts_at_identity_stats(self):
        model = toy_model()
        for bn in model.bn_layers():
            assert np.all(bn.gamma.data == 1)
            assert np.all(bn.beta.data == 0)
            assert np.all(bn.running_mean.data == 0)
            assert np.all(bn.running_var.data == 1)

    def test_embed_conv_only_when_width_differs(self):
        assert toy_model().embed_conv is not None
        flat = toy_model(stage_widths=(8,), blocks_per_stage=(1,), embed_dim=8)
        assert flat.embed_conv is None

    def test_downsample_only_on_transitions(self):
        model = toy_model(stage_widths=(8, 16), blocks_per_stage=(2, 2))
        has_down = [b.down_conv is not None for b in model.blocks]
        assert has_down == [False, False, True, False]


class TestForward:
    def test_output_shapes(self):
        model = toy_model()
        x = T.randn([2, 3, 32, 32], seed=0)
        z, proj, taps = model.forward(x, train=False, capture=False)
        assert z.shape == (2, 32)
        assert proj.shape == (2, 32)
        assert taps is None

    def test_input_shape_validated(self):
        model = toy_model()
        with pytest.raises(T.ShapeError):
            model.forward(T.randn([2, 1, 32, 32], seed=0))
        with pytest.raises(T.ShapeError):
            model.forward(T.randn([2, 3, 16, 16], seed=0))

    def test_tap_names_and_count(self):
        model = toy_model()
        x = T.randn([2, 3, 32, 32], seed=0)
        _, _, taps = model.forward(x, train=False, capture=True)
        names = model.tap_names()
        assert list(taps.keys()) == names
        # one tap per conv, per bn, per residual block output
        n_convs = len(model.conv_layers())
        n_bns = len(model.bn_layers())
        assert len(names) == n_convs + n_bns + len(model.blocks)
        assert len(names) == 15  # 2 stem + 5 block1 + 7 block2 + 1 embed

    def test_forward_deterministic(self):
        model = toy_model()
        x = T.randn([4, 3, 32, 32], seed=5)
        a = model.forward(x, train=False)[0].data
        b = model.forward(x, train=False)[0].data
        assert np.array_equal(a, b)


class TestBatchNorm:
    def test_identity_on_fresh_layer_eval(self):
        bn = nn.BnLayer("bn", 4)
        x = T.randn([8, 4, 5, 5], seed=0)
        y = bn.forward(x, train=False)
        assert np.allclose(y.data, x.data, atol=1e-4)

    def test_train_mode_normalizes_batch(self):
        bn = nn.BnLayer("bn", 3)
        x = T.randn([16, 3, 6, 6], seed=1, stddev=3.0)
        y = bn.forward(x, train=True)
        assert np.allclose(y.data.mean(axis=(0, 2, 3)), 0, atol=1e-5)
        assert np.allclose(y.data.std(axis=(0, 2, 3)), 1, atol=1e-2)

    def test_train_updates_running_stats_eval_does_not(self):
        bn = nn.BnLayer("bn", 3)
        x = T.randn([16, 3, 6, 6], seed=2, stddev=2.0)
        bn.forward(x, train=False)
        assert np.all(bn.running_mean.data == 0)
        bn.forward(x, train=True)
        assert not np.all(bn.running_mean.data == 0)
        assert not np.all(bn.running_var.data == 1)

    def test_frozen_ignores_batch_statistics(self):
        bn = nn.BnLayer("bn", 3)
        x = T.randn([16, 3, 6, 6], seed=3, stddev=2.0)
        bn.forward(x, train=True)  # move running stats off init
        bn.frozen = True
        rm = bn.running_mean.data.copy()
        y_train = bn.forward(x, train=True)
        y_eval = bn.forward(x, train=False)
        assert np.array_equal(y_train.data, y_eval.data)
        assert np.array_equal(bn.running_mean.data, rm)
        assert not bn.gamma.requires_grad
        assert not bn.beta.requires_grad

    def test_frozen_batch_composition_invariance(self):
        bn = nn.BnLayer("bn", 4)
        bn.running_mean.data[...] = [0.1, -0.2, 0.3, 0.0]
        bn.running_var.data[...] = [1.5, 0.7, 1.0, 2.0]
        bn.frozen = True
        x = T.randn([8, 4, 5, 5], seed=4)
        full = bn.forward(x, train=True).data
        half1 = bn.forward(T.Tensor(x.data[:4]), train=True).data
        half2 = bn.forward(T.Tensor(x.data[4:]), train=True).data
        assert np.allclose(np.concatenate([half1, half2]), full, atol=1e-6)

    def test_train_mode_gradients(self):
        bn = nn.BnLayer("bn", 2, dtype=np.float64)
        x = T.randn([4, 2, 3, 3], seed=5, dtype=np.float64, requires_grad=True)
        w = T.randn([4, 2, 3, 3], seed=6, dtype=np.float64)
        errs = check_gradients(
            lambda: (bn.forward(x, train=True) * w).sum(),
            [x, bn.gamma, bn.beta])
        assert max(errs.values()) < 1e-4


class TestStrategies:
    def _grad_names(self, model):
        x = T.randn([4, 3, 32, 32], seed=0)
        _, proj, _ = model.forward(x, train=True)
        loss = (proj * proj).mean()
        if not loss.requires_grad:  # nothing trainable anywhere
            return set()
        loss.backward()
        names = {n for n, p in model.named_parameters() if p.grad is not None}
        T.zero_grads([p for _, p in model.named_parameters()])
        return names

    def test_fixed_all_has_zero_trainable(self):
        model = toy_model()
        nn.set_strategy(model, nn.Strategy.FIXED_ALL)
        assert model.trainable_parameters() == []
        assert self._grad_names(model) == set()

    def test_fine_tune_all_trains_everything(self):
        model = toy_model()
        nn.set_strategy(model, nn.Strategy.FINE_TUNE_ALL)
        expected = {n for n, _ in model.named_parameters()}
        assert self._grad_names(model) == expected

    def test_tune_conv_fix_bn(self):
        model = toy_model()
        nn.set_strategy(model, nn.Strategy.TUNE_CONV_FIX_BN)
        for conv in model.conv_layers():
            assert conv.trainable
        for bn in model.bn_layers():
            assert bn.frozen
        got = self._grad_names(model)
        assert all(".gamma" not in n and ".beta" not in n for n in got)
        assert any(n.endswith("conv1.weight") for n in got)

    def test_fix_conv_tune_bn(self):
        model = toy_model()
        nn.set_strategy(model, nn.Strategy.FIX_CONV_TUNE_BN)
        got = self._grad_names(model)
        assert all(not n.endswith("conv.weight") and ".conv1" not in n
                   and ".conv2" not in n for n in got)
        assert any(".gamma" in n for n in got)
        assert any(n.startswith("projector.") for n in got)

    def test_gradients_exactly_on_designated_set(self):
        # the designated trainable set and the set receiving gradients agree
        for strat in nn.Strategy:
            model = toy_model()
            nn.set_strategy(model, strat)
            designated = {n for n, p in model.named_parameters()
                          if p.requires_grad}
            assert self._grad_names(model) == designated, strat


class TestSgd:
    def test_vanilla_step_arithmetic(self):
        p = Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
        opt = nn.SGD([p], lr=0.1, momentum=0.9)
        p.grad = np.array([1.0], dtype=np.float32)
        opt.step()
        assert p.data[0] == pytest.approx(0.9)
        p.grad = np.array([1.0], dtype=np.float32)
        opt.step()  # v = 0.9*1 + 1 = 1.9 ; p = 0.9 - 0.19
        assert p.data[0] == pytest.approx(0.71)

    def test_weight_decay_term(self):
        p = Tensor(np.array([2.0], dtype=np.float32), requires_grad=True)
        opt = nn.SGD([p], lr=0.5, momentum=0.0, weight_decay=0.1)
        p.grad = np.array([0.0], dtype=np.float32)
        opt.step()  # g = 0 + 0.1*2 ; p = 2 - 0.5*0.2
        assert p.data[0] == pytest.approx(1.9)

    def test_zero_lr_keeps_params(self):
        p = Tensor(np.array([1.5], dtype=np.float32), requires_grad=True)
        opt = nn.SGD([p], lr=0.0, momentum=0.9)
        p.grad = np.array([3.0], dtype=np.float32)
        opt.step()
        assert p.data[0] == 1.5

    def test_frozen_param_untouched_even_with_grad(self):
        p = Tensor(np.array([1.0, 2.0], dtype=np.float32), requires_grad=False)
        before = p.data.copy()
        opt = nn.SGD([p], lr=0.1, momentum=0.9)
        p.grad = np.ones(2, dtype=np.float32)
        opt.step()
        assert np.array_equal(p.data, before)

    def test_negative_hyperparams_rejected(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        with pytest.raises(ValueError):
            nn.SGD([p], lr=-0.1)


class TestResidualIdentity:
    def test_zeroed_final_conv_acts_as_identity_plus_skip(self):
        model = toy_model(stage_widths=(8,), blocks_per_stage=(1,),
                          embed_dim=8)
        block = model.blocks[0]
        block.conv2.weight.data[...] = 0.0
        x = T.randn([2, 8, 16, 16], seed=0).relu()
        out = block.forward(x, train=False, taps=None)
        # main path collapses to bn2(0) = 0, so out = relu(skip) = relu(x)
        assert np.allclose(out.data, np.maximum(x.data, 0), atol=1e-7)


class TestClone:
    def test_clone_is_independent_and_equal(self):
        model = toy_model()
        dup = model.clone()
        for (_, a), (_, b) in zip(model.named_state(), dup.named_state()):
            assert np.array_equal(a.data, b.data)
            assert a is not b
        dup.stem_conv.weight.data += 1.0
        assert not np.array_equal(model.stem_conv.weight.data,
                                  dup.stem_conv.weight.data)
