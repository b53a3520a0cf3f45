import math

import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from ttgen.backbone import ConvBackbone
from ttgen.objectives import (
    augmentation_consistency_loss,
    entropy_loss,
    layer_gradients,
    pseudo_label_loss,
    rms_normalize,
    unsupervised_loss,
)


class TestEntropyLoss:
    def test_uniform_closed_form(self):
        # entropy of the uniform distribution over K classes is log K
        logits = torch.zeros(4, 7)
        assert math.isclose(float(entropy_loss(logits)), math.log(7), rel_tol=1e-6)

    def test_one_hot_limit(self):
        logits = torch.zeros(3, 5)
        logits[:, 2] = 1e6
        assert float(entropy_loss(logits)) <= 1e-6

    def test_shift_invariance(self):
        logits = torch.randn(8, 5)
        shifted = logits + 3.7
        assert torch.allclose(entropy_loss(logits), entropy_loss(shifted), atol=1e-6)

    @given(shift=st.floats(min_value=-50, max_value=50))
    @settings(max_examples=25, deadline=None)
    def test_shift_invariance_property(self, shift):
        torch.manual_seed(0)
        logits = torch.randn(6, 4)
        assert torch.allclose(entropy_loss(logits), entropy_loss(logits + shift), atol=1e-5)

    def test_non_finite_rejected(self):
        logits = torch.full((2, 3), float("nan"))
        with pytest.raises(ValueError):
            entropy_loss(logits)


class TestPseudoLabelLoss:
    def test_one_hot_limit(self):
        logits = torch.zeros(3, 5)
        logits[:, 1] = 1e6
        assert float(pseudo_label_loss(logits)) <= 1e-6

    def test_uniform_tie_breaks_to_class_zero(self):
        # all-equal logits: the pseudo label is class 0, so the loss is the
        # cross-entropy of the uniform prediction against class 0 = log K
        logits = torch.zeros(4, 2)
        assert math.isclose(float(pseudo_label_loss(logits)), math.log(2), rel_tol=1e-6)

    def test_class_permutation_leaves_scalar_unchanged(self):
        logits = torch.randn(6, 5)
        perm = torch.tensor([3, 0, 4, 1, 2])
        assert torch.allclose(
            pseudo_label_loss(logits), pseudo_label_loss(logits[:, perm]), atol=1e-6
        )


class TestAugmentationConsistency:
    def test_finite_and_deterministic(self, backbone, batch):
        a = augmentation_consistency_loss(backbone, batch, None)
        b = augmentation_consistency_loss(backbone, batch, None)
        assert torch.isfinite(a)
        assert torch.equal(a, b)

    def test_dispatcher_names(self, backbone, batch):
        for name in ("entropy", "pseudo_label", "augmentation_consistency"):
            assert torch.isfinite(unsupervised_loss(name, backbone, batch, None))
        with pytest.raises(ValueError):
            unsupervised_loss("contrastive", backbone, batch, None)


class TestLayerGradients:
    def test_gradset_shapes_and_detachment(self, backbone, batch):
        grads = layer_gradients("entropy", backbone, batch, backbone.extract())
        for sid, slot in backbone.slot_table().items():
            assert grads[sid].shape == slot.shape
            assert not grads[sid].requires_grad
            assert torch.isfinite(grads[sid]).all()

    def test_uniform_logits_are_stationary_for_entropy(self, backbone, batch):
        # zero classifier -> identical logits -> uniform softmax, the entropy
        # maximum, so its classifier gradient vanishes
        params = backbone.extract()
        params["classifier"] = torch.zeros_like(params["classifier"])
        grads = layer_gradients("entropy", backbone, batch, params, ["classifier"])
        assert float(grads["classifier"].abs().max()) <= 1e-7

    def test_batch_duplication_invariance(self, backbone, batch):
        params = backbone.extract()
        single = layer_gradients("entropy", backbone, batch, params)
        doubled = layer_gradients("entropy", backbone, torch.cat([batch, batch]), params)
        for sid in backbone.slot_table():
            assert torch.allclose(single[sid], doubled[sid], atol=1e-6)

    def test_unknown_slot_rejected(self, backbone, batch):
        with pytest.raises(KeyError):
            layer_gradients("entropy", backbone, batch, backbone.extract(), ["bn7.gamma"])

    @pytest.mark.parametrize("loss_name", ["entropy", "pseudo_label"])
    def test_finite_difference_oracle(self, loss_name):
        # Central differences in double precision, step 1e-4, on entries of
        # every slot kind. The point must be generic: the network is piecewise
        # smooth (ReLU, max-pool), and a kink inside the probe window makes
        # the sided difference a different quantity than the one-branch
        # autograd derivative. Seed 2 gives a kink-free evaluation point.
        torch.manual_seed(2)
        x = torch.rand(12, 1, 16, 16, dtype=torch.float64)
        model = ConvBackbone(dtype=torch.float64)
        params = model.extract()
        grads = layer_gradients(loss_name, model, x, params)
        step = 1e-4
        for sid in params:
            flat = params[sid].flatten()
            for i in range(min(6, flat.numel())):
                probe = {k: v.clone() for k, v in params.items()}
                pf = probe[sid].flatten()
                pf[i] = flat[i] + step
                up = float(unsupervised_loss(loss_name, model, x, probe).detach())
                pf[i] = flat[i] - step
                down = float(unsupervised_loss(loss_name, model, x, probe).detach())
                fd = (up - down) / (2 * step)
                ad = float(grads[sid].flatten()[i])
                denom = max(abs(fd), abs(ad), 1e-8)
                assert abs(fd - ad) / denom <= 1e-4, (sid, i, fd, ad)

    def test_finite_difference_cross_entropy(self):
        # supervised CE (used by the meta-training steps) checked the same way
        torch.manual_seed(2)
        x = torch.rand(12, 1, 16, 16, dtype=torch.float64)
        model = ConvBackbone(dtype=torch.float64)
        y = torch.randint(0, 5, (12,))
        params = model.extract()
        leaves = {sid: p.clone().requires_grad_(True) for sid, p in params.items()}
        loss = F.cross_entropy(model.forward(x, injected=leaves), y)
        raw = torch.autograd.grad(loss, list(leaves.values()))
        grads = dict(zip(leaves, raw))
        step = 1e-4
        for sid in params:
            flat = params[sid].flatten()
            for i in range(min(6, flat.numel())):
                probe = {k: v.clone() for k, v in params.items()}
                pf = probe[sid].flatten()
                pf[i] = flat[i] + step
                up = float(F.cross_entropy(model.forward(x, injected=probe), y))
                pf[i] = flat[i] - step
                down = float(F.cross_entropy(model.forward(x, injected=probe), y))
                fd = (up - down) / (2 * step)
                ad = float(grads[sid].flatten()[i])
                denom = max(abs(fd), abs(ad), 1e-8)
                assert abs(fd - ad) / denom <= 1e-4, (sid, i, fd, ad)


class TestRmsNormalize:
    def test_unit_rms(self):
        g = torch.randn(64) * 17.0
        out = rms_normalize(g)
        assert math.isclose(float((out**2).mean().sqrt()), 1.0, rel_tol=1e-4)

    def test_zero_input_stays_finite(self):
        out = rms_normalize(torch.zeros(8))
        assert torch.isfinite(out).all()
        assert torch.equal(out, torch.zeros(8))

    @given(scale=st.floats(min_value=1e-3, max_value=1e3))
    @settings(max_examples=25, deadline=None)
    def test_scale_invariance(self, scale):
        torch.manual_seed(1)
        g = torch.randn(32)
        assert torch.allclose(rms_normalize(g), rms_normalize(g * scale), atol=1e-4)
