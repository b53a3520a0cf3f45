import pytest
import torch

from ttgen.synthdata import DomainBatch, stream
from ttgen.ttg import (
    ERMStrategy,
    GeneralizeFormerStrategy,
    PrototypeStrategy,
    RunMetrics,
    TentStrategy,
    adapt_batch_generalizeformer,
    make_strategy,
    run_stream,
)


def _batch(ds, lo, hi):
    return DomainBatch(
        inputs=ds.inputs[lo:hi],
        labels=ds.labels[lo:hi],
        domain_ids=torch.full((hi - lo,), ds.domain_id),
    )


class TestGeneralizeFormer:
    def test_checkpoint_never_mutated(self, backbone, generator, small_domains):
        strat = GeneralizeFormerStrategy(backbone, generator)
        before = backbone.checksum()
        for lo in (0, 16, 32):
            strat.adapt(_batch(small_domains[2], lo, lo + 16))
        assert backbone.checksum() == before

    def test_zero_init_matches_erm_bitwise(self, backbone, generator, small_domains):
        # zero-initialized readback means generated params == source params,
        # so the adapted logits equal a plain source forward
        batch = _batch(small_domains[1], 0, 16)
        gf = GeneralizeFormerStrategy(backbone, generator).adapt(batch)
        erm = ERMStrategy(backbone).adapt(batch)
        assert torch.equal(gf, erm)

    def test_batch_size_one(self, backbone, generator, small_domains):
        logits = GeneralizeFormerStrategy(backbone, generator).adapt(
            _batch(small_domains[0], 0, 1)
        )
        assert logits.shape == (1, small_domains[0].n_classes)
        assert torch.isfinite(logits).all()

    def test_stateless_across_batches(self, backbone, generator, small_domains):
        # batch order must not matter: each batch adapts from scratch
        a = _batch(small_domains[0], 0, 16)
        b = _batch(small_domains[2], 0, 16)
        s1 = GeneralizeFormerStrategy(backbone, generator)
        out_ab = (s1.adapt(a), s1.adapt(b))
        s2 = GeneralizeFormerStrategy(backbone, generator)
        out_ba = (s2.adapt(b), s2.adapt(a))
        assert torch.equal(out_ab[0], out_ba[1])
        assert torch.equal(out_ab[1], out_ba[0])

    def test_fast_entropy_path_matches_generic(self, backbone, generator, small_domains):
        # the entropy path reuses the gradient forward's activations as z_t;
        # it must agree with the generic two-pass path used for other losses
        x = small_domains[1].inputs[:16]
        params = backbone.extract()
        from ttgen.objectives import layer_gradients

        _, fast = adapt_batch_generalizeformer(x, backbone, generator, "entropy")
        grads = layer_gradients("entropy", backbone, x, params)
        with torch.no_grad():
            z = backbone.features(x)
        with torch.inference_mode():
            generated = generator.generate(params, z, grads)
            slow = backbone.forward(x, injected=generated)
        assert torch.allclose(fast, slow, atol=1e-6)

    def test_pseudo_label_loss_supported(self, backbone, generator, small_domains):
        strat = GeneralizeFormerStrategy(backbone, generator, grad_loss="pseudo_label")
        logits = strat.adapt(_batch(small_domains[0], 0, 16))
        assert torch.isfinite(logits).all()

    def test_predict_uses_stored_checkpoint(self, backbone, generator, small_domains):
        strat = GeneralizeFormerStrategy(backbone, generator)
        x = small_domains[1].inputs[:8]
        with torch.no_grad():
            plain = backbone.forward(x)
        strat.adapt(_batch(small_domains[2], 0, 16))
        assert torch.equal(strat.predict(x), plain)


class TestTent:
    def test_updates_only_bn_affine(self, backbone, small_domains):
        strat = TentStrategy(backbone, lr=1e-2)
        snapshot = {k: v.clone() for k, v in strat.model.state_dict().items()}
        strat.adapt(_batch(small_domains[2], 0, 16))
        for name, value in strat.model.state_dict().items():
            changed = not torch.equal(value, snapshot[name])
            if "gamma" in name or "beta" in name:
                assert changed, name
            else:
                assert not changed, name

    def test_source_checkpoint_untouched(self, backbone, small_domains):
        before = backbone.checksum()
        TentStrategy(backbone, lr=1e-2).adapt(_batch(small_domains[2], 0, 16))
        assert backbone.checksum() == before

    def test_entropy_non_increasing_on_repeated_batch(self, backbone, small_domains):
        from ttgen.objectives import entropy_loss

        strat = TentStrategy(backbone, lr=1e-3)
        batch = _batch(small_domains[2], 0, 32)
        first = float(entropy_loss(strat.adapt(batch)))
        for _ in range(9):
            logits = strat.adapt(batch)
        last = float(entropy_loss(logits))
        assert last <= first + 1e-6

    def test_degenerate_batch_flagged(self, backbone, small_domains):
        strat = TentStrategy(backbone)
        strat.adapt(_batch(small_domains[0], 0, 1))
        assert strat.degenerate_batches == 1
        strat.adapt(_batch(small_domains[0], 0, 16))
        assert strat.degenerate_batches == 1

    def test_full_model_variant_updates_conv(self, backbone, small_domains):
        strat = TentStrategy(backbone, lr=1e-2, full_model=True)
        snap = strat.model.conv1_weight.clone()
        strat.adapt(_batch(small_domains[2], 0, 16))
        assert not torch.equal(strat.model.conv1_weight, snap)


class TestPrototype:
    def test_first_batch_matches_erm(self, backbone, small_domains):
        # no supports yet: centroids reduce to the source classifier rows
        batch = _batch(small_domains[1], 0, 16)
        proto = PrototypeStrategy(backbone).adapt(batch)
        erm = ERMStrategy(backbone).adapt(batch)
        assert torch.allclose(proto, erm, atol=1e-6)

    def test_capacity_bound(self, backbone, small_domains):
        strat = PrototypeStrategy(backbone, capacity=5)
        for lo in range(0, 48, 16):
            strat.adapt(_batch(small_domains[2], lo, lo + 16))
        assert all(len(s) <= 5 for s in strat.supports)

    def test_predict_leaves_supports_untouched(self, backbone, small_domains):
        strat = PrototypeStrategy(backbone)
        strat.adapt(_batch(small_domains[2], 0, 16))
        sizes = [len(s) for s in strat.supports]
        strat.predict(small_domains[0].inputs[:8])
        assert [len(s) for s in strat.supports] == sizes


class TestFactoryAndRunner:
    def test_factory_names(self, backbone, generator):
        assert make_strategy("erm", backbone).name == "erm"
        assert make_strategy("tent", backbone).name == "tent"
        assert make_strategy("prototype_adjust", backbone).name == "prototype_adjust"
        assert make_strategy("generalizeformer", backbone, generator).name == "generalizeformer"

    def test_generalizeformer_requires_generator(self, backbone):
        with pytest.raises(ValueError):
            make_strategy("generalizeformer", backbone)

    def test_unknown_strategy(self, backbone):
        with pytest.raises(ValueError):
            make_strategy("oracle", backbone)

    def test_run_stream_erm_equals_plain_forward(self, backbone, small_domains):
        s = stream(small_domains[:1], batch_size=20)
        metrics = run_stream(s, ERMStrategy(backbone))
        assert len(metrics.records) == len(s)
        with torch.no_grad():
            logits = backbone.forward(small_domains[0].inputs)
        expected = float((logits.argmax(-1) == small_domains[0].labels).float().mean())
        assert abs(metrics.accuracy - expected) < 1e-6

    def test_run_metrics_aggregates(self):
        m = RunMetrics(
            records=[
                {"n": 10, "n_correct": 7, "adapt_ms": 2.0,
                 "sample_domain_ids": [0] * 10, "sample_correct": [True] * 7 + [False] * 3},
                {"n": 10, "n_correct": 3, "adapt_ms": 4.0,
                 "sample_domain_ids": [1] * 10, "sample_correct": [True] * 3 + [False] * 7},
            ]
        )
        assert m.accuracy == 0.5
        assert m.per_domain_accuracy() == {0: 0.7, 1: 0.3}
        assert m.median_adapt_ms == 4.0
