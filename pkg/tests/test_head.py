import numpy as np
import pytest
import torch

from ebc.bins import build_bins
from ebc.head import (
    ClassificationCounter,
    EncoderContract,
    FixedBinValues,
    RegressionCounter,
    TextEmbeddingBank,
    ToyConvEncoder,
    build_encoder,
    expected_density,
    interpolate_features,
    load_checkpoint,
    probability_map,
    register_encoder,
    save_checkpoint,
    similarity_logits,
)
from ebc.prompts import HashTextEncoder, build_prompt_set, embed_prompts


def make_bank(n, d, seed=0):
    rng = np.random.default_rng(seed)
    emb = rng.standard_normal((n, d))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    return TextEmbeddingBank.from_array(emb)


def bilinear_oracle(src, out_h, out_w):
    """Direct bilinear resampling, align-corners-off convention."""
    in_h, in_w = src.shape
    out = np.zeros((out_h, out_w))
    for oy in range(out_h):
        for ox in range(out_w):
            sy = (oy + 0.5) * in_h / out_h - 0.5
            sx = (ox + 0.5) * in_w / out_w - 0.5
            y0, x0 = int(np.floor(sy)), int(np.floor(sx))
            wy, wx = sy - y0, sx - x0
            total = 0.0
            for dy, fy in ((0, 1 - wy), (1, wy)):
                for dx, fx in ((0, 1 - wx), (1, wx)):
                    yy = min(max(y0 + dy, 0), in_h - 1)
                    xx = min(max(x0 + dx, 0), in_w - 1)
                    total += fy * fx * src[yy, xx]
            out[oy, ox] = total
    return out


class TestInterpolate:
    def test_identity_when_sizes_match(self):
        x = torch.randn(4, 6, 6)
        assert interpolate_features(x, (6, 6)) is x

    def test_constant_preserved(self):
        x = torch.full((2, 3, 3), 2.5)
        out = interpolate_features(x, (7, 5))
        assert torch.allclose(out, torch.full((2, 7, 5), 2.5))

    def test_matches_bilinear_oracle(self):
        ramp = np.arange(4, dtype=np.float64).reshape(2, 2)
        out = interpolate_features(torch.tensor(ramp).unsqueeze(0), (4, 4))
        oracle = bilinear_oracle(ramp, 4, 4)
        assert np.allclose(out[0].numpy(), oracle, atol=1e-7)

    def test_batched_shape(self):
        out = interpolate_features(torch.randn(2, 8, 5, 5), (10, 10))
        assert out.shape == (2, 8, 10, 10)

    def test_zero_target_rejected(self):
        with pytest.raises(ValueError):
            interpolate_features(torch.randn(2, 4, 4), (0, 4))


class TestProjection:
    """The per-location c -> d linear stage (a 1x1 conv in the model)."""

    def test_identity_weights_pass_through(self):
        proj = torch.nn.Conv2d(4, 4, 1)
        with torch.no_grad():
            proj.weight.copy_(torch.eye(4).reshape(4, 4, 1, 1))
            proj.bias.zero_()
        x = torch.randn(1, 4, 3, 3)
        assert torch.allclose(proj(x), x, atol=1e-7)

    def test_zero_weights_zero_output(self):
        proj = torch.nn.Conv2d(4, 6, 1)
        torch.nn.init.zeros_(proj.weight)
        torch.nn.init.zeros_(proj.bias)
        assert torch.equal(proj(torch.randn(1, 4, 3, 3)), torch.zeros(1, 6, 3, 3))

    def test_matches_matrix_vector_oracle_per_location(self):
        torch.manual_seed(0)
        proj = torch.nn.Conv2d(5, 3, 1)
        x = torch.randn(1, 5, 2, 2)
        out = proj(x)
        w = proj.weight.detach().numpy().reshape(3, 5)
        b = proj.bias.detach().numpy()
        for i in range(2):
            for j in range(2):
                ref = w @ x[0, :, i, j].numpy() + b
                assert np.allclose(out[0, :, i, j].detach().numpy(), ref, atol=1e-6)

    def test_spatial_dims_unchanged_in_model(self):
        model, _ = build_model(seed=9, d=16)
        feats = torch.randn(1, 12, 7, 9)
        projected = model.project(feats)
        assert projected.shape == (1, 16, 7, 9)


class TestSimilarityLogits:
    def test_identical_unit_vector_gives_one(self):
        bank = make_bank(3, 8)
        feats = bank.embeddings[1].reshape(8, 1, 1).clone()
        logits = similarity_logits(feats, bank.embeddings, 1.0)
        assert float(logits[1, 0, 0]) == pytest.approx(1.0, abs=1e-6)

    def test_orthogonal_gives_zero(self):
        bank = TextEmbeddingBank.from_array(np.eye(4)[:2])
        feats = torch.zeros(4, 1, 1)
        feats[2, 0, 0] = 5.0
        logits = similarity_logits(feats, bank.embeddings, 1.0)
        assert torch.allclose(logits, torch.zeros(2, 1, 1), atol=1e-7)

    def test_matches_cosine_oracle_with_scale(self):
        rng = np.random.default_rng(1)
        bank = make_bank(5, 16, seed=2)
        feats = rng.standard_normal((16, 3, 4))
        logits = similarity_logits(torch.tensor(feats).float(), bank.embeddings, 100.0)
        for i in range(3):
            for j in range(4):
                v = feats[:, i, j] / np.linalg.norm(feats[:, i, j])
                ref = 100.0 * bank.embeddings.numpy() @ v
                assert np.allclose(logits[:, i, j].numpy(), ref, atol=1e-4)

    def test_zero_norm_floored_with_warning(self):
        bank = make_bank(2, 4)
        with pytest.warns(RuntimeWarning, match="zero-norm"):
            logits = similarity_logits(torch.zeros(4, 2, 2), bank.embeddings, 1.0)
        assert torch.isfinite(logits).all()

    def test_width_mismatch_rejected(self):
        with pytest.raises(ValueError, match="width"):
            similarity_logits(torch.randn(5, 2, 2), make_bank(3, 4).embeddings)


class TestProbabilityMap:
    def test_equal_logits_uniform(self):
        prob = probability_map(torch.zeros(4, 2, 2))
        assert torch.allclose(prob, torch.full((4, 2, 2), 0.25))

    def test_extreme_logits_stable(self):
        logits = torch.tensor([1000.0, 0.0, 0.0]).reshape(3, 1, 1)
        prob = probability_map(logits)
        assert float(prob[0]) == pytest.approx(1.0)
        assert torch.isfinite(prob).all()

    def test_matches_exp_normalize_oracle(self):
        rng = np.random.default_rng(3)
        logits = rng.standard_normal((5, 3, 3))
        prob = probability_map(torch.tensor(logits))
        e = np.exp(logits - logits.max(axis=0, keepdims=True))
        assert np.allclose(prob.numpy(), e / e.sum(axis=0, keepdims=True), atol=1e-7)

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            probability_map(torch.tensor([[[float("nan")]]]))


class TestExpectedDensity:
    def test_onehot_returns_representative(self):
        policy = build_bins("fine", 4)
        prob = torch.zeros(5, 1, 1)
        prob[3] = 1.0
        assert float(expected_density(prob, policy)[0, 0]) == 3.0

    def test_uniform_two_bins(self):
        out = expected_density(torch.full((2, 1, 1), 0.5), [0.0, 1.0])
        assert float(out) == 0.5

    def test_matches_weighted_sum_oracle(self):
        rng = np.random.default_rng(4)
        policy = build_bins("fine", 4)
        logits = rng.standard_normal((5, 4, 4))
        e = np.exp(logits)
        prob = e / e.sum(axis=0, keepdims=True)
        out = expected_density(torch.tensor(prob), policy)
        oracle = np.einsum("nhw,n->hw", prob, policy.representatives)
        assert np.allclose(out.numpy(), oracle, atol=1e-12)

    def test_linearity_in_probability(self):
        rng = np.random.default_rng(5)
        reps = [0.0, 1.0, 2.0, 4.0]
        p1 = torch.tensor(rng.dirichlet(np.ones(4), size=(3, 3)).transpose(2, 0, 1))
        p2 = torch.tensor(rng.dirichlet(np.ones(4), size=(3, 3)).transpose(2, 0, 1))
        for alpha in (0.0, 0.3, 1.0):
            mix = alpha * p1 + (1 - alpha) * p2
            lhs = expected_density(mix, reps)
            rhs = alpha * expected_density(p1, reps) + (1 - alpha) * expected_density(p2, reps)
            assert torch.allclose(lhs, rhs, atol=1e-12)

    def test_bin_count_mismatch_rejected(self):
        with pytest.raises(ValueError):
            expected_density(torch.ones(3, 2, 2) / 3, [0.0, 1.0])


def build_model(seed=0, m=4, d=16, r=8):
    torch.manual_seed(seed)
    policy = build_bins("fine", m)
    bank = embed_prompts(build_prompt_set(policy), HashTextEncoder(dim=d))
    encoder = ToyConvEncoder(out_channels=12, width=8)
    return ClassificationCounter(encoder, policy, bank, r=r), policy


class TestClassificationCounter:
    def test_forward_shapes_and_normalization(self):
        model, policy = build_model()
        x = torch.randn(2, 3, 32, 48)
        prob, density = model(x)
        assert prob.shape == (2, policy.n, 4, 6)
        assert density.shape == (2, 4, 6)
        assert torch.allclose(prob.sum(dim=1), torch.ones(2, 4, 6), atol=1e-5)

    def test_density_within_representative_range(self):
        model, policy = build_model(seed=1)
        with torch.no_grad():
            _, density = model(torch.randn(1, 3, 64, 64))
        reps = policy.representatives
        assert float(density.min()) >= reps.min() - 1e-6
        assert float(density.max()) <= reps.max() + 1e-6

    def test_deterministic_forward(self):
        model, _ = build_model(seed=2)
        model.eval()
        x = torch.full((1, 3, 32, 32), 0.25)
        with torch.no_grad():
            a = model(x)[1]
            b = model(x)[1]
        assert torch.equal(a, b)

    def test_zero_projection_gives_uniform_and_mean_density(self):
        model, policy = build_model(seed=3)
        torch.nn.init.zeros_(model.project.weight)
        torch.nn.init.zeros_(model.project.bias)
        with torch.no_grad(), pytest.warns(RuntimeWarning, match="zero-norm"):
            prob, density = model(torch.zeros(1, 3, 32, 32))
        n = policy.n
        assert torch.allclose(prob, torch.full_like(prob, 1.0 / n), atol=1e-6)
        assert torch.allclose(
            density, torch.full_like(density, policy.representatives.mean()), atol=1e-5
        )

    def test_logit_scaling_preserves_argmax(self):
        model, _ = build_model(seed=4)
        x = torch.randn(1, 3, 32, 32)
        with torch.no_grad():
            feats = model.image_features(x)
            l1 = similarity_logits(feats, model.text_bank, 1.0)
            l7 = similarity_logits(feats, model.text_bank, 7.0)
        assert torch.equal(l1.argmax(dim=1), l7.argmax(dim=1))

    def test_global_count_permutation_invariant(self):
        model, policy = build_model(seed=5)
        prob, _ = model(torch.randn(1, 3, 48, 48))
        flat = prob[0].reshape(policy.n, -1)
        perm = torch.randperm(flat.shape[1])
        d0 = expected_density(prob[0], policy).sum()
        d1 = expected_density(flat[:, perm].reshape(prob[0].shape), policy).sum()
        assert torch.allclose(d0, d1, atol=1e-4)

    def test_bank_frozen_through_training_steps(self):
        model, _ = build_model(seed=6)
        before = model.bank_fingerprint()
        opt = torch.optim.Adam(model.parameters(), lr=1e-2)
        for _ in range(3):
            prob, density = model(torch.randn(2, 3, 32, 32))
            loss = density.sum() + prob.pow(2).sum()
            opt.zero_grad()
            loss.backward()
            opt.step()
            model.clamp_logit_scale()
        assert model.bank_fingerprint() == before
        assert "text_bank" not in {n for n, _ in model.named_parameters()}

    def test_logit_scale_clamped(self):
        model, _ = build_model(seed=7)
        with torch.no_grad():
            model.log_logit_scale.fill_(-3.0)
        model.clamp_logit_scale()
        assert float(model.logit_scale.detach()) == pytest.approx(1.0)
        with torch.no_grad():
            model.log_logit_scale.fill_(10.0)
        model.clamp_logit_scale()
        assert float(model.logit_scale.detach()) == pytest.approx(100.0)

    def test_bank_policy_size_mismatch_rejected(self):
        policy = build_bins("fine", 4)
        with pytest.raises(ValueError, match="bins"):
            ClassificationCounter(ToyConvEncoder(8, 4), policy, make_bank(3, 8))


class TestRegressionCounter:
    def test_forward_contract(self):
        torch.manual_seed(0)
        model = RegressionCounter(ToyConvEncoder(out_channels=8, width=4), r=8)
        with torch.no_grad():
            prob, density = model(torch.randn(2, 3, 32, 32))
        assert prob is None
        assert density.shape == (2, 4, 4)
        assert float(density.min()) >= 0.0


class TestEncoderRegistry:
    def test_toy_satisfies_contract(self):
        enc = ToyConvEncoder()
        assert isinstance(enc, EncoderContract)
        assert enc.reduction == 8

    def test_unknown_encoder_rejected(self):
        with pytest.raises(KeyError, match="register_encoder"):
            build_encoder({"encoder": "missing"})

    def test_custom_encoder_pluggable(self):
        class Stub(torch.nn.Module):
            reduction = 4
            out_channels = 6

            def __init__(self):
                super().__init__()
                self.conv = torch.nn.Conv2d(3, 6, 1)

            def forward(self, x):
                return self.conv(x[:, :, ::4, ::4])

        register_encoder("stub-test", lambda cfg: Stub())
        enc = build_encoder({"encoder": "stub-test"})
        assert enc(torch.randn(1, 3, 16, 16)).shape == (1, 6, 4, 4)


class TestCheckpoint:
    def test_round_trip_classification(self, tmp_path):
        model, policy = build_model(seed=8)
        path = save_checkpoint(
            model, tmp_path / "m.pt", {"encoder": "toy", "encoder_channels": 12,
                                       "encoder_width": 8, "r": 8}, config_hash="abc"
        )
        assert path.with_suffix(".pt.json").exists()
        loaded, meta = load_checkpoint(path)
        assert meta["kind"] == "classification"
        assert meta["policy"]["m"] == policy.m
        x = torch.randn(1, 3, 32, 32)
        with torch.no_grad():
            a = model(x)[1]
            b = loaded(x)[1]
        assert torch.allclose(a, b, atol=1e-7)

    def test_round_trip_regression(self, tmp_path):
        torch.manual_seed(1)
        model = RegressionCounter(ToyConvEncoder(out_channels=8, width=4), r=8)
        save_checkpoint(model, tmp_path / "r.pt", {
            "encoder": "toy", "encoder_channels": 8, "encoder_width": 4, "r": 8
        })
        loaded, meta = load_checkpoint(tmp_path / "r.pt")
        assert meta["kind"] == "regression"
        x = torch.randn(1, 3, 32, 32)
        with torch.no_grad():
            assert torch.allclose(model(x)[1], loaded(x)[1], atol=1e-7)

    def test_fixed_values_policy_round_trip(self, tmp_path):
        torch.manual_seed(2)
        values = FixedBinValues(values=(0.5, 1.5, 2.5))
        bank = make_bank(3, 8)
        model = ClassificationCounter(ToyConvEncoder(8, 4), values, bank, r=8)
        save_checkpoint(model, tmp_path / "f.pt", {
            "encoder": "toy", "encoder_channels": 8, "encoder_width": 4, "r": 8
        })
        loaded, meta = load_checkpoint(tmp_path / "f.pt")
        assert meta["policy"] is None
        assert tuple(loaded.policy.values) == (0.5, 1.5, 2.5)
