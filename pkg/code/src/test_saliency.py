# SPDX-FileCopyrightText: 2025 Luis Villa <luis@lu.is>
#
# SPDX-License-Identifier: BlueOak-1.0.0

"""Tests for the baseline saliency methods."""

import tempfile
from pathlib import Path

import numpy as np
import pytest
import torch
import torch.nn as nn

from layers import build_classifier_2d
from saliency import (
    SaliencyMap,
    compute_saliency,
    grad_cam,
    guided_grad_cam,
    occlusion_map,
    saliency_bp,
    saliency_guided_bp,
    top_positions,
    window_positions,
)


class CornerDetector(nn.Module):
    """Logit = mean intensity of the top-left 8x8 corner minus one."""

    dims = 2

    def __init__(self):
        super().__init__()
        self.scale = nn.Parameter(torch.ones(()))

    def forward(self, x):
        return self.scale * x[:, 0, :8, :8].mean(dim=(1, 2)) - 1.0


class RectifiedLinear(nn.Module):
    """ReLU on the input followed by a linear read-out."""

    dims = 2

    def __init__(self, weight: torch.Tensor):
        super().__init__()
        self.relu = nn.ReLU()
        self.weight = nn.Parameter(weight)

    def forward(self, x):
        return (self.relu(x) * self.weight).flatten(1).sum(dim=1)


class LinearMap(nn.Module):
    """Logit = sum of the image weighted by a fixed map; no ReLU anywhere."""

    dims = 2

    def __init__(self, weight: torch.Tensor):
        super().__init__()
        self.weight = nn.Parameter(weight)

    def forward(self, x):
        return (x * self.weight).flatten(1).sum(dim=1)


class IdentityFeatures(nn.Module):
    """Target layer output equals the input image; logit = its sum."""

    dims = 2

    def __init__(self):
        super().__init__()
        self.unused = nn.Parameter(torch.zeros((), dtype=torch.float64))
        self.features = nn.Identity()

    def forward(self, x):
        return self.features(x).flatten(1).sum(dim=1) + self.unused


class TwoChannelReadout(nn.Module):
    """3x3 convolution to two channels, read out by a fixed weight map per channel."""

    dims = 2

    def __init__(self, kernel: torch.Tensor, bias: torch.Tensor, readout: torch.Tensor):
        super().__init__()
        self.conv = nn.Conv2d(1, 2, 3, padding=1).double()
        with torch.no_grad():
            self.conv.weight.copy_(kernel)
            self.conv.bias.copy_(bias)
        self.readout = nn.Parameter(readout)

    def forward(self, x):
        return (self.conv(x) * self.readout).flatten(1).sum(dim=1)


class ConstantCamNet(nn.Module):
    """Target layer is a constant `level` map with unit logit gradient; a ReLU path carries the input."""

    dims = 2

    def __init__(self, weight: torch.Tensor, level: float = 1.0):
        super().__init__()
        self.level = nn.Parameter(torch.tensor(level, dtype=torch.float64))
        self.constant = nn.Identity()
        self.relu = nn.ReLU()
        self.weight = nn.Parameter(weight)

    def forward(self, x):
        a = self.constant(self.level * torch.ones_like(x))
        return a.flatten(1).sum(dim=1) + (self.relu(x) * self.weight).flatten(1).sum(dim=1)


@pytest.fixture
def classifier():
    torch.manual_seed(0)
    model = build_classifier_2d()
    for module in model.modules():
        if isinstance(module, nn.Linear):
            nn.init.normal_(module.weight, std=0.5)
    return model.eval()


@pytest.fixture
def image():
    return np.random.default_rng(0).normal(size=(32, 32)).astype(np.float32)


def _corner_population(n: int = 6):
    images = np.zeros((2 * n, 1, 16, 16), np.float32)
    images[n:, 0, :8, :8] = 2.0
    labels = np.array([0] * n + [1] * n)
    return images, labels


class TestBackprop:
    """Tests for saliency_bp and saliency_guided_bp."""

    def test_bp_equals_autograd(self, classifier, image):
        """The BP map is the signed input gradient."""
        x = torch.from_numpy(image)[None, None].requires_grad_(True)
        classifier(x).sum().backward()
        result = saliency_bp(classifier, image)
        assert result.method == 'bp'
        assert result.values.shape == (32, 32)
        np.testing.assert_allclose(result.values, x.grad[0, 0].numpy(), rtol=1e-5, atol=1e-7)

    def test_guided_bp_matches_closed_form(self):
        """Through a single ReLU, guided BP keeps positive weights at positive inputs."""
        weight = torch.tensor([[[[1.0, -2.0], [3.0, -4.0]]]])
        model = RectifiedLinear(weight)
        x = np.array([[[[1.0, 1.0], [-1.0, 2.0]]]], np.float32)
        plain = saliency_bp(model, x).values
        guided = saliency_guided_bp(model, x).values
        np.testing.assert_allclose(plain, [[1.0, -2.0], [0.0, -4.0]])
        np.testing.assert_allclose(guided, [[1.0, 0.0], [0.0, 0.0]])

    def test_bp_matches_central_differences(self, classifier, image):
        """Input gradients agree with float64 central differences at sampled pixels."""
        model = classifier.double()
        x = image.astype(np.float64)
        values = saliency_bp(model, x).values

        def logit(pixels):
            with torch.no_grad():
                return model(torch.from_numpy(pixels)[None, None]).item()

        rng = np.random.default_rng(1)
        eps = 1e-6
        for i, j in rng.integers(0, 32, size=(10, 2)):
            plus, minus = x.copy(), x.copy()
            plus[i, j] += eps
            minus[i, j] -= eps
            numeric = (logit(plus) - logit(minus)) / (2 * eps)
            assert values[i, j] == pytest.approx(numeric, rel=1e-4, abs=1e-8)

    def test_linear_map_saliency_is_its_weight(self):
        """Without ReLUs, BP and guided BP both return the weight map."""
        weight = torch.from_numpy(np.random.default_rng(2).normal(size=(1, 1, 6, 6)))
        model = LinearMap(weight)
        x = np.random.default_rng(3).normal(size=(6, 6))
        plain = saliency_bp(model, x).values
        np.testing.assert_allclose(plain, weight[0, 0].numpy(), rtol=0, atol=1e-12)
        np.testing.assert_array_equal(saliency_guided_bp(model, x).values, plain)

    def test_guided_hooks_are_removed(self, classifier, image):
        """Plain BP after guided BP is unaffected by the guided hooks."""
        before = saliency_bp(classifier, image).values
        saliency_guided_bp(classifier, image)
        np.testing.assert_array_equal(saliency_bp(classifier, image).values, before)

    def test_rejects_batches(self, classifier):
        """Subject-level maps take one image."""
        with pytest.raises(ValueError):
            saliency_bp(classifier, np.zeros((2, 1, 32, 32), np.float32))


class TestGradCam:
    """Tests for grad_cam and guided_grad_cam."""

    def test_non_negative_on_input_grid(self, classifier, image):
        """Grad-CAM is rectified and up-sampled to the image size."""
        result = grad_cam(classifier, image)
        assert result.values.shape == (32, 32)
        assert np.all(result.values >= 0)
        # Last stack runs before its pooling: 32 / 4 = 8
        assert result.coarse.shape == (8, 8)

    def test_explicit_layer(self, classifier, image):
        """An earlier layer gives a finer coarse map."""
        result = grad_cam(classifier, image, layer='stacks.0.1')
        assert result.coarse.shape == (32, 32)

    def test_unknown_layer(self, classifier, image):
        """Unknown layer ids raise ValueError."""
        with pytest.raises(ValueError, match='Unknown layer'):
            grad_cam(classifier, image, layer='stacks.9.1')

    def test_identity_layer_gives_rectified_image(self):
        """With A = X and p = sum X every weight is 1 and the map is ReLU(X)."""
        x = np.random.default_rng(4).normal(size=(8, 8))
        result = grad_cam(IdentityFeatures(), x, layer='features')
        np.testing.assert_allclose(result.coarse, np.maximum(x, 0.0), rtol=0, atol=1e-12)
        np.testing.assert_allclose(result.values, np.maximum(x, 0.0), rtol=0, atol=1e-12)

    def test_negative_weighted_sum_gives_zero_map(self):
        """A negative weighted activation sum is floored to zero everywhere."""
        x = -np.abs(np.random.default_rng(5).normal(size=(8, 8))) - 0.1
        result = grad_cam(IdentityFeatures(), x, layer='features')
        assert np.all(result.values == 0.0)

    def test_matches_manual_trace(self):
        """A two-channel conv net agrees with a loop-by-loop computation to 1e-10."""
        rng = np.random.default_rng(6)
        kernel, bias = rng.normal(size=(2, 1, 3, 3)), rng.normal(size=2)
        readout = rng.normal(size=(1, 2, 6, 6))
        x = rng.normal(size=(6, 6))
        model = TwoChannelReadout(torch.from_numpy(kernel), torch.from_numpy(bias), torch.from_numpy(readout))

        padded = np.pad(x, 1)
        activation = np.zeros((2, 6, 6))
        for c in range(2):
            for i in range(6):
                for j in range(6):
                    activation[c, i, j] = bias[c] + sum(
                        kernel[c, 0, a, b] * padded[i + a, j + b] for a in range(3) for b in range(3))
        weights = [readout[0, c].mean() for c in range(2)]
        expected = np.maximum(weights[0] * activation[0] + weights[1] * activation[1], 0.0)

        result = grad_cam(model, x, layer='conv')
        np.testing.assert_allclose(result.coarse, expected, rtol=0, atol=1e-10)
        np.testing.assert_allclose(result.values, expected, rtol=0, atol=1e-10)

    def test_unit_cam_returns_guided_bp(self):
        """When the Grad-CAM map is all ones guided Grad-CAM equals guided BP."""
        weight = torch.from_numpy(np.random.default_rng(7).normal(size=(1, 1, 8, 8)))
        model = ConstantCamNet(weight)
        x = np.random.default_rng(8).normal(size=(8, 8))
        np.testing.assert_allclose(grad_cam(model, x, layer='constant').values, np.ones((8, 8)), atol=1e-12)
        np.testing.assert_array_equal(guided_grad_cam(model, x, layer='constant').values,
                                      saliency_guided_bp(model, x).values)

    def test_zero_cam_annihilates(self):
        """A Grad-CAM map of zeros zeroes the guided product."""
        weight = torch.from_numpy(np.random.default_rng(9).normal(size=(1, 1, 8, 8)))
        model = ConstantCamNet(weight, level=-1.0)
        x = np.random.default_rng(10).normal(size=(8, 8))
        assert np.all(guided_grad_cam(model, x, layer='constant').values == 0.0)

    def test_guided_grad_cam_is_product(self, classifier, image):
        """Guided Grad-CAM multiplies the two maps pointwise."""
        product = guided_grad_cam(classifier, image).values
        expected = grad_cam(classifier, image).values * saliency_guided_bp(classifier, image).values
        np.testing.assert_allclose(product, expected, rtol=1e-6)


class TestOcclusion:
    """Tests for occlusion_map."""

    def test_window_positions(self):
        """Starts cover the grid with the given stride."""
        assert window_positions((16, 16), (8, 8), 4) == [[0, 4, 8], [0, 4, 8]]

    def test_window_larger_than_image(self):
        """A window that does not fit raises ValueError."""
        with pytest.raises(ValueError):
            window_positions((8, 8), (10, 4), 2)

    def test_drop_concentrates_on_informative_corner(self):
        """Only windows that hide enough of the corner reduce accuracy."""
        images, labels = _corner_population()
        result = occlusion_map(CornerDetector(), images, labels, window=(8, 8), stride=4)
        expected = np.array([[0.5, 0.5, 0.0], [0.5, 0.0, 0.0], [0.0, 0.0, 0.0]])
        np.testing.assert_allclose(result.coarse, expected)
        assert result.extra['baseline_accuracy'] == 1.0
        assert result.extra['centers'] == [[4, 8, 12], [4, 8, 12]]
        assert result.values.shape == (16, 16)
        assert result.values[4, 4] == pytest.approx(0.5)
        assert result.values[14, 14] == pytest.approx(0.0)
        assert top_positions(result, k=1) == [(4, 4)]

    def test_fill_equal_to_content_changes_nothing(self):
        """Occluding with the value already in every window leaves accuracy untouched."""
        images = np.full((8, 1, 16, 16), 3.0, np.float32)
        labels = np.array([0] * 4 + [1] * 4)
        result = occlusion_map(CornerDetector(), images, labels, window=(8, 8), stride=4, fill=3.0)
        assert np.all(result.coarse == 0.0)
        assert np.all(result.values == 0.0)

    def test_irrelevant_region_has_no_drop(self):
        """Windows away from the read-out corner do not change accuracy, whatever the noise there."""
        images, labels = _corner_population()
        images[:, :, 8:, :] += np.random.default_rng(11).normal(size=images[:, :, 8:, :].shape).astype(np.float32)
        result = occlusion_map(CornerDetector(), images, labels, window=(8, 8), stride=4)
        assert np.all(result.coarse[2, :] == 0.0)

    def test_single_group_rejected(self):
        """Occlusion needs both groups."""
        images, labels = _corner_population()
        with pytest.raises(ValueError, match='both groups'):
            occlusion_map(CornerDetector(), images[labels == 1], labels[labels == 1])

    def test_compute_saliency_rejects_occlusion(self, classifier, image):
        """Occlusion cannot explain a single image."""
        with pytest.raises(ValueError, match='population-level'):
            compute_saliency('occlusion', classifier, image)

    def test_compute_saliency_unknown_method(self, classifier, image):
        """Unknown method names are rejected."""
        with pytest.raises(ValueError):
            compute_saliency('lime', classifier, image)


class TestSaliencyMap:
    """Tests for SaliencyMap persistence and validation."""

    def test_save_and_load_with_coarse_grid(self):
        """Coarse grid and metadata survive a save/load."""
        images, labels = _corner_population(3)
        result = occlusion_map(CornerDetector(), images, labels, window=(8, 8), stride=4)
        with tempfile.TemporaryDirectory() as tmp:
            result.save(Path(tmp) / 'population')
            assert (Path(tmp) / 'population.coarse.f32').exists()
            loaded = SaliencyMap.load(Path(tmp) / 'population')
        np.testing.assert_allclose(loaded.coarse, result.coarse)
        assert tuple(loaded.window) == (8, 8)
        assert loaded.stride == 4

    def test_non_finite_values_rejected(self):
        """NaN maps are invalid."""
        with pytest.raises(ValueError):
            SaliencyMap(values=np.full((4, 4), np.nan), method='bp')

    def test_unknown_method_rejected(self):
        """Method names are validated."""
        with pytest.raises(ValueError):
            SaliencyMap(values=np.zeros((4, 4)), method='lime')
