import numpy as np
import pytest

from lesionxai import autodiff as ad
from lesionxai.instances import LesionInstance
from lesionxai.phantom import preprocess
from lesionxai.saliency import (
    NoiseSpec,
    gradcampp_class,
    gradcampp_instance,
    instance_gradients,
    saliency_extrema,
    smoothgrad_instance_avg,
    smoothgrad_instance_max,
)


def identity_graph(channels=1, dtype=np.float64):
    """Output equals input: a 1x1x1 convolution with the identity matrix."""
    g = ad.GraphBuilder()
    g.input("in", channels=channels)
    w = np.eye(channels, dtype=dtype).reshape(channels, channels, 1, 1, 1)
    g.conv3d("id", "in", w)
    return g.build("id")


def _omega_block(n):
    """A compact voxel set of size n inside a 16^3 volume."""
    side = int(round(n ** (1 / 3))) or 1
    vox = [
        (4 + a, 4 + b, 4 + c)
        for a in range(side)
        for b in range(side)
        for c in range(side)
    ]
    return np.array(vox[:n]) if len(vox) >= n else np.array(vox)


class TestIdentityModel:
    @pytest.mark.parametrize("size", [1, 4, 64])
    def test_average_map_is_one_over_omega(self, size):
        graph = identity_graph()
        x = np.random.default_rng(size).standard_normal((1, 16, 16, 16))
        omega = _omega_block(size)
        assert len(omega) == size
        smap = smoothgrad_instance_avg(graph, x, omega, NoiseSpec(n=1, sigma=0.0))
        inside = smap.data[0][omega[:, 0], omega[:, 1], omega[:, 2]]
        assert np.all(inside == 1.0 / size)
        mask = np.zeros((16, 16, 16), dtype=bool)
        mask[omega[:, 0], omega[:, 1], omega[:, 2]] = True
        assert not smap.data[0][~mask].any()

    @pytest.mark.parametrize("size", [1, 4, 64])
    def test_signed_max_map_is_one(self, size):
        graph = identity_graph()
        x = np.random.default_rng(size).standard_normal((1, 16, 16, 16))
        omega = _omega_block(size)
        smap = smoothgrad_instance_max(graph, x, omega, NoiseSpec(n=1, sigma=0.0))
        inside = smap.data[0][omega[:, 0], omega[:, 1], omega[:, 2]]
        assert np.all(inside == 1.0)
        mask = np.zeros((16, 16, 16), dtype=bool)
        mask[omega[:, 0], omega[:, 1], omega[:, 2]] = True
        assert not smap.data[0][~mask].any()


def test_smoothgrad_degenerates_to_vanilla(small_model, small_phantoms):
    """N=1 with sigma=0 must equal the plain instance gradient bit-exactly."""
    x = preprocess(small_phantoms[0])
    inst = small_phantoms[0].instances[0]
    vanilla = instance_gradients(small_model, x, inst)
    smap = smoothgrad_instance_avg(small_model, x, inst, NoiseSpec(n=1, sigma=0.0))
    assert np.array_equal(smap.data, vanilla)


def test_noise_changes_the_map(small_model, small_phantoms):
    x = preprocess(small_phantoms[0])
    inst = small_phantoms[0].instances[0]
    a = smoothgrad_instance_avg(small_model, x, inst, NoiseSpec(n=2, sigma=0.05, seed=0))
    b = smoothgrad_instance_avg(small_model, x, inst, NoiseSpec(n=1, sigma=0.0))
    assert not np.array_equal(a.data, b.data)


def test_sigma_irrelevant_for_linear_model():
    """A linear model has constant gradients, so noise averages out exactly."""
    graph = identity_graph()
    x = np.random.default_rng(0).standard_normal((1, 16, 16, 16))
    omega = _omega_block(4)
    a = smoothgrad_instance_avg(graph, x, omega, NoiseSpec(n=5, sigma=0.3, seed=1))
    b = smoothgrad_instance_avg(graph, x, omega, NoiseSpec(n=1, sigma=0.0))
    assert np.allclose(a.data, b.data, atol=1e-12)


def test_locality_zero_outside_receptive_field(small_model, small_phantoms):
    x = preprocess(small_phantoms[0])
    radius = max(ad.receptive_field(small_model))
    for inst in small_phantoms[0].instances:
        grad = instance_gradients(small_model, x, inst)
        lo = np.maximum(inst.voxels.min(axis=0) - radius, 0)
        hi = np.minimum(inst.voxels.max(axis=0) + radius + 1, x.shape[1:])
        box = np.zeros(x.shape[1:], dtype=bool)
        box[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]] = True
        assert not np.abs(grad).sum(axis=0)[~box].any()


def test_cropped_equals_uncropped(small_model, small_phantoms):
    x = preprocess(small_phantoms[0])
    inst = small_phantoms[0].instances[0]
    cropped = instance_gradients(small_model, x, inst, crop=True)
    full = instance_gradients(small_model, x, inst, crop=False)
    assert np.array_equal(cropped, full)


def test_omega_cap_sets_flag(small_model, small_phantoms):
    x = preprocess(small_phantoms[0])
    inst = max(small_phantoms[0].instances, key=len)
    smap = smoothgrad_instance_max(
        small_model, x, inst, NoiseSpec(n=1, sigma=0.0), omega_cap=4
    )
    assert "omega-subsampled" in smap.flags
    full = smoothgrad_instance_max(
        small_model, x, inst, NoiseSpec(n=1, sigma=0.0), omega_cap=10 ** 6
    )
    assert full.flags == []


def test_per_modality_channels(small_model, small_phantoms):
    x = preprocess(small_phantoms[0])
    inst = small_phantoms[0].instances[0]
    smap = smoothgrad_instance_max(small_model, x, inst, NoiseSpec(n=1, sigma=0.0))
    assert smap.data.shape == x.shape  # one map per input modality


def test_determinism(small_model, small_phantoms):
    x = preprocess(small_phantoms[0])
    inst = small_phantoms[0].instances[0]
    spec = NoiseSpec(n=3, sigma=0.05, seed=42)
    a = smoothgrad_instance_max(small_model, x, inst, spec)
    b = smoothgrad_instance_max(small_model, x, inst, spec)
    assert np.array_equal(a.data, b.data)


class TestGradCampp:
    def hand_graph(self):
        """Single activation map A with one positive voxel, identity head.

        With A[p] = 2 elsewhere zero: alpha[p] = g^2/(2g^2 + g^3 sum(A)) with
        g = 1 gives 1/4, omega = 1/4, and M[p] = relu(omega * A[p]) = 0.5.
        """
        g = ad.GraphBuilder()
        g.input("in", channels=1)
        w = np.ones((1, 1, 1, 1, 1))
        g.conv3d("act", "in", w)
        g.relu("act_r", "act")
        g.conv3d("head", "act_r", np.ones((1, 1, 1, 1, 1)))
        return g.build("head")

    def x_hand(self):
        x = np.zeros((1, 4, 4, 4))
        x[0, 1, 1, 1] = 2.0
        return x

    def test_hand_case_class_form(self):
        graph = self.hand_graph()
        smap = gradcampp_class(graph, self.x_hand(), layer="act_r", t=0.3, gate="logit")
        assert smap.data[0, 1, 1, 1] == 0.5
        other = smap.data.copy()
        other[0, 1, 1, 1] = 0.0
        assert not other.any()

    def test_hand_case_instance_form(self):
        graph = self.hand_graph()
        smap = gradcampp_instance(graph, self.x_hand(), np.array([(1, 1, 1)]), layer="act_r")
        assert smap.data[0, 1, 1, 1] == 0.5
        assert smap.data.sum() == 0.5

    def test_nonnegative_and_zero_gradient_gives_zero_heat(self, small_model, small_phantoms):
        x = preprocess(small_phantoms[0])
        smap = gradcampp_class(small_model, x, t=0.3)
        assert np.all(smap.data >= 0)

    def test_no_suprathreshold_flag(self):
        graph = self.hand_graph()
        x = np.zeros((1, 4, 4, 4)) - 5.0
        smap = gradcampp_class(graph, x, layer="act_r", t=0.3, gate="logit")
        assert "no-suprathreshold-voxels" in smap.flags
        assert not smap.data.any()

    def test_instance_map_upsampled_to_input_shape(self, small_model, small_phantoms):
        x = preprocess(small_phantoms[0])
        inst = small_phantoms[0].instances[0]
        smap = gradcampp_instance(small_model, x, inst)
        assert smap.data.shape == (1,) + x.shape[1:]
        assert np.all(smap.data >= 0)

    def test_bad_gate_rejected(self):
        with pytest.raises(ValueError):
            gradcampp_class(self.hand_graph(), self.x_hand(), gate="nope")


class TestExtrema:
    def test_medians_outside_band(self):
        vals = np.array([-0.5, -0.3, -0.05, 0.0, 0.02, 0.4, 0.6, 0.8])
        s = saliency_extrema(vals, (-0.1, 0.1))
        assert s.max == 0.8 and s.min == -0.5
        assert s.median_pos == 0.6
        assert s.median_neg == -0.4
        assert not s.empty_band

    def test_all_inside_band(self):
        s = saliency_extrema(np.array([0.01, -0.02, 0.0]))
        assert s.empty_band
        assert s.median_pos is None and s.median_neg is None
