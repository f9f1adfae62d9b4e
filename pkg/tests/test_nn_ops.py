import numpy as np
import numpy.testing as npt
import pytest
import ops
import nn_ops
from nn_ops import DwSepConvSpec, InceptionRefSpec, MultiScaleBlockSpec
from tensor import Tensor
from errors import ConfigurationError


def paramsOf(spec, seed=0):
    return {p.name: p.tensor for p in nn_ops.init_params(spec, np.random.default_rng(seed))}


def zeroParams(spec):
    return {name: Tensor(np.zeros(shape)) for name, shape in nn_ops.param_shapes(spec).items()}


def test_dwsep_param_count():
    assert nn_ops.count_params(DwSepConvSpec(8, 16, 3)) == 216


@pytest.mark.parametrize('spec', [DwSepConvSpec(8, 16, 3), DwSepConvSpec(4, 6, 5),
                                  MultiScaleBlockSpec(3, 64, (16, 16, 16, 16), 2),
                                  MultiScaleBlockSpec(64, 64, (4, 12, 44, 4), 1),
                                  InceptionRefSpec(64, 128), InceptionRefSpec(32, 32, (2, 6, 22, 2))])
def test_count_params_matches_materialized(spec):
    assert nn_ops.count_params(spec) == sum(p.size for p in nn_ops.init_params(spec, np.random.default_rng(0)))


def test_dwsep_identity_configuration(rng):
    spec = DwSepConvSpec(3, 3, 3)
    depthwise = np.zeros((3, 1, 3, 3))
    depthwise[:, 0, 1, 1] = 1.0
    params = {'depthwise.weight': Tensor(depthwise), 'pointwise.weight': Tensor(np.eye(3)[:, :, None, None]),
              'pointwise.bias': Tensor(np.zeros(3))}
    x = rng.uniform(0.0, 1.0, (2, 3, 5, 5))
    npt.assert_allclose(nn_ops.dwsep_forward(spec, params, Tensor(x)).data, x, atol=1e-12)


def test_dwsep_equals_conv_composition(rng):
    spec = DwSepConvSpec(4, 6, 5)
    params = paramsOf(spec)
    x = Tensor(rng.standard_normal((1, 4, 7, 7)))
    depthwise = params['depthwise.weight'].data
    # Depthwise as a full convolution with a block-diagonal kernel
    full = np.zeros((4, 4, 5, 5))
    for c in range(4):
        full[c, c] = depthwise[c, 0]
    expected = ops.relu(ops.conv2d(ops.conv2d(x, Tensor(full), padding=2), params['pointwise.weight'],
                                   params['pointwise.bias']))
    npt.assert_allclose(nn_ops.dwsep_forward(spec, params, x).data, expected.data, atol=1e-6)


def test_multiscale_param_count_example():
    assert nn_ops.count_params(MultiScaleBlockSpec(3, 64, (16, 16, 16, 16), 2)) == 1510


@pytest.mark.parametrize('seed', range(20))
def test_multiscale_param_count_over_random_blocks(seed):
    rng = np.random.default_rng(seed)
    cIn, cOut, extra = int(rng.integers(1, 65)), int(rng.integers(4, 129)), int(rng.integers(0, 4))
    cuts = np.sort(rng.choice(np.arange(1, cOut), 3, replace=False))
    widths = tuple(int(w) for w in np.diff(np.concatenate([[0], cuts, [cOut]])))
    spec = MultiScaleBlockSpec(cIn, cOut, widths, extra)
    w1, w2, w3, w4 = widths
    perBranch = (cIn * w1 + w1) + (9 * cIn + cIn * w2 + w2) + (25 * cIn + cIn * w3 + w3) + (cIn * w4 + w4)
    expected = cIn * cOut + cOut + 34 * cIn + 9 * extra * cOut
    assert perBranch + 9 * extra * cOut == expected
    assert nn_ops.count_params(spec) == expected
    assert sum(p.size for p in nn_ops.init_params(spec, rng)) == expected
    shapes = nn_ops.param_shapes(spec)
    extras = [name for name in shapes if name.startswith('extra')]
    assert len(extras) == extra
    assert all(shapes[name] == (cOut, 1, 3, 3) for name in extras)


def test_multiscale_shape_law(rng):
    spec = MultiScaleBlockSpec(64, 128)
    out = nn_ops.multiscale_block_forward(spec, paramsOf(spec), Tensor(rng.standard_normal((1, 64, 32, 32)).astype(np.float32)))
    assert out.shape == (1, 128, 32, 32)


def test_multiscale_zero_parameters_give_zero_output(rng):
    spec = MultiScaleBlockSpec(4, 8)
    out = nn_ops.multiscale_block_forward(spec, zeroParams(spec), Tensor(rng.standard_normal((1, 4, 6, 6))))
    npt.assert_array_equal(out.data, 0.0)


def test_branch_evaluation_order_does_not_change_output(rng):
    spec = MultiScaleBlockSpec(4, 8, (1, 2, 3, 2), 2)
    params = paramsOf(spec, seed=5)
    x = Tensor(rng.standard_normal((2, 4, 6, 6)))
    reference = nn_ops.multiscale_block_forward(spec, params, x).data
    for order in [(3, 2, 1, 0), (1, 3, 0, 2)]:
        npt.assert_array_equal(nn_ops.multiscale_block_forward(spec, params, x, branchOrder=order).data, reference)


def test_branch_widths_must_sum_to_out_channels():
    with pytest.raises(ConfigurationError, match='sum'):
        MultiScaleBlockSpec(8, 16, (4, 4, 4, 5))
    with pytest.raises(ConfigurationError):
        MultiScaleBlockSpec(8, 16, (0, 4, 4, 8))
    with pytest.raises(ConfigurationError):
        InceptionRefSpec(8, 16, (8, 8))


def test_dwsep_kernel_must_be_3_or_5():
    with pytest.raises(ConfigurationError):
        DwSepConvSpec(8, 8, 7)


def test_block_rejects_wrong_input_channels(rng):
    spec = MultiScaleBlockSpec(4, 8)
    with pytest.raises(ConfigurationError, match='in_channels'):
        nn_ops.multiscale_block_forward(spec, paramsOf(spec), Tensor(rng.standard_normal((1, 5, 6, 6))))


def test_inception_branch_count_example():
    spec = InceptionRefSpec(64, 128, (32, 32, 32, 32))
    shapes = nn_ops.param_shapes(spec)
    assert int(np.prod(shapes['b2.conv.weight'])) + int(np.prod(shapes['b2.conv.bias'])) == 18464


def test_inception_shape_and_residual_identity(rng):
    spec = InceptionRefSpec(8, 8)
    assert spec.residual
    x = rng.standard_normal((1, 8, 5, 5))
    npt.assert_array_equal(nn_ops.inception_ref_forward(spec, zeroParams(spec), Tensor(x)).data, x)
    wide = InceptionRefSpec(8, 16)
    assert nn_ops.inception_ref_forward(wide, paramsOf(wide), Tensor(x)).shape == (1, 16, 5, 5)


def test_dwsep_flops_example():
    assert nn_ops.count_flops(DwSepConvSpec(128, 128, 3), 32, 32) == 35_913_728


def test_full_conv_costs_more_than_eight_dwsep():
    # 2 * 9 * 128 * 128 * 32 * 32
    fullConv = 301_989_888
    assert fullConv / nn_ops.count_flops(DwSepConvSpec(128, 128, 3), 32, 32) > 8.4


def test_inception_flops_exceed_multiscale():
    spec = MultiScaleBlockSpec(64, 64, (4, 12, 44, 4), 1)
    ratio = nn_ops.count_flops(InceptionRefSpec.matching(spec), 16, 16) / nn_ops.count_flops(spec, 16, 16)
    assert ratio > 7.0


def test_flops_scale_with_pixels():
    spec = MultiScaleBlockSpec(16, 32)
    assert nn_ops.count_flops(spec, 8, 8) * 4 == nn_ops.count_flops(spec, 16, 16)


def test_he_uniform_bound(rng):
    values = nn_ops.heUniform((16, 8, 3, 3), rng)
    assert values.dtype == np.float32
    assert np.abs(values).max() <= np.sqrt(6.0 / 72) + 1e-6


def test_biases_start_at_zero():
    for p in nn_ops.init_params(MultiScaleBlockSpec(4, 8), np.random.default_rng(0)):
        if p.name.endswith('.bias'):
            npt.assert_array_equal(p.tensor.data, 0.0)
