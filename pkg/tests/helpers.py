"""Independent reference implementations and small hand-built models for tests."""
import numpy as np

from flimflan.network import AdderConvLayer, AdderDenseLayer, BnParams, NetworkModel


def adder_oracle(x, w, stride):
    """Nested-loop adder convolution on a (CH_i, W_i) map with (K, CH_i, CH_o) filters.

    Sums run input channel outer, kernel tap inner, matching the engine's
    documented order so float results can be compared exactly.
    """
    ci_n, wi = len(x), len(x[0])
    k_n, _, co_n = np.shape(w)
    wo_n = (wi - k_n) // stride + 1
    out = [[0 for _ in range(wo_n)] for _ in range(co_n)]
    for co in range(co_n):
        for wo in range(wo_n):
            acc = 0
            for ci in range(ci_n):
                for k in range(k_n):
                    acc += abs(x[ci][wo * stride + k] - w[k][ci][co])
            out[co][wo] = -acc
    return out


def golden_model():
    """Four-bin model whose full trace is worked out by hand.

    counts [0, 2, 4, 1] normalise to [0, .5, 1, .25];
    stem (K=2, w=[0, 1], scale 1, shift 1, ReLU)        -> [.5, .5, 0]
    block A (K=1, w=.5, identity, ReLU)                  -> [0, 0, 0]
    block B (K=1, w=0, scale 2, shift .25)               -> [.25, .25, .25]
    skip add + ReLU                                      -> [.75, .75, .25]
    tail (K=2, w=[1, 0], scale .5, shift 1, ReLU)        -> [.5, .75]
    head a (w=[0, 0], scale -2, shift 0):  -1.25 * -2   =  2.5
    head i (w=[1, 1], scale 4, shift 6):   -0.75 * 4 + 6 = 3.0
    """
    stem = [AdderConvLayer(np.array([[[0.0]], [[1.0]]]), 1, np.array([1.0]), np.array([1.0]))]
    block = [
        AdderConvLayer(np.array([[[0.5]]]), 1, np.array([1.0]), np.array([0.0])),
        AdderConvLayer(np.array([[[0.0]]]), 1, np.array([2.0]), np.array([0.25]), relu=False),
    ]
    tail = [AdderConvLayer(np.array([[[1.0]], [[0.0]]]), 1, np.array([0.5]), np.array([1.0]))]
    heads = [
        [AdderDenseLayer(np.zeros((2, 1)), 1, np.array([-2.0]), np.array([0.0]), relu=False)],
        [AdderDenseLayer(np.ones((2, 1)), 1, np.array([4.0]), np.array([6.0]), relu=False)],
    ]
    return NetworkModel("golden", 4, stem, block, tail, heads)


def micro_model(seed=0, input_length=24, with_bn=True):
    """Random model exercising every layer kind: stem, residual block, tail, two heads."""
    rng = np.random.default_rng(seed)

    def bn(n):
        return BnParams(rng.uniform(0.5, 1.5, n), rng.normal(0, 0.3, n), rng.normal(0, 0.3, n),
                        rng.uniform(0.5, 2.0, n))

    def conv(k, ci, co, s, relu=True):
        layer = AdderConvLayer(rng.normal(0, 0.5, (k, ci, co)), s, relu=relu)
        if with_bn:
            layer.bn = bn(co)
        else:
            layer.scale, layer.shift = rng.uniform(0.2, 1.0, co), rng.normal(0, 0.5, co)
        return layer

    def dense(i, o, relu):
        layer = AdderDenseLayer(rng.normal(0, 0.5, (i, o)), relu=relu)
        if with_bn:
            layer.bn = bn(o)
        else:
            layer.scale, layer.shift = rng.uniform(0.2, 1.0, o), rng.normal(0, 0.5, o)
        return layer

    stem = [conv(3, 1, 2, 2)]
    w = (input_length - 3) // 2 + 1
    block = [conv(3, 2, 2, 1), conv(3, 2, 2, 1, relu=False)]
    w -= 4
    tail = [conv(3, 2, 3, 2)]
    w = (w - 3) // 2 + 1
    flat = 3 * w
    heads = [[dense(flat, 2, True), dense(2, 1, False)] for _ in range(2)]
    return NetworkModel("micro", input_length, stem, block, tail, heads)


def fd_rel_err(a, b, floor):
    """Relative disagreement; differences within the finite-difference noise floor count as zero."""
    diff = abs(a - b)
    return 0.0 if diff <= floor else diff / max(abs(a), abs(b))


# acceptance outcomes, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []
