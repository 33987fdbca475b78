#!/usr/bin/env python

"""
This is pytest for assoctrack.common.tokenizer.
"""

import numpy as np
import pytest
import torch
from torch import nn
from hypothesis import assume, given, settings, strategies as st
from assoctrack.common.lineage import (FEATURE_CHANNELS, Detection,
                                       LineageGraph, Window)
from assoctrack.common.simulator import ellipse_inertia
from assoctrack.common.tokenizer import (AugmentConfig, FeatureStandardizer,
                                         FourierEncoder, augment_window,
                                         build_tokens, crop_window_tiles,
                                         encode_position, subsample_lineage,
                                         subsample_window, transform_detection,
                                         window_features)
from assoctrack.common.utils import FeatureError
from tests.conftest import make_det


def _inertia_of_points(points:np.ndarray) -> tuple:
    centered = points - points.mean(axis=0)
    cov = centered.T @ centered / len(points)
    return cov[0, 0], cov[1, 1], cov[0, 1]


def test_encode_position():
    """
    Check the origin encodes to zero sines and unit cosines.
    """
    encoder = FourierEncoder(n_freq=8, scale=100., seed=1)
    code = encode_position(encoder, (0., 0.))
    assert code.shape == (16,)
    torch.testing.assert_close(code[:8], torch.zeros(8))
    torch.testing.assert_close(code[8:], torch.ones(8))
    assert encode_position(encoder, (12.5, -3.)).shape == (16,)
    other = FourierEncoder(n_freq=8, scale=100., seed=1)
    torch.testing.assert_close(encode_position(other, (5., 7.)),
                               encode_position(encoder, (5., 7.)))


def test_build_tokens_points_only():
    """
    Check points-only tokens are the projected position encodings.
    """
    encoder = FourierEncoder(n_freq=4, seed=0)
    projection = nn.Linear(8, 16)
    window = Window(0, 2, [make_det(1, 0, 1., 2.), make_det(2, 1, 3., 4.)])
    batch = build_tokens(window, encoder, FeatureStandardizer(()),
                         projection, 30.)
    expected = projection(encoder(torch.tensor(window.positions,
                                                dtype=torch.float32)))
    torch.testing.assert_close(batch.tokens, expected)
    assert batch.frames.tolist() == [0, 1]


def test_build_tokens_full_features():
    window = Window(0, 2, [make_det(1, 0, 1., 2.), make_det(2, 1, 3., 4.)])
    feats = window_features(window, FEATURE_CHANNELS)
    assert feats.shape == (2, 5)
    assert feats[0].tolist() == [100., 1., 10., 8., 1.]
    encoder = FourierEncoder(n_freq=4, seed=0)
    projection = nn.Linear(8 + 5, 16)
    batch = build_tokens(window, encoder,
                         FeatureStandardizer(FEATURE_CHANNELS),
                         projection, 30.)
    assert batch.tokens.shape == (2, 16)


def test_build_tokens_empty():
    encoder = FourierEncoder(n_freq=4, seed=0)
    batch = build_tokens(Window(0, 2, []), encoder,
                         FeatureStandardizer(()), nn.Linear(8, 16), 30.)
    assert len(batch) == 0
    assert batch.tokens.shape == (0, 16)


def test_build_tokens_rowwise():
    """
    Check every token depends on its own detection only.
    """
    torch.manual_seed(0)
    encoder = FourierEncoder(n_freq=4, seed=0)
    projection = nn.Linear(8 + 5, 16)
    standardizer = FeatureStandardizer(FEATURE_CHANNELS)
    dets = [make_det(1, 0, 1., 2.), make_det(2, 0, 9., 4., area=70.),
            make_det(3, 1, 5., 5.)]
    batch = build_tokens(Window(0, 2, dets), encoder, standardizer,
                         projection, 30.)
    for row, det in enumerate(dets):
        single = build_tokens(Window(0, 2, [det]), encoder, standardizer,
                              projection, 30.)
        torch.testing.assert_close(batch.tokens[row], single.tokens[0])


def test_window_features_missing_channel():
    window = Window(0, 2, [Detection(id=4, t=0, p=(0., 0.),
                                     z={'area': 1.})])
    with pytest.raises(FeatureError) as err:
        window_features(window, ('area', 'intensity'))
    assert err.value.detection_id == 4
    assert err.value.channel == 'intensity'


def test_feature_standardizer():
    dets = [make_det(1, 0, 0., area=10.), make_det(2, 0, 0., area=30.)]
    standardizer = FeatureStandardizer.fit(dets, ('area', 'intensity'))
    np.testing.assert_allclose(standardizer.mean, [20., 1.])
    np.testing.assert_allclose(standardizer.std, [10., 1.])
    restored = FeatureStandardizer.from_dict(standardizer.to_dict())
    np.testing.assert_allclose(
            restored.transform(np.array([[30., 1.]])), [[1., 0.]])
    with pytest.raises(ValueError):
        FeatureStandardizer(('volume',))


def test_augment_rotation_is_isometry():
    """
    Check a pure rotation keeps areas and pairwise distances.
    """
    config = AugmentConfig(flip=False, rotate=True, shift=0., shear=0.,
                           scale=(1., 1.), intensity_shift=0.,
                           intensity_scale=(1., 1.), subsample=(1,))
    dets = [make_det(1, 0, 10., 20.), make_det(2, 0, 30., 5.),
            make_det(3, 1, 12., 22.)]
    window = Window(0, 2, dets)
    augmented = augment_window(window, np.random.default_rng(3), config)
    before = np.linalg.norm(window.positions[:, None]
                            - window.positions[None], axis=-1)
    after = np.linalg.norm(augmented.positions[:, None]
                           - augmented.positions[None], axis=-1)
    np.testing.assert_allclose(after, before, atol=1e-9)
    for old, new in zip(window.detections, augmented.detections):
        assert new.z['area'] == pytest.approx(old.z['area'])
        assert new.z['intensity'] == pytest.approx(old.z['intensity'])


def test_flip_mirrors_inertia():
    """
    Check an x-flip about the image center against a mirrored point pair.
    """
    width = 100.
    points = np.array([[30., 40.], [34., 43.], [31., 45.]])
    ixx, iyy, ixy = _inertia_of_points(points)
    det = Detection(id=1, t=0, p=tuple(points.mean(axis=0)),
                    z={'area': 3., 'ixx': ixx, 'iyy': iyy, 'ixy': ixy})
    flipped = transform_detection(det, np.diag([-1., 1.]), np.zeros(2),
                                  np.array([width / 2., 50.]))
    mirrored = points * [-1., 1.] + [width, 0.]
    m_ixx, m_iyy, m_ixy = _inertia_of_points(mirrored)
    assert flipped.p[0] == pytest.approx(width - det.p[0])
    assert flipped.p[1] == pytest.approx(det.p[1])
    assert flipped.z['ixx'] == pytest.approx(m_ixx)
    assert flipped.z['iyy'] == pytest.approx(m_iyy)
    assert flipped.z['ixy'] == pytest.approx(m_ixy)
    assert flipped.z['ixy'] == pytest.approx(-ixy)
    assert flipped.z['area'] == pytest.approx(3.)


def test_temporal_subsampling():
    """
    Check subsampling by 2 keeps every second frame and composes edges.
    """
    dets = [ make_det(k + 1, k, float(k)) for k in range(6) ]
    window = Window(0, 6, dets)
    sub = subsample_window(window, 2)
    assert sub.span == 3
    assert sub.ids.tolist() == [1, 3, 5]
    assert sub.frames.tolist() == [0, 1, 2]
    chain = LineageGraph(nodes=range(1, 7),
                         edges=[ (k, k + 1) for k in range(1, 6) ])
    graph, frames = subsample_lineage(chain, { d.id: d.t for d in dets }, 2)
    assert graph.edges == [(1, 3), (3, 5)]
    assert frames == {1: 0, 3: 1, 5: 2}


@settings(max_examples=50, deadline=None)
@given(st.floats(-2., 2.), st.floats(-2., 2.), st.floats(-2., 2.),
       st.floats(-2., 2.), st.floats(1., 3.), st.floats(0., np.pi))
def test_inertia_stays_psd(a, b, c, d, elongation, angle):
    """
    Check the inertia tensor stays positive semidefinite under affines.
    """
    linear = np.array([[a, b], [c, d]])
    det_l = abs(np.linalg.det(linear))
    assume(0.5 <= det_l <= 2.)
    ixx, iyy, ixy = ellipse_inertia(80., elongation, angle)
    det = Detection(id=1, t=0, p=(5., 5.),
                    z={'area': 80., 'ixx': ixx, 'iyy': iyy, 'ixy': ixy})
    new = transform_detection(det, linear, np.zeros(2), np.zeros(2))
    tensor = np.array([[new.z['ixx'], new.z['ixy']],
                       [new.z['ixy'], new.z['iyy']]])
    assert np.linalg.eigvalsh(tensor).min() >= -1e-9 * tensor.trace()
    assert new.z['area'] == pytest.approx(det_l * 80.)


def test_crop_window_tiles():
    """
    Check tiles respect the token budget and cover all detections.
    """
    dets = [ make_det(k + 1, k % 2, 10. * k, 0.) for k in range(20) ]
    window = Window(0, 2, dets)
    tiles = crop_window_tiles(window, 8, 15.)
    assert all(len(tile) <= 8 for tile in tiles)
    covered = { det_id for tile in tiles for det_id in tile.ids.tolist() }
    assert covered == set(range(1, 21))
    assert crop_window_tiles(window, 100, 15.) == [window]
