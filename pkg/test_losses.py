#!/usr/bin/env python3
"""
Tests for the commitment, spatial and temporal losses and their weighting.
"""

import numpy as np
import pytest

from skelseg import autodiff as ad
from skelseg.errors import ConfigError, ShapeError
from skelseg.hvq import Codebook, CodebookHierarchy, HvqConfig, quantize_hierarchy
from skelseg.losses import (
    LossReport, LossWeights, commitment, commitment_terms, make_report, spatial_recon, temporal_recon, total,
    weighted_total
)


def _pair(distance):
    """One frame, two joints in 3-D, `distance` apart along x"""
    s = np.zeros((1, 3, 1, 2))
    s[0, 0, 0, 1] = distance
    return s


class TestCommitment:
    def test_identity_is_zero(self, rng):
        x = ad.parameter(rng.normal(size=(4, 3)))
        assert commitment(x, x.data.copy()).item() == 0.0

    def test_hand_value(self):
        assert commitment(ad.parameter([[1.0, 0.0]]), np.array([[0.0, 0.0]])).item() == 1.0

    def test_gradient_only_reaches_inputs(self, rng):
        x = ad.parameter(rng.normal(size=(3, 2)))
        q = ad.parameter(rng.normal(size=(3, 2)))
        ad.backward(commitment(x, q))
        np.testing.assert_allclose(x.grad, 2.0 * (x.data - q.data))
        assert q.grad is None

    def test_padding_weights(self):
        x = ad.parameter([[1.0, 1.0], [2.0, 2.0]])
        weights = np.array([[1.0, 1.0], [0.0, 0.0]])
        assert commitment(x, np.zeros((2, 2)), weights).item() == 2.0

    def test_finite_differences(self, rng):
        x = ad.parameter(rng.normal(size=(5, 4)))
        q = rng.normal(size=(5, 4))
        assert ad.check_gradients(lambda: commitment(x, q), [x])

    def test_terms_per_level(self, rng):
        z = Codebook.from_prototypes(np.array([[0.0], [1.0], [4.0], [6.0]]))
        a = Codebook.from_prototypes(np.array([[0.4], [3.0]]))
        hierarchy = CodebookHierarchy(HvqConfig(num_actions=2), [z, a])
        patches = ad.parameter([[0.9], [3.8]])
        commit_z, commit_a = commitment_terms(patches, quantize_hierarchy(patches, hierarchy))
        assert commit_z.item() == pytest.approx(0.1 ** 2 + 0.2 ** 2)
        assert commit_a.item() == pytest.approx(0.6 ** 2 + 1.0 ** 2)

    def test_flat_hierarchy_has_no_action_commitment(self, rng):
        cb = Codebook.from_prototypes(rng.normal(size=(3, 2)))
        hierarchy = CodebookHierarchy(HvqConfig(num_actions=3, levels=1), [cb])
        patches = ad.parameter(rng.normal(size=(4, 2)))
        commit_z, commit_a = commitment_terms(patches, quantize_hierarchy(patches, hierarchy))
        assert commit_z.item() > 0.0
        assert commit_a.item() == 0.0


class TestSpatial:
    def test_identity_is_zero(self, rng):
        s = rng.normal(size=(2, 3, 5, 4))
        assert spatial_recon(s, ad.parameter(s)).item() == 0.0

    def test_hand_value(self):
        assert spatial_recon(_pair(1.0), ad.parameter(_pair(2.0))).item() == 4.5

    def test_translation_invariance(self, rng):
        s = rng.normal(size=(1, 3, 6, 5))
        p = rng.normal(size=(1, 3, 6, 5))
        shift = rng.normal(size=(1, 3, 1, 1))
        assert spatial_recon(s, ad.parameter(s + shift)).item() == pytest.approx(0.0, abs=1e-9)
        assert spatial_recon(s, ad.parameter(p + shift)).item() == pytest.approx(
            spatial_recon(s, ad.parameter(p)).item(), abs=1e-9)

    def test_frame_mask_excludes_frames(self, rng):
        s = rng.normal(size=(1, 3, 4, 3))
        p = s.copy()
        p[:, :, 3] += rng.normal(size=(3, 3))
        mask = np.array([[True, True, True, False]])
        assert spatial_recon(s, ad.parameter(p), mask).item() == pytest.approx(0.0, abs=1e-12)
        assert spatial_recon(s, ad.parameter(p)).item() > 0.0

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            spatial_recon(rng.normal(size=(1, 3, 4, 3)), ad.parameter(rng.normal(size=(1, 3, 5, 3))))

    def test_finite_differences(self, rng):
        s = rng.normal(size=(1, 3, 4, 3))
        p = ad.parameter(rng.normal(size=(1, 3, 4, 3)))
        assert ad.check_gradients(lambda: spatial_recon(s, p), [p])


class TestTemporal:
    def test_identity_is_zero(self):
        assert temporal_recon(np.array([[0.0, 1.0]]), ad.parameter([[0.0, 1.0]])).item() == 0.0

    def test_hand_value(self):
        assert temporal_recon(np.array([[0.0, 1.0]]), ad.parameter([[0.5, 0.5]])).item() == 0.25

    def test_finite_differences(self, rng):
        p = ad.parameter(rng.normal(size=(1, 4)))
        assert ad.check_gradients(lambda: temporal_recon(np.array([[0.0, 1 / 3, 2 / 3, 1.0]]), p), [p])


class TestWeighting:
    def test_weighted_sum(self):
        assert total(LossReport(2.0, 3.0, 10.0, 4.0), LossWeights()) == pytest.approx(5.81, abs=1e-12)

    def test_all_zero_weights(self):
        zero = LossWeights(0.0, 0.0, 0.0)
        assert total(LossReport(2.0, 3.0, 10.0, 4.0), zero) == 0.0
        parts = [ad.parameter(v) for v in (2.0, 3.0, 10.0, 4.0)]
        assert weighted_total(*parts, zero).item() == 0.0

    def test_differentiable_total_matches(self):
        parts = [ad.parameter(v) for v in (2.0, 3.0, 10.0, 4.0)]
        assert weighted_total(*parts, LossWeights()).item() == pytest.approx(5.81, abs=1e-12)

    @pytest.mark.parametrize("field,silent", [("lambda_commit", (0, 1)), ("lambda_spat", (2,)),
                                              ("lambda_temp", (3,))])
    def test_zero_weight_removes_gradient(self, field, silent):
        parts = [ad.parameter(v) for v in (2.0, 3.0, 10.0, 4.0)]
        weights = LossWeights(**{field: 0.0})
        ad.backward(weighted_total(*parts, weights))
        for position, part in enumerate(parts):
            if position in silent:
                assert part.grad is None
            else:
                assert part.grad is not None and part.grad != 0.0

    def test_negative_weight_rejected(self):
        with pytest.raises(ConfigError) as info:
            LossWeights(lambda_temp=-1.0).validate()
        assert info.value.key == "loss.lambda_temp"


class TestReport:
    def test_make_report(self):
        parts = [ad.parameter(v) for v in (2.0, 3.0, 10.0, 4.0)]
        report = make_report(*parts, LossWeights())
        assert report.total == pytest.approx(5.81)
        assert report.is_finite()

    def test_sum_and_scale(self):
        r = (LossReport(1.0, 2.0, 3.0, 4.0, 5.0) + LossReport(1.0, 0.0, 1.0, 0.0, 1.0)).scaled(0.5)
        assert r == LossReport(1.0, 1.0, 2.0, 2.0, 3.0)

    def test_csv(self):
        assert LossReport.csv_header() == "step,commit_z,commit_a,spatial,temporal,total"
        assert LossReport(0.1, 0.0, 1.0, 2.0, 3.0).csv_row(7) == "7,0.1,0.0,1.0,2.0,3.0"

    def test_non_finite(self):
        assert not LossReport(spatial=float("nan")).is_finite()
