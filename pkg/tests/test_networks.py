import numpy as np
import pytest

from avpipe.metrics import frame_hit_rate, sequence_accuracy_proxy
from avpipe.networks import (
    BlockMatchingFlow,
    GroundTruthFlow,
    LinearRefinedFlow,
    QualityHead,
    ToyFeatureNet,
    calibrate_detector,
    detection_loss_and_grads,
    detection_targets,
    downsample_gray,
    make_reference_networks,
    propagation_stats,
)
from avpipe.synth import GeneratorSpec, generate_sequence, deteriorated_spec
from avpipe.warpcore import ContractViolation


class TestFeatureNet:
    def test_output_grid_and_stride(self):
        net = ToyFeatureNet.seeded(0)
        assert net.overall_stride == 2
        assert net.out_grid(32, 32) == (16, 16)
        assert net.out_channels == 16

    def test_forward_layers_chain(self, rng):
        net = ToyFeatureNet.seeded(0)
        image = rng.uniform(size=(16, 16, 3))
        layers = net.forward_layers(image)
        assert [fm.grid for fm in layers] == [(16, 16), (8, 8), (8, 8)]
        assert np.array_equal(layers[-1].data, net.forward(image).data)
        assert [fm.layer_id for fm in layers] == [0, 1, 2]

    def test_deterministic_per_seed(self, rng):
        image = rng.uniform(size=(16, 16, 3))
        a = ToyFeatureNet.seeded(4).forward(image)
        b = ToyFeatureNet.seeded(4).forward(image)
        assert np.array_equal(a.data, b.data)

    def test_macs_positive_and_stride_aware(self):
        net = ToyFeatureNet.seeded(0)
        full = net.total_macs(32, 32)
        assert full > 0
        assert net.total_macs(16, 16) < full


class TestDetectorCalibration:
    def test_calibrated_detector_beats_chance(self):
        seq = generate_sequence(deteriorated_spec(num_frames=12), seed=100)
        nets = make_reference_networks(seq=seq, seed=0)
        dets = [nets.det.detect(nets.feat.forward(f)) for f in seq.frames]
        proxy = sequence_accuracy_proxy(dets, seq.boxes)
        assert proxy >= 0.5

    def test_detection_targets_mark_shape_cells(self):
        gt = np.array([[4.0, 4.0, 12.0, 12.0]])
        t_obj, t_box, pos = detection_targets(gt, (8, 8), cell_stride=2)
        assert t_obj[3, 3] == 1.0 and pos[3, 3]
        assert t_obj[0, 0] == 0.0
        # box height/width in cell units
        assert t_box[3, 3, 2] == 4.0 and t_box[3, 3, 3] == 4.0

    def test_empty_ground_truth_targets(self):
        t_obj, t_box, pos = detection_targets(np.zeros((0, 4)), (4, 4), 2)
        assert not pos.any() and t_obj.sum() == 0.0

    def test_loss_decreases_toward_targets(self, rng):
        seq = generate_sequence(deteriorated_spec(num_frames=6), seed=101)
        nets = make_reference_networks(seq=seq, seed=0)
        fmap = nets.feat.forward(seq.frames[0])
        targets = detection_targets(seq.boxes[0], fmap.grid, nets.det.cell_stride)
        loss_cal, _ = detection_loss_and_grads(nets.det, fmap.data, targets)
        uncal = make_reference_networks(seq=seq, seed=0, calibrated=False)
        loss_rand, _ = detection_loss_and_grads(uncal.det, fmap.data, targets)
        assert loss_cal < loss_rand


class TestFlowEstimators:
    def test_ground_truth_flow_matches_generator(self):
        seq = generate_sequence(deteriorated_spec(num_frames=8), seed=5)
        nets = make_reference_networks(seq=seq, seed=0)
        res = nets.flow.estimate(seq.frames[0], seq.frames[3], 0, 3)
        want = seq.backward_flow_feature(3, 0, 16, 16)
        assert np.array_equal(res.motion.data, want.data)

    def test_block_matching_recovers_global_shift(self):
        spec = GeneratorSpec(
            height=32, width=32, num_frames=5, num_shapes=0,
            max_speed=0.0, global_velocity=(0.0, 2.0), background_amp=0.4,
        )
        seq = generate_sequence(spec, seed=6)
        bm = BlockMatchingFlow(QualityHead(), (16, 16), search=3)
        res = bm.estimate(seq.frames[1], seq.frames[2], 1, 2)
        # 2 px image shift = 1 feature px backward displacement of -1
        interior = res.motion.data[4:12, 4:12, 1]
        assert np.median(interior) == -1.0

    def test_refined_flow_fits_identity_on_exact_base(self):
        seq = generate_sequence(deteriorated_spec(num_frames=8), seed=5)
        head = QualityHead()
        gt = GroundTruthFlow(seq, head, (16, 16))
        refined = LinearRefinedFlow.fit(gt, head, seq, (16, 16), pairs=[(0, 2), (2, 5)])
        assert np.allclose(refined.gain, 1.0, atol=1e-6)
        assert np.allclose(refined.offset, 0.0, atol=1e-6)

    def test_quality_drops_across_cut(self):
        spec = GeneratorSpec(height=32, width=32, num_frames=10, max_speed=0.0, cut_frames=(5,))
        seq = generate_sequence(spec, seed=2)
        nets = make_reference_networks(seq=seq, seed=0)
        quiet = nets.flow.estimate(seq.frames[0], seq.frames[2], 0, 2)
        cut = nets.flow.estimate(seq.frames[4], seq.frames[6], 4, 6)
        assert quiet.quality.q.mean() > cut.quality.q.mean()
        assert np.mean(cut.quality.q <= 0.0) > 0.2

    def test_downsample_requires_divisible_grid(self):
        with pytest.raises(ContractViolation):
            downsample_gray(np.zeros((30, 30, 3)), 16, 16)


class TestBundle:
    def test_gt_flow_requires_sequence(self):
        with pytest.raises(ContractViolation):
            make_reference_networks(seq=None, seed=0, flow_kind="gt")

    def test_unknown_flow_kind_rejected(self):
        seq = generate_sequence(deteriorated_spec(num_frames=4), seed=0)
        with pytest.raises(ContractViolation):
            make_reference_networks(seq=seq, seed=0, flow_kind="magic")

    def test_bundle_determinism(self):
        seq = generate_sequence(deteriorated_spec(num_frames=4), seed=0)
        a = make_reference_networks(seq=seq, seed=1)
        b = make_reference_networks(seq=seq, seed=1)
        assert np.array_equal(a.det.w_obj, b.det.w_obj)
        assert np.array_equal(np.asarray(a.projector.matrix), np.asarray(b.projector.matrix))
