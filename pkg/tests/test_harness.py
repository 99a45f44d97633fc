import json
import logging

import numpy as np
import pandas as pd
import pytest

from minifsl.calibration import CalibrationConfig
from minifsl.episodes import (
    EpisodeSpec,
    FeatureSet,
    SplitSpec,
    sample_episode,
    synth_gaussian_dataset,
    synth_image_dataset,
)
from minifsl.errors import EmptySet, EpisodeFailed, HistoryUnavailable, InfeasibleEpisode
from minifsl.harness import (
    ABLATION_COLUMNS,
    CIPA_ROWS,
    DEFAULT_M_VALUES,
    TRAIN_VARIANTS,
    AblationGrid,
    EvalReport,
    TrainSetup,
    accuracy,
    evaluate,
    export_trajectories,
    mean_ci95,
    read_trajectories,
    run_ablation,
    trace_episode,
    unlabeled_sweep,
)
from minifsl.hct import TrainConfig
from minifsl.numerics import RngStream, derive_stream
from minifsl.protoinference import Distance, InferenceConfig, Mode, Prototypes, Strategy
from minifsl.reporters import EvalLogReporter

SPEC = EpisodeSpec(n_way=5, k_shot=1, q_query=15)
PN = InferenceConfig(strategy=Strategy.PROTONET)
CIPA = InferenceConfig()


@pytest.fixture(scope="module")
def features():
    # shifted away from the origin so the power transform applies
    return synth_gaussian_dataset(RngStream(0), 10, 40, 16, spread=1.0, noise=0.4, relu=True, offset=3.0)


class TestScoring:
    def test_accuracy(self):
        assignment = np.array([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4]])
        assert accuracy(assignment, [0, 1, 1]) == pytest.approx(2.0 / 3.0)

    def test_ties_go_to_lowest_class(self):
        assert accuracy(np.array([[0.5, 0.5]]), [0]) == 1.0
        assert accuracy(np.array([[0.25, 0.5, 0.25, 0.0]]), [1]) == 1.0

    def test_no_queries(self):
        with pytest.raises(EmptySet):
            accuracy(np.empty((0, 3)), [])

    def test_mean_ci95(self):
        mean, ci = mean_ci95([0.0, 1.0])
        assert mean == 0.5
        assert ci == pytest.approx(1.96 * np.sqrt(0.5) / np.sqrt(2.0))
        assert mean_ci95([0.7]) == (0.7, 0.0)
        assert mean_ci95([0.4] * 10)[1] == pytest.approx(0.0, abs=1e-12)
        with pytest.raises(EmptySet):
            mean_ci95([])


class TestEvaluate:
    def test_noise_free_data(self):
        fs = synth_gaussian_dataset(RngStream(1), 8, 20, 16, noise=0.0, relu=True, offset=3.0)
        for infer in (PN, CIPA):
            report = evaluate(fs, SPEC, CalibrationConfig(), infer, n_episodes=20, seed=3)
            assert report.mean_accuracy == 1.0
            assert report.ci95_halfwidth == 0.0

    @pytest.mark.parametrize("workers", [4, 8])
    def test_worker_count_does_not_change_report(self, features, workers):
        a = evaluate(features, SPEC, CalibrationConfig(), CIPA, n_episodes=40, seed=5, workers=1)
        b = evaluate(features, SPEC, CalibrationConfig(), CIPA, n_episodes=40, seed=5, workers=workers)
        assert a.to_json() == b.to_json()
        assert "wall_time" not in json.loads(a.to_json())
        assert "wall_time" in a.to_dict(include_timing=True)

    def test_seed_changes_results(self, features):
        a = evaluate(features, SPEC, CalibrationConfig(), PN, n_episodes=30, seed=1, keep_per_episode=True)
        b = evaluate(features, SPEC, CalibrationConfig(), PN, n_episodes=30, seed=2, keep_per_episode=True)
        assert len(a.per_episode) == 30
        assert a.per_episode != b.per_episode
        assert a.fingerprint != b.fingerprint

    def test_report_fields(self, features):
        report = evaluate(features, SPEC, CalibrationConfig(), CIPA, n_episodes=10, seed=0)
        assert isinstance(report, EvalReport)
        assert report.strategy == "cipa"
        assert report.n_episodes == 10
        assert report.master_seed == 0
        assert report.per_episode is None
        assert report.pseudo_label_accuracy is None
        assert 0.0 <= report.mean_accuracy <= 1.0

    def test_failed_episode_index(self):
        fs = synth_gaussian_dataset(RngStream(2), 6, 20, 4, relu=True, offset=3.0)
        keep = (fs.labels != 5) | (np.arange(len(fs)) % 20 < 4)
        fs = FeatureSet(fs.features[keep], fs.labels[keep])
        spec = EpisodeSpec(n_way=3, k_shot=1, q_query=5)
        first = None
        for i in range(100):
            try:
                sample_episode(fs, spec, derive_stream(RngStream(9), i))
            except InfeasibleEpisode:
                first = i
                break
        assert first is not None
        for workers in (1, 3):
            with pytest.raises(EpisodeFailed) as info:
                evaluate(fs, spec, CalibrationConfig(), PN, n_episodes=first + 5, seed=9, workers=workers)
            assert info.value.episode_index == first
            assert isinstance(info.value.cause, InfeasibleEpisode)

    def test_semi_supervised(self, features, caplog):
        spec = EpisodeSpec(n_way=5, k_shot=1, q_query=10, m_unlabeled=8)
        infer = InferenceConfig(mode=Mode.SEMI_SUPERVISED)
        with caplog.at_level(logging.WARNING, logger="minifsl.protoinference"):
            report = evaluate(features, spec, CalibrationConfig(), infer, n_episodes=10, seed=0)
        assert "not centered" in caplog.text
        assert 0.0 <= report.pseudo_label_accuracy <= 1.0

    def test_imbalanced_queries(self, features):
        spec = EpisodeSpec(n_way=3, k_shot=1, imbalance=(2, 6, 12))
        report = evaluate(features, spec, CalibrationConfig(), CIPA, n_episodes=20, seed=0)
        assert 0.0 <= report.mean_accuracy <= 1.0

    def test_reporter(self, features, capsys):
        evaluate(features, SPEC, CalibrationConfig(), PN, n_episodes=10, reporter=EvalLogReporter(10, 5))
        out = capsys.readouterr().out
        assert out.count("\n# ") == 2

    @pytest.mark.slow
    def test_interval_shrinks_with_episodes(self, features):
        small = evaluate(features, SPEC, CalibrationConfig(), PN, n_episodes=200, seed=0)
        large = evaluate(features, SPEC, CalibrationConfig(), PN, n_episodes=800, seed=0)
        assert 1.6 <= small.ci95_halfwidth / large.ci95_halfwidth <= 2.4


# Accuracies measured over 1000 episodes (seed 0) on the benchmark set below
BALANCED_ACCURACY = {"protonet": 0.7449, "cipa": 0.9439, "cipa-raw": 0.7974}
# Query counts (25, 10, 5, 3, 2). Centering the query set by its own mean
# pulls the calibrated space towards the largest class, which costs plain
# prototypes about 8 points; adaptation then recovers about 4.5 of them.
IMBALANCED_ACCURACY = {"protonet": 0.7484, "protonet-calibrated": 0.6705, "cipa": 0.7161}
IMBALANCE = (25, 10, 5, 3, 2)


@pytest.fixture(scope="module")
def benchmark():
    # same set as scratch/benchmark.py
    return synth_gaussian_dataset(RngStream(0), 20, 100, 16, noise=0.27, offset=3.0)


@pytest.mark.slow
class TestBenchmark:
    def run(self, fs, infer, calib=None, spec=SPEC, n_episodes=1000):
        return evaluate(fs, spec, calib or CalibrationConfig(), infer, n_episodes=n_episodes, seed=0).mean_accuracy

    def test_adaptation_beats_prototypes(self, benchmark):
        pn = self.run(benchmark, InferenceConfig(strategy=Strategy.PROTONET, distance=Distance.NEG_EUCLIDEAN))
        cipa = self.run(benchmark, CIPA)
        raw = self.run(benchmark, CIPA, CalibrationConfig.off())
        assert 0.65 <= pn <= 0.75
        assert cipa >= pn + 0.03
        assert cipa >= raw + 0.01
        assert pn == pytest.approx(BALANCED_ACCURACY["protonet"], abs=0.02)
        assert cipa == pytest.approx(BALANCED_ACCURACY["cipa"], abs=0.02)
        assert raw == pytest.approx(BALANCED_ACCURACY["cipa-raw"], abs=0.02)

    def test_iterations_beat_calibrated_prototypes(self, benchmark):
        frozen = self.run(benchmark, InferenceConfig(n_iter=0))
        adapted = self.run(benchmark, InferenceConfig(n_iter=20))
        assert adapted >= frozen + 0.03

    def test_imbalanced_queries(self, benchmark):
        spec = EpisodeSpec(n_way=5, k_shot=1, imbalance=IMBALANCE)
        calibrated_pn = self.run(benchmark, InferenceConfig(n_iter=0), spec=spec)
        cipa = self.run(benchmark, CIPA, spec=spec)
        pn = self.run(benchmark, InferenceConfig(strategy=Strategy.PROTONET, distance=Distance.NEG_EUCLIDEAN), spec=spec)
        assert cipa >= calibrated_pn + 0.02
        assert calibrated_pn == pytest.approx(IMBALANCED_ACCURACY["protonet-calibrated"], abs=0.02)
        assert cipa == pytest.approx(IMBALANCED_ACCURACY["cipa"], abs=0.02)
        assert pn == pytest.approx(IMBALANCED_ACCURACY["protonet"], abs=0.02)

    def test_one_soft_kmeans_step(self, benchmark):
        pn = self.run(benchmark, InferenceConfig(strategy=Strategy.PROTONET, distance=Distance.NEG_EUCLIDEAN))
        one = self.run(benchmark, InferenceConfig(strategy=Strategy.SEMIPN, distance=Distance.NEG_EUCLIDEAN, n_iter=1))
        five = self.run(benchmark, InferenceConfig(strategy=Strategy.SEMIPN, distance=Distance.NEG_EUCLIDEAN, n_iter=5))
        assert one >= pn
        assert five >= one - 0.01

    def test_workers_do_not_change_report(self, benchmark):
        reports = [
            evaluate(benchmark, SPEC, CalibrationConfig(), CIPA, n_episodes=200, seed=0, workers=w).to_json()
            for w in (1, 4, 8)
        ]
        assert reports[0] == reports[1] == reports[2]



class TestAblation:
    def test_cells_without_training(self):
        grid = AblationGrid(calib_rows=CIPA_ROWS, m_values=(None, 4), taus=(5.0, 15.0))
        assert grid.training_cells() == [(None, None)]
        assert len(list(grid.cells())) == (1 + 2 * len(CIPA_ROWS)) * 2 * 2

    def test_alphas_only_for_mixing_variants(self):
        grid = AblationGrid(train_variants=TRAIN_VARIANTS, alphas=(0.5, 2.0))
        names = [(v.name, a) for v, a in grid.training_cells()]
        assert ("ce", None) in names
        assert ("ce+rot", None) in names
        assert ("ce+hct", 0.5) in names and ("ce+hct", 2.0) in names
        assert ("ce+mm+rot", 2.0) in names
        assert len(names) == 2 + 4 * 2

    def test_failing_cells_are_recorded(self, tmp_path):
        # negative features break the power transform but not plain prototypes
        fs = synth_gaussian_dataset(RngStream(3), 6, 20, 4)
        grid = AblationGrid(strategies=(Strategy.PROTONET, Strategy.CIPA))
        out = tmp_path / "ablation.csv"
        reports, table = run_ablation(grid, fs, SPEC, CIPA, n_episodes=5, out=out)
        assert list(table.columns) == ABLATION_COLUMNS
        assert len(reports) == 1
        pn, cipa = table.iloc[0], table.iloc[1]
        assert pn["error"] == ""
        assert "failed" in cipa["error"]
        assert np.isnan(cipa["mean_accuracy"])
        assert out.exists()

    def test_m_values_switch_to_semi_supervised(self, features):
        _, table = unlabeled_sweep(features, SPEC, CIPA, m_values=(2, 4), n_episodes=5)
        assert table["m_unlabeled"].tolist() == [2, 4, 2, 4]
        assert table["strategy"].tolist() == ["semipn", "semipn", "cipa", "cipa"]
        assert table["pseudo_label_accuracy"].notna().all()
        assert (table["error"] == "").all()

    def test_training_variants(self):
        raw = synth_gaussian_dataset(RngStream(4), 10, 20, 8, spread=3.0, noise=0.5)
        split = SplitSpec.from_counts(5, 0, 5)
        setup = TrainSetup(
            base=split.select(raw, "base"),
            novel=split.select(raw, "novel"),
            model_kwargs={"hidden": (16,), "embed_dim": 8},
            train_config=TrainConfig(epochs=2, batch_size=25),
            seed=1,
        )
        grid = AblationGrid(
            train_variants=(TRAIN_VARIANTS[0], TRAIN_VARIANTS[2]),
            strategies=(Strategy.PROTONET,),
            alphas=(1.0, 2.0),
        )
        infer = InferenceConfig(distance=Distance.NEG_EUCLIDEAN)
        spec = EpisodeSpec(n_way=5, k_shot=1, q_query=5)
        reports, table = run_ablation(grid, None, spec, infer, n_episodes=5, train_setup=setup)
        assert table["train"].tolist() == ["ce", "ce+hct", "ce+hct"]
        assert table["alpha"].tolist()[1:] == [1.0, 2.0]
        assert (table["error"] == "").all()
        assert len({r.fingerprint for r in reports}) == 3

    def test_protonet_has_one_row(self, features):
        grid = AblationGrid(strategies=(Strategy.PROTONET, Strategy.CIPA), calib_rows=CIPA_ROWS)
        _, table = run_ablation(grid, features, SPEC, CIPA, n_episodes=3)
        assert table["calibration"].tolist() == ["-"] + [name for name, _, _ in CIPA_ROWS]
        assert table["strategy"].tolist() == ["protonet"] + ["cipa"] * len(CIPA_ROWS)
        assert (table["error"] == "").all()

    @pytest.mark.slow
    def test_more_unlabeled_does_not_hurt(self):
        fs = synth_gaussian_dataset(RngStream(5), 10, 40, 16, spread=1.0, noise=0.4, relu=True, offset=3.0)
        _, table = unlabeled_sweep(fs, SPEC, CIPA, m_values=(1, 16), strategies=(Strategy.CIPA,), n_episodes=300)
        acc = table["mean_accuracy"].tolist()
        assert acc[1] >= acc[0] - 0.01

    @pytest.mark.slow
    def test_full_unlabeled_sweep(self, tmp_path):
        fs = synth_gaussian_dataset(RngStream(8), 10, 150, 16, noise=0.27, offset=3.0)
        out = tmp_path / "sweep.csv"
        unlabeled_sweep(fs, SPEC, CIPA, n_episodes=50, out=out)
        table = pd.read_csv(out, keep_default_na=False)
        assert list(table.columns) == ABLATION_COLUMNS
        assert table["m_unlabeled"].tolist() == list(DEFAULT_M_VALUES) * 2
        assert table["strategy"].tolist() == ["semipn"] * 8 + ["cipa"] * 8
        assert (table["error"] == "").all()
        assert table["pseudo_label_accuracy"].astype(float).between(0.0, 1.0).all()

    @pytest.mark.slow
    def test_adaptation_helps_every_training_variant(self):
        raw = synth_image_dataset(RngStream(6), 20, 40, size=8, noise=0.3)
        split = SplitSpec.from_counts(10, 0, 10)
        setup = TrainSetup(
            base=split.select(raw, "base"),
            novel=split.select(raw, "novel"),
            model_kwargs={"hidden": (32,), "embed_dim": 16},
            train_config=TrainConfig(epochs=5, batch_size=50),
            seed=2,
        )
        grid = AblationGrid(train_variants=TRAIN_VARIANTS, strategies=(Strategy.PROTONET, Strategy.CIPA))
        infer = InferenceConfig(distance=Distance.NEG_EUCLIDEAN)
        _, table = run_ablation(grid, None, SPEC, infer, n_episodes=300, train_setup=setup)
        assert (table["error"] == "").all()
        acc = table.pivot(index="train", columns="strategy", values="mean_accuracy")
        assert sorted(acc.index) == sorted(v.name for v in TRAIN_VARIANTS)
        assert (acc["cipa"] >= acc["protonet"]).all()


class TestTrajectories:
    def test_export_and_read(self, features, tmp_path):
        spec = EpisodeSpec(n_way=3, k_shot=1, q_query=5)
        episode, calibrated, protos = trace_episode(features, spec, CalibrationConfig(), CIPA, seed=2)
        assert len(protos.history) == 21
        fn = tmp_path / "traj.csv"
        export_trajectories(episode, protos, fn, calibrated=calibrated)
        history, points = read_trajectories(fn)
        np.testing.assert_array_equal(history, np.array(protos.history))
        assert history.shape == (21, 3, 16)
        assert points["kind"].tolist() == ["support"] * 3 + ["query"] * 15
        assert (points["iteration"] == -1).all()
        coords = [c for c in points.columns if c.startswith("coord_")]
        np.testing.assert_array_equal(points[coords].to_numpy()[3:], calibrated.query_features)

    def test_rows_per_class(self, features, tmp_path):
        spec = EpisodeSpec(n_way=4, k_shot=2, q_query=3)
        episode, calibrated, protos = trace_episode(features, spec, CalibrationConfig(), CIPA)
        fn = tmp_path / "traj.csv"
        export_trajectories(episode, protos.history, fn)
        df = pd.read_csv(fn)
        counts = df[df["kind"] == "prototype"].groupby("class_id").size()
        assert counts.tolist() == [21] * 4

    def test_frozen_prototypes(self, features):
        infer = InferenceConfig(sigma=0.0)
        _, _, protos = trace_episode(features, SPEC, CalibrationConfig(), infer)
        for centers in protos.history:
            np.testing.assert_array_equal(centers, protos.history[0])

    def test_history_unavailable(self, features, tmp_path):
        episode = sample_episode(features, SPEC, RngStream(0))
        with pytest.raises(HistoryUnavailable):
            export_trajectories(episode, Prototypes(centers=np.zeros((5, 16))), tmp_path / "t.csv")
        with pytest.raises(HistoryUnavailable):
            export_trajectories(episode, [], tmp_path / "t.csv")
