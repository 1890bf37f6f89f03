import numpy as np
import pytest

from memshare.commanalysis import (HEATMAP_CMAP, TraceMatrix, analyze, components_for_variance, heatmap_csv,
                                   heatmap_from_csv, heatmap_image, jacobi_eigh, orient, pca, phase_runs,
                                   read_trace_matrix, record_traces, render_heatmap, standardize01,
                                   write_trace_matrix)
from memshare.csvio import read_csv
from memshare.errors import ConfigurationError, DegenerateTraceError, IncompatibilityError
from memshare.rollout import episode_steps
from memshare.training import build_team
from tests.helpers import align_sign, power_iteration_eigh, tiny_env, tiny_train

# variance halves from one column to the next
COLUMN_SCALES = 2.0 ** -(np.arange(20) / 2.0)


def scaled_data(rng, rows=100):
    return rng.normal(size=(rows, len(COLUMN_SCALES))) * COLUMN_SCALES + rng.normal(size=len(COLUMN_SCALES))


def memory_team(task="SyncCN", variant="full", n_agents=2):
    return build_team(tiny_env(task, n_agents=n_agents), tiny_train("MD-MADDPG", variant=variant),
                      np.random.default_rng(0))


def test_jacobi_matches_reference_eigensolver(rng):
    for _ in range(10):
        a = rng.normal(size=(7, 7))
        sym = a + a.T
        values, vectors = jacobi_eigh(sym)
        reference = np.linalg.eigh(sym)[0][::-1]
        np.testing.assert_allclose(values, reference, atol=1e-10)
        np.testing.assert_allclose(sym @ vectors, vectors * values, atol=1e-9)
        np.testing.assert_allclose(vectors.T @ vectors, np.eye(7), atol=1e-12)


def test_jacobi_rejects_non_square():
    with pytest.raises(ConfigurationError):
        jacobi_eigh(np.zeros((2, 3)))


def test_pca_agrees_with_power_iteration():
    rng = np.random.default_rng(17)
    for _ in range(50):
        data = scaled_data(rng)
        assert data.shape == (100, 20)
        result = pca(data, k=3)
        centred = data - data.mean(axis=0)
        cov = centred.T @ centred / (len(data) - 1)
        values, vectors = power_iteration_eigh(cov, 3)
        np.testing.assert_allclose(result.ratios, values / np.trace(cov), rtol=1e-8)
        for component, reference in zip(result.components, vectors):
            np.testing.assert_allclose(component, align_sign(component, reference), atol=1e-7)


def test_rank_one_trace_has_one_component(rng):
    direction = np.array([0.0, 3.0, -4.0, 0.0]) / 5.0
    data = np.outer(rng.normal(size=40), direction) + np.array([1.0, 2.0, 3.0, 4.0])
    result = pca(data, k=2)
    assert result.ratios[0] == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(result.components[0], -direction, atol=1e-10)
    assert components_for_variance(result.all_ratios) == 1


def test_components_are_orthonormal_and_oriented(rng):
    result = pca(scaled_data(rng), k=4)
    np.testing.assert_allclose(result.components @ result.components.T, np.eye(4), atol=1e-12)
    for row in result.components:
        assert row[np.argmax(np.abs(row))] > 0
    assert result.all_ratios.sum() == pytest.approx(1.0)
    assert np.all(np.diff(result.all_ratios) <= 1e-15)
    np.testing.assert_allclose(result.scores.mean(axis=0), 0.0, atol=1e-12)


def test_pca_is_deterministic(rng):
    data = scaled_data(rng)
    a, b = pca(data), pca(data.copy())
    np.testing.assert_array_equal(a.components, b.components)
    np.testing.assert_array_equal(a.scores, b.scores)


def test_k_is_capped_at_width(rng):
    assert pca(rng.normal(size=(10, 2)), k=3).components.shape == (2, 2)
    with pytest.raises(ConfigurationError):
        pca(rng.normal(size=(10, 2)), k=0)


def test_first_component_dominates_random_directions(rng):
    data = scaled_data(rng, rows=200)
    result = pca(data, k=1)
    top = np.var(result.scores[:, 0], ddof=1)
    directions = rng.normal(size=(1000, data.shape[1]))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    projected = (data - data.mean(axis=0)) @ directions.T
    assert np.all(projected.var(axis=0, ddof=1) <= top + 1e-9)


def test_degenerate_traces():
    with pytest.raises(DegenerateTraceError):
        pca(np.ones((10, 3)))
    with pytest.raises(DegenerateTraceError):
        pca(np.ones((1, 3)))
    with pytest.raises(ConfigurationError):
        pca(np.array([[0.0, np.nan], [1.0, 2.0]]))


def test_orient_flips_rows():
    np.testing.assert_array_equal(orient(np.array([[0.1, -0.9], [0.6, 0.2]])), [[-0.1, 0.9], [0.6, 0.2]])


def test_standardize01():
    scaled = standardize01(np.array([[1.0, 5.0], [3.0, 5.0], [2.0, 5.0]]))
    np.testing.assert_allclose(scaled, [[0.0, 0.5], [1.0, 0.5], [0.5, 0.5]])
    with pytest.raises(ConfigurationError):
        standardize01(np.array([[np.inf]]))
    assert standardize01(np.array([[-2.0], [0.0], [2.0]]))[1, 0] == 0.5


def test_standardize01_is_idempotent(rng):
    once = standardize01(rng.normal(size=(30, 3)))
    np.testing.assert_array_equal(standardize01(once), once)
    np.testing.assert_array_equal(once.min(axis=0), 0.0)
    np.testing.assert_array_equal(once.max(axis=0), 1.0)


def test_components_for_variance():
    assert components_for_variance([0.5, 0.2, 0.2, 0.1]) == 3
    assert components_for_variance([0.9, 0.1]) == 1
    assert components_for_variance([0.4, 0.4]) == 2


def test_colour_map_endpoints():
    np.testing.assert_allclose(HEATMAP_CMAP(0.0), (0.0, 0.0, 1.0, 1.0), atol=1e-12)
    np.testing.assert_allclose(HEATMAP_CMAP(0.5), (1.0, 1.0, 1.0, 1.0), atol=1e-12)
    np.testing.assert_allclose(HEATMAP_CMAP(1.0), (1.0, 0.0, 0.0, 1.0), atol=1e-12)


def test_constant_scores_render_uniform_cells():
    image = heatmap_image(np.full((8, 3), 0.5))
    assert image.shape == (3, 8, 4)
    np.testing.assert_allclose(image, 1.0, atol=1e-12)
    np.testing.assert_array_equal(heatmap_image(np.full((2, 1), 2.0)), heatmap_image(np.ones((2, 1))))


def test_heatmap_is_matplotlib_svg():
    svg = render_heatmap(np.full((8, 3), 0.5), ["none"] * 8, "agent 1")
    assert "<svg" in svg and "Matplotlib" in svg
    assert "rgb(255,255,255)" in svg
    assert "<dc:date>" not in svg
    assert "PC3" in svg and "agent 1" in svg


def test_phase_bar_has_one_patch_per_run():
    phases = ["none", "none", "one", "both", "both", "none"]
    assert phase_runs(phases) == [("none", 0, 2), ("one", 2, 1), ("both", 3, 2), ("none", 5, 1)]
    svg = render_heatmap(np.zeros((6, 2)), phases)
    assert svg.count('id="phase-run-') == 4


def test_label_count_must_match_timesteps():
    with pytest.raises(ConfigurationError):
        render_heatmap(np.zeros((4, 2)), ["none"] * 3)
    with pytest.raises(ConfigurationError):
        TraceMatrix(agent=0, kind="write", values=np.zeros((4, 2)), task="CN", seed=0, phases=["navigate"])
    with pytest.raises(ConfigurationError):
        TraceMatrix(agent=0, kind="listen", values=np.zeros((4, 2)), task="CN", seed=0)


def test_heatmap_csv_reproduces_svg(rng, tmp_path):
    scores = standardize01(rng.normal(size=(12, 3)))
    phases = ["phase-0"] * 5 + ["phase-1"] * 7
    path = tmp_path / "heatmap.csv"
    path.write_text(heatmap_csv(scores, phases))
    assert heatmap_from_csv(path, "agent 0") == render_heatmap(scores, phases, "agent 0")
    assert heatmap_from_csv(path.read_text(), "agent 0") == render_heatmap(scores, phases, "agent 0")


def test_trace_container(tmp_path, rng):
    values = rng.normal(size=(5, 3))
    path = write_trace_matrix(tmp_path / "a.trace", values)
    np.testing.assert_array_equal(read_trace_matrix(path), values)
    assert read_trace_matrix(write_trace_matrix(tmp_path / "empty.trace", np.zeros((0, 3)))).shape == (0, 3)

    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(IncompatibilityError):
        read_trace_matrix(path)
    bad = tmp_path / "bad.trace"
    bad.write_bytes(b"NOTATRACE" + bytes(20))
    with pytest.raises(IncompatibilityError):
        read_trace_matrix(bad)


def test_record_traces_matches_rollout():
    team = memory_team(n_agents=3)
    recording = record_traces(team, seed=4)
    assert len(recording.traces) == 6
    assert len(recording.records) == team.env_config.horizon
    steps = list(episode_steps(team, team.env_config, 4))
    for i in range(3):
        writes = recording.get(i, "write")
        assert writes.values.shape == (team.env_config.horizon, 4)
        assert len(writes.phases) == team.env_config.horizon
        for t, step in enumerate(steps):
            np.testing.assert_array_equal(writes.values[t], step.turns[i].m_prime)
            np.testing.assert_array_equal(recording.get(i, "read").values[t], step.turns[i].r)
            if i > 0:
                np.testing.assert_array_equal(step.turns[i].memory_snapshot, recording.get(i - 1, "write").values[t])


def test_no_write_trace_is_constant():
    recording = record_traces(memory_team(variant="no-write"))
    assert not recording.get(0, "write").values.any()
    with pytest.raises(DegenerateTraceError):
        pca(recording.get(1, "write"))


def test_no_read_records_writes_only():
    recording = record_traces(memory_team(variant="no-read"))
    assert {t.kind for t in recording.traces} == {"write"}
    with pytest.raises(KeyError):
        recording.get(0, "read")


def test_memoryless_team_cannot_be_analysed():
    team = build_team(tiny_env("CN"), tiny_train("MADDPG"), np.random.default_rng(0))
    with pytest.raises(ConfigurationError):
        record_traces(team)


def test_analyze_writes_every_artefact(tmp_path):
    summary = analyze(memory_team(), tmp_path, seed=1)
    assert [(r["agent"], r["kind"]) for r in summary] == [(0, "write"), (0, "read"), (1, "write"), (1, "read")]
    assert (tmp_path / "episode_trace.csv").exists()
    for row in summary:
        stem = f"agent{row['agent']}_{row['kind']}"
        assert (tmp_path / f"{stem}.trace").exists()
        if row["status"] == "ok":
            assert (tmp_path / f"{stem}_heatmap.svg").read_text().lstrip().startswith("<?xml")
            table = read_csv(tmp_path / f"{stem}_heatmap.csv")
            assert len(table) == 10 and set(table[0]) == {"t", "pc1", "pc2", "pc3", "phase"}
    assert len(read_csv(tmp_path / "pca_summary.csv")) == 4


def test_analyze_marks_degenerate_traces(tmp_path):
    summary = analyze(memory_team(variant="no-write"), tmp_path)
    assert {r["status"] for r in summary} == {"degenerate"}
    assert not list(tmp_path.glob("*_heatmap.svg"))
