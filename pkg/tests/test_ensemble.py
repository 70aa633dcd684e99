import numpy as np
import pytest

from mitolora.ensemble import (
    Aggregation,
    EnsembleError,
    FoldEnsemble,
    PredictionRecord,
    aggregate_probabilities,
    export_predictions,
    predict_with_threshold,
    read_predictions,
    validate_predictions_file,
)


def test_mean_aggregation():
    assert aggregate_probabilities([[0.2], [0.4], [0.9]])[0] == pytest.approx(0.5)
    row = np.array([0.1, 0.7, 0.33])
    np.testing.assert_array_equal(aggregate_probabilities(row[None, :]), row)
    P = np.random.default_rng(0).random((3, 100))
    assert np.max(np.abs(aggregate_probabilities(P) - P.mean(axis=0))) < 1e-12


def test_identical_members_reproduce_probability():
    P = np.full((3, 4), 0.1 + 0.2)
    np.testing.assert_array_equal(aggregate_probabilities(P), P[0])


def test_logit_mean():
    P = np.array([[0.5, 0.9], [0.5, 0.1]])
    np.testing.assert_allclose(aggregate_probabilities(P, Aggregation.MEAN_LOGIT), [0.5, 0.5])
    with pytest.raises(EnsembleError):
        aggregate_probabilities(np.zeros((0, 3)))


def test_threshold_decisions():
    assert predict_with_threshold([0.61], 0.6).tolist() == [1]
    assert predict_with_threshold([0.55], 0.6).tolist() == [0]
    assert predict_with_threshold([0.55], 0.5).tolist() == [1]


def test_ensemble_rejects_bad_arguments():
    with pytest.raises(EnsembleError):
        FoldEnsemble([])


def records():
    rng = np.random.default_rng(3)
    out = []
    for cid in ["c2", "c0", "c1"]:
        m = tuple(float(v) for v in rng.random(3))
        agg = float(np.mean(m))
        out.append(PredictionRecord(cid, m, agg, int(agg >= 0.6)))
    return out


def test_export_read_and_validate(tmp_path):
    recs = records()
    p = export_predictions(recs, tmp_path / "pred.csv")
    lines = p.read_text().splitlines()
    assert len(lines) == 4
    assert lines[0] == "crop_id,prob_member_0,prob_member_1,prob_member_2,prob_ensemble,label"
    assert [ln.split(",")[0] for ln in lines[1:]] == ["c0", "c1", "c2"]
    again = export_predictions(list(reversed(recs)), tmp_path / "pred2.csv")
    assert p.read_bytes() == again.read_bytes()

    back = {r.crop_id: r for r in read_predictions(p)}
    for r in recs:
        # the file holds values rounded to 6 decimals
        assert abs(back[r.crop_id].prob - round(r.prob, 6)) < 1e-9
        assert abs(back[r.crop_id].prob - r.prob) <= 5e-7
    assert validate_predictions_file(p, k=3, threshold=0.6) == []
    assert validate_predictions_file(p, k=2)


def test_validation_catches_problems(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text(
        "crop_id,prob_member_0,prob_ensemble,label\n"
        "b,0.500000,0.500000,1\n"
        "a,0.5,0.900000,2\n",
        encoding="utf-8",
    )
    problems = validate_predictions_file(p)
    text = "\n".join(problems)
    assert "ordered" in text and "decimals" in text and "member range" in text and "label" in text
