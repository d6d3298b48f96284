import numpy as np
import pytest

from visaware.errors import ContractError
from visaware.heads import DecodeResult
from visaware.report import MetricsLog, plot_bars, plot_curve, plot_recall, read_metrics, series_from_records
from visaware.tasks import (TaskConfig, copy_token_accuracy, copy_vocab, init_task_model, sample_copy_batch,
                            spans, tagging_metrics, tagging_tsv)


def test_spans():
    assert spans(["O", "T1", "T1", "O", "T2"]) == {(1, 3, "T1"), (4, 5, "T2")}
    assert spans(["T1", "T2"]) == {(0, 1, "T1"), (1, 2, "T2")}
    assert spans(["O", "O"]) == set()


def test_tagging_metrics_by_hand():
    gold = [["O", "T1", "O", "T2"], ["T3", "O"]]
    pred = [["O", "T1", "T1", "T0"], ["T3", "O"]]
    m = tagging_metrics(gold, pred)
    assert m["accuracy"] == pytest.approx(2 / 3)
    assert m["token_accuracy"] == pytest.approx(4 / 6)
    # gold spans {T1@1, T2@3, T3@0}, predicted {T1@1-3, T0@3, T3@0}: one match
    assert m["span_f1"] == pytest.approx(1 / 3)


def test_tagging_tsv_layout():
    text = tagging_tsv([["a", "b"], ["c"]], [["O", "T1"], ["T2"]], [["O", "T0"], ["T2"]])
    assert text == "a\tO\tO\nb\tT1\tT0\n\nc\tT2\tT2\n"


def test_copy_accuracy_counts_eos_and_missing_positions():
    eos = 2
    perfect = copy_token_accuracy([[5, 6]], [DecodeResult([5, 6], False)], eos)
    short = copy_token_accuracy([[5, 6]], [DecodeResult([5], False)], eos)
    assert perfect == 1.0
    assert short == pytest.approx(1 / 3)


def test_copy_batches_avoid_specials():
    vocab = copy_vocab()
    assert len(vocab) == 23
    batch = sample_copy_batch(np.random.default_rng(0), 200, vocab, 10)
    assert all(1 <= len(s) <= 10 and min(s) >= 3 for s in batch)


def test_text_only_and_visual_models_share_initial_weights():
    a = init_task_model(TaskConfig(task="tag", d=16, n_heads=2, n_fusion_heads=2, d_ff=16, d_img=8, m=8), 30,
                        ["O", "T0"])
    b = init_task_model(TaskConfig(task="tag", d=16, n_heads=2, n_fusion_heads=2, d_ff=16, d_img=8, m=0), 30,
                        ["O", "T0"])
    for k in a.params:
        assert a.params[k].data.tobytes() == b.params[k].data.tobytes()


def test_task_config_checks():
    with pytest.raises(ContractError):
        TaskConfig(task="translate")
    with pytest.raises(ContractError):
        TaskConfig(m=-2)


def test_metrics_log_and_figures(tmp_path):
    log = MetricsLog(tmp_path / "m.jsonl", seed=4)
    log.write("train", "loss", 0.5, 1)
    log.write("train", "loss", 0.25, 2)
    log.write("eval", "recall@8", 0.9)
    records = read_metrics(tmp_path / "m.jsonl")
    assert records[0] == {"stage": "train", "epoch": 1, "metric": "loss", "value": 0.5, "seed": 4}
    assert series_from_records(records, "train", "loss") == [(1, 0.5), (2, 0.25)]
    MetricsLog(tmp_path / "m.jsonl", seed=4)
    assert read_metrics(tmp_path / "m.jsonl") == []
    for path in (plot_curve({"a": [(1, 0.5), (2, 0.2)], "b": []}, tmp_path / "c.png"),
                 plot_recall({1: 0.5, 8: 0.9}, tmp_path / "r.png", chance={1: 0.01, 8: 0.05}),
                 plot_bars({"x": 0.4, "y": 0.8}, tmp_path / "b.png")):
        assert path.read_bytes()[:4] == b"\x89PNG"
