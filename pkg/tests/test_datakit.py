import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prawn import datakit as dk
from prawn.datakit import DataError, SyntheticSpec, TaskDataset, Vocab, VocabPartition


def test_synthetic_deterministic_under_seed():
    spec = SyntheticSpec(k_tasks=3, input_dim=6, rank=2, private_scale=0.2, label_noise=0.1, samples_per_task=50, seed=7)
    a = dk.gen_synthetic(spec)
    b = dk.gen_synthetic(spec)
    for da, db in zip(a, b):
        assert np.array_equal(da.inputs, db.inputs)
        assert np.array_equal(da.labels, db.labels)


def test_synthetic_task_streams_independent():
    spec = SyntheticSpec(k_tasks=4, input_dim=5, samples_per_task=20, seed=3)
    all_four = dk.gen_synthetic(spec)
    only_two = dk.gen_synthetic(spec, task_indices=[2, 3])
    assert np.array_equal(all_four[2].inputs, only_two[0].inputs)
    assert np.array_equal(all_four[3].labels, only_two[1].labels)


def test_synthetic_boundary_noise_rejected():
    with pytest.raises(DataError, match="noise"):
        SyntheticSpec(k_tasks=1, input_dim=4, label_noise=0.5, samples_per_task=10)
    with pytest.raises(DataError, match="rank"):
        SyntheticSpec(k_tasks=1, input_dim=4, rank=5, samples_per_task=10)


def test_synthetic_flip_rate_within_two_percent():
    eta = 0.15
    spec = SyntheticSpec(k_tasks=1, input_dim=8, num_classes=3, rank=3, label_noise=eta, samples_per_task=10_000, seed=11)
    noisy = dk.gen_synthetic(spec)[0]
    clean = dk.gen_synthetic(SyntheticSpec(k_tasks=1, input_dim=8, num_classes=3, rank=3, label_noise=0.0, samples_per_task=10_000, seed=11))[0]
    measured = float(np.mean(noisy.labels != clean.labels))
    assert abs(measured - eta) < 0.02


def test_identical_tasks_when_private_scale_zero():
    spec = SyntheticSpec(k_tasks=2, input_dim=10, private_scale=0.0, samples_per_task=100, seed=5)
    t0, t1 = dk.gen_synthetic(spec)
    w = dk.shared_label_matrix(spec)
    for t in (t0, t1):
        assert np.array_equal(t.labels, np.argmax(t.inputs @ w.T, axis=1))


def test_split_exact_counts_and_disjoint():
    ds = dk.gen_synthetic(SyntheticSpec(k_tasks=1, input_dim=4, samples_per_task=2000, seed=1))[0]
    tr, dv, te = dk.split(ds, seed=9)
    assert (len(tr), len(dv), len(te)) == (1400, 200, 400)
    ids = [set(tr.sample_ids), set(dv.sample_ids), set(te.sample_ids)]
    assert not (ids[0] & ids[1]) and not (ids[0] & ids[2]) and not (ids[1] & ids[2])
    assert (tr.split, dv.split, te.split) == ("train", "dev", "test")


def test_split_proportional_fallback():
    ds = dk.gen_synthetic(SyntheticSpec(k_tasks=1, input_dim=4, samples_per_task=100, seed=1))[0]
    tr, dv, te = dk.split(ds)
    assert (len(tr), len(dv), len(te)) == (70, 10, 20)


@settings(max_examples=20, deadline=None)
@given(n=st.integers(30, 300), seed=st.integers(0, 50))
def test_split_is_always_a_partition(n, seed):
    ds = TaskDataset(task_id="t", inputs=np.zeros((n, 2)), labels=np.zeros(n, dtype=int), num_classes=2)
    tr, dv, te = dk.split(ds, seed=seed)
    combined = sorted(np.concatenate([tr.sample_ids, dv.sample_ids, te.sample_ids]).tolist())
    assert combined == sorted(set(combined))
    assert len(combined) == len(tr) + len(dv) + len(te) <= n


def test_batch_iter_keeps_partial_batch_and_reshuffles():
    ds = dk.gen_synthetic(SyntheticSpec(k_tasks=1, input_dim=4, samples_per_task=19, seed=1))[0]
    batches = dk.batch_iter(ds, batch_size=8, seed=2, epoch=0)
    assert [len(b) for b in batches] == [8, 8, 3]
    again = dk.batch_iter(ds, batch_size=8, seed=2, epoch=0)
    assert all(np.array_equal(a.sample_ids, b.sample_ids) for a, b in zip(batches, again))
    other_epoch = dk.batch_iter(ds, batch_size=8, seed=2, epoch=1)
    assert not all(np.array_equal(a.sample_ids, b.sample_ids) for a, b in zip(batches, other_epoch))


def test_tsv_round_trip(tmp_path):
    p = tmp_path / "a.tsv"
    p.write_text("1\tGreat GREAT product\n0\tterrible   thing\n", encoding="utf-8")
    rows = dk.read_tsv(p)
    assert rows[0] == (1, ["great", "great", "product"])
    vocab = Vocab(tok for _, toks in rows for tok in toks)
    ds = dk.load_tsv(p, vocab, "reviews")
    assert ds.is_text and len(ds) == 2 and ds.num_classes == 2
    assert vocab.token(0) == dk.UNK_TOKEN
    assert ds.inputs[0][0] == ds.inputs[0][1]  # repeated token, same id


def test_tsv_errors_carry_line_numbers(tmp_path):
    p = tmp_path / "bad.tsv"
    p.write_text("1\tfine here\n2\tbad label\n", encoding="utf-8")
    with pytest.raises(DataError, match="bad.tsv:2"):
        dk.read_tsv(p)
    p.write_text("", encoding="utf-8")
    with pytest.raises(DataError, match="empty"):
        dk.read_tsv(p)
    p.write_text("1\t   \n", encoding="utf-8")
    with pytest.raises(DataError, match="no tokens"):
        dk.read_tsv(p)


def test_vocab_partition_is_exact():
    parts = VocabPartition.from_task_vocabs([{"a", "b", "c"}, {"b", "c", "d"}, {"c", "b", "e"}])
    assert parts.intersection == {"b", "c"}
    assert parts.complement == {"a", "d", "e"}
    assert parts.intersection | parts.complement == {"a", "b", "c", "d", "e"}
    assert not parts.intersection & parts.complement


def test_unknown_tokens_map_to_reserved_id(tmp_path):
    vocab = Vocab(["known"])
    assert vocab.encode(["known", "unknown"]) == (1, 0)


def test_manifest_round_trip_text(tmp_path):
    for name, text in [("t1.tsv", "1\tgood good movie\n0\tbad film\n"), ("t2.tsv", "0\tbad movie\n1\tnice film\n")]:
        (tmp_path / name).write_text(text, encoding="utf-8")
    manifest = tmp_path / "manifest.json"
    dk.write_manifest(
        manifest,
        [
            {"task_id": "t1", "path": "t1.tsv", "format": "tsv", "num_classes": 2, "count": 2},
            {"task_id": "t2", "path": "t2.tsv", "format": "tsv", "num_classes": 2, "count": 2},
        ],
    )
    tasks, vocab, partition = dk.load_manifest(manifest)
    assert set(tasks) == {"t1", "t2"}
    assert vocab is not None and len(vocab) > 1
    assert partition.intersection == {"movie", "film", "bad"}


def test_manifest_round_trip_npz(tmp_path):
    ds = dk.gen_synthetic(SyntheticSpec(k_tasks=2, input_dim=3, samples_per_task=10, seed=2))
    entries = []
    for d in ds:
        dk.save_npz_task(d, tmp_path / f"{d.task_id}.npz")
        entries.append({"task_id": d.task_id, "path": f"{d.task_id}.npz", "format": "npz", "num_classes": 2, "count": len(d)})
    manifest = tmp_path / "manifest.json"
    dk.write_manifest(manifest, entries)
    tasks, vocab, partition = dk.load_manifest(manifest)
    assert vocab is None and partition is None
    assert np.array_equal(tasks["synth0"].inputs, ds[0].inputs)


def test_draw_batch_is_seeded_and_bounded():
    ds = dk.gen_synthetic(SyntheticSpec(k_tasks=1, input_dim=3, samples_per_task=10, seed=2))[0]
    a = dk.draw_batch(ds, 4, np.random.default_rng(5))
    b = dk.draw_batch(ds, 4, np.random.default_rng(5))
    assert np.array_equal(a.sample_ids, b.sample_ids)
    assert len(dk.draw_batch(ds, 99, np.random.default_rng(0))) == 10
    assert len(set(a.sample_ids.tolist())) == 4  # without replacement
