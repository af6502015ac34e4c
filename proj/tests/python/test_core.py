import math
import struct
import zlib
from pathlib import Path

import pytest

import fedtl

GOLDEN = Path(__file__).resolve().parent.parent / "golden"


def test_softmax_and_cross_entropy_closed_forms():
    p = fedtl.softmax([2.0, 0.0])
    assert p[0] == pytest.approx(math.exp(2) / (math.exp(2) + 1))
    assert fedtl.cross_entropy(p, 1) == pytest.approx(2.1269280110429727)


def test_head_shapes_and_footprint():
    head = fedtl.init_head(256, 2, "random", seed=3)
    assert head.parameter_count == 514
    assert fedtl.footprint_bytes(256, 2) == 2056
    s = math.sqrt(6 / 258)
    assert all(abs(w) <= s for w in head.weights)
    with pytest.raises(fedtl.ShapeError):
        fedtl.init_head(1280, 2, "pretrained", blob=fedtl.ModelBlob(1280, 1, [0.0] * 1281))


def test_training_reduces_loss_on_separable_data():
    ds = fedtl.hold_out_tail(fedtl.synth_separable(32, 2, 1200, 1.0, 5), 200)
    train = ds.subset(fedtl.Split.train)
    val = ds.subset(fedtl.Split.validation)
    head = fedtl.init_head(32, 2)
    for at in range(0, len(train), 20):
        head = fedtl.train_batch(head, train[at:at + 20], 0.01, 5)
    assert fedtl.evaluate(fedtl.to_blob(head), val) >= 0.95


def test_average_blobs():
    w = fedtl.ModelBlob(2, 2, [1.0, -2.0, 0.5, 3.0, 0.25, -1.0])
    neg = fedtl.ModelBlob(2, 2, [-v for v in w.values])
    assert fedtl.average_blobs([w]) == w
    assert fedtl.average_blobs([w, w, w]) == w
    assert fedtl.average_blobs([w, neg]).values == [0.0] * 6
    with pytest.raises(fedtl.UsageError):
        fedtl.average_blobs([])


def test_encoding_matches_struct_and_zlib():
    values = [0.5, -0.25, 1.5, 2.0, -3.0, 0.0625, 0.75, -1.0]
    payload = struct.pack("<8f", *values)
    expected = b"FTL1" + struct.pack("<III", 3, 2, zlib.crc32(payload)) + payload
    blob = fedtl.ModelBlob(3, 2, values)
    assert fedtl.encode_model(blob) == expected
    assert fedtl.decode_model(expected) == blob
    assert fedtl.crc32(payload) == zlib.crc32(payload)
    assert fedtl.pack_model(blob) == (GOLDEN / "model_e3_c2.frames").read_bytes()
    assert fedtl.encoded_size(256, 2) == 2072


def test_decode_errors_are_distinct():
    good = fedtl.encode_model(fedtl.ModelBlob(1, 1, [1.0, 2.0]))
    with pytest.raises(fedtl.TruncationError):
        fedtl.decode_model(b"")
    with pytest.raises(fedtl.ProtocolError):
        fedtl.decode_model(b"XTL1" + good[4:])
    with pytest.raises(fedtl.CorruptionError):
        fedtl.decode_model(good[:-1] + bytes([good[-1] ^ 1]))


def test_frame_round_trip():
    for n in range(0, 40):
        data = bytes(range(n))
        framed = fedtl.frame_bytes(data)
        assert len(framed) == 8 * max(1, (n + 3) // 4)
        assert fedtl.unframe_bytes(framed) == data


def test_golden_dataset_and_partition(tmp_path):
    ds = fedtl.load_dataset(GOLDEN / "dataset_e4_c2_n3.bin")
    assert len(ds) == 3
    assert ds.samples[2].features == [-2.0, 0.125, 0.0625, -4.0]
    shards = fedtl.partition(ds, 2, 0)
    assert sorted(shards[0] + shards[1]) == [0, 1]

    sparse = fedtl.synth_sparse(256, 16, 2, 100, 7)
    assert len(fedtl.active_dimensions(sparse)) == 16
    fedtl.save_dataset(sparse, tmp_path / "s.bin")
    assert fedtl.load_dataset(tmp_path / "s.bin").samples == sparse.samples


def test_sweep_csv_and_presets():
    assert fedtl.preset_names() == ["fig1", "fig2", "fig3", "fig4"]
    assert "repetitions = 20" in fedtl.describe_preset("fig4")
    csv = fedtl.run_sweep_csv(
        "dim = 8\nvalidation_size = 20\nepochs = 3\nrepetitions = 2\n"
        "batch_size = 5\nsweep_values = 1, 2\n")
    lines = csv.strip().split("\n")
    assert lines[0].startswith("sweep_param,sweep_value,epoch,examples_seen")
    assert len(lines) == 1 + 2 * 3
    assert lines[-1].split(",")[:4] == ["devices", "2", "2", "30"]


def test_gradcheck():
    assert fedtl.gradcheck(20)["max_relative_error"] < 1e-5
