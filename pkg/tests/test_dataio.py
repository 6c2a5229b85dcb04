import json

import numpy as np
import pytest

from capqe.dataio import (Checkpoint, Sample, load_checkpoint, load_samples, save_checkpoint,
                          save_samples, split_image_disjoint)
from capqe.errors import (CorruptCheckpoint, DimensionMismatch, NonFiniteValue, ParseError,
                          StorageError, TooFewImages, VersionMismatch)
from capqe.model import ModelConfig, forward, init_params

from conftest import make_sample, make_samples


@pytest.fixture
def samples(rng):
    out = make_samples(rng, 6, n_images=4)
    out[1] = make_sample(rng, "s1", "img1", n_labels=0)
    out[2] = make_sample(rng, "s2", "img2", target=None)   # inference-only
    out[3] = make_sample(rng, "s3", "img3", n_labels=20)   # K_max labels
    return out


def test_jsonl_two_samples_order(tmp_path, rng):
    s = [make_sample(rng, "b", "i1"), make_sample(rng, "a", "i2")]
    path = tmp_path / "x.jsonl"
    save_samples(s, path)
    back = load_samples(path)
    assert [x.sample_id for x in back] == ["b", "a"]
    assert back == s


@pytest.mark.parametrize("fmt,name", [("jsonl", "x.jsonl"), ("packed", "x.cqe")])
def test_roundtrip_bit_exact(tmp_path, samples, fmt, name):
    path = tmp_path / name
    save_samples(samples, path, fmt)
    back = load_samples(path, fmt)
    assert back == samples
    for a, b in zip(samples, back):
        assert a.image.tobytes() == b.image.tobytes()
        assert a.labels.tobytes() == b.labels.tobytes()
        assert a.sentence.tobytes() == b.sentence.tobytes()


def test_jsonl_packed_jsonl_conversion(tmp_path, samples):
    save_samples(samples, tmp_path / "a.jsonl")
    save_samples(load_samples(tmp_path / "a.jsonl"), tmp_path / "b.cqe")
    save_samples(load_samples(tmp_path / "b.cqe"), tmp_path / "c.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "c.jsonl").read_bytes()


def test_packed_sidecar_index(tmp_path, samples):
    path = tmp_path / "x.cqe"
    save_samples(samples, path)
    index = json.loads((tmp_path / "x.cqe.idx.json").read_text())
    assert list(index) == [s.sample_id for s in samples]
    data = path.read_bytes()
    assert data[:4] == b"CQE1"
    # each offset points at the length-prefixed sample id
    for sid, off in index.items():
        n = int.from_bytes(data[off:off + 2], "little")
        assert data[off + 2:off + 2 + n].decode() == sid


@pytest.mark.parametrize("name", ["e.jsonl", "e.cqe"])
def test_empty_set(tmp_path, name):
    save_samples([], tmp_path / name)
    assert load_samples(tmp_path / name) == []


def test_overwrite_protection(tmp_path, samples):
    path = tmp_path / "x.jsonl"
    save_samples(samples, path)
    with pytest.raises(StorageError):
        save_samples(samples, path)
    save_samples(samples[:1], path, force=True)
    assert len(load_samples(path)) == 1


def _write_line(path, obj):
    path.write_text(json.dumps(obj) + "\n")


def test_short_image_vector(tmp_path, rng):
    obj = {"sample_id": "bad", "image_id": "i", "image": [0.0] * 63, "labels": [],
           "sentence": [0.0] * 512}
    _write_line(tmp_path / "x.jsonl", obj)
    with pytest.raises(DimensionMismatch, match="bad") as exc:
        load_samples(tmp_path / "x.jsonl")
    assert exc.value.field == "image"
    assert (exc.value.expected, exc.value.got) == (64, 63)


@pytest.mark.parametrize("field,value", [
    ("sentence", [0.0] * 511),
    ("labels", [[0.0] * 255]),
])
def test_other_dimension_checks(tmp_path, field, value):
    obj = {"sample_id": "bad", "image_id": "i", "image": [0.0] * 64, "labels": [],
           "sentence": [0.0] * 512}
    obj[field] = value
    _write_line(tmp_path / "x.jsonl", obj)
    with pytest.raises(DimensionMismatch, match=field):
        load_samples(tmp_path / "x.jsonl")


def test_non_finite_rejected(tmp_path):
    obj = {"sample_id": "nan", "image_id": "i", "image": [0.0] * 63 + [float("nan")],
           "labels": [], "sentence": [0.0] * 512}
    (tmp_path / "x.jsonl").write_text(json.dumps(obj) + "\n")
    with pytest.raises(NonFiniteValue):
        load_samples(tmp_path / "x.jsonl")


def test_parse_error_reports_line(tmp_path, rng):
    path = tmp_path / "x.jsonl"
    save_samples([make_sample(rng)], path)
    with open(path, "a") as fh:
        fh.write("{broken\n")
    with pytest.raises(ParseError, match=":2:"):
        load_samples(path)


def test_truncated_packed_file(tmp_path, samples):
    path = tmp_path / "x.cqe"
    save_samples(samples, path)
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(ParseError):
        load_samples(path)


# -- split ------------------------------------------------------------------

def _by_image(n_images, per_image, rng):
    return [make_sample(rng, f"s{i}_{j}", f"img{i}", 0) for i in range(n_images)
            for j in range(per_image)]


def test_split_exact_counts(rng):
    samples = _by_image(10, 1, rng)
    folds = split_image_disjoint(samples, (0.8, 0.1, 0.1), seed=0)
    assert [len({s.image_id for s in f}) for f in folds] == [8, 1, 1]


@pytest.mark.parametrize("seed", range(5))
def test_split_is_partition(rng, seed):
    samples = [make_sample(rng, f"s{i}", f"img{rng.integers(0, 40)}", 0) for i in range(150)]
    folds = split_image_disjoint(samples, (0.7, 0.2, 0.1), seed=seed)
    ids = [{s.image_id for s in f} for f in folds]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    assert ids[0] | ids[1] | ids[2] == {s.image_id for s in samples}
    assert sum(len(f) for f in folds) == len(samples)
    # all samples of an image travel together, in input order
    assert sorted(s.sample_id for f in folds for s in f) == sorted(s.sample_id for s in samples)


def test_split_deterministic(rng):
    samples = _by_image(30, 2, rng)
    a = split_image_disjoint(samples, (0.6, 0.2, 0.2), 11)
    b = split_image_disjoint(samples, (0.6, 0.2, 0.2), 11)
    c = split_image_disjoint(samples, (0.6, 0.2, 0.2), 12)
    ids = lambda folds: [[s.sample_id for s in f] for f in folds]
    assert ids(a) == ids(b)
    assert ids(a) != ids(c)


def test_split_too_few_images(rng):
    with pytest.raises(TooFewImages):
        split_image_disjoint(_by_image(5, 3, rng), (0.8, 0.1, 0.1), 0)


@pytest.mark.parametrize("fractions", [(0.5, 0.5, 0.1), (0.9, 0.1, 0.0), (0.5, 0.5)])
def test_split_bad_fractions(rng, fractions):
    with pytest.raises(ValueError):
        split_image_disjoint(_by_image(10, 1, rng), fractions, 0)


class _Stub:
    """Split only looks at image ids; avoids building 65k embedding samples."""

    def __init__(self, image_id):
        self.image_id = image_id


def test_split_tracks_table_proportions():
    # fold fractions of the released dataset: 58354 / 2392 / 4592 samples
    total = 58354 + 2392 + 4592
    fractions = (58354 / total, 2392 / total, 4592 / total)
    for seed in range(5):
        rng = np.random.default_rng(seed)
        counts = rng.integers(1, 11, size=16_000)   # captions per image
        stubs = [_Stub(f"img{i}") for i, c in enumerate(counts) for _ in range(c)]
        folds = split_image_disjoint(stubs, fractions, seed)
        n = len(stubs)
        for fold, frac in zip(folds, fractions):
            assert abs(len(fold) / n - frac) < 0.02


# -- checkpoints ------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path, rng):
    cfg = ModelConfig(proj_dim=8, num_labels=3)
    params = init_params(cfg, 0)
    ckpt = Checkpoint(params, cfg, step=42, dev_spearman=0.61, provenance="trained",
                      extra={"seed": 1})
    path = tmp_path / "m.ckpt"
    save_checkpoint(ckpt, path)
    back = load_checkpoint(path)
    for name, arr in params.blocks().items():
        assert arr.tobytes() == getattr(back.params, name).tobytes()
    assert (back.config, back.step, back.dev_spearman, back.provenance, back.extra) == \
        (cfg, 42, 0.61, "trained", {"seed": 1})
    s = make_sample(rng)
    assert forward(params, cfg, s) == forward(back.params, back.config, s)


def test_checkpoint_truncated(tmp_path):
    cfg = ModelConfig(proj_dim=4, num_labels=1)
    path = tmp_path / "m.ckpt"
    save_checkpoint(Checkpoint(init_params(cfg, 0), cfg), path)
    path.write_bytes(path.read_bytes()[:-100])
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(path)


def test_checkpoint_bitflip(tmp_path):
    cfg = ModelConfig(proj_dim=4, num_labels=1)
    path = tmp_path / "m.ckpt"
    save_checkpoint(Checkpoint(init_params(cfg, 0), cfg), path)
    data = bytearray(path.read_bytes())
    data[len(data) // 2] ^= 0x01
    path.write_bytes(bytes(data))
    with pytest.raises(CorruptCheckpoint, match="checksum"):
        load_checkpoint(path)


def test_checkpoint_config_mismatch(tmp_path):
    cfg = ModelConfig(proj_dim=8, num_labels=3)
    path = tmp_path / "m.ckpt"
    save_checkpoint(Checkpoint(init_params(cfg, 0), cfg), path)
    with pytest.raises(VersionMismatch):
        load_checkpoint(path, expect=ModelConfig(proj_dim=16, num_labels=3))
    assert load_checkpoint(path, expect=ModelConfig(proj_dim=8, num_labels=3)).config == cfg


def test_sample_equality_semantics(rng):
    a = make_sample(rng)
    b = Sample(a.sample_id, a.image_id, a.image.copy(), a.labels.copy(), a.sentence.copy(), a.target)
    assert a == b
    b.sentence[0] += 1
    assert a != b
