import numpy as np
import pytest

from mustkd.checkpoint import CheckpointError, load_checkpoint, read_metadata, save_checkpoint, write_metadata
from mustkd.posteriors import PosteriorSequence, kl_divergence


def test_checkpoint_round_trip_is_bit_exact(tmp_path, rng):
    params = {"enc.W": rng.normal(size=(3, 4)), "bias": rng.normal(size=(4,)), "scalar": np.array(2.5), "ünï": np.ones((1, 2, 2))}
    save_checkpoint(tmp_path / "m.ckpt", params)
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert list(back) == list(params)
    for k in params:
        assert back[k].shape == params[k].shape
        assert back[k].tobytes() == params[k].tobytes()


def test_checkpoint_layout_is_little_endian(tmp_path):
    save_checkpoint(tmp_path / "m.ckpt", {"w": np.array([1.0])})
    blob = (tmp_path / "m.ckpt").read_bytes()
    assert blob[:8] == b"MUSTCKPT"
    assert blob[8:12] == (1).to_bytes(4, "little")
    assert blob[12:16] == (1).to_bytes(4, "little") and blob[16:17] == b"w"
    assert blob[-8:] == np.array([1.0], dtype="<f8").tobytes()


def test_corrupt_checkpoints_are_rejected(tmp_path):
    save_checkpoint(tmp_path / "m.ckpt", {"w": np.ones(4)})
    blob = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "short.ckpt").write_bytes(blob[:-3])
    (tmp_path / "magic.ckpt").write_bytes(b"NOTACKPT" + blob[8:])
    for name in ("short.ckpt", "magic.ckpt"):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / name)


def test_metadata_sidecar(tmp_path):
    write_metadata(tmp_path / "m.ckpt", {"language": "la", "dims": [3, 4]})
    assert read_metadata(tmp_path / "m.ckpt") == {"language": "la", "dims": [3, 4]}


def test_posteriors_validate_rows():
    with pytest.raises(ValueError, match="frame 1"):
        PosteriorSequence(np.array([[0.5, 0.5], [0.7, 0.4]]), "x")
    with pytest.raises(ValueError):
        PosteriorSequence(np.array([[1.5, -0.5]]), "x")
    with pytest.raises(ValueError):
        PosteriorSequence(np.zeros((0, 3)), "x")


def test_posteriors_are_read_only_and_break_ties_low():
    p = PosteriorSequence(np.array([[0.4, 0.4, 0.2], [0.1, 0.2, 0.7]]), "x")
    with pytest.raises(ValueError):
        p.frames[0, 0] = 1.0
    assert p.argmax().tolist() == [0, 2]
    np.testing.assert_allclose(p.frame_max(), [0.4, 0.7])


def test_kl_handles_zero_probabilities():
    kl = kl_divergence(np.array([[1.0, 0.0]]), np.array([[0.5, 0.5]]))
    assert kl[0] == pytest.approx(np.log(2), abs=1e-15)
    assert kl_divergence(np.array([[0.3, 0.7]]), np.array([[0.3, 0.7]]))[0] == 0.0
