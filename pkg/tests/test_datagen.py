import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prednet.datagen import (
    DIRECTIONS,
    LabeledSequence,
    SceneSpec,
    advance,
    builtin_glyphs,
    class_balance,
    direction_index,
    direction_vector,
    gen_background,
    gen_dataset,
    gen_sequence,
    load_digits_idx,
    position_bounds,
    read_vseq,
    write_class_balance_csv,
    write_vseq,
)
from prednet.errors import ConfigError, ContractError, FormatError

GLYPHS = builtin_glyphs(10)


def test_direction_examples():
    assert direction_vector(0) == (1, 0)
    assert direction_vector(4) == (-1, 0)
    assert direction_vector(2, speed=3) == (0, -3)
    for bad in (-1, 8):
        with pytest.raises(ContractError):
            direction_vector(bad)


@pytest.mark.parametrize("i", range(8))
def test_direction_symmetry(i):
    dx, dy = direction_vector(i)
    assert (dx, dy) == tuple(-v for v in direction_vector((i + 4) % 8))
    assert direction_index(dx, dy) == i


def test_scene_spec_validation():
    with pytest.raises(ConfigError):
        SceneSpec(canvas=(11, 32), glyph_size=10)
    with pytest.raises(ConfigError):
        SceneSpec(num_shapes=-1)
    with pytest.raises(ConfigError):
        SceneSpec(shape_kinds=("hexagon",))
    with pytest.raises(ConfigError):
        SceneSpec(background_range=(0.5, 0.2))


def test_reflection_at_left_edge():
    spec = SceneSpec()
    (lo_x, _), _ = position_bounds(spec)
    (x, y), direction = advance((lo_x, 10), 4, spec)
    assert direction == 0 and (x, y) == (lo_x + 1, 10)


def test_reflection_in_corner_flips_both_components():
    spec = SceneSpec()
    (_, hi_x), (lo_y, _) = position_bounds(spec)
    _, direction = advance((hi_x, lo_y), 1, spec)  # NE into the top-right corner
    assert direction == 5  # SW


def test_labels_follow_positions():
    spec = SceneSpec(seq_len=40, speed=2)
    seq = gen_sequence(11, spec, GLYPHS)
    assert seq.labels[-1] == seq.labels[-2]
    assert seq.meta["seed"] == 11 and seq.meta["spec"] == spec.digest()


def glyph_layer(seq, seed, spec):
    return seq.frames[:, 0].astype(np.float64) - gen_background(seed, spec)


def best_shift(a, b, speed):
    """Direction whose shift of ``a`` correlates best with ``b``."""
    scores = []
    for dx, dy in DIRECTIONS:
        shifted = np.roll(np.roll(a, dy * speed, axis=0), dx * speed, axis=1)
        scores.append(float((shifted * b).sum()))
    return int(np.argmax(scores))


@settings(max_examples=25)
@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 2]))
def test_shift_oracle_recovers_labels(seed, speed):
    spec = SceneSpec(seq_len=24, speed=speed)
    seq = gen_sequence(seed, spec, GLYPHS)
    layer = glyph_layer(seq, seed, spec)
    for t in range(spec.seq_len - 1):
        assert best_shift(layer[t], layer[t + 1], speed) == seq.labels[t], t


@settings(max_examples=25)
@given(st.integers(0, 2**32 - 1))
def test_background_is_static_outside_glyph(seed):
    spec = SceneSpec(seq_len=8)
    seq = gen_sequence(seed, spec, GLYPHS)
    bg = gen_background(seed, spec)
    for t in range(spec.seq_len):
        moving = np.abs(seq.frames[t, 0] - bg) > 0
        ys, xs = np.nonzero(moving)
        if len(ys):
            # every changed pixel lies inside one glyph-sized box
            assert ys.max() - ys.min() < spec.glyph_size and xs.max() - xs.min() < spec.glyph_size
        box = np.zeros_like(moving)
        if len(ys):
            box[ys.min() : ys.min() + spec.glyph_size, xs.min() : xs.min() + spec.glyph_size] = True
        if t:
            mask = ~(box | prev_box)
            assert np.array_equal(seq.frames[t, 0][mask], seq.frames[t - 1, 0][mask])
        prev_box = box


def test_empty_scene_is_uniform():
    bg = gen_background(3, SceneSpec(num_shapes=0))
    assert np.all(bg == bg.flat[0])


@given(st.integers(0, 2**32 - 1))
def test_background_deterministic_and_in_range(seed):
    spec = SceneSpec(background_range=(0.1, 0.4))
    bg = gen_background(seed, spec)
    assert np.array_equal(bg, gen_background(seed, spec))
    assert bg.min() >= np.float32(0.1) and bg.max() <= np.float32(0.4)


def test_frames_in_unit_range():
    for seq in gen_dataset(10, 0, SceneSpec(seq_len=6), GLYPHS):
        assert seq.frames.min() >= 0 and seq.frames.max() <= 1
        assert seq.frames.dtype == np.float32 and seq.labels.max() < 8


def test_still_variant_repeats_frames():
    seq = gen_sequence(4, SceneSpec(speed=0, seq_len=5), GLYPHS)
    assert all(np.array_equal(seq.frames[0], f) for f in seq.frames)
    assert len(set(seq.labels.tolist())) == 1


def test_dataset_is_deterministic():
    spec = SceneSpec(seq_len=5)
    a, b = gen_dataset(6, 9, spec, GLYPHS), gen_dataset(6, 9, spec, GLYPHS)
    assert all(np.array_equal(x.frames, y.frames) and np.array_equal(x.labels, y.labels) for x, y in zip(a, b))
    c = gen_dataset(6, 10, spec, GLYPHS)
    assert not np.array_equal(a[0].frames, c[0].frames)


def test_glyph_set_errors():
    with pytest.raises(ContractError):
        gen_sequence(0, SceneSpec(), GLYPHS[:0])
    with pytest.raises(ContractError):
        gen_sequence(0, SceneSpec(glyph_size=8), GLYPHS)


def test_builtin_glyphs():
    g = builtin_glyphs(10)
    assert g.shape == (10, 10, 10) and g.min() == 0 and g.max() == 1
    assert np.array_equal(g, builtin_glyphs(10))
    assert len({gl.tobytes() for gl in g}) == 10


def write_idx(path, images, magic=0x00000803, compress=False):
    n, h, w = images.shape
    raw = struct.pack(">4I", magic, n, h, w) + images.astype(np.uint8).tobytes()
    path.write_bytes(gzip.compress(raw) if compress else raw)


def test_idx_reader(tmp_path):
    images = np.random.default_rng(0).integers(0, 256, size=(7, 28, 28))
    write_idx(tmp_path / "d.idx", images)
    glyphs = load_digits_idx(tmp_path / "d.idx", glyph_size=10)
    assert glyphs.shape == (7, 10, 10)
    rows = np.arange(10) * 28 // 10
    np.testing.assert_allclose(glyphs[3], images[3][rows][:, rows] / 255.0, rtol=1e-6)
    write_idx(tmp_path / "d.idx.gz", images, compress=True)
    assert np.array_equal(load_digits_idx(tmp_path / "d.idx.gz", glyph_size=10), glyphs)


def test_idx_errors(tmp_path):
    images = np.zeros((3, 4, 4))
    write_idx(tmp_path / "bad.idx", images, magic=0x00000801)
    with pytest.raises(FormatError):
        load_digits_idx(tmp_path / "bad.idx")
    write_idx(tmp_path / "ok.idx", images)
    (tmp_path / "short.idx").write_bytes((tmp_path / "ok.idx").read_bytes()[:-5])
    with pytest.raises(FormatError):
        load_digits_idx(tmp_path / "short.idx")
    (tmp_path / "tiny.idx").write_bytes(b"\x00\x00")
    with pytest.raises(FormatError):
        load_digits_idx(tmp_path / "tiny.idx")


def test_idx_fallback(tmp_path):
    with pytest.warns(UserWarning):
        glyphs = load_digits_idx(tmp_path / "missing.idx", glyph_size=10)
    assert np.array_equal(glyphs, builtin_glyphs(10))
    with pytest.raises(FileNotFoundError):
        load_digits_idx(tmp_path / "missing.idx", fallback=False)


sequence_batches = st.tuples(st.integers(0, 4), st.integers(1, 5), st.integers(1, 2), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31))


def random_sequences(n, T, C, H, W, seed):
    rng = np.random.default_rng(seed)
    return [LabeledSequence(rng.random((T, C, H, W), dtype=np.float32), rng.integers(0, 8, T)) for _ in range(n)]


@settings(max_examples=100)
@given(sequence_batches)
def test_vseq_round_trip(tmp_path_factory, case):
    seqs = random_sequences(*case)
    path = tmp_path_factory.mktemp("vseq") / "d.vseq"
    write_vseq(seqs, path)
    back = read_vseq(path)
    assert len(back) == len(seqs)
    for a, b in zip(seqs, back):
        assert a.frames.tobytes() == b.frames.tobytes() and a.labels.tobytes() == b.labels.tobytes()


def test_vseq_empty_file(tmp_path):
    write_vseq([], tmp_path / "e.vseq")
    raw = (tmp_path / "e.vseq").read_bytes()
    assert raw[:4] == b"VSEQ" and raw[4] == 1 and len(raw) == 25
    assert read_vseq(tmp_path / "e.vseq") == []


def test_vseq_errors(tmp_path):
    write_vseq(random_sequences(2, 3, 1, 4, 4, 0), tmp_path / "d.vseq")
    raw = (tmp_path / "d.vseq").read_bytes()
    for name, data in {"trunc": raw[:-1], "extra": raw + b"\0", "magic": b"VSEX" + raw[4:], "version": raw[:4] + b"\x02" + raw[5:], "header": raw[:10]}.items():
        (tmp_path / name).write_bytes(data)
        with pytest.raises(FormatError):
            read_vseq(tmp_path / name)
    with pytest.raises(ContractError):
        write_vseq(random_sequences(1, 3, 1, 4, 4, 0) + random_sequences(1, 2, 1, 4, 4, 0), tmp_path / "mixed.vseq")


def test_class_balance(tmp_path):
    seqs = [LabeledSequence(np.zeros((3, 1, 2, 2)), [1, 1, 7]), LabeledSequence(np.zeros((3, 1, 2, 2)), [0, 1, 1])]
    assert class_balance(seqs).tolist() == [1, 4, 0, 0, 0, 0, 0, 1]
    write_class_balance_csv(seqs, tmp_path / "b.csv")
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert lines[0] == "label,count,fraction" and lines[2] == "1,4,0.666667"
