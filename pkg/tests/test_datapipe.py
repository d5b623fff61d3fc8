import numpy as np
import pytest
from hypothesis import given, strategies as st

from simamnet.datapipe import (AugmentPolicy, DataError, Label, RadiographPair, Transform,
                               apply_transform, augment, dark_pixel_count, load_manifest,
                               read_pgm, sample_transform, split, stack_pairs, synth_generate,
                               to_model_input, write_manifest, write_pgm)
from simamnet.oracles import radius_ratio_label
from simamnet.rng import derive_rng


def _pair(rng, label=Label.NO_CHANGE, shape=(16, 16), pid="p"):
    return RadiographPair(pid, rng.random(shape), rng.random(shape), label)


def _write_manifest(tmp_path, lines):
    path = tmp_path / "m.tsv"
    path.write_text("\n".join("\t".join(f) for f in lines) + "\n")
    return path


def test_pgm_round_trip(tmp_path, rng):
    img = np.rint(rng.random((5, 7)) * 255) / 255
    write_pgm(tmp_path / "a.pgm", img)
    assert np.array_equal(read_pgm(tmp_path / "a.pgm"), img)
    (tmp_path / "b.pgm").write_bytes(b"P2\n# comment\n2 2\n4\n0 1\n2 4\n")
    assert read_pgm(tmp_path / "b.pgm").tolist() == [[0, 0.25], [0.5, 1.0]]


def test_manifest_order_and_errors(tmp_path, rng):
    for name in ("a", "b", "c"):
        write_pgm(tmp_path / f"{name}1.pgm", rng.random((8, 8)))
        write_pgm(tmp_path / f"{name}2.pgm", rng.random((8, 8)))
    write_pgm(tmp_path / "small.pgm", rng.random((4, 4)))
    good = [("z", "a1.pgm", "a2.pgm", "better"), ("y", "b1.pgm", "b2.pgm", "worse"),
            ("x", "c1.pgm", "c2.pgm", "nochange")]
    pairs = load_manifest(_write_manifest(tmp_path, good))
    assert [p.id for p in pairs] == ["z", "y", "x"]
    assert [p.label for p in pairs] == [Label.GETTING_BETTER, Label.GROWING_WORSE, Label.NO_CHANGE]
    bad = good[:1] + [("w", "b1.pgm", "b2.pgm", "improving")]
    with pytest.raises(DataError, match=":2:"):
        load_manifest(_write_manifest(tmp_path, bad))
    with pytest.raises(DataError):
        load_manifest(_write_manifest(tmp_path, [("v", "a1.pgm", "small.pgm", "better")]))
    with pytest.raises(DataError):
        load_manifest(_write_manifest(tmp_path, [("v", "a1.pgm", "missing.pgm", "better")]))
    with pytest.raises(DataError):
        load_manifest(_write_manifest(tmp_path, good[:1] * 2))
    with pytest.raises(DataError):
        load_manifest(tmp_path / "nope.tsv")


def test_manifest_png_and_rgb(tmp_path, rng):
    from PIL import Image
    rgb = (rng.random((8, 8, 3)) * 255).astype(np.uint8)
    Image.fromarray(rgb).save(tmp_path / "a.png")
    Image.fromarray(rgb).save(tmp_path / "b.png")
    path = _write_manifest(tmp_path, [("q", "a.png", "b.png", "worse")])
    gray = load_manifest(path)[0]
    np.testing.assert_allclose(gray.before, rgb.mean(axis=2) / 255, atol=1e-12)
    colour = load_manifest(path, keep_rgb=True)[0]
    assert colour.before.shape == (3, 8, 8)
    assert to_model_input(colour).shape == (6, 8, 8)


def test_write_manifest_round_trip(tmp_path):
    pairs = synth_generate(6, 3, size=32)
    manifest = write_manifest(pairs, tmp_path / "out")
    back = load_manifest(manifest)
    assert [p.id for p in back] == [p.id for p in pairs]
    for a, b in zip(pairs, back):
        assert a.label == b.label
        assert np.abs(a.before - b.before).max() <= 0.5 / 255 + 1e-12


def test_model_input_channels(rng):
    p = RadiographPair("c", np.full((4, 4), 0.2), np.full((4, 4), 0.8), Label.NO_CHANGE)
    x = to_model_input(p)
    assert x.shape == (2, 4, 4)
    assert x[0].mean() == pytest.approx(0.2) and x[1].mean() == pytest.approx(0.8)
    swapped = to_model_input(RadiographPair("d", p.after, p.before, p.label))
    assert np.array_equal(swapped, x[::-1])
    xs, ys = stack_pairs([p, p])
    assert xs.shape == (2, 2, 4, 4) and ys.tolist() == [1, 1]


def test_pair_extents_must_match(rng):
    with pytest.raises(DataError):
        RadiographPair("e", rng.random((64, 64)), rng.random((32, 32)), Label.NO_CHANGE)


def test_transform_examples(rng):
    p = _pair(rng)
    same = apply_transform(p, Transform())
    assert np.array_equal(same.before, p.before) and np.array_equal(same.after, p.after)
    for t in (Transform(hflip=True), Transform(vflip=True)):
        back = apply_transform(apply_transform(p, t), t)
        assert np.array_equal(back.before, p.before) and np.array_equal(back.after, p.after)
    bright = apply_transform(RadiographPair("f", np.full((4, 4), 0.9), np.full((4, 4), 0.9),
                                            Label.NO_CHANGE), Transform(brightness=1.2))
    assert np.all(bright.before == 1.0)


def test_transform_applied_identically_to_both_images(rng):
    img = rng.random((16, 16))
    p = RadiographPair("g", img, img.copy(), Label.GROWING_WORSE)
    out = augment(p, AugmentPolicy(), derive_rng(0, "t"))
    assert np.array_equal(out.before, out.after)


@given(st.integers(0, 2 ** 31 - 1))
def test_augment_preserves_label_extent_range(seed):
    rng = np.random.default_rng(seed)
    lab = Label(int(rng.integers(3)))
    p = _pair(rng, lab, (12, 10))
    out = augment(p, AugmentPolicy(), rng)
    assert out.label is lab
    for im in (out.before, out.after):
        assert im.shape == (12, 10) and im.min() >= 0 and im.max() <= 1


@pytest.mark.parametrize("angle", [-15, -10, -5, 5, 10, 15])
def test_rotation_preserves_mass_of_interior_content(angle):
    yy, xx = np.mgrid[0:64, 0:64]
    img = np.exp(-((yy - 31.5) ** 2 + (xx - 31.5) ** 2) / (2 * 8.0 ** 2))
    out = apply_transform(RadiographPair("h", img, img, Label.NO_CHANGE), Transform(angle=angle))
    assert abs(out.before.sum() / img.sum() - 1) < 0.02


def test_rotation_by_90_matches_rot90():
    img = np.random.default_rng(0).random((9, 9))
    out = apply_transform(RadiographPair("i", img, img, Label.NO_CHANGE), Transform(angle=90))
    # positive angles turn content clockwise as displayed
    np.testing.assert_allclose(out.before, np.rot90(img, -1), atol=1e-12)


def test_policy_validation():
    with pytest.raises(ValueError):
        AugmentPolicy(hflip_prob=1.5)
    with pytest.raises(ValueError):
        AugmentPolicy(brightness_range=(0.0, 1.2))
    t = sample_transform(AugmentPolicy(hflip_prob=0, vflip_prob=1, rotation_degrees=(5,),
                                       brightness_range=(1.1, 1.1)), derive_rng(0, "x"))
    assert t == Transform(False, True, 5.0, 1.1)


def test_synth_balance_and_determinism():
    pairs = synth_generate(300, 7)
    counts = np.bincount([int(p.label) for p in pairs], minlength=3)
    assert counts.tolist() == [100, 100, 100]
    again = synth_generate(300, 7)
    assert all(np.array_equal(a.before, b.before) and np.array_equal(a.after, b.after)
               for a, b in zip(pairs, again))
    counts = np.bincount([int(p.label) for p in synth_generate(31, 1)], minlength=3)
    assert counts.max() - counts.min() <= 1
    with pytest.raises(ValueError):
        synth_generate(2, 0)


def test_synth_lesion_shrinks_for_better_class():
    for p in synth_generate(60, 11):
        if p.label is Label.GETTING_BETTER:
            assert dark_pixel_count(p.after) < dark_pixel_count(p.before)


def test_synth_radius_oracle_accuracy():
    pairs = synth_generate(300, 7)
    hits = sum(radius_ratio_label(p.before, p.after) == int(p.label) for p in pairs)
    assert hits / len(pairs) >= 0.99


def test_split_examples():
    pairs = synth_generate(300, 7)
    tr, va = split(pairs, 0.2, 1)
    assert (len(tr), len(va)) == (240, 60)
    assert np.bincount([int(p.label) for p in va]).tolist() == [20, 20, 20]
    assert not {p.id for p in tr} & {p.id for p in va}
    assert {p.id for p in tr} | {p.id for p in va} == {p.id for p in pairs}
    tr2, va2 = split(pairs, 0.2, 1)
    assert [p.id for p in tr2] == [p.id for p in tr] and [p.id for p in va2] == [p.id for p in va]


def test_split_errors(rng):
    pairs = [_pair(rng, Label.NO_CHANGE, pid=str(i)) for i in range(4)]
    with pytest.raises(DataError):
        split(pairs, 0.5, 0)
    with pytest.raises(ValueError):
        split(synth_generate(6, 0), 1.0, 0)
