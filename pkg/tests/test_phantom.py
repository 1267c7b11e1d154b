import warnings

import numpy as np
import pytest

from aranet import dosimetry as dm
from aranet import phantom
from aranet.dosimetry import EmptyStructureError, MaskVolume
from aranet.phantom import Ellipsoid, PhantomError, PhantomSpec

from _oracles import brute_edt_sq


def test_generate_is_deterministic():
    a = phantom.generate(phantom.jittered_spec(5))
    b = phantom.generate(phantom.jittered_spec(5))
    assert a[0].values.tobytes() == b[0].values.tobytes()
    assert a[2].values.tobytes() == b[2].values.tobytes()
    assert all(m.values.tobytes() == n.values.tobytes() for m, n in zip(a[1], b[1]))
    c = phantom.generate(phantom.jittered_spec(6))
    assert c[2].values.tobytes() != a[2].values.tobytes()


@pytest.mark.parametrize("seed", range(6))
def test_generated_volumes_respect_ranges(seed):
    spec = phantom.jittered_spec(seed)
    ct, masks, dose = phantom.generate(spec)
    assert [m.label for m in masks] == list(phantom.STRUCTURE_LABELS)
    assert 0.0 <= ct.values.min() and ct.values.max() <= 1.0
    assert 0.0 <= dose.values.min() and dose.values.max() <= spec.prescription_gy * 1.05
    ptv = masks[0]
    assert ptv.voxels > 0
    assert np.all(dose.values[ptv.values == 1] == spec.prescription_gy)
    assert dm.v_at(dose, ptv, spec.prescription_gy) == 1.0
    piv = dose.values >= spec.prescription_gy
    assert np.all(piv[ptv.values == 1])
    for m in masks[1:]:
        assert not (m.values & ptv.values).any()
    # bones are brighter than soft tissue
    femur = masks[2].values == 1
    assert ct.values[femur].mean() > ct.values[(ct.values > 0) & ~femur].mean()


def test_dose_falls_off_along_rays_without_beams():
    spec = PhantomSpec(grid=(4, 64, 64), n_beams=0)
    _, masks, dose = phantom.generate(spec)
    ptv = masks[0].values.astype(bool)
    z = 2
    idx = np.argwhere(ptv[z])
    cy, cx = idx.mean(axis=0)
    for angle in np.linspace(0, 2 * np.pi, 16, endpoint=False):
        last, outside = None, False
        for t in np.arange(0, 40, 0.5):
            y, x = int(round(cy + t * np.sin(angle))), int(round(cx + t * np.cos(angle)))
            if not (0 <= y < 64 and 0 <= x < 64):
                break
            if ptv[z, y, x]:
                continue
            outside = True
            v = dose.values[z, y, x]
            if last is not None:
                assert v <= last
            last = v
        assert outside


def test_distance_transform_matches_exhaustive_search():
    rng = np.random.default_rng(0)
    for _ in range(15):
        shape = tuple(int(s) for s in rng.integers(1, 13, size=3))
        mask = rng.random(shape) < 0.1
        mask.flat[int(rng.integers(0, mask.size))] = True
        spacing = (3.0, 3.0, 3.0) if rng.random() < 0.5 else tuple(rng.uniform(1, 4, 3))
        got = phantom.distance_transform(MaskVolume(mask), spacing).values
        np.testing.assert_allclose(got, np.sqrt(brute_edt_sq(mask, spacing)).astype(np.float32), rtol=1e-6)
        assert np.all(got[mask] == 0)


def test_distance_transform_examples():
    mask = np.zeros((1, 1, 4), bool)
    mask[0, 0, 0] = True
    assert phantom.distance_transform(mask, (3, 3, 3)).values[0, 0, 1] == 3.0
    with pytest.raises(EmptyStructureError):
        phantom.distance_transform(np.zeros((2, 2, 2), bool), (1, 1, 1))


def test_validation_rejects_bad_geometry():
    with pytest.raises(PhantomError):
        phantom.generate(PhantomSpec(ptv=Ellipsoid("ptv", (4, 32, 32), (3, 10, 10)),
                                     oars=(Ellipsoid("bladder", (4, 32, 32), (2, 3, 3)),)))
    with pytest.raises(PhantomError):
        phantom.generate(PhantomSpec(ptv=Ellipsoid("ptv", (4, 2, 32), (3, 10, 10)), oars=()))
    with pytest.raises(PhantomError):
        phantom.generate(PhantomSpec(falloff_sigma_mm=0))


def test_cohort_split_partitions(tmp_path):
    manifest = phantom.make_dataset(54, 0, tmp_path, grid=(1, 16, 16))
    splits = [e.split for e in manifest.entries]
    assert (splits.count("train"), splits.count("val"), splits.count("test")) == (40, 6, 8)
    assert len({e.sample_id for e in manifest.entries}) == 54
    again = phantom.read_manifest(tmp_path)
    assert again == manifest


def test_same_seed_same_files(tmp_path):
    phantom.make_dataset(3, 9, tmp_path / "a", split=(1, 1, 1), grid=(2, 16, 16))
    phantom.make_dataset(3, 9, tmp_path / "b", split=(1, 1, 1), grid=(2, 16, 16))
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_single_sample_warns(tmp_path):
    with pytest.warns(UserWarning, match="empty"):
        manifest = phantom.make_dataset(1, 0, tmp_path, grid=(1, 16, 16))
    assert [e.split for e in manifest.entries] == ["train"]


def test_split_counts():
    assert phantom.split_counts(54) == (40, 6, 8)
    assert phantom.split_counts(10, (8, 1, 1)) == (8, 1, 1)
    assert sum(phantom.split_counts(27)) == 27
    with pytest.raises(ValueError):
        phantom.split_counts(0)


def test_load_split_round_trip(tiny_dataset):
    samples, presc = phantom.load_split(tiny_dataset, "train")
    assert presc == 45.0 and len(samples) == 2
    s = samples[0]
    assert [m.label for m in s.masks] == list(phantom.STRUCTURE_LABELS)
    assert s.ct.shape == s.dose.shape == (2, 32, 32)


def test_manifest_requires_prescription(tmp_path):
    (tmp_path / "manifest.txt").write_text("sample_000 train sample_000/ct.dvol\n")
    with pytest.raises(ValueError, match="prescription"):
        phantom.read_manifest(tmp_path)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        phantom.split_counts(3, (1, 1, 1))
