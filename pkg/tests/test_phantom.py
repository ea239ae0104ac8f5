import csv
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctseg import phantom
from ctseg.errors import ConfigError, IoError
from ctseg.phantom import PhantomSpec

SMALL = PhantomSpec(shape=(64, 64, 10))


def test_background_is_air():
    case = phantom.generate(SMALL)
    vals = case.volume.data[case.clean_hu == -1000.0].astype(np.float64)
    assert abs(vals.mean() + 1000) <= 3 * 15 / np.sqrt(vals.size)


def test_normal_has_no_lesions():
    case = phantom.generate(SMALL)
    assert not case.lesion_mask.any() and case.lesions == []


def test_seed_determinism():
    a = phantom.generate(PhantomSpec(shape=(48, 48, 8), cohort="covid", seed=7))
    b = phantom.generate(PhantomSpec(shape=(48, 48, 8), cohort="covid", seed=7))
    assert a.volume.data.tobytes() == b.volume.data.tobytes()
    assert a.mask.data.tobytes() == b.mask.data.tobytes()
    c = phantom.generate(PhantomSpec(shape=(48, 48, 8), cohort="covid", seed=8))
    assert a.volume.data.tobytes() != c.volume.data.tobytes()


def test_invalid_specs():
    for bad in (PhantomSpec(shape=(16, 64, 10)), PhantomSpec(cohort="flu"), PhantomSpec(noise_sigma=-1),
                PhantomSpec(lesion_count=(3, 1))):
        with pytest.raises(ConfigError):
            phantom.generate(bad)


@settings(max_examples=15)
@given(st.integers(0, 10_000), st.sampled_from(["normal", "covid"]))
def test_mask_labels_are_analytic(seed, cohort):
    spec = PhantomSpec(shape=(64, 64, 10), cohort=cohort, seed=seed)
    case = phantom.generate(spec)
    clean, mask = case.clean_hu, case.mask.data
    lung_lo, lung_hi = spec.lung_hu
    in_lung_range = (clean >= lung_lo) & (clean <= lung_hi)
    lesion_vals = (case.lesion_mask & ((clean >= spec.ggo_hu[0]) & (clean <= spec.ggo_hu[1])
                                        | (clean >= spec.consolidation_hu[0]) & (clean <= spec.consolidation_hu[1])))
    # mask voxels carry parenchyma or lesion HU; nothing outside the mask does
    assert np.all(in_lung_range[mask] | lesion_vals[mask])
    assert not np.any(in_lung_range & ~mask)
    assert not np.any(case.lesion_mask & ~mask)


def test_mask_excludes_airway_and_stays_in_body():
    case = phantom.generate(SMALL)
    mask = case.mask.data
    assert not np.any(mask & (case.clean_hu == -1000.0))
    # the airway column exists and is surrounded by body tissue
    mid = case.clean_hu[:, :, 5]
    assert np.any(mid == -1000.0) and mask[:, :, 5].any()


def test_covid_denser_than_normal_at_equal_seed():
    for seed in range(5):
        n = phantom.generate(PhantomSpec(shape=(64, 64, 10), cohort="normal", seed=seed))
        c = phantom.generate(PhantomSpec(shape=(64, 64, 10), cohort="covid", seed=seed))
        np.testing.assert_array_equal(n.mask.data, c.mask.data)
        assert c.lesion_mask.any()
        assert c.clean_hu[c.mask.data].mean() > n.clean_hu[n.mask.data].mean()


def test_lesions_are_peripheral():
    for seed in range(6):
        case = phantom.generate(PhantomSpec(cohort="covid", seed=seed))
        assert 1 <= len(case.lesions) <= 6
        for les in case.lesions:
            assert all(0 <= f <= phantom.PERIPHERAL_SHELL for f in les.shell_fraction)
            lo, hi = (-500, -300) if les.kind == "ggo" else (-20, 60)
            assert lo <= les.hu <= hi


def test_corpus(tmp_path):
    path = phantom.generate_corpus(tmp_path / "a", 3, 1, 2, base_seed=10, spec=PhantomSpec(shape=(40, 40, 8)))
    rows = phantom.read_manifest(path)
    assert len(rows) == 6
    assert [r["seed"] for r in rows] == [str(s) for s in range(10, 16)]
    assert sum(r["cohort"] == "covid" for r in rows[3:]) == 2
    assert len([f for f in os.listdir(tmp_path / "a") if f.endswith(".nii")]) == 12
    with open(path, newline="") as fh:
        assert next(csv.reader(fh)) == list(phantom.MANIFEST_FIELDS)
    phantom.generate_corpus(tmp_path / "b", 3, 1, 2, base_seed=10, spec=PhantomSpec(shape=(40, 40, 8)))
    for name in os.listdir(tmp_path / "a"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_corpus_errors(tmp_path):
    with pytest.raises(ConfigError):
        phantom.generate_corpus(tmp_path, 0, 1, 1)
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(IoError):
        phantom.generate_corpus(blocker / "sub", 1, 1, 1)
