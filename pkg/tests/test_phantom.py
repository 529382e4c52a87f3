"""Tests for the synthetic archive generator."""

from __future__ import annotations

import dataclasses
import json

import numpy as np
import pytest

from symmetry_cad.exceptions import InsufficientDataError, PhantomConfigError
from symmetry_cad.phantom import (
    VENDORS,
    Lesion,
    PhantomConfig,
    dataset_table,
    generate_dataset,
    load_image,
    load_manifest,
    read_pgm,
    render_breast,
    render_exam,
    split_dataset,
    write_dataset,
)

SMALL = PhantomConfig(
    n_exams=24,
    image_height_px=240,
    image_width_px=180,
    pixel_spacing_cm=0.04,
    mass_radius_range_cm=(0.3, 0.6),
    seed=3,
)


def test_malignant_fraction_follows_config():
    manifest = generate_dataset(PhantomConfig(n_exams=1000, malignant_fraction=0.42, seed=7))

    malignant = sum(exam.label == "malignant" for exam in manifest.exams)

    assert 390 <= malignant <= 450


def test_zero_malignant_fraction_has_no_lesions():
    manifest = generate_dataset(dataclasses.replace(SMALL, malignant_fraction=0.0))

    assert all(exam.label == "normal" for exam in manifest.exams)
    assert sum(len(record.lesions) for _, record in manifest.iter_images()) == 0


def test_generation_is_deterministic():
    assert generate_dataset(SMALL).to_json() == generate_dataset(SMALL).to_json()


def test_labels_and_missing_lateralities():
    manifest = generate_dataset(dataclasses.replace(SMALL, missing_laterality_fraction=0.25))

    missing = [exam for exam in manifest.exams if exam.missing_laterality]
    assert len(missing) == 6
    for exam in manifest.exams:
        assert (exam.label == "malignant") == any(record.lesions for record in exam.images)
        lateralities = {record.laterality for record in exam.images}
        if exam.missing_laterality:
            assert lateralities == {"left", "right"} - {exam.missing_laterality}
            assert len(exam.images) == 2
        else:
            assert len(exam.images) == 4


def test_lesion_shared_across_views_of_one_breast():
    manifest = generate_dataset(dataclasses.replace(SMALL, malignant_fraction=1.0))

    for exam in manifest.exams:
        by_view = {record.view: {les.lesion_id for les in record.lesions} for record in exam.images if record.lesions}
        assert set(by_view) == {"MLO", "CC"}
        assert by_view["MLO"] == by_view["CC"]


@pytest.mark.parametrize(
    ("field", "value"),
    [
        ("malignant_fraction", 1.5),
        ("missing_laterality_fraction", -0.1),
        ("vendor_weights", (0.5, 0.5, 0.5)),
        ("pixel_spacing_cm", 0.0),
        ("mass_radius_range_cm", (0.9, 0.4)),
    ],
)
def test_invalid_config_names_the_field(field, value):
    with pytest.raises(PhantomConfigError, match=field) as excinfo:
        PhantomConfig(**{field: value})

    assert excinfo.value.field == field


def test_symmetric_breasts_are_exact_mirrors():
    config = dataclasses.replace(SMALL, asymmetry_texture_strength=0.0)

    left = render_breast(np.random.default_rng(5), "GE", [], laterality="left", config=config)
    right = render_breast(np.random.default_rng(5), "GE", [], laterality="right", config=config)

    np.testing.assert_array_equal(right.pixels, np.fliplr(left.pixels))


def test_rendered_intensities_stay_in_unit_range():
    image = render_breast(np.random.default_rng(1), "Hologic", [], view="CC", config=SMALL)

    assert image.pixels.shape == SMALL.shape
    assert image.pixels.min() >= 0.0
    assert image.pixels.max() <= 1.0


def test_lesion_raises_local_intensity():
    config = dataclasses.replace(SMALL, asymmetry_texture_strength=0.0)
    lesion = Lesion(lesion_id="L0", center_rc=(120, 40), radius_px=12.0, contrast=0.4)

    image = render_breast(np.random.default_rng(2), "GE", [lesion], config=config)

    rows, cols = np.mgrid[0 : config.image_height_px, 0 : config.image_width_px]
    dist = np.hypot(rows - 120, cols - 40)
    inside = image.pixels[lesion.support_mask(config.shape)].mean()
    annulus = image.pixels[(dist >= 1.2 * 12) & (dist <= 1.8 * 12)].mean()
    assert inside - annulus >= 0.2


def test_lesion_outside_image_is_rejected():
    lesion = Lesion(lesion_id="L0", center_rc=(1000, 10), radius_px=5.0)

    with pytest.raises(PhantomConfigError, match="lesions"):
        render_breast(np.random.default_rng(0), "GE", [lesion], config=SMALL)


def test_split_sizes_follow_ratios():
    config = PhantomConfig(n_exams=1000, malignant_fraction=0.0, repeat_patient_fraction=0.0, seed=11)
    manifest = generate_dataset(config)

    train, val, test = split_dataset(manifest, (0.5, 0.1, 0.4), seed=4)

    assert abs(len(train) - 500) <= 3
    assert abs(len(val) - 100) <= 3
    assert abs(len(test) - 400) <= 3
    assert len(train) + len(val) + len(test) == 1000
    for part in (train, val, test):
        for vendor, weight in zip(VENDORS, config.vendor_weights):
            share = sum(exam.vendor == vendor for exam in part.exams) / len(part)
            assert abs(share - weight) <= 0.05


def test_split_is_patient_level_and_deterministic():
    manifest = generate_dataset(dataclasses.replace(SMALL, n_exams=60, repeat_patient_fraction=0.5))

    first = split_dataset(manifest, seed=9)
    second = split_dataset(manifest, seed=9)

    split_of = {}
    for part in first:
        for exam in part.exams:
            assert split_of.setdefault(exam.patient_id, exam.split) == exam.split
    assert [e.exam_id for part in first for e in part.exams] == [e.exam_id for part in second for e in part.exams]
    assert len({exam.patient_id for exam in manifest.exams}) < len(manifest)


def test_split_needs_three_patients():
    manifest = generate_dataset(dataclasses.replace(SMALL, n_exams=2, repeat_patient_fraction=0.0))

    with pytest.raises(InsufficientDataError):
        split_dataset(manifest)


def test_split_rejects_bad_ratios():
    manifest = generate_dataset(SMALL)

    with pytest.raises(PhantomConfigError, match="ratios"):
        split_dataset(manifest, (0.5, 0.5, 0.5))


def test_written_dataset_reloads(tmp_path):
    manifest = generate_dataset(dataclasses.replace(SMALL, n_exams=3, malignant_fraction=0.5))

    written = write_dataset(manifest, tmp_path, threads=2)
    loaded = load_manifest(tmp_path / "manifest.json")

    assert loaded == written
    assert json.loads((tmp_path / "manifest.json").read_text())["schema_version"] == 1
    exam = loaded.exams[0]
    record = exam.images[0]
    rendered = render_exam(loaded.config, exam)[record.image_id]
    pixels = read_pgm(tmp_path / record.path)
    np.testing.assert_allclose(pixels, rendered.pixels, atol=1.0 / 65535)
    image = load_image(tmp_path, exam, record, loaded.config)
    assert image.lesions == record.lesions
    assert image.exam_id == exam.exam_id


def test_dataset_table_counts_every_image():
    manifest = generate_dataset(SMALL)

    table = dataset_table(manifest)

    assert sum(row["studies"] for row in table.values()) == len(manifest)
    n_images = sum(len(exam.images) for exam in manifest.exams)
    assert sum(row["normal_images"] + row["malignant_images"] for row in table.values()) == n_images
