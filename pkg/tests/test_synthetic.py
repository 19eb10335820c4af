import json

from PIL import Image

from albumdate.catalog import load_manifest
from albumdate.regions import SidecarDetector, build_region_datasets
from albumdate.synthetic import SyntheticConfig, generate


def test_generate_small_set(tmp_path):
    cfg = SyntheticConfig(n_photos=30, seed=4)
    manifest = generate(tmp_path, cfg)
    cat = load_manifest(manifest)
    assert len(cat) == 30 and cat.rejections == ()
    assert {r.year for r in cat} <= set(cfg.years)
    first = cat.records[0]
    assert Image.open(tmp_path / first.image_ref).size == (cfg.width, cfg.height)
    assert (tmp_path / "detections" / f"{first.photo_id}.json").exists()


def test_generate_is_deterministic(tmp_path):
    a = generate(tmp_path / "a", SyntheticConfig(n_photos=5, seed=1))
    b = generate(tmp_path / "b", SyntheticConfig(n_photos=5, seed=1))
    assert a.read_bytes() == b.read_bytes()
    for name in ("syn00000", "syn00004"):
        assert (tmp_path / "a/images" / f"{name}.png").read_bytes() == (tmp_path / "b/images" / f"{name}.png").read_bytes()
        assert json.loads((tmp_path / "a/detections" / f"{name}.json").read_text()) == \
            json.loads((tmp_path / "b/detections" / f"{name}.json").read_text())


def test_sidecars_give_matching_faces_and_people(tmp_path):
    generate(tmp_path, SyntheticConfig(n_photos=20, seed=2, false_positive_rate=0.0))
    cat = load_manifest(tmp_path / "manifest.csv")
    regions = build_region_datasets(cat, SidecarDetector(tmp_path / "detections"), image_root=tmp_path)
    for pid in cat.photo_ids:
        faces, people = regions.counts(pid)
        assert faces == people
