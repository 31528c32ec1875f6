import json

import numpy as np
import pytest

from stun.core import ConfigError, ExperimentConfig, label_matrix, pairwise_geo_distances
from stun.synthdata import ManifestError, SynthSpec, generate, read_manifest, split_queries, write_manifest


def test_zero_noise_samples_of_a_place_identical():
    ds = generate(SynthSpec(num_places=3, samples_per_place=4, clean_std=0.0, noise_std=0.0, noisy_contrast=1.0,
                            image_shape=(3, 8, 8)))
    for p in range(3):
        imgs = [s.image for s, q in zip(ds.samples, ds.place) if q == p]
        assert all(np.array_equal(imgs[0], x) for x in imgs[1:])


def test_two_places_cross_pairs_negative():
    ds = generate(SynthSpec(num_places=2, samples_per_place=5, spacing=100.0, image_shape=(3, 8, 8)))
    pos, neg = label_matrix(pairwise_geo_distances(ds.geos()), ExperimentConfig())
    cross = ds.place[:, None] != ds.place[None, :]
    assert neg[cross].all()
    same = ~cross
    assert pos[same].all()


def test_same_seed_bit_identical():
    a, b = generate(SynthSpec(seed=7, num_places=4)), generate(SynthSpec(seed=7, num_places=4))
    assert a == b and a.fingerprint() == b.fingerprint()
    c = generate(SynthSpec(seed=8, num_places=4))
    assert a.fingerprint() != c.fingerprint()


def test_geo_grid_spacing():
    spec = SynthSpec(num_places=9, samples_per_place=3, jitter=0.0)
    ds = generate(spec)
    centres = np.unique(ds.geos(), axis=0)
    assert len(centres) == 9
    assert set(np.unique(centres[:, 0])) == {0.0, 100.0, 200.0}


def test_noise_labels_and_fraction():
    ds = generate(SynthSpec())
    noisy = np.array([lab == "noisy" for lab in ds.noise_label])
    assert noisy.sum() == 250
    assert set(ds.noise_std[noisy]) == {0.5} and set(ds.noise_std[~noisy]) == {0.05}


@pytest.mark.parametrize("bad", [
    {"spacing": 20.0}, {"noise_std": -1.0}, {"clean_std": -0.1}, {"noisy_contrast": 0.0},
    {"noisy_fraction": 1.5}, {"num_places": 0}, {"jitter": 40.0},
])
def test_spec_invariants(bad):
    with pytest.raises(ConfigError):
        SynthSpec(**bad)


def test_spec_from_dict_rejects_unknown():
    with pytest.raises(ConfigError):
        SynthSpec.from_dict({"num_place": 3})


def test_pixel_nn_oracle_separates_clean_set():
    ds = generate(SynthSpec(clean_std=0.0, noise_std=0.0, noisy_contrast=1.0, noisy_fraction=0.0))
    x = np.stack([s.image.ravel() for s in ds.samples]).astype(np.float64)
    db, q = split_queries(len(ds), 0.3, 0)
    d = ((x[q][:, None] - x[db][None]) ** 2).sum(-1)
    top1 = db[np.argmin(d, axis=1)]
    pos, _ = label_matrix(pairwise_geo_distances(ds.geos()), ExperimentConfig())
    assert pos[q, top1].mean() == 1.0


def test_noisy_residual_larger():
    ds = generate(SynthSpec())
    resid = []
    for p in range(50):
        idx = np.flatnonzero(ds.place == p)
        clean = [i for i in idx if ds.noise_label[i] == "clean"]
        if not clean:
            continue
        base = np.mean([ds.samples[i].image for i in clean], axis=0)
        for i in idx:
            resid.append((ds.noise_label[i] == "noisy", float(((ds.samples[i].image - base) ** 2).mean())))
    noisy = np.array([r for is_noisy, r in resid if is_noisy])
    clean = np.array([r for is_noisy, r in resid if not is_noisy])
    se = np.sqrt(noisy.var() / len(noisy) + clean.var() / len(clean))
    assert noisy.mean() - clean.mean() > 5 * se


def test_split_is_seeded_disjoint_and_independent_of_noise():
    db, q = split_queries(500, 0.3, 0)
    assert len(q) == 150 and len(np.intersect1d(db, q)) == 0 and len(db) + len(q) == 500
    assert np.array_equal(split_queries(500, 0.3, 0)[1], q)
    ds = generate(SynthSpec())
    frac = np.mean([ds.noise_label[i] == "noisy" for i in q])
    assert 0.35 < frac < 0.65


def test_manifest_round_trip(tmp_path):
    ds = generate(SynthSpec(num_places=3, samples_per_place=2, image_shape=(3, 8, 8)))
    path = write_manifest(ds, tmp_path)
    back = read_manifest(path)
    assert back == ds
    assert read_manifest(tmp_path) == ds
    rec = json.loads(path.read_text().splitlines()[0])
    assert set(rec) == {"id", "path", "easting", "northing", "noise", "noise_std"}


def test_manifest_missing_image_names_id(tmp_path):
    ds = generate(SynthSpec(num_places=2, samples_per_place=2, image_shape=(3, 8, 8)))
    write_manifest(ds, tmp_path)
    (tmp_path / "images" / "000003.npy").unlink()
    with pytest.raises(ManifestError, match="id 3"):
        read_manifest(tmp_path)


def test_manifest_malformed_line_number(tmp_path):
    ds = generate(SynthSpec(num_places=2, samples_per_place=2, image_shape=(3, 8, 8)))
    path = write_manifest(ds, tmp_path)
    lines = path.read_text().splitlines()
    lines[2] = '{"id": 2, "path": "images/000002.npy", "easting": 1.0}'
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ManifestError, match=":3:"):
        read_manifest(path)
    path.write_text("not json\n")
    with pytest.raises(ManifestError, match=":1:"):
        read_manifest(path)


def test_manifest_keeps_annulus_pairs(tmp_path):
    img = np.zeros((3, 4, 4), np.float32)
    (tmp_path / "a.npy").write_bytes(b"")
    np.save(tmp_path / "a.npy", img)
    lines = [{"id": 0, "path": "a.npy", "easting": 0.0, "northing": 0.0},
             {"id": 1, "path": "a.npy", "easting": 17.0, "northing": 0.0}]
    (tmp_path / "manifest.jsonl").write_text("\n".join(json.dumps(x) for x in lines) + "\n")
    ds = read_manifest(tmp_path)
    assert len(ds) == 2 and ds.noise_std is None and ds.noise_label == [None, None]
    pos, neg = label_matrix(pairwise_geo_distances(ds.geos()), ExperimentConfig())
    assert not pos[0, 1] and not neg[0, 1]


def test_manifest_reads_png(tmp_path):
    Image = pytest.importorskip("PIL.Image")

    Image.fromarray(np.full((6, 5, 3), 255, np.uint8)).save(tmp_path / "x.png")
    (tmp_path / "manifest.jsonl").write_text(json.dumps({"id": 1, "path": "x.png", "easting": 0, "northing": 0}) + "\n")
    ds = read_manifest(tmp_path)
    assert ds.samples[0].image.shape == (3, 6, 5) and ds.samples[0].image.max() == 1.0


def test_missing_manifest(tmp_path):
    with pytest.raises(ManifestError):
        read_manifest(tmp_path / "nope.jsonl")
