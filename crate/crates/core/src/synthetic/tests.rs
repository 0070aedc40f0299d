use super::*;
use crate::evaluation::read_ground_truth;
use crate::patching::PatchRecord;
use crate::volume_io::{load_volume, read_candidates};

fn small(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        num_scans: 3,
        volume_shape: [48, 48, 24],
        seed,
        ..SyntheticSpec::default()
    }
}

#[test]
fn defaults_match_desk_scale() {
    let s = SyntheticSpec::default();
    assert_eq!((s.num_scans, s.volume_shape, s.spacing_mm), (40, [96, 96, 48], [0.7, 0.7, 1.25]));
    assert_eq!((s.nodules.count, s.nodules.radius_mm, s.distractors.count), (3, [2.0, 5.0], 15));
    assert_eq!(s.noise_sigma_hu, 20.0);
    s.validate().unwrap();
}

#[test]
fn invalid_specs_are_rejected() {
    let mut s = small(0);
    s.nodules.radius_mm = [0.0, 2.0];
    assert!(s.validate().is_err());
    let mut s = small(0);
    s.distractors.length_mm = [5.0, 1.0];
    assert!(s.validate().is_err());
    let mut s = small(0);
    s.noise_sigma_hu = -1.0;
    assert!(generate(&s).is_err());
}

#[test]
fn no_nodules() {
    let mut s = small(1);
    s.nodules.count = 0;
    let d = generate(&s).unwrap();
    assert!(d.ground_truth.is_empty());
    assert_eq!(d.candidates.len(), 3 * 15);
    assert!(d.candidates.iter().all(|c| c.label == Some(Label::NonNodule)));
}

#[test]
fn seeded_generation_is_reproducible() {
    let a = generate(&small(9)).unwrap();
    let b = generate(&small(9)).unwrap();
    assert_eq!(a, b);
    let c = generate(&small(10)).unwrap();
    assert_ne!(a.volumes[0].voxels(), c.volumes[0].voxels());
    // scans come from independent streams
    assert_eq!(generate_scan(&small(9), 2).unwrap().volume, a.volumes[2]);
}

#[test]
fn counts_scale_with_spec() {
    let mut s = small(2);
    s.num_scans = 10;
    s.nodules.count = 5;
    s.distractors.count = 2;
    let d = generate(&s).unwrap();
    assert_eq!(d.ground_truth.len(), 50);
    assert_eq!(d.candidates.iter().filter(|c| c.is_nodule()).count(), 50);
    assert_eq!(d.volumes.len(), 10);
}

#[test]
fn crowded_scan_fails_placement() {
    let mut s = small(3);
    s.volume_shape = [16, 16, 8];
    s.nodules.count = 20;
    s.nodules.radius_mm = [3.0, 3.0];
    assert!(matches!(generate(&s), Err(Error::Synthetic(_))));
}

#[test]
fn nodule_centres_carry_configured_intensity() {
    let mut s = small(4);
    s.noise_sigma_hu = 0.0;
    let d = generate(&s).unwrap();
    let [lo, hi] = s.nodules.intensity_hu;
    for g in &d.ground_truth {
        let v = d.volumes.iter().find(|v| v.series_id() == g.series_id).unwrap();
        let [x, y, z] = v.nearest_voxel(g.center_mm);
        let hu = v.get(x as usize, y as usize, z as usize) as f64;
        assert!(hu >= lo.round() && hu <= hi.round(), "{hu}");
        assert!(g.radius_mm() >= 2.0 && g.radius_mm() <= 5.0);
    }
    // background stays air away from every object
    assert!(d.volumes[0].voxels().iter().filter(|&&h| h == AIR_HU).count() > d.volumes[0].voxels().len() / 2);
}

#[test]
fn every_nodule_has_a_hitting_candidate_and_extracts() {
    let d = generate(&small(5)).unwrap();
    for g in &d.ground_truth {
        assert!(d.candidates.iter().any(|c| c.is_nodule() && g.is_hit_by(c)));
    }
    for c in &d.candidates {
        let v = d.volumes.iter().find(|v| v.series_id() == c.series_id).unwrap();
        PatchRecord::extract(v, c).unwrap();
    }
}

#[test]
fn export_round_trips() {
    let d = generate(&small(6)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let paths = export(&d, dir.path()).unwrap();
    for v in &d.volumes {
        let loaded = load_volume(paths.volume_dir.join(format!("{}.mhd", v.series_id()))).unwrap();
        assert_eq!(&loaded, v);
    }
    let cands = read_candidates(&paths.candidates).unwrap();
    assert_eq!(cands, d.candidates);
    let gt = read_ground_truth(&paths.ground_truth).unwrap();
    assert_eq!(gt.len(), d.ground_truth.len());
    for (a, b) in gt.iter().zip(&d.ground_truth) {
        assert_eq!(a.diameter_mm(), 2.0 * b.radius_mm());
        assert_eq!(a, b);
    }
}

#[test]
fn export_into_unwritable_location_fails_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("plain-file");
    std::fs::write(&file, b"x").unwrap();
    let err = export(&generate(&small(7)).unwrap(), file.join("sub")).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
    assert!(!file.join("sub").join(CANDIDATES_FILE).exists());
}
