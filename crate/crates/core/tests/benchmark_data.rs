use hrda_core::data::{
    generate, iou_metrics, load_dataset, save_dataset, Domain, SceneSpec, Split, NUM_CLASSES,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn class_presence_and_pixel_fractions() {
    let d = generate(&SceneSpec::default(), 500, Domain::Source, Split::Train, 77).unwrap();
    let mut present = [0usize; NUM_CLASSES];
    let mut pixels = [0usize; NUM_CLASSES];
    for s in &d.samples {
        let mut seen = [false; NUM_CLASSES];
        for &c in &s.label.as_ref().unwrap().classes {
            pixels[c as usize] += 1;
            seen[c as usize] = true;
        }
        for (p, s) in present.iter_mut().zip(seen) {
            *p += usize::from(s);
        }
    }
    for (c, &p) in present.iter().enumerate() {
        assert!(
            p as f64 >= 0.3 * 500.0,
            "class {c} present in {p} of 500 images"
        );
    }
    let total: usize = pixels.iter().sum();
    let frac = |c: usize| pixels[c] as f64 / total as f64;
    assert!(
        frac(3) + frac(4) < 0.02,
        "small + thin = {}",
        frac(3) + frac(4)
    );
    assert!(frac(1) > 0.3, "large stuff = {}", frac(1));
}

#[test]
fn layouts_do_not_depend_on_domain() {
    let s = SceneSpec::default();
    let a = generate(&s, 20, Domain::Source, Split::Train, 5).unwrap();
    let b = generate(&s, 20, Domain::Target, Split::Train, 5).unwrap();
    for (x, y) in a.samples.iter().zip(&b.samples) {
        assert_eq!(x.label, y.label);
        assert_ne!(x.image, y.image);
    }
}

#[test]
fn save_load_round_trip_and_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    let s = SceneSpec {
        height: 64,
        width: 64,
        ..SceneSpec::default()
    };
    let mut d = generate(&s, 3, Domain::Source, Split::Train, 1).unwrap();
    d.samples.extend(
        generate(&s, 2, Domain::Target, Split::Val, 2)
            .unwrap()
            .samples,
    );
    save_dataset(dir.path(), &d).unwrap();
    assert_eq!(load_dataset(dir.path()).unwrap(), d);

    let victim = std::fs::read_dir(dir.path().join("images"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    std::fs::remove_file(&victim).unwrap();
    let err = load_dataset(dir.path()).unwrap_err().to_string();
    assert!(
        err.contains(victim.file_name().unwrap().to_str().unwrap()),
        "{err}"
    );
}

#[test]
fn iou_is_symmetric_under_joint_relabeling() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let n = rng.random_range(1..200);
        let pred: Vec<u8> = (0..n)
            .map(|_| rng.random_range(0..NUM_CLASSES as u8))
            .collect();
        let truth: Vec<u8> = (0..n)
            .map(|_| rng.random_range(0..NUM_CLASSES as u8))
            .collect();
        let mut perm: Vec<u8> = (0..NUM_CLASSES as u8).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let relabel = |v: &[u8]| v.iter().map(|&c| perm[c as usize]).collect::<Vec<u8>>();
        let (a, ma) = iou_metrics(&pred, &truth, NUM_CLASSES).unwrap();
        let (b, mb) = iou_metrics(&relabel(&pred), &relabel(&truth), NUM_CLASSES).unwrap();
        assert!((ma - mb).abs() < 1e-12);
        for c in 0..NUM_CLASSES {
            assert_eq!(a[c], b[perm[c] as usize]);
        }
    }
}
