use std::collections::HashSet;

use fusionnet_core::architecture::{FusionNet, NetworkSpec};
use fusionnet_core::augment::{
    add_gaussian_noise, crop_center, d4_apply, elastic_warp, enrich, mirror_pad, plain_predict,
    sample_elastic_field, sample_rng, tta_predict, ElasticField, Orientation, FIELD_SIZE,
};
use fusionnet_core::grid::{Grid, Image, Mask, SamplePair};
use fusionnet_core::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(seed: u64, h: usize, w: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Grid::from_fn(h, w, |_, _| rng.random::<f32>())
}

fn pair_from(image: Image) -> SamplePair {
    let label = image.map(|v| (v > 0.5) as u8);
    SamplePair::new(image, label).unwrap()
}

// rotation oracle: counter-clockwise quarter turn = transpose, then reverse rows
fn rot90_oracle<T: Copy>(g: &Grid<T>) -> Grid<T> {
    let n = g.height();
    let t = Grid::from_fn(n, n, |y, x| g.get(x, y));
    Grid::from_fn(n, n, |y, x| t.get(n - 1 - y, x))
}

fn mirror_oracle<T: Copy>(g: &Grid<T>) -> Grid<T> {
    Grid::from_fn(g.height(), g.width(), |y, x| g.get(y, g.width() - 1 - x))
}

#[test]
fn orientation_table_is_the_dihedral_group() {
    let all = Orientation::all();
    assert_eq!(all.iter().collect::<HashSet<_>>().len(), 8);
    assert_eq!(all[0], Orientation::IDENTITY);
    let x = random_image(1, 5, 5);
    for a in all {
        assert!(all.contains(&a.inverse()));
        assert_eq!(a.compose(a.inverse()), Orientation::IDENTITY);
        for b in all {
            let ab = a.compose(b);
            assert!(all.contains(&ab));
            let lhs = d4_apply(&d4_apply(&x, b).unwrap(), a).unwrap();
            assert_eq!(lhs, d4_apply(&x, ab).unwrap(), "{a:?} ∘ {b:?}");
        }
    }
}

#[test]
fn orientation_matches_rotation_and_mirror_oracles() {
    let x = random_image(2, 5, 5);
    let mut expect = x.clone();
    for deg in [0, 90, 180, 270] {
        let g = Orientation::new(deg, false).unwrap();
        assert_eq!(d4_apply(&x, g).unwrap(), expect);
        let f = Orientation::new(deg, true).unwrap();
        assert_eq!(d4_apply(&x, f).unwrap(), rotate_n(&mirror_oracle(&x), deg / 90));
        expect = rot90_oracle(&expect);
    }
}

fn rotate_n<T: Copy>(g: &Grid<T>, n: u32) -> Grid<T> {
    (0..n).fold(g.clone(), |acc, _| rot90_oracle(&acc))
}

#[test]
fn identity_and_four_quarter_turns() {
    let x = random_image(3, 7, 7);
    assert_eq!(d4_apply(&x, Orientation::IDENTITY).unwrap(), x);
    let r = Orientation::new(90, false).unwrap();
    let y = (0..4).fold(x.clone(), |acc, _| d4_apply(&acc, r).unwrap());
    assert_eq!(y, x);
}

#[test]
fn every_element_is_undone_by_its_inverse() {
    let x = random_image(4, 5, 5);
    for g in Orientation::all() {
        let back = d4_apply(&d4_apply(&x, g).unwrap(), g.inverse()).unwrap();
        assert_eq!(back, x, "{g:?}");
    }
}

#[test]
fn quarter_turn_of_non_square_is_rejected() {
    let x = random_image(5, 4, 6);
    assert!(d4_apply(&x, Orientation::new(90, false).unwrap()).is_err());
    assert!(d4_apply(&x, Orientation::new(270, true).unwrap()).is_err());
    assert_eq!(d4_apply(&x, Orientation::new(180, true).unwrap()).unwrap().dims(), (4, 6));
}

#[test]
fn enrich_multiplies_by_eight_and_keeps_pairs_together() {
    let data: Vec<_> = (0..30).map(|i| pair_from(random_image(i, 6, 6))).collect();
    let out = enrich(&data).unwrap();
    assert_eq!(out.len(), 240);
    for (i, p) in out.iter().enumerate() {
        let src = &data[i / 8];
        let g = Orientation::all()[i % 8];
        assert_eq!(p.image, d4_apply(&src.image, g).unwrap());
        assert_eq!(p.label, p.image.map(|v| (v > 0.5) as u8));
    }
    assert!(enrich(&[]).unwrap().is_empty());
}

#[test]
fn enrich_variants_of_asymmetric_and_constant_images() {
    let asym = pair_from(random_image(6, 5, 5));
    let set: HashSet<Vec<u32>> = enrich(&[asym])
        .unwrap()
        .iter()
        .map(|p| p.image.data().iter().map(|v| v.to_bits()).collect())
        .collect();
    assert_eq!(set.len(), 8);

    let flat = SamplePair::new(Grid::filled(5, 5, 0.3), Grid::filled(5, 5, 1)).unwrap();
    assert!(enrich(std::slice::from_ref(&flat)).unwrap().iter().all(|p| *p == flat));
}

#[test]
fn elastic_field_invariants() {
    let zero = sample_elastic_field(&mut ChaCha8Rng::seed_from_u64(0), 0.0).unwrap();
    assert!(zero.vectors().iter().all(|v| *v == [0.0, 0.0]));

    for seed in 0..1000 {
        let f = sample_elastic_field(&mut ChaCha8Rng::seed_from_u64(seed), 10.0).unwrap();
        for y in 0..FIELD_SIZE {
            for x in 0..FIELD_SIZE {
                let v = f.node(y, x);
                if y == 0 || x == 0 || y == FIELD_SIZE - 1 || x == FIELD_SIZE - 1 {
                    assert_eq!(v, [0.0, 0.0]);
                }
                assert!(v[0].hypot(v[1]) <= 10.0);
            }
        }
        // round trip through the validating constructor
        ElasticField::from_vectors(f.vectors().to_vec(), 10.0).unwrap();
    }
    let a = sample_elastic_field(&mut ChaCha8Rng::seed_from_u64(7), 5.0).unwrap();
    let b = sample_elastic_field(&mut ChaCha8Rng::seed_from_u64(7), 5.0).unwrap();
    assert_eq!(a, b);
    assert!(sample_elastic_field(&mut ChaCha8Rng::seed_from_u64(7), -1.0).is_err());
}

#[test]
fn elastic_field_validation() {
    let mut v = vec![[0.0f32; 2]; FIELD_SIZE * FIELD_SIZE];
    v[0] = [0.5, 0.0];
    assert!(ElasticField::from_vectors(v.clone(), 1.0).is_err());
    v[0] = [0.0, 0.0];
    v[FIELD_SIZE + 1] = [3.0, 4.0];
    assert!(ElasticField::from_vectors(v.clone(), 4.9).is_err());
    assert!(ElasticField::from_vectors(v, 5.0).is_ok());
    assert!(ElasticField::from_vectors(vec![[0.0; 2]; 3], 1.0).is_err());
}

#[test]
fn zero_field_is_an_exact_identity() {
    let pair = pair_from(random_image(8, 33, 33));
    let out = elastic_warp(&pair, &ElasticField::zero());
    assert_eq!(out.label, pair.label);
    assert_eq!(out.image, pair.image);
}

#[test]
fn constant_image_is_unchanged_by_any_field() {
    let pair = SamplePair::new(Grid::filled(40, 40, 0.625), Grid::filled(40, 40, 0)).unwrap();
    let field = sample_elastic_field(&mut ChaCha8Rng::seed_from_u64(9), 10.0).unwrap();
    let out = elastic_warp(&pair, &field);
    assert!(out.image.data().iter().all(|&v| (v - 0.625).abs() < 1e-6));
    assert_eq!(out.label, pair.label);
}

#[test]
fn bright_pixel_follows_the_displacement() {
    let n = 64;
    let mut image = Grid::filled(n, n, 0.0f32);
    image.set(32, 30, 1.0);
    let pair = SamplePair::new(image, Grid::filled(n, n, 0)).unwrap();
    let out = elastic_warp(&pair, &ElasticField::uniform_interior(2.0, 0.0));
    let (mut mass, mut cx, mut cy) = (0.0f64, 0.0f64, 0.0f64);
    for y in 0..n {
        for x in 0..n {
            let v = out.image.get(y, x) as f64;
            mass += v;
            cx += v * x as f64;
            cy += v * y as f64;
        }
    }
    let (cx, cy) = (cx / mass, cy / mass);
    assert!((cx - 32.0).abs() < 0.5, "centroid x {cx}");
    assert!((cy - 32.0).abs() < 0.5, "centroid y {cy}");
}

#[test]
fn upsampled_field_hits_nodes_at_corners() {
    let f = sample_elastic_field(&mut ChaCha8Rng::seed_from_u64(10), 4.0).unwrap();
    let up = f.upsample(45, 45);
    // with 45 pixels, node k lands exactly on pixel 4k
    for k in 0..FIELD_SIZE {
        for j in 0..FIELD_SIZE {
            let a = up.get(4 * k, 4 * j);
            let b = f.node(k, j);
            assert!((a[0] - b[0]).abs() < 1e-6 && (a[1] - b[1]).abs() < 1e-6);
        }
    }
}

#[test]
fn noise_statistics_and_range() {
    let mid = Grid::filled(256, 256, 0.5f32);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let noisy = add_gaussian_noise(&mid, 0.1, &mut rng).unwrap();
    let diffs: Vec<f64> = noisy.data().iter().map(|&v| v as f64 - 0.5).collect();
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (diffs.len() - 1) as f64;
    assert!((var.sqrt() - 0.1).abs() < 0.005, "std {}", var.sqrt());

    let img = random_image(12, 64, 64);
    let loud = add_gaussian_noise(&img, 0.5, &mut rng).unwrap();
    assert!(loud.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert_eq!(add_gaussian_noise(&img, 0.0, &mut rng).unwrap(), img);

    let a = add_gaussian_noise(&img, 0.1, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let b = add_gaussian_noise(&img, 0.1, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn mirror_pad_sizes() {
    let x = Grid::filled(512, 512, 0u8);
    assert_eq!(mirror_pad(&x, 64).unwrap().dims(), (640, 640));
    let y = random_image(13, 9, 7);
    assert_eq!(mirror_pad(&y, 0).unwrap(), y);
    assert!(mirror_pad(&y, 7).is_err());
    assert_eq!(mirror_pad(&y, 6).unwrap().dims(), (21, 19));
}

// 1D oracle: the padded row is the reversed interior (edge excluded), the row
// itself and the reversed interior again, built by slicing.
fn reflected_indices(n: usize, r: usize) -> Vec<usize> {
    let idx: Vec<usize> = (0..n).collect();
    let mut out: Vec<usize> = idx[1..=r].iter().rev().copied().collect();
    out.extend(&idx);
    out.extend(idx[n - 1 - r..n - 1].iter().rev());
    out
}

#[test]
fn mirror_pad_matches_reflection_oracle() {
    let x = Grid::from_fn(6, 6, |y, x| (y * 6 + x) as u32);
    let p = mirror_pad(&x, 2).unwrap();
    let rows = reflected_indices(6, 2);
    assert_eq!(rows, vec![2, 1, 0, 1, 2, 3, 4, 5, 4, 3]);
    for (py, &sy) in rows.iter().enumerate() {
        for (px, &sx) in rows.iter().enumerate() {
            assert_eq!(p.get(py, px), x.get(sy, sx), "({py}, {px})");
        }
    }
    // distance d outside the border equals distance d inside
    for d in 1..=2 {
        for j in 0..6 {
            assert_eq!(p.get(2 - d, j + 2), x.get(d, j));
            assert_eq!(p.get(7 + d, j + 2), x.get(5 - d, j));
        }
    }
}

#[test]
fn crop_center_inverts_padding() {
    for r in [1, 5, 64] {
        let x = random_image(14 + r as u64, 130, 130);
        assert_eq!(crop_center(&mirror_pad(&x, r).unwrap(), r).unwrap(), x);
    }
    assert_eq!(crop_center(&Grid::filled(640, 640, 0u8), 64).unwrap().dims(), (512, 512));
    let x = random_image(20, 4, 4);
    assert_eq!(crop_center(&x, 0).unwrap(), x);
    assert!(crop_center(&x, 2).is_err());
}

#[test]
fn tta_of_constant_predictor_is_constant() {
    let model = |x: &Image| -> Result<Image> { Ok(Grid::filled(x.height(), x.width(), 0.5)) };
    let out = tta_predict(&model, &random_image(21, 12, 12), 3).unwrap();
    assert_eq!(out.dims(), (12, 12));
    assert!(out.data().iter().all(|&v| v == 0.5));
}

#[test]
fn tta_equals_plain_prediction_for_a_pointwise_model() {
    let model = |x: &Image| -> Result<Image> { Ok(x.map(|v| 1.0 / (1.0 + (-3.0 * v + 1.0).exp()))) };
    let x = random_image(22, 10, 10);
    let a = tta_predict(&model, &x, 4).unwrap();
    let b = plain_predict(&model, &x, 4).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-6);
}

#[test]
fn tta_is_equivariant_for_a_network() {
    let spec = NetworkSpec {
        levels: 2,
        base_features: 4,
        input_size: [16, 16],
        ..NetworkSpec::default()
    };
    let net = FusionNet::<f32>::build(spec, 23).unwrap();
    let x = random_image(24, 12, 12);
    let base = tta_predict(&net, &x, 2).unwrap();
    assert!(base.data().iter().all(|&v| v > 0.0 && v < 1.0));
    let plain = plain_predict(&net, &x, 2).unwrap();
    assert_eq!(plain.dims(), (12, 12));
    for h in Orientation::all() {
        let lhs = tta_predict(&net, &d4_apply(&x, h).unwrap(), 2).unwrap();
        let rhs = d4_apply(&base, h).unwrap();
        assert!(lhs.max_abs_diff(&rhs) <= 1e-5, "{h:?}: {}", lhs.max_abs_diff(&rhs));
    }
}

#[test]
fn sample_streams_are_distinct_and_reproducible() {
    let draw = |s, e, i| sample_rng(s, e, i).random::<u64>();
    assert_eq!(draw(1, 2, 3), draw(1, 2, 3));
    assert_ne!(draw(1, 2, 3), draw(1, 3, 2));
    assert_ne!(draw(1, 2, 3), draw(1, 2, 4));
    assert_ne!(draw(1, 2, 3), draw(2, 2, 3));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn warp_keeps_labels_binary(seed in any::<u64>(), amp in 0.0f32..12.0, n in 2usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image: Image = Grid::from_fn(n, n, |_, _| rng.random::<f32>());
        let label: Mask = image.map(|v| (v > 0.5) as u8);
        let field = sample_elastic_field(&mut rng, amp).unwrap();
        let out = elastic_warp(&SamplePair::new(image, label).unwrap(), &field);
        prop_assert!(out.label.data().iter().all(|&v| v <= 1));
        prop_assert!(out.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert_eq!(out.image.dims(), (n, n));
    }

    #[test]
    fn padded_values_come_from_the_source(seed in any::<u64>(), h in 2usize..12, w in 2usize..12, r in 0usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Grid::from_fn(h, w, |_, _| rng.random_range(0u32..1000));
        match mirror_pad(&x, r) {
            Ok(p) => {
                let src: HashSet<u32> = x.data().iter().copied().collect();
                prop_assert!(p.data().iter().all(|v| src.contains(v)));
                prop_assert_eq!(crop_center(&p, r).unwrap(), x);
            }
            Err(_) => prop_assert!(r >= h.min(w)),
        }
    }
}
