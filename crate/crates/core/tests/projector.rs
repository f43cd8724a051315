use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

use padm_core::harness::metrics::rmse;
use padm_core::image::{EmissionMap, Image, MuMap};
use padm_core::projector::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn field(side: usize, spacing: f64, f: impl Fn(f64, f64) -> f64) -> Image {
    let mut img = Image::zeros(side, spacing);
    for r in 0..side {
        for c in 0..side {
            let (x, y) = img.center_of(r, c);
            img.set(r, c, f(x, y));
        }
    }
    img
}

fn disk(side: usize, spacing: f64, radius: f64, value: f64) -> Image {
    field(side, spacing, |x, y| if x * x + y * y <= radius * radius { value } else { 0.0 })
}

fn random_image(side: usize, rng: &mut impl Rng) -> Image {
    Image::new(side, 1.0, (0..side * side).map(|_| rng.random::<f64>()).collect()).unwrap()
}

#[test]
fn single_pixel_hits_one_bin_per_view() {
    let geo = Geometry::parallel(12, 9, 1.0).unwrap();
    let mut a = Image::zeros(9, 1.0);
    a.set(4, 4, 1.0);
    let sino = forward_project(&EmissionMap::new(a).unwrap(), None, &geo).unwrap();
    for (m, &phi) in geo.angles().iter().enumerate() {
        for k in 0..geo.n_bins() {
            let v = sino.get(m, k);
            if k == 4 {
                let chord = 1.0 / phi.cos().abs().max(phi.sin().abs());
                assert!((v - chord).abs() <= geo.step() + 1e-12, "angle {phi}: {v} vs {chord}");
            } else {
                assert_eq!(v, 0.0, "angle {phi}, bin {k}");
            }
        }
    }
    assert_eq!(sino.get(0, 4), 1.0);
    assert_eq!(sino.get(6, 4), 1.0);
}

/// Fine-step marching through the same bilinear μ field: mean survival
/// probability along the chord of pixel `(row, col)` on the central ray.
fn fine_survival(mu: &Image, row: usize, col: usize, phi: f64) -> f64 {
    let (dx, dy) = (-phi.sin(), phi.cos());
    let (cx, cy) = mu.center_of(row, col);
    let fine = 1e-3;
    let reach = mu.side() as f64 * mu.spacing() * 1.5;
    let steps = (reach / fine) as usize;
    // Line integral from parameter l to the far end, accumulated backwards.
    let mut tail = vec![0.0; steps + 1];
    for j in (0..steps).rev() {
        let l = (j as f64 + 0.5) * fine - reach / 2.0;
        tail[j] = tail[j + 1] + mu.bilinear(cx + l * dx, cy + l * dy) * fine;
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for (j, t) in tail.iter().enumerate().take(steps) {
        let l = (j as f64 + 0.5) * fine - reach / 2.0;
        if mu.pixel_at(cx + l * dx, cy + l * dy) == mu.pixel_at(cx, cy) {
            sum += (-t).exp();
            n += 1;
        }
    }
    sum / n as f64
}

#[test]
fn slab_attenuation_matches_fine_marching() {
    let side = 15;
    let mu_value = 0.15;
    // Three full-width rows well above the source pixel.
    let mu_img = field(side, 1.0, |_, y| if (3.5..6.5).contains(&y) { mu_value } else { 0.0 });
    let mu = MuMap::new(mu_img.clone()).unwrap();
    let mut a = Image::zeros(side, 1.0);
    a.set(7, 7, 1.0);
    let a = EmissionMap::new(a).unwrap();
    let angles = vec![0.0, 0.1, 0.2, 0.35];
    let geo = Geometry::new(angles.clone(), side, 1.0, side, 1.0).unwrap();
    let plain = forward_project(&a, None, &geo).unwrap();
    let atten = forward_project(&a, Some(&mu), &geo).unwrap();
    for (m, &phi) in angles.iter().enumerate() {
        let ratio = atten.get(m, 7) / plain.get(m, 7);
        let oracle = fine_survival(&mu_img, 7, 7, phi);
        assert!(
            ((ratio - oracle) / oracle).abs() <= 1e-3,
            "angle {phi}: {ratio} vs {oracle}"
        );
    }
    let expected = (-mu_value * 3.0f64).exp();
    assert!((atten.get(0, 7) - expected).abs() < 1e-12);
}

#[test]
fn projection_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let geo = Geometry::parallel(7, 10, 1.0).unwrap();
    let mu = MuMap::new(random_image(10, &mut rng).clone()).unwrap();
    let a1 = random_image(10, &mut rng);
    let a2 = random_image(10, &mut rng);
    let sum = Image::new(10, 1.0, a1.data().iter().zip(a2.data()).map(|(x, y)| x + y).collect()).unwrap();
    let p = Projector::new(&geo, Some(&mu)).unwrap();
    let g1 = p.project(&EmissionMap::new(a1).unwrap()).unwrap();
    let g2 = p.project(&EmissionMap::new(a2).unwrap()).unwrap();
    let g12 = p.project(&EmissionMap::new(sum).unwrap()).unwrap();
    for i in 0..g12.data().len() {
        let want = g1.data()[i] + g2.data()[i];
        assert!((g12.data()[i] - want).abs() <= 1e-12 * want.abs().max(1.0));
    }
}

#[test]
fn back_projection_of_zero_is_zero() {
    let geo = Geometry::parallel(5, 8, 1.0).unwrap();
    let zero = Sinogram::new(5, 8, vec![0.0; 40]).unwrap();
    let img = back_project(&zero, None, &geo).unwrap();
    assert!(img.data().iter().all(|&v| v == 0.0));
}

#[test]
fn one_hot_bin_back_projects_onto_its_ray() {
    let geo = Geometry::parallel(8, 12, 1.0).unwrap();
    let p = Projector::new(&geo, None).unwrap();
    let (m, k) = (3, 5);
    let mut g = vec![0.0; geo.sinogram_len()];
    g[m * geo.n_bins() + k] = 1.0;
    let img = p.back_project(&Sinogram::new(8, 12, g).unwrap()).unwrap();
    let (ex, ey) = geo.detector_axis(m);
    let r = geo.bin_offset(k);
    let mut hits = 0;
    for row in 0..12 {
        for col in 0..12 {
            let (x, y) = img.center_of(row, col);
            let dist = (x * ex + y * ey - r).abs();
            if img.get(row, col) != 0.0 {
                hits += 1;
                assert!(dist <= std::f64::consts::FRAC_1_SQRT_2 + 1e-9, "pixel ({row},{col}) at {dist}");
            } else {
                assert!(dist > 0.25, "pixel ({row},{col}) on the ray but empty");
            }
        }
    }
    assert!(hits >= 12);
}

fn adjoint_error(seed: u64, side: usize, with_mu: bool) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geo = Geometry::parallel(9, side, 1.0).unwrap();
    let mu = with_mu.then(|| MuMap::new(random_image(side, &mut rng).clone()).unwrap());
    let p = Projector::new(&geo, mu.as_ref()).unwrap();
    let x = random_image(side, &mut rng);
    let g: Vec<f64> = (0..geo.sinogram_len()).map(|_| rng.random()).collect();
    let ax = p.apply(x.data());
    let atg = p.apply_transpose(&g);
    let lhs: f64 = ax.iter().zip(&g).map(|(a, b)| a * b).sum();
    let rhs: f64 = x.data().iter().zip(&atg).map(|(a, b)| a * b).sum();
    (lhs - rhs).abs() / lhs.abs().max(rhs.abs())
}

#[test]
fn adjoint_identity_on_8x8() {
    assert!(adjoint_error(11, 8, true) <= 1e-6);
    assert!(adjoint_error(12, 8, false) <= 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn adjoint_holds_on_random_instances(seed in any::<u64>(), side in 3usize..12, with_mu in any::<bool>()) {
        prop_assert!(adjoint_error(seed, side, with_mu) <= 1e-6);
    }

    #[test]
    fn mlem_output_is_nonnegative(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let geo = Geometry::parallel(6, 8, 1.0).unwrap();
        let g: Vec<f64> = (0..geo.sinogram_len()).map(|_| rng.random::<f64>() * 3.0).collect();
        let sino = Sinogram::new(6, 8, g).unwrap();
        let out = mlem(&sino, &geo, None, 5, MlemInit::Uniform).unwrap();
        prop_assert!(out.data().iter().all(|&v| v >= 0.0 && v.is_finite()));
    }

    #[test]
    fn acf_is_at_least_one(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let geo = Geometry::parallel(4, 7, 1.0).unwrap();
        let data = (0..49).map(|_| if rng.random::<f64>() < 0.7 { rng.random::<f64>() * 0.3 } else { 0.0 }).collect();
        let mu = MuMap::new(Image::new(7, 1.0, data).unwrap()).unwrap();
        for mode in [AcfMode::MuTimesS, AcfMode::LineIntegral] {
            let acf = acf_reference(&mu, &geo, mode).unwrap();
            prop_assert!(acf.data().iter().all(|&v| v >= 1.0));
        }
    }
}

#[test]
fn mlem_fixed_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let geo = Geometry::parallel(8, 10, 1.0).unwrap();
    let mu = MuMap::new(disk(10, 1.0, 4.0, 0.15)).unwrap();
    let truth = Image::new(10, 1.0, (0..100).map(|_| 0.5 + rng.random::<f64>()).collect()).unwrap();
    let p = Projector::new(&geo, Some(&mu)).unwrap();
    let sino = p.project(&EmissionMap::new(truth.clone()).unwrap()).unwrap();
    let out = mlem(&sino, &geo, Some(&mu), 1, MlemInit::Image(truth.clone())).unwrap();
    let diff = out.data().iter().zip(truth.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff <= 1e-6, "max diff {diff}");
}

#[test]
fn mlem_likelihood_is_monotone_and_more_iterations_help() {
    let geo = Geometry::parallel(16, 24, 1.0).unwrap();
    let truth = disk(24, 1.0, 8.0, 1.0);
    let mu = MuMap::new(disk(24, 1.0, 10.0, 0.15)).unwrap();
    let p = Projector::new(&geo, Some(&mu)).unwrap();
    let sino = p.project(&EmissionMap::new(truth.clone()).unwrap()).unwrap();
    let trace = mlem_with(&p, &sino, 30, MlemInit::Uniform).unwrap();
    assert_eq!(trace.log_likelihood.len(), 31);
    for w in trace.log_likelihood.windows(2) {
        assert!(w[1] >= w[0] - 1e-9 * w[0].abs(), "{} then {}", w[0], w[1]);
    }
    let early = mlem_with(&p, &sino, 5, MlemInit::Uniform).unwrap().image;
    let e30 = rmse(trace.image.data(), truth.data()).unwrap();
    let e5 = rmse(early.data(), truth.data()).unwrap();
    assert!(e30 < e5, "30 iterations {e30} vs 5 iterations {e5}");
}

#[test]
fn disk_path_length_is_radius() {
    let geo = Geometry::parallel(8, 21, 1.0).unwrap();
    let radius = 7.5;
    let mu = MuMap::new(disk(21, 1.0, radius, 0.1)).unwrap();
    for m in 0..geo.n_angles() {
        let s = path_lengths(&mu, &geo, m).unwrap().lengths.get(10, 10);
        assert!((s - radius).abs() <= 1.0, "angle {m}: {s}");
    }
    assert_eq!(path_lengths(&mu, &geo, 0).unwrap().lengths.get(10, 10), radius);
}

#[test]
fn square_diagonal_matches_fine_marching() {
    let side = 21;
    let half = 4.5;
    let inside = |x: f64, y: f64| x.abs() < half && y.abs() < half;
    let mu = MuMap::new(field(side, 1.0, |x, y| if inside(x, y) { 0.2 } else { 0.0 })).unwrap();
    let geo = Geometry::new(vec![0.0, FRAC_PI_4], side, 1.0, side, 1.0).unwrap();
    let s = path_lengths(&mu, &geo, 1).unwrap().lengths.get(10, 10);
    // Fine marching against the pixelated support.
    let img = mu.image();
    let (dx, dy) = geo.direction(1);
    let fine = 1e-4;
    let mut l = 0.0;
    while img.pixel_at(l * dx, l * dy).is_some_and(|p| img.data()[p] > 0.0) {
        l += fine;
    }
    assert!((l - 9.0 * std::f64::consts::SQRT_2 / 2.0).abs() < 1e-3);
    assert!((s - l).abs() <= geo.step(), "{s} vs {l}");
}

#[test]
fn acf_scalar_oracles() {
    let e15 = 4.481_689_070_338_065;
    assert!((acf_from_exponents(&[vec![1.5]])[0] - e15).abs() < 1e-12);
    // One view, support reaching 4.5 pixels of 20/9 cm above the centre: s = 10 cm.
    let spacing = 20.0 / 9.0;
    let mu = MuMap::new(field(11, spacing, |_, y| if y > -spacing && y < 4.4 * spacing { 0.15 } else { 0.0 })).unwrap();
    let geo = Geometry::new(vec![0.0], 11, spacing, 11, spacing).unwrap();
    let s = path_lengths(&mu, &geo, 0).unwrap().lengths.get(5, 5);
    assert!((s - 10.0).abs() < 1e-12);
    let acf = acf_reference(&mu, &geo, AcfMode::MuTimesS).unwrap().get(5, 5);
    assert!(((acf - e15) / e15).abs() <= 1e-6, "{acf}");
}

#[test]
fn acf_of_empty_map_is_one() {
    let geo = Geometry::parallel(6, 9, 1.0).unwrap();
    let mu = MuMap::new(Image::zeros(9, 1.0)).unwrap();
    for mode in [AcfMode::MuTimesS, AcfMode::LineIntegral] {
        assert!(acf_reference(&mu, &geo, mode).unwrap().data().iter().all(|&v| v == 1.0));
    }
}

#[test]
fn two_symmetric_views_collapse_to_one_exponential() {
    let mu = MuMap::new(field(11, 1.0, |x, y| if x.abs() < 3.6 && y.abs() < 3.6 { 0.2 } else { 0.0 })).unwrap();
    let geo = Geometry::new(vec![0.0, FRAC_PI_2], 11, 1.0, 11, 1.0).unwrap();
    let s = path_lengths(&mu, &geo, 0).unwrap().lengths.get(5, 5);
    assert_eq!(s, path_lengths(&mu, &geo, 1).unwrap().lengths.get(5, 5));
    let acf = acf_reference(&mu, &geo, AcfMode::MuTimesS).unwrap().get(5, 5);
    assert!((acf - (0.2 * s).exp()).abs() < 1e-12);
}

#[test]
fn acf_modes_agree_on_uniform_support() {
    let geo = Geometry::parallel(16, 24, 1.0).unwrap();
    let mu = MuMap::new(disk(24, 1.0, 9.0, 0.15)).unwrap();
    let a = acf_reference(&mu, &geo, AcfMode::MuTimesS).unwrap();
    let b = acf_reference(&mu, &geo, AcfMode::LineIntegral).unwrap();
    for (p, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        if mu.image().data()[p] > 0.0 {
            assert!(((x - y) / y).abs() < 1e-12, "pixel {p}: {x} vs {y}");
        }
    }
}

#[test]
fn without_attenuation_nac_equals_ac() {
    let geo = Geometry::parallel(12, 16, 1.0).unwrap();
    let a = EmissionMap::new(disk(16, 1.0, 5.0, 1.0)).unwrap();
    let mu = MuMap::new(Image::zeros(16, 1.0)).unwrap();
    let (nac, ac) = make_nac_ac_pair::<ChaCha8Rng>(&a, &mu, &geo, 10, None).unwrap();
    for (x, y) in nac.data().iter().zip(ac.data()) {
        assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
    }
}

#[test]
fn uniform_disk_shows_cupping_without_correction() {
    let (side, spacing, radius) = (32, 0.8, 10.0);
    let geo = Geometry::parallel(16, side, spacing).unwrap();
    let a = EmissionMap::new(disk(side, spacing, radius, 1.0)).unwrap();
    let mu = MuMap::new(disk(side, spacing, radius, 0.15)).unwrap();
    let (nac, ac) = make_nac_ac_pair::<ChaCha8Rng>(&a, &mu, &geo, 30, None).unwrap();
    let center = nac.ring_mean(0.0, 0.0, 0.0, 2.0).unwrap();
    let edge = nac.ring_mean(0.0, 0.0, 0.7 * radius, 0.9 * radius).unwrap();
    assert!(center / edge < 0.85, "NAC centre/edge {}", center / edge);
    let ac_ratio = ac.ring_mean(0.0, 0.0, 0.0, 2.0).unwrap()
        / ac.ring_mean(0.0, 0.0, 0.7 * radius, 0.9 * radius).unwrap();
    assert!((ac_ratio - 1.0).abs() <= 0.05, "AC centre/edge {ac_ratio}");
}
