mod common;

use common::{random_images, rng, tiny_model};
use sage_core::geometry::PoseDistribution;
use sage_core::metrics::*;
use sage_core::model::{Ablation, Model};
use sage_core::{Result, Tensor};

/// Uses the first two channels of every pixel as a 2-d feature.
struct PixelEmbedder;

impl Embedder for PixelEmbedder {
    fn id(&self) -> String {
        "pixel-2".into()
    }
    fn dim(&self) -> usize {
        2
    }
    fn feature_map(&self, image: &Tensor) -> Result<FeatureMap> {
        let s = image.shape();
        let n = s[1] * s[2];
        let d = image.data();
        let mut data = Vec::with_capacity(2 * n);
        for p in 0..n {
            data.push(d[p]);
            data.push(d[n + p]);
        }
        Ok(FeatureMap { dim: 2, positions: n, data })
    }
}

fn manual_stats(image: &Tensor) -> ([f64; 2], [f64; 4]) {
    let n = image.shape()[1] * image.shape()[2];
    let d = image.data();
    let (x, y) = (&d[..n], &d[n..2 * n]);
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let c = |a: &[f64], ma: f64, b: &[f64], mb: f64| {
        a.iter().zip(b).map(|(p, q)| (p - ma) * (q - mb)).sum::<f64>() / (n - 1) as f64
    };
    let sxy = c(x, mx, y, my);
    ([mx, my], [c(x, mx, x, mx), sxy, sxy, c(y, my, y, my)])
}

/// Closed form for 2x2: the eigenvalues of sqrt(A) B sqrt(A) are those of AB,
/// so tr sqrt = sqrt(tr(AB) + 2 sqrt(det A det B)).
fn frechet_2x2(ma: [f64; 2], a: [f64; 4], mb: [f64; 2], b: [f64; 4]) -> f64 {
    let tr_ab = a[0] * b[0] + a[1] * b[2] + a[2] * b[1] + a[3] * b[3];
    let det = (a[0] * a[3] - a[1] * a[2]) * (b[0] * b[3] - b[1] * b[2]);
    let tr_sqrt = (tr_ab + 2.0 * det.max(0.0).sqrt()).sqrt();
    let dm = (ma[0] - mb[0]).powi(2) + (ma[1] - mb[1]).powi(2);
    dm + a[0] + a[3] + b[0] + b[3] - 2.0 * tr_sqrt
}

#[test]
fn frechet_of_one_dimensional_gaussians() {
    let s = |m: f64, v: f64| FeatureStats::new(vec![m], vec![v]).unwrap();
    for &(m1, v1, m2, v2) in &[(0.0, 1.0, 0.0, 1.0), (1.0, 4.0, -2.0, 9.0), (0.5, 0.25, 0.5, 2.25), (3.0, 0.0, 0.0, 1.0)] {
        let want = (m1 - m2) * (m1 - m2) + (f64::sqrt(v1) - f64::sqrt(v2)).powi(2);
        let got = frechet_distance(&s(m1, v1), &s(m2, v2)).unwrap();
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }
}

#[test]
fn sifid_with_pixel_features_matches_closed_form() {
    let a = random_images(3, 3, 12, 12, 1);
    let b: Vec<Tensor> = random_images(2, 3, 12, 12, 2)
        .into_iter()
        .map(|t| t.map(|v| 0.6 * v + 0.2))
        .collect();
    let per = sifid_per_image(&a, &b, &PixelEmbedder, Pairing::Index).unwrap();
    for (i, img) in a.iter().enumerate() {
        let (ma, ca) = manual_stats(img);
        let (mb, cb) = manual_stats(&b[i % b.len()]);
        let want = frechet_2x2(ma, ca, mb, cb);
        assert!((per[i] - want).abs() < 1e-9, "image {i}: {} vs {want}", per[i]);
    }
    let mean = sifid(&a, &b, &PixelEmbedder, Pairing::Index).unwrap();
    assert!((mean - per.iter().sum::<f64>() / 3.0).abs() < 1e-12);

    let nearest = sifid_per_image(&a, &b, &PixelEmbedder, Pairing::Nearest).unwrap();
    for (i, img) in a.iter().enumerate() {
        let (ma, ca) = manual_stats(img);
        let best = b
            .iter()
            .map(|r| {
                let (mb, cb) = manual_stats(r);
                frechet_2x2(ma, ca, mb, cb)
            })
            .fold(f64::INFINITY, f64::min);
        assert!((nearest[i] - best).abs() < 1e-9);
    }
}

#[test]
fn sifid_of_an_image_with_itself_is_zero() {
    let imgs = random_images(2, 3, 32, 32, 3);
    let emb = default_embedder();
    assert!(sifid(&imgs, &imgs, emb.as_ref(), Pairing::Index).unwrap() < 1e-6);
    assert!(fid(&imgs, &imgs, emb.as_ref()).unwrap() < 1e-6);
}

#[test]
fn sifid_grows_with_noise() {
    let base = random_images(2, 3, 32, 32, 4);
    let mut r = rng(5);
    let noise: Vec<Tensor> = base.iter().map(|t| Tensor::randn(t.shape(), 1.0, &mut r)).collect();
    let emb = default_embedder();
    let mut last = -1.0;
    for sigma in [0.0, 0.1, 0.3, 0.8] {
        let noisy: Vec<Tensor> = base
            .iter()
            .zip(&noise)
            .map(|(b, n)| b.zip_map(n, |x, e| x + sigma * e).unwrap())
            .collect();
        let d = sifid(&noisy, &base, emb.as_ref(), Pairing::Index).unwrap();
        assert!(d > last, "sigma {sigma}: {d} <= {last}");
        last = d;
    }
}

#[test]
fn swd_identities() {
    let imgs = random_images(3, 3, 32, 32, 6);
    let cfg = SwdConfig::default();
    let same = sliced_wasserstein(&imgs, &imgs, &cfg).unwrap();
    assert!(same.value < 1e-6);

    let zero = [vec![0.0]];
    let one = [vec![1.0]];
    assert!((sliced_wasserstein_points(&zero, &one, &[vec![1.0]]).unwrap() - 1.0).abs() < 1e-15);

    let mut rev = imgs.clone();
    rev.reverse();
    let other = random_images(3, 3, 32, 32, 7);
    let a = sliced_wasserstein(&imgs, &other, &cfg).unwrap();
    let b = sliced_wasserstein(&rev, &other, &cfg).unwrap();
    assert!((a.value - b.value).abs() < 1e-9);
    assert!(a.value > 0.0);
}

#[test]
fn swd_single_level_matches_sort_oracle() {
    let a = random_images(2, 3, 16, 16, 8);
    let b = random_images(2, 3, 16, 16, 9);
    let cfg = SwdConfig {
        n_projections: 32,
        descriptors_per_image: 40,
        ..SwdConfig::default()
    };
    let got = sliced_wasserstein(&a, &b, &cfg).unwrap();
    assert_eq!(got.per_level.len(), 1);
    let da = &level_descriptors(&a, &cfg).unwrap()[0];
    let db = &level_descriptors(&b, &cfg).unwrap()[0];
    let dirs = level_directions(&cfg, 0, da[0].len());
    let mut total = 0.0;
    for d in &dirs {
        let proj = |set: &Vec<Vec<f64>>| {
            let mut v: Vec<f64> = set.iter().map(|p| p.iter().zip(d).map(|(x, y)| x * y).sum()).collect();
            v.sort_by(|x, y| x.partial_cmp(y).unwrap());
            v
        };
        let (pa, pb) = (proj(da), proj(db));
        total += pa.iter().zip(&pb).map(|(x, y)| (x - y).abs()).sum::<f64>() / pa.len() as f64;
    }
    let want = 1e3 * total / dirs.len() as f64;
    assert!((got.value - want).abs() < 1e-6, "{} vs {want}", got.value);
}

#[test]
fn unequal_set_sizes_use_quantile_matching() {
    // Two copies of {0, 1} against {0, 1}: identical distributions.
    assert!(wasserstein_1d_sorted(&[0.0, 0.0, 1.0, 1.0], &[0.0, 1.0]) < 1e-15);
    // Uniform quantiles: |q_a(t) - q_b(t)| integrated over t.
    let w = wasserstein_1d_sorted(&[0.0, 1.0, 2.0], &[0.0, 3.0]);
    let want = {
        let qa = |t: f64| -> f64 { if t < 1.0 / 3.0 { 0.0 } else if t < 2.0 / 3.0 { 1.0 } else { 2.0 } };
        let qb = |t: f64| -> f64 { if t < 0.5 { 0.0 } else { 3.0 } };
        let n = 60_000;
        (0..n).map(|k| (qa((k as f64 + 0.5) / n as f64) - qb((k as f64 + 0.5) / n as f64)).abs()).sum::<f64>() / n as f64
    };
    assert!((w - want).abs() < 1e-4, "{w} vs {want}");
}

#[test]
fn metrics_are_deterministic() {
    let a = random_images(2, 3, 32, 32, 10);
    let b = random_images(2, 3, 32, 32, 11);
    let emb = RandomConvEmbedder::new(RandomConvEmbedder::DEFAULT_SEED);
    let emb2 = RandomConvEmbedder::new(RandomConvEmbedder::DEFAULT_SEED);
    assert_eq!(emb.id(), emb2.id());
    let s1 = sifid(&a, &b, &emb, Pairing::Index).unwrap();
    let s2 = sifid(&a, &b, &emb2, Pairing::Index).unwrap();
    assert_eq!(s1.to_bits(), s2.to_bits());
    let cfg = SwdConfig::default();
    assert_eq!(sliced_wasserstein(&a, &b, &cfg).unwrap(), sliced_wasserstein(&a, &b, &cfg).unwrap());
    assert_ne!(
        RandomConvEmbedder::new(1).feature_map(&a[0]).unwrap(),
        RandomConvEmbedder::new(2).feature_map(&a[0]).unwrap()
    );
}

#[test]
fn per_view_curve_has_one_row_per_pose() {
    let (m, p) = Model::init(tiny_model(), Ablation::default(), 3).unwrap();
    let z = m.sample_latents(&mut rng(4), 2);
    let poses = PoseDistribution::default().yaw_sweep(7);
    let center = poses[3];
    assert_eq!(center.yaw, 0.0);
    let real = unbatch(&m.generate(&p, &z, &[center; 2], 4).unwrap().drawing);
    let emb = default_embedder();
    let rows = per_view_curve(&m, &p, &z, &poses, 4, &real, emb.as_ref(), Pairing::Index).unwrap();
    assert_eq!(rows.len(), 7);
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row.pose_index, i);
        assert_eq!(row.yaw, poses[i].yaw);
        assert!(row.sifid.is_finite() && row.sifid >= 0.0);
    }
    assert!(rows[3].sifid < 1e-6, "{}", rows[3].sifid);
}
