use bbi_core::dynamics::MomentumGrid;
use bbi_core::imaging::{
    extract_grid, render_image, sample_shots, AbsorptionImage, DetectionModel, ImagingConfig, ShotRecord, BINS,
};
use bbi_core::lattice::{PhysicalConfig, PORTS};
use proptest::prelude::*;

fn marginal(raw: &[f64]) -> [f64; PORTS] {
    let total: f64 = raw.iter().sum();
    let mut m = [0.0; PORTS];
    for (slot, r) in m.iter_mut().zip(raw) {
        *slot = r / total;
    }
    m
}

fn test_grid() -> MomentumGrid {
    MomentumGrid::outer(
        &marginal(&[0.02, 0.08, 0.2, 0.3, 0.25, 0.1, 0.05]),
        &marginal(&[0.05, 0.15, 0.1, 0.4, 0.1, 0.15, 0.05]),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn render_extract_round_trip(
        x in prop::collection::vec(0.0..1.0f64, PORTS),
        z in prop::collection::vec(0.0..1.0f64, PORTS),
    ) {
        prop_assume!(x.iter().sum::<f64>() > 0.1 && z.iter().sum::<f64>() > 0.1);
        let grid = MomentumGrid::outer(&marginal(&x), &marginal(&z));
        let phys = PhysicalConfig::rubidium_87_1064nm();
        let img = render_image(&grid, &ImagingConfig::default(), &phys).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (pgm, meta) = (dir.path().join("shot.pgm"), dir.path().join("shot.json"));
        img.write_pgm(&pgm, &meta).unwrap();
        let back = AbsorptionImage::read_pgm(&pgm, &meta).unwrap();
        back.check_spacing(&phys).unwrap();
        let got = extract_grid(&back).unwrap().grid;
        let d = got.max_abs_diff(&grid);
        prop_assert!(d < 1e-3, "round trip error {d}");
    }
}

#[test]
fn shots_are_normalized() {
    let model = DetectionModel::new(532.0, 0.05, 1).unwrap();
    for s in sample_shots(&test_grid(), &model, 200).unwrap() {
        assert_eq!(s.weights.len(), BINS);
        assert!((s.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(s.weights.iter().all(|w| *w >= 0.0));
    }
}

/// Upper 0.1% point of χ² with 48 degrees of freedom.
const CHI2_48_999: f64 = 84.04;

#[test]
fn pooled_counts_follow_the_grid() {
    let grid = test_grid();
    let model = DetectionModel::new(532.0, 0.0, 2).unwrap();
    let shots = sample_shots(&grid, &model, 2000).unwrap();
    let mut counts = [0u64; BINS];
    for s in &shots {
        for (c, k) in counts.iter_mut().zip(s.counts(532.0)) {
            *c += k;
        }
    }
    let total: u64 = counts.iter().sum();
    assert_eq!(total, 532 * 2000);
    let chi2: f64 = counts
        .iter()
        .zip(grid.row_major())
        .map(|(&c, p)| {
            let e = p * total as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    assert!(chi2 < CHI2_48_999, "chi-square {chi2}");
}

#[test]
fn shot_moments_match_the_multinomial() {
    let grid = test_grid();
    let model = DetectionModel::new(532.0, 0.0, 3).unwrap();
    let shots: Vec<ShotRecord> = sample_shots(&grid, &model, 10_000).unwrap();
    let n = shots.len() as f64;
    let mut z2 = 0.0;
    for (i, p) in grid.row_major().into_iter().enumerate() {
        let xs: Vec<f64> = shots.iter().map(|s| s.weights[i]).collect();
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let expect_var = p * (1.0 - p) / 532.0;
        let se = (expect_var / n).sqrt();
        // 4 SE per bin keeps the family-wise false alarm rate over 49 bins near 0.3%.
        assert!((mean - p).abs() <= 4.0 * se, "bin {i}: mean {mean} vs {p}");
        z2 += ((mean - p) / se).powi(2);
        // The sample variance of 10⁴ draws is within ~5% of the truth; allow 10%.
        assert!((var / expect_var - 1.0).abs() < 0.1, "bin {i}: variance {var} vs {expect_var}");
    }
    // Σz² ~ χ²(49) up to the one multinomial constraint.
    assert!(z2 < 85.4, "Σz² = {z2}");
}

#[test]
fn same_seed_same_shots() {
    let model = DetectionModel::new(532.0, 0.02, 9).unwrap();
    let a = sample_shots(&test_grid(), &model, 50).unwrap();
    let b = sample_shots(&test_grid(), &model, 50).unwrap();
    assert_eq!(a, b);
    let c = sample_shots(&test_grid(), &model.with_seed(10), 50).unwrap();
    assert_ne!(a, c);
}
